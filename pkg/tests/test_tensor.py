import json
import threading
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from unsir import tensor as T
from unsir.errors import ContractError, DivergenceError, FrozenModelError, ShapeError
from oracles.fd_suite import CASES, max_error

GOLDEN = json.loads((Path(__file__).parent / "golden" / "oracles.json").read_text())


# -- Tensor ------------------------------------------------------------------

def test_tensor_rejects_non_finite():
    with pytest.raises(DivergenceError):
        T.Tensor([1.0, float("nan")])
    with pytest.raises(DivergenceError):
        T.Tensor([np.inf])


def test_tensor_default_precision_and_copy():
    src = np.array([1, 2, 3])
    t = T.Tensor(src)
    assert t.dtype == np.float32 and t.shape == (3,) and t.size == 3
    src[0] = 99
    assert t.data[0] == 1
    assert T.Tensor(np.zeros(2)).dtype == np.float64


# -- matmul ------------------------------------------------------------------

def test_matmul_identity_and_small_product():
    m = T.Tensor([[1, 2], [3, 4]])
    assert np.array_equal(T.matmul(T.Tensor(np.eye(2)), m).data, m.data)
    assert T.matmul(T.Tensor([[1, 2]]), T.Tensor([[3], [4]])).data.tolist() == [[11.0]]


def test_matmul_sum_gradient_is_ones_times_b_transpose():
    rng = np.random.default_rng(0)
    a = T.Tensor(rng.normal(size=(4, 3)), requires_grad=True)
    b = T.Tensor(rng.normal(size=(3, 5)))
    with T.Tape() as tape:
        T.backward(T.tsum(T.matmul(a, b)), tape)
    np.testing.assert_allclose(a.grad, np.ones((4, 5)) @ b.data.T)


def test_matmul_shape_error_names_shapes():
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2, 3\)"):
        T.matmul(T.Tensor(np.zeros((2, 3))), T.Tensor(np.zeros((2, 3))))


# -- conv2d ------------------------------------------------------------------

def test_conv_scalar_kernel():
    out = T.conv2d(T.Tensor(np.ones((1, 1, 3, 3))), T.Tensor([[[[2.0]]]]))
    assert np.array_equal(out.data, np.full((1, 1, 3, 3), 2.0))


def test_conv_hand_computed():
    x = T.Tensor([[[[1, 2], [3, 4]]]])
    k = T.Tensor([[[[1, 0], [0, 1]]]])
    assert T.conv2d(x, k).data.tolist() == [[[[5.0]]]]


@pytest.mark.parametrize("stride,pad,key", [(1, 1, "stride1_pad1"), (2, 0, "stride2_pad0")])
def test_conv_matches_frozen_loop_oracle(stride, pad, key):
    g = GOLDEN["conv2d"]
    out = T.conv2d(T.Tensor(np.array(g["x"], float)), T.Tensor(np.array(g["k"], float)), stride=stride, padding=pad)
    np.testing.assert_allclose(out.data, np.array(g[key]), rtol=0, atol=1e-9)


def test_conv_inexact_output_and_bad_stride():
    x, k = T.Tensor(np.zeros((1, 1, 4, 4))), T.Tensor(np.zeros((1, 1, 3, 3)))
    with pytest.raises(ShapeError):
        T.conv2d(x, k, stride=2)
    with pytest.raises(ShapeError):
        T.conv2d(x, k, stride=0)
    with pytest.raises(ShapeError):
        T.conv2d(x, T.Tensor(np.zeros((1, 1, 5, 5))))


@given(st.integers(1, 3), st.integers(1, 3), st.integers(1, 3), st.integers(0, 2), st.integers(1, 4),
       st.integers(1, 4))
def test_conv_shape_algebra(stride, kh, kw, pad, ho, wo):
    h, w = (ho - 1) * stride + kh - 2 * pad, (wo - 1) * stride + kw - 2 * pad
    if h < 1 or w < 1:
        return
    out = T.conv2d(T.Tensor(np.zeros((2, 3, h, w))), T.Tensor(np.zeros((4, 3, kh, kw))), stride=stride, padding=pad)
    assert out.shape == (2, 4, (h + 2 * pad - kh) // stride + 1, (w + 2 * pad - kw) // stride + 1)
    assert out.shape[2:] == (ho, wo)


# -- relu --------------------------------------------------------------------

def test_relu_values_and_negative_input():
    assert T.relu(T.Tensor([-1.0, 0.0, 2.0])).data.tolist() == [0.0, 0.0, 2.0]
    x = T.Tensor(-np.arange(1, 5, dtype=float), requires_grad=True)
    with T.Tape() as tape:
        y = T.relu(x)
        T.backward(T.tsum(y), tape)
    assert not y.data.any() and not x.grad.any()


def test_relu_subgradient_at_zero_is_zero():
    x = T.Tensor([0.0, 1.0], requires_grad=True)
    with T.Tape() as tape:
        T.backward(T.tsum(T.relu(x)), tape)
    assert x.grad.tolist() == [0.0, 1.0]


@given(st.lists(st.floats(-5, 5).filter(lambda v: abs(v) > 1e-4), min_size=1, max_size=20))
def test_relu_gradient_mask(values):
    x = T.Tensor(np.array(values), requires_grad=True)
    with T.Tape() as tape:
        T.backward(T.tsum(T.relu(x)), tape)
    assert np.array_equal(x.grad, (np.array(values) > 0).astype(float))


# -- cross-entropy -----------------------------------------------------------

def test_uniform_logits_give_log_k():
    loss = T.softmax_cross_entropy(T.Tensor(np.zeros((3, 10))), [0, 4, 9])
    assert loss.item() == pytest.approx(np.log(10), rel=1e-6)


def test_cross_entropy_is_stable_for_huge_logits():
    loss = T.softmax_cross_entropy(T.Tensor([[1000.0, 0.0]]), [0])
    assert np.isfinite(loss.item()) and loss.item() == pytest.approx(0.0, abs=1e-12)


def test_cross_entropy_matches_frozen_scalar_oracle():
    g = GOLDEN["cross_entropy"]
    loss = T.softmax_cross_entropy(T.Tensor(np.array(g["logits"])), g["labels"])
    assert loss.item() == pytest.approx(g["loss"], rel=1e-12)


def test_cross_entropy_gradient_formula():
    z = np.random.default_rng(1).normal(size=(8, 5))
    y = np.array([0, 1, 2, 3, 4, 0, 1, 2])
    t = T.Tensor(z, requires_grad=True)
    with T.Tape() as tape:
        T.backward(T.softmax_cross_entropy(t, y), tape)
    p = np.exp(z - z.max(1, keepdims=True))
    p /= p.sum(1, keepdims=True)
    p[np.arange(8), y] -= 1
    np.testing.assert_allclose(t.grad, p / 8, rtol=1e-10)


def test_cross_entropy_label_errors():
    with pytest.raises(IndexError):
        T.softmax_cross_entropy(T.Tensor(np.zeros((2, 3))), [0, 3])
    with pytest.raises(IndexError):
        T.softmax_cross_entropy(T.Tensor(np.zeros((1, 3))), [-1])


@given(st.integers(1, 6), st.integers(2, 6), st.floats(0.1, 50), st.integers(0, 2**32 - 1))
def test_cross_entropy_non_negative(n, k, scale, seed):
    rng = np.random.default_rng(seed)
    loss = T.softmax_cross_entropy(T.Tensor(rng.normal(size=(n, k)) * scale), rng.integers(0, k, size=n))
    assert loss.item() >= 0


# -- backward / tape ---------------------------------------------------------

def test_backward_sum_and_accumulation():
    x = T.Tensor([1.0, 2.0, 3.0], requires_grad=True)
    for expected in ([1, 1, 1], [2, 2, 2]):
        with T.Tape() as tape:
            T.backward(T.tsum(x), tape)
        assert x.grad.tolist() == expected
    T.zero_grad([x])
    assert x.grad is None


def test_backward_contract_errors():
    x = T.Tensor([1.0, 2.0], requires_grad=True)
    with T.Tape() as tape:
        y = T.scale(x, 2.0)
        with pytest.raises(ContractError):
            T.backward(y, tape)
    with T.Tape() as other:
        pass
    with T.Tape():
        loss = T.tsum(x)
    with pytest.raises(ContractError):
        T.backward(loss, other)


def test_tape_replays_in_reverse_order_and_clears():
    order = []
    x = T.Tensor([1.0], requires_grad=True)
    with T.Tape() as tape:
        a = T.scale(x, 2.0)
        b = T.scale(a, 3.0)
        loss = T.tsum(b)
    original = [r.backward_fn for r in tape.records]
    for i, rec in enumerate(tape.records):
        rec.backward_fn = (lambda i, fn: (lambda g: (order.append(i), fn(g))[1]))(i, original[i])
    T.backward(loss, tape)
    assert order == [2, 1, 0]
    assert x.grad.tolist() == [6.0]
    tape.clear()
    assert len(tape) == 0


def test_no_tape_means_no_recording():
    x = T.Tensor([1.0], requires_grad=True)
    y = T.scale(x, 2.0)
    assert T.active_tape() is None and not y.requires_grad


def test_tapes_are_thread_confined():
    seen = {}

    def worker():
        seen["inner"] = T.active_tape()

    with T.Tape():
        th = threading.Thread(target=worker)
        th.start()
        th.join()
    assert seen["inner"] is None


# -- SGD ---------------------------------------------------------------------

def test_sgd_single_step_and_zero_lr():
    p = T.Tensor([1.0], requires_grad=True)
    p.grad = np.array([0.5], dtype=np.float32)
    T.sgd_step({"p": p}, T.SgdRule(0.1))
    assert p.data[0] == pytest.approx(0.95)
    assert p.grad.tolist() == [0.5]
    T.sgd_step({"p": p}, T.SgdRule(0.0))
    assert p.data[0] == pytest.approx(0.95)


def test_sgd_closed_form_recurrence():
    w = T.Tensor([1.0], requires_grad=True, dtype=np.float64)
    rule = T.SgdRule(0.1)
    for _ in range(10):
        with T.Tape() as tape:
            T.backward(T.sum_squares(w), tape)
        T.sgd_step({"w": w}, rule)
        w.grad = None
    assert w.data[0] == pytest.approx(GOLDEN["sgd_w_squared"], rel=1e-12)
    assert w.data[0] == pytest.approx(0.8**10, rel=1e-12)


def test_sgd_missing_grad_and_frozen_param():
    p = T.Tensor([1.0], requires_grad=True)
    with pytest.raises(ContractError):
        T.sgd_step({"p": p}, T.SgdRule(0.1))
    p.grad = np.ones(1, np.float32)
    p.data.setflags(write=False)
    with pytest.raises(FrozenModelError):
        T.sgd_step({"p": p}, T.SgdRule(0.1))


def test_sgd_rule_validation_and_momentum():
    with pytest.raises(ValueError):
        T.SgdRule(-1.0)
    with pytest.raises(ValueError):
        T.SgdRule(0.1, momentum=1.0)
    p = T.Tensor([0.0], requires_grad=True, dtype=np.float64)
    rule = T.SgdRule(1.0, momentum=0.5)
    for _ in range(2):
        p.grad = np.array([1.0])
        T.sgd_step({"p": p}, rule)
    assert p.data[0] == pytest.approx(-2.5)


# -- gradients vs finite differences (the acceptance suite runs 100 trials) ----

@pytest.mark.parametrize("name", sorted(CASES))
def test_gradients_match_finite_differences(name):
    trials = 3 if name == "conv2d_2x3x8x8" else 15
    assert max_error(name, trials=trials, seed=1) < 1e-3


def test_determinism_of_outputs_and_gradients():
    def run():
        rng = np.random.default_rng(3)
        x = T.Tensor(rng.normal(size=(2, 3, 6, 6)).astype(np.float32), requires_grad=True)
        k = T.Tensor(rng.normal(size=(4, 3, 3, 3)).astype(np.float32), requires_grad=True)
        with T.Tape() as tape:
            y = T.global_avg_pool(T.relu(T.conv2d(x, k, padding=1)))
            T.backward(T.sum_squares(y), tape)
        return y.data.tobytes() + x.grad.tobytes() + k.grad.tobytes()

    assert run() == run()
