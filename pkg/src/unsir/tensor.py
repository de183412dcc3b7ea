"""Dense tensors with tape-based reverse-mode differentiation.

Only the handful of primitives needed for small MLP/CNN classifiers are
provided. Operations record themselves on the innermost active :class:`Tape`
when at least one input has ``requires_grad``; outside a tape everything runs
as plain inference and nothing is retained.

    >>> w = Tensor([[1.0, 2.0]], requires_grad=True)
    >>> with Tape() as tape:
    ...     loss = tsum(matmul(w, Tensor([[3.0], [4.0]])))
    ...     backward(loss, tape)
    >>> w.grad.tolist()
    [[3.0, 4.0]]
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ContractError, DivergenceError, FrozenModelError, ShapeError

DEFAULT_DTYPE = np.float32


class Tensor:
    """An n-dimensional float array with an optional gradient slot."""

    __slots__ = ("data", "grad", "requires_grad", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data)
        if dtype is None:
            dtype = np.float64 if arr.dtype == np.float64 else DEFAULT_DTYPE
        arr = np.array(arr, dtype=dtype, copy=True)
        if not np.all(np.isfinite(arr)):
            raise DivergenceError("tensor data contains NaN or Inf")
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)

    @classmethod
    def _wrap(cls, arr: np.ndarray, requires_grad: bool = False) -> "Tensor":
        t = cls.__new__(cls)
        t.data = arr
        t.grad = None
        t.requires_grad = requires_grad
        return t

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"


# --------------------------------------------------------------------------
# Tape
# --------------------------------------------------------------------------

_local = threading.local()


def _tape_stack() -> list:
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    return stack


def active_tape() -> "Tape | None":
    stack = _tape_stack()
    return stack[-1] if stack else None


@dataclass
class _Record:
    out: Tensor
    inputs: tuple
    backward_fn: Callable


class Tape:
    """Ordered log of differentiable operations.

    Use as a context manager to make it the active tape for the current
    thread. Tapes nest; ops record on the innermost one.
    """

    def __init__(self):
        self.records: list[_Record] = []
        self._outputs: set[int] = set()

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _tape_stack()
        if not stack or stack[-1] is not self:
            raise ContractError("tape exited out of order")
        stack.pop()

    def __len__(self) -> int:
        return len(self.records)

    def record(self, out: Tensor, inputs: Sequence[Tensor], backward_fn: Callable) -> None:
        self.records.append(_Record(out, tuple(inputs), backward_fn))
        self._outputs.add(id(out))

    def produced(self, t: Tensor) -> bool:
        return id(t) in self._outputs

    def clear(self) -> None:
        self.records.clear()
        self._outputs.clear()

    def backward(self, loss: Tensor) -> None:
        backward(loss, self)


def _record(out_arr: np.ndarray, inputs: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    tape = active_tape()
    needs = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor._wrap(out_arr, requires_grad=needs)
    if needs:
        tape.record(out, inputs, backward_fn)
    return out


def backward(loss: Tensor, tape: Tape) -> None:
    """Propagate d(loss)/d(.) to every leaf tensor with ``requires_grad``.

    Leaf gradients accumulate into ``.grad`` across calls; call
    :func:`zero_grad` (or set ``grad = None``) between steps.
    """
    if loss.data.size != 1 or loss.data.ndim != 0:
        raise ContractError(f"backward() needs a scalar loss, got shape {loss.shape}")
    if not tape.produced(loss):
        raise ContractError("loss was not produced on this tape")
    pending = {id(loss): np.ones_like(loss.data)}
    for rec in reversed(tape.records):
        g = pending.pop(id(rec.out), None)
        if g is None:
            continue
        for inp, gi in zip(rec.inputs, rec.backward_fn(g)):
            if gi is None or not inp.requires_grad:
                continue
            if tape.produced(inp):
                key = id(inp)
                pending[key] = pending[key] + gi if key in pending else gi
            elif inp.grad is None:
                inp.grad = np.array(gi, dtype=inp.data.dtype)
            else:
                inp.grad += gi


def zero_grad(params: Iterable[Tensor] | Mapping[str, Tensor]) -> None:
    for t in _values(params):
        t.grad = None


def _values(params):
    if isinstance(params, Mapping):
        return list(params.values())
    return list(params)


# --------------------------------------------------------------------------
# Primitives
# --------------------------------------------------------------------------


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    A, B = a.data, b.data

    def grad_fn(g):
        return (g @ B.T if a.requires_grad else None, A.T @ g if b.requires_grad else None)

    return _record(A @ B, (a, b), grad_fn)


def add_bias(x: Tensor, bias: Tensor) -> Tensor:
    """Add a length-F bias along axis 1 of ``N x F`` or ``N x F x H x W``."""
    if bias.data.ndim != 1 or x.data.ndim not in (2, 4) or x.shape[1] != bias.shape[0]:
        raise ShapeError(f"bias of shape {bias.shape} does not fit input {x.shape}")
    if x.data.ndim == 2:
        out = x.data + bias.data
        axes = (0,)
    else:
        out = x.data + bias.data[None, :, None, None]
        axes = (0, 2, 3)

    def grad_fn(g):
        return g, g.sum(axis=axes)

    return _record(out, (x, bias), grad_fn)


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"add shape mismatch: {a.shape} vs {b.shape}")
    return _record(a.data + b.data, (a, b), lambda g: (g, g))


def scale(x: Tensor, factor: float) -> Tensor:
    factor = float(factor)
    return _record(x.data * x.data.dtype.type(factor), (x,), lambda g: (g * factor,))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _record(np.where(mask, x.data, 0).astype(x.dtype, copy=False), (x,), lambda g: (g * mask,))


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    src = x.shape
    try:
        out = x.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"cannot reshape {src} to {tuple(shape)}") from exc
    return _record(out, (x,), lambda g: (g.reshape(src),))


def flatten(x: Tensor) -> Tensor:
    return reshape(x, (x.shape[0], -1))


def tsum(x: Tensor) -> Tensor:
    shape = x.shape
    return _record(np.asarray(x.data.sum(), dtype=x.dtype), (x,), lambda g: (np.broadcast_to(g, shape).copy(),))


def sum_squares(x: Tensor) -> Tensor:
    data = x.data
    return _record(np.asarray((data * data).sum(), dtype=x.dtype), (x,), lambda g: (2 * g * data,))


def global_avg_pool(x: Tensor) -> Tensor:
    if x.data.ndim != 4:
        raise ShapeError(f"global_avg_pool expects N x C x H x W, got {x.shape}")
    n, c, h, w = x.shape
    inv = 1.0 / (h * w)

    def grad_fn(g):
        return (np.broadcast_to((g * inv)[:, :, None, None], (n, c, h, w)).copy(),)

    return _record(x.data.mean(axis=(2, 3)), (x,), grad_fn)


def conv_output_size(size: int, kernel: int, stride: int, padding: int) -> int:
    span = size + 2 * padding - kernel
    if stride <= 0:
        raise ShapeError(f"stride must be positive, got {stride}")
    if span < 0 or span % stride:
        raise ShapeError(
            f"kernel {kernel}, stride {stride}, padding {padding} do not tile input extent {size} exactly"
        )
    return span // stride + 1


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation of ``N x C x H x W`` input with ``F x C x kh x kw`` kernels."""
    if padding < 0:
        raise ShapeError(f"padding must be non-negative, got {padding}")
    if x.data.ndim != 4 or kernel.data.ndim != 4 or x.shape[1] != kernel.shape[1]:
        raise ShapeError(f"conv2d shape mismatch: input {x.shape}, kernel {kernel.shape}")
    n, c, h, w = x.shape
    f, _, kh, kw = kernel.shape
    ho = conv_output_size(h, kh, stride, padding)
    wo = conv_output_size(w, kw, stride, padding)

    xp = x.data
    if padding:
        xp = np.pad(xp, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    windows = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    cols = windows.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * kh * kw)
    kmat = kernel.data.reshape(f, -1)
    out = (cols @ kmat.T).reshape(n, ho, wo, f).transpose(0, 3, 1, 2)
    if bias is not None:
        if bias.shape != (f,):
            raise ShapeError(f"conv bias shape {bias.shape} does not match {f} filters")
        out = out + bias.data[None, :, None, None]
    out = np.ascontiguousarray(out)
    inputs = (x, kernel) if bias is None else (x, kernel, bias)

    def grad_fn(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(-1, f)
        dk = (g2.T @ cols).reshape(kernel.shape) if kernel.requires_grad else None
        dx = None
        if x.requires_grad:
            dcols = (g2 @ kmat).reshape(n, ho, wo, c, kh, kw)
            dxp = np.zeros(xp.shape, dtype=xp.dtype)
            for i in range(kh):
                for j in range(kw):
                    dxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += dcols[
                        :, :, :, :, i, j
                    ].transpose(0, 3, 1, 2)
            dx = dxp[:, :, padding : padding + h, padding : padding + w] if padding else dxp
        grads = [dx, dk]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return grads

    return _record(out, inputs, grad_fn)


def check_labels(labels, num_classes: int, batch: int) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.ndim != 1 or labels.shape[0] != batch:
        raise ShapeError(f"expected {batch} labels, got shape {labels.shape}")
    if labels.size and not np.issubdtype(labels.dtype, np.integer):
        raise IndexError("labels must be integer class indices")
    labels = labels.astype(np.int64)
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        bad = labels[(labels < 0) | (labels >= num_classes)][0]
        raise IndexError(f"label {bad} outside [0, {num_classes})")
    return labels


def log_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Batch-mean of ``-log softmax(logits)[label]`` (max-subtracted)."""
    if logits.data.ndim != 2:
        raise ShapeError(f"logits must be N x K, got {logits.shape}")
    n, k = logits.shape
    labels = check_labels(labels, k, n)
    logp = log_softmax(logits.data)
    rows = np.arange(n)
    loss = -logp[rows, labels].mean()
    if not np.isfinite(loss):
        raise DivergenceError("cross-entropy is not finite")

    def grad_fn(g):
        d = np.exp(logp)
        d[rows, labels] -= 1
        return (d * (g / n),)

    return _record(np.asarray(loss, dtype=logits.dtype), (logits,), grad_fn)


# --------------------------------------------------------------------------
# Parameter updates
# --------------------------------------------------------------------------


@dataclass
class SgdRule:
    """``param <- param - learning_rate * grad``; momentum is off by default."""

    learning_rate: float
    momentum: float = 0.0
    _velocity: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        if not self.learning_rate >= 0 or not np.isfinite(self.learning_rate):
            raise ValueError(f"learning rate must be a finite non-negative number, got {self.learning_rate}")
        if not 0 <= self.momentum < 1:
            raise ValueError(f"momentum must lie in [0, 1), got {self.momentum}")


def sgd_step(params: Mapping[str, Tensor], rule: SgdRule) -> None:
    """In-place SGD update. Gradients are left untouched."""
    items = list(params.items()) if isinstance(params, Mapping) else list(enumerate(params))
    for name, p in items:
        if p.grad is None:
            raise ContractError(f"parameter {name!r} has no gradient")
        if not p.data.flags.writeable:
            raise FrozenModelError(f"parameter {name!r} is frozen")
    lr = rule.learning_rate
    for name, p in items:
        step = p.grad
        if rule.momentum:
            v = rule._velocity.get(name)
            v = step.copy() if v is None else rule.momentum * v + step
            rule._velocity[name] = v
            step = v
        p.data -= p.data.dtype.type(lr) * step.astype(p.data.dtype, copy=False)
