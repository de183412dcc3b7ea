"""Error-maximizing noise learned against a frozen classifier.

For a forget class ``y`` a batch of input-shaped noise ``N`` starts from
i.i.d. standard normals and follows plain gradient descent on

    J(N) = sum_b [ -CE(f(N_b), y) + lam * ||N_b||^2 ]

with the model weights frozen. Each noise sample carries its own loss and
its own penalty, so the balance between the two terms does not depend on
the batch size.
"""

from __future__ import annotations

from collections import OrderedDict
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .data import LabeledDataset
from .errors import ConfigError, ContractError, DivergenceError, FormatError
from .models import Model, read_container, write_container
from .rng import SplitMix64, derive_seed


@dataclass(frozen=True)
class NoiseConfig:
    steps: int = 40
    lr: float = 0.1
    lam: float = 0.1
    batch: int = 64
    copies: int = 20
    seed: int = 0
    clamp: tuple | None = None

    def __post_init__(self):
        if self.steps < 0:
            raise ConfigError(f"noise steps must be >= 0, got {self.steps}")
        if not self.lr > 0:
            raise ConfigError(f"noise lr must be positive, got {self.lr}")
        if self.lam < 0:
            raise ConfigError(f"lambda must be >= 0, got {self.lam}")
        if self.batch < 1 or self.copies < 1:
            raise ConfigError("noise batch and copies must be at least 1")
        if self.clamp is not None:
            lo, hi = self.clamp
            if not lo < hi:
                raise ConfigError(f"clamp range {self.clamp} is empty")
            object.__setattr__(self, "clamp", (float(lo), float(hi)))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["clamp"] = list(self.clamp) if self.clamp is not None else None
        return d


@dataclass(eq=False)
class NoiseMatrix:
    class_label: int
    noise: np.ndarray
    loss_trace: list = field(default_factory=list)
    ce_trace: list = field(default_factory=list)
    config: dict = field(default_factory=dict)

    @property
    def norm(self) -> float:
        return float(np.sqrt((self.noise.astype(np.float64) ** 2).sum()))


def init_noise(input_shape, batch: int, seed: int) -> T.Tensor:
    """Standard-normal noise of shape ``(batch, *input_shape)``."""
    if batch < 1:
        raise ConfigError(f"noise batch must be at least 1, got {batch}")
    shape = (batch, *tuple(input_shape))
    values = SplitMix64(seed).normal(int(np.prod(shape))).reshape(shape)
    return T.Tensor(values.astype(np.float32), requires_grad=True)


def noise_objective(model: Model, noise: T.Tensor, label: int, lam: float) -> tuple:
    """Return ``(J, mean CE)`` as tensors on the active tape."""
    labels = np.full(noise.shape[0], label, dtype=np.int64)
    ce = T.softmax_cross_entropy(model.forward(noise), labels)
    j = T.add(T.scale(ce, -float(noise.shape[0])), T.scale(T.sum_squares(noise), lam))
    return j, ce


def optimize_noise(model: Model, label: int, cfg: NoiseConfig) -> NoiseMatrix:
    """Gradient descent on the noise only; the model must be frozen.

    The returned traces have ``steps + 1`` entries: the value at
    initialization followed by the value after each update.
    """
    if not model.frozen:
        raise ContractError("noise synthesis requires a frozen model")
    if not 0 <= label < model.spec.num_classes:
        raise ContractError(f"class {label} outside [0, {model.spec.num_classes})")
    noise = init_noise(model.spec.input_shape, cfg.batch, derive_seed(cfg.seed, f"noise/{label}"))
    rule = T.SgdRule(cfg.lr)
    j_trace, ce_trace = [], []
    for step in range(cfg.steps + 1):
        with T.Tape() as tape:
            j, ce = noise_objective(model, noise, label, cfg.lam)
            if not np.isfinite(j.item()):
                raise DivergenceError(f"noise objective diverged at step {step}")
            j_trace.append(j.item())
            ce_trace.append(ce.item())
            if step == cfg.steps:
                break
            T.backward(j, tape)
        T.sgd_step({"noise": noise}, rule)
        noise.grad = None
        if cfg.clamp is not None:
            np.clip(noise.data, cfg.clamp[0], cfg.clamp[1], out=noise.data)
    return NoiseMatrix(int(label), noise.data.copy(), j_trace, ce_trace, cfg.to_dict())


def synthesize_noises(model: Model, forget_classes, cfg: NoiseConfig) -> list:
    """One independent :class:`NoiseMatrix` per forget class, ascending."""
    return [optimize_noise(model, c, cfg) for c in sorted(forget_classes)]


def build_noise_dataset(noises, copies: int, num_classes: int | None = None) -> LabeledDataset:
    """Replicate each noise batch ``copies`` times, labelled with its class."""
    if not noises:
        raise ContractError("need at least one noise matrix")
    if copies < 1:
        raise ConfigError(f"copies must be at least 1, got {copies}")
    labels = [n.class_label for n in noises]
    if len(set(labels)) != len(labels):
        raise ContractError(f"duplicate noise classes {labels}")
    shapes = {n.noise.shape[1:] for n in noises}
    if len(shapes) != 1:
        raise ContractError(f"inconsistent noise shapes {shapes}")
    k = num_classes if num_classes is not None else max(labels) + 1
    x = np.concatenate([np.tile(n.noise, (copies,) + (1,) * (n.noise.ndim - 1)) for n in noises])
    y = np.concatenate([np.full(n.noise.shape[0] * copies, n.class_label) for n in noises])
    return LabeledDataset(x, y, k, "noise", origin="noise")


def save_noise(noises, path) -> None:
    meta = {
        "architecture": "noise",
        "noises": [{"class_label": n.class_label, "loss_trace": n.loss_trace,
                    "ce_trace": n.ce_trace, "config": n.config} for n in noises],
    }
    write_container(path, meta, OrderedDict((f"noise/{n.class_label}", n.noise) for n in noises))


def load_noise(path) -> list:
    meta, arrays = read_container(path)
    if meta.get("architecture") != "noise":
        raise FormatError(f"not a noise container: {meta.get('architecture')!r}")
    out = []
    for entry in meta["noises"]:
        arr = arrays[f"noise/{entry['class_label']}"]
        out.append(NoiseMatrix(entry["class_label"], arr, entry["loss_trace"], entry["ce_trace"], entry["config"]))
    return out
