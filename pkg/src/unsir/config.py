"""Experiment configuration and its flat ``section.key = value`` text form.

The text form is a subset of TOML (dotted keys, one assignment per line),
so it is parsed with ``tomli``. Writing goes through :func:`dumps`, which
emits every field in declaration order; ``None`` fields are left out and
come back as their defaults, so ``loads(dumps(cfg)) == cfg``.

Schema (defaults in parentheses)::

    seed                     master seed (0); every stage seed is derived from it
    output_dir               run directory ("runs/desk")
    workers                  worker processes for sweeps (1)
    dataset.kind             synthetic | idx | cifar | digits ("synthetic")
    dataset.num_classes      K (10)
    dataset.shape            sample shape for synthetic / cifar ([1, 8, 8])
    dataset.per_class        synthetic samples per class (300)
    dataset.separation       synthetic minimum centre distance (6.0)
    dataset.noise_sigma      synthetic within-class spread (1.0)
    dataset.test_fraction    held-out share when no test files are given (0.2)
    dataset.images / labels / test_images / test_labels     IDX paths
    dataset.paths / test_paths                              CIFAR-style paths
    model.arch               mlp | smallcnn ("smallcnn")
    model.hidden             mlp hidden widths ([])
    model.channels           smallcnn block widths ([32, 64])
    model.checkpoint         load the original from here instead of training
    train.epochs / batch_size / lr                          (10 / 8 / 0.02)
    forget.classes           classes removed by a single request ([0])
    forget.sequence          ordered requests for sequential runs ([[0], [1], [2]])
    unsir.impair_lr / repair_lr                             (0.02 / 0.01)
    unsir.impair_epochs / repair_epochs / cycles            (1 / 1 / 1)
    unsir.batch_size         impair/repair batch (8)
    unsir.retain_per_class   retain subset size per class (100)
    unsir.retain_fraction    alternative: share of each retain class
    unsir.noise.steps / lr / lam / batch / copies           (40 / 0.1 / 0.1 / 64 / 20)
    unsir.noise.clamp        optional [lo, hi] clamp of the noise
    baselines.methods        subset of retrain, finetune, neggrad (all three)
    baselines.lr / epochs / neggrad_stop                    (0.02 / 1 / 0.01)
    metrics.relearn_time     compute relearn time (true)
    metrics.relearn_cap / relearn_samples / relearn_batch_size   (100 / 500 / 64)
    sweep.axis / sweep.values                               for ``unsir sweep``
"""

from __future__ import annotations

import dataclasses
import math
import os
import typing
from dataclasses import dataclass, field
from pathlib import Path

import tomli

from .errors import ConfigError

SWEEP_AXES = ("impair_lr", "repair_lr", "lambda", "retain_fraction", "repair_steps", "cycles")
DATASET_KINDS = ("synthetic", "idx", "cifar", "digits")
BASELINES = ("retrain", "finetune", "neggrad")
ENV_OUTPUT_DIR = "UNSIR_OUTPUT_DIR"
ENV_WORKERS = "UNSIR_WORKERS"


@dataclass(frozen=True)
class DatasetConfig:
    kind: str = "synthetic"
    num_classes: int = 10
    shape: tuple = (1, 8, 8)
    per_class: int = 300
    separation: float = 6.0
    noise_sigma: float = 1.0
    test_fraction: float = 0.2
    images: str | None = None
    labels: str | None = None
    test_images: str | None = None
    test_labels: str | None = None
    paths: tuple = ()
    test_paths: tuple = ()

    def __post_init__(self):
        if self.kind not in DATASET_KINDS:
            raise ConfigError(f"dataset.kind must be one of {DATASET_KINDS}, got {self.kind!r}")
        if self.kind == "idx" and not (self.images and self.labels):
            raise ConfigError("dataset.kind = idx needs dataset.images and dataset.labels")
        if self.kind == "cifar" and not self.paths:
            raise ConfigError("dataset.kind = cifar needs dataset.paths")
        if not 0 < self.test_fraction < 1:
            raise ConfigError(f"dataset.test_fraction must lie in (0, 1), got {self.test_fraction}")


@dataclass(frozen=True)
class ModelConfig:
    arch: str = "smallcnn"
    hidden: tuple = ()
    channels: tuple = (32, 64)
    checkpoint: str | None = None

    def __post_init__(self):
        if self.arch not in ("mlp", "smallcnn"):
            raise ConfigError(f"model.arch must be mlp or smallcnn, got {self.arch!r}")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 10
    batch_size: int = 8
    lr: float = 0.02

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1 or not self.lr > 0:
            raise ConfigError("train needs epochs >= 0, batch_size >= 1 and lr > 0")


@dataclass(frozen=True)
class ForgetConfig:
    classes: tuple = (0,)
    sequence: tuple = ((0,), (1,), (2,))


@dataclass(frozen=True)
class NoiseSection:
    steps: int = 40
    lr: float = 0.1
    lam: float = 0.1
    batch: int = 64
    copies: int = 20
    clamp: tuple | None = None


@dataclass(frozen=True)
class UnsirSection:
    impair_lr: float = 0.02
    repair_lr: float = 0.01
    impair_epochs: int = 1
    repair_epochs: int = 1
    cycles: int = 1
    batch_size: int = 8
    retain_per_class: int | None = 100
    retain_fraction: float | None = None
    noise: NoiseSection = field(default_factory=NoiseSection)


@dataclass(frozen=True)
class BaselineSection:
    methods: tuple = BASELINES
    lr: float = 0.02
    epochs: int = 1
    neggrad_stop: float = 0.01

    def __post_init__(self):
        unknown = set(self.methods) - set(BASELINES)
        if unknown:
            raise ConfigError(f"unknown baselines {sorted(unknown)}")


@dataclass(frozen=True)
class MetricsConfig:
    relearn_time: bool = True
    relearn_cap: int = 100
    relearn_samples: int = 500
    relearn_batch_size: int = 64


@dataclass(frozen=True)
class SweepConfig:
    axis: str | None = None
    values: tuple = ()

    def __post_init__(self):
        if self.axis is not None and self.axis not in SWEEP_AXES:
            raise ConfigError(f"sweep.axis must be one of {SWEEP_AXES}, got {self.axis!r}")


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int = 0
    output_dir: str = "runs/desk"
    workers: int = 1
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    forget: ForgetConfig = field(default_factory=ForgetConfig)
    unsir: UnsirSection = field(default_factory=UnsirSection)
    baselines: BaselineSection = field(default_factory=BaselineSection)
    metrics: MetricsConfig = field(default_factory=MetricsConfig)
    sweep: SweepConfig = field(default_factory=SweepConfig)

    def __post_init__(self):
        if not 0 <= self.seed < 2**64:
            raise ConfigError(f"seed must be an unsigned 64-bit integer, got {self.seed}")
        if self.workers < 1:
            raise ConfigError(f"workers must be at least 1, got {self.workers}")

    def to_dict(self) -> dict:
        return _to_plain(self)

    def replace(self, **changes) -> "ExperimentConfig":
        """Copy with dotted-key overrides, e.g. ``replace(**{"unsir.cycles": 2})``."""
        return from_dict(_merge(self.to_dict(), _nest(changes)))

    def with_env(self, environ=None) -> "ExperimentConfig":
        """Apply the output-directory and worker-count environment overrides."""
        environ = os.environ if environ is None else environ
        changes = {}
        if environ.get(ENV_OUTPUT_DIR):
            changes["output_dir"] = environ[ENV_OUTPUT_DIR]
        if environ.get(ENV_WORKERS):
            try:
                changes["workers"] = int(environ[ENV_WORKERS])
            except ValueError as exc:
                raise ConfigError(f"{ENV_WORKERS} must be an integer") from exc
        return self.replace(**changes) if changes else self


# --------------------------------------------------------------------------
# dict <-> dataclass
# --------------------------------------------------------------------------


def _to_plain(obj):
    if dataclasses.is_dataclass(obj):
        return {f.name: _to_plain(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, (tuple, list)):
        return [_to_plain(v) for v in obj]
    return obj


def _tupleize(value):
    if isinstance(value, list):
        return tuple(_tupleize(v) for v in value)
    return value


def _coerce(value, hint, where: str):
    origin = typing.get_origin(hint)
    args = typing.get_args(hint)
    if value is None:
        if hint is type(None) or type(None) in args:
            return None
        raise ConfigError(f"{where} may not be empty")
    if origin is typing.Union or (origin is not None and type(None) in args):
        inner = [a for a in args if a is not type(None)]
        return _coerce(value, inner[0], where)
    if hint is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{where} must be true or false, got {value!r}")
        return value
    if hint is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where} must be an integer, got {value!r}")
        return value
    if hint is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where} must be a number, got {value!r}")
        return float(value)
    if hint is str:
        if not isinstance(value, str):
            raise ConfigError(f"{where} must be a string, got {value!r}")
        return value
    if hint is tuple:
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{where} must be a list, got {value!r}")
        return _tupleize(list(value))
    return value


def _build(cls, data, where: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{where or 'config'} must be a table, got {data!r}")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(f'{where}{k}' for k in unknown)}")
    kwargs = {}
    for name, value in data.items():
        hint = hints[name]
        if dataclasses.is_dataclass(hint):
            kwargs[name] = _build(hint, value, f"{where}{name}.")
        else:
            kwargs[name] = _coerce(value, hint, f"{where}{name}")
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


def from_dict(data: dict) -> ExperimentConfig:
    return _build(ExperimentConfig, data, "")


def _nest(flat: dict) -> dict:
    out: dict = {}
    for key, value in flat.items():
        node = out
        *head, last = key.split(".")
        for part in head:
            node = node.setdefault(part, {})
        node[last] = value
    return out


def _merge(base: dict, extra: dict) -> dict:
    out = dict(base)
    for k, v in extra.items():
        out[k] = _merge(out[k], v) if isinstance(v, dict) and isinstance(out.get(k), dict) else v
    return out


# --------------------------------------------------------------------------
# text form
# --------------------------------------------------------------------------


def _quote(text: str) -> str:
    # TOML basic string; characters outside the BMP stay literal (no surrogate escapes)
    out = []
    for ch in text:
        if ch in '"\\':
            out.append("\\" + ch)
        elif ord(ch) < 0x20 or ord(ch) == 0x7F:
            out.append(f"\\u{ord(ch):04x}")
        else:
            out.append(ch)
    return '"' + "".join(out) + '"'


def _literal(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, int):
        return str(value)
    if isinstance(value, float):
        if math.isnan(value):
            return "nan"
        if math.isinf(value):
            return "inf" if value > 0 else "-inf"
        return repr(value)
    if isinstance(value, str):
        return _quote(value)
    if isinstance(value, (list, tuple)):
        return "[" + ", ".join(_literal(v) for v in value) + "]"
    raise ConfigError(f"cannot write {value!r} to a config file")


def _flatten(d: dict, prefix: str = ""):
    for key, value in d.items():
        if isinstance(value, dict):
            yield from _flatten(value, f"{prefix}{key}.")
        elif value is not None:
            yield f"{prefix}{key}", value


def dumps(cfg: ExperimentConfig) -> str:
    return "".join(f"{k} = {_literal(v)}\n" for k, v in _flatten(cfg.to_dict()))


def loads(text: str) -> ExperimentConfig:
    try:
        data = tomli.loads(text)
    except tomli.TOMLDecodeError as exc:
        raise ConfigError(f"config syntax error: {exc}") from exc
    return from_dict(data)


def load(path) -> ExperimentConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return loads(text)


def save(cfg: ExperimentConfig, path) -> None:
    Path(path).write_text(dumps(cfg))


def parse_override(assignment: str) -> tuple:
    """``"unsir.cycles=2"`` -> ``("unsir.cycles", 2)`` using the config value syntax."""
    key, sep, raw = assignment.partition("=")
    if not sep or not key.strip():
        raise ConfigError(f"override {assignment!r} is not of the form key=value")
    key = key.strip()
    try:
        value = tomli.loads(f"v = {raw.strip()}")["v"]
    except tomli.TOMLDecodeError:
        value = raw.strip()
    return key, value
