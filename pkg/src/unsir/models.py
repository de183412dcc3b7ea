"""Small classifiers, SGD training, inference and checkpoint files."""

from __future__ import annotations

import copy
import hashlib
import json
import logging
import struct
import zlib
from collections import OrderedDict
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import tensor as T
from .data import LabeledDataset, batch_indices
from .errors import ContractError, DivergenceError, FormatError, FrozenModelError, ShapeError
from .rng import SplitMix64, derive_seed

logger = logging.getLogger(__name__)

ARCHITECTURES = ("mlp", "smallcnn")


@dataclass(frozen=True)
class ModelSpec:
    """Architecture description; a model is a pure function of its spec.

    ``hidden`` lists MLP hidden widths. ``channels`` lists the smallcnn block
    widths: each block is a 3x3 stride-1 conv followed by a 2x2 stride-2
    downsampling conv, both ReLU. The network ends with a global average
    pool and a linear head.
    """

    arch: str
    input_shape: tuple
    num_classes: int
    hidden: tuple = ()
    channels: tuple = ()
    init_seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(int(s) for s in self.input_shape))
        object.__setattr__(self, "hidden", tuple(int(s) for s in self.hidden))
        object.__setattr__(self, "channels", tuple(int(s) for s in self.channels))

    def to_dict(self) -> dict:
        d = asdict(self)
        for k in ("input_shape", "hidden", "channels"):
            d[k] = list(d[k])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        return cls(**d)


def _layer_shapes(spec: ModelSpec) -> list:
    if spec.arch not in ARCHITECTURES:
        raise ShapeError(f"unknown architecture {spec.arch!r}")
    if spec.num_classes < 2:
        raise ShapeError("a classifier needs at least 2 classes")
    if spec.arch == "mlp":
        widths = [int(np.prod(spec.input_shape)), *spec.hidden, spec.num_classes]
        shapes = []
        for i, (a, b) in enumerate(zip(widths[:-1], widths[1:])):
            shapes += [(f"fc{i}.weight", (a, b), a), (f"fc{i}.bias", (b,), a)]
        return shapes
    if len(spec.input_shape) != 3:
        raise ShapeError(f"smallcnn needs a C x H x W input, got {spec.input_shape}")
    if not spec.channels:
        raise ShapeError("smallcnn needs at least one block")
    c, h, w = spec.input_shape
    down = 2 ** len(spec.channels)
    if h % down or w % down:
        raise ShapeError(f"input {h}x{w} is not divisible by {down} for {len(spec.channels)} blocks")
    shapes = []
    prev = c
    for i, ch in enumerate(spec.channels):
        shapes += [(f"conv{i}.weight", (ch, prev, 3, 3), prev * 9), (f"conv{i}.bias", (ch,), prev * 9)]
        shapes += [(f"down{i}.weight", (ch, ch, 2, 2), ch * 4), (f"down{i}.bias", (ch,), ch * 4)]
        prev = ch
    shapes += [("head.weight", (prev, spec.num_classes), prev), ("head.bias", (spec.num_classes,), prev)]
    return shapes


class Model:
    """Ordered named parameters plus a forward pass chosen by ``spec.arch``."""

    def __init__(self, spec: ModelSpec, params: "OrderedDict[str, T.Tensor]", metadata: dict | None = None):
        self.spec = spec
        self.params = params
        self.metadata = dict(metadata or {})
        self.frozen = False

    # -- parameters -----------------------------------------------------
    def named_parameters(self):
        return list(self.params.items())

    def num_parameters(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    def freeze(self) -> "Model":
        for p in self.params.values():
            p.data.setflags(write=False)
            p.requires_grad = False
            p.grad = None
        self.frozen = True
        return self

    def unfreeze(self) -> "Model":
        for p in self.params.values():
            if not p.data.flags.writeable:
                p.data = p.data.copy()
            p.requires_grad = True
        self.frozen = False
        return self

    def clone(self) -> "Model":
        params = OrderedDict((k, T.Tensor(v.data, requires_grad=True)) for k, v in self.params.items())
        return Model(self.spec, params, copy.deepcopy(self.metadata))

    def param_hash(self) -> str:
        h = hashlib.sha256()
        for name, p in self.params.items():
            h.update(name.encode())
            h.update(np.ascontiguousarray(p.data).tobytes())
        return h.hexdigest()

    def zero_grad(self) -> None:
        T.zero_grad(self.params)

    # -- forward --------------------------------------------------------
    def check_input(self, x: np.ndarray) -> None:
        if tuple(x.shape[1:]) != self.spec.input_shape:
            raise ShapeError(f"batch of shape {tuple(x.shape)} does not match model input {self.spec.input_shape}")

    def forward(self, x: T.Tensor) -> T.Tensor:
        self.check_input(x.data)
        p = self.params
        if self.spec.arch == "mlp":
            h = T.flatten(x)
            n_layers = len(self.spec.hidden) + 1
            for i in range(n_layers):
                h = T.add_bias(T.matmul(h, p[f"fc{i}.weight"]), p[f"fc{i}.bias"])
                if i < n_layers - 1:
                    h = T.relu(h)
            return h
        h = x
        for i in range(len(self.spec.channels)):
            h = T.relu(T.conv2d(h, p[f"conv{i}.weight"], p[f"conv{i}.bias"], stride=1, padding=1))
            h = T.relu(T.conv2d(h, p[f"down{i}.weight"], p[f"down{i}.bias"], stride=2, padding=0))
        h = T.global_avg_pool(h)
        return T.add_bias(T.matmul(h, p["head.weight"]), p["head.bias"])

    __call__ = forward


def build_model(spec: ModelSpec) -> Model:
    """Fan-in uniform init, ``U(-1/sqrt(fan_in), 1/sqrt(fan_in))``, in parameter order."""
    rng = SplitMix64(spec.init_seed)
    params = OrderedDict()
    for name, shape, fan_in in _layer_shapes(spec):
        bound = 1.0 / np.sqrt(fan_in)
        values = rng.uniform_range(-bound, bound, int(np.prod(shape))).reshape(shape)
        params[name] = T.Tensor(values.astype(np.float32), requires_grad=True)
    return Model(spec, params)


# --------------------------------------------------------------------------
# Training
# --------------------------------------------------------------------------


@dataclass
class TrainingHistory:
    loss: list = field(default_factory=list)
    accuracy: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"loss": list(self.loss), "accuracy": list(self.accuracy)}


def sgd_epoch(model: Model, ds: LabeledDataset, lr: float, batch_size: int, seed: int | None,
              ascent: bool = False, audit: Callable | None = None,
              stop: Callable | None = None, epoch: int = 0) -> tuple:
    """One pass of cross-entropy SGD over ``ds``; returns ``(mean loss, accuracy, steps)``.

    ``ascent`` flips the gradient sign (loss ascent). ``audit(indices,
    labels)`` sees every batch before it is used. ``stop`` is polled after each step and
    ends the epoch early when it returns true.
    """
    if model.frozen:
        raise FrozenModelError("cannot train a frozen model")
    rule = T.SgdRule(lr)
    total, correct, seen, steps = 0.0, 0, 0, 0
    for b, idx in enumerate(batch_indices(len(ds), batch_size, seed)):
        xb, yb = T.Tensor._wrap(ds.samples[idx]), ds.labels[idx]
        if audit is not None:
            audit(idx, yb)
        with T.Tape() as tape:
            logits = model.forward(xb)
            try:
                loss = T.softmax_cross_entropy(logits, yb)
            except DivergenceError as exc:
                raise DivergenceError(f"loss diverged at epoch {epoch}, batch {b}") from exc
            objective = T.scale(loss, -1.0) if ascent else loss
            T.backward(objective, tape)
        T.sgd_step(model.params, rule)
        model.zero_grad()
        steps += 1
        for p in model.params.values():
            if not np.all(np.isfinite(p.data)):
                raise DivergenceError(f"parameters diverged at epoch {epoch}, batch {b}")
        total += loss.item() * len(yb)
        correct += int((logits.data.argmax(axis=1) == yb).sum())
        seen += len(yb)
        if stop is not None and stop():
            break
    if seen == 0:
        return 0.0, 0.0, 0
    return total / seen, correct / seen, steps


def train(model: Model, ds: LabeledDataset, epochs: int, batch_size: int, lr: float, seed: int) -> TrainingHistory:
    """Plain SGD with cross-entropy, reshuffling every epoch."""
    if len(ds) == 0:
        raise ContractError("cannot train on an empty dataset")
    if ds.num_classes != model.spec.num_classes:
        raise ContractError(f"dataset has {ds.num_classes} classes, model has {model.spec.num_classes}")
    history = TrainingHistory()
    for epoch in range(epochs):
        loss, acc, _ = sgd_epoch(model, ds, lr, batch_size, derive_seed(seed, f"epoch/{epoch}"), epoch=epoch)
        history.loss.append(loss)
        history.accuracy.append(acc)
        logger.debug("epoch %d loss %.4f acc %.4f", epoch, loss, acc)
    return history


# --------------------------------------------------------------------------
# Inference
# --------------------------------------------------------------------------


def logits_of(model: Model, x: np.ndarray, chunk: int = 1024) -> np.ndarray:
    x = np.asarray(x, dtype=np.float32)
    model.check_input(x)
    out = [model.forward(T.Tensor._wrap(x[i : i + chunk])).data for i in range(0, x.shape[0], chunk)]
    if not out:
        return np.zeros((0, model.spec.num_classes), dtype=np.float32)
    return np.concatenate(out)


def predict(model: Model, x) -> tuple:
    """``(labels, logits)``; ties go to the lowest class index."""
    data = x.data if isinstance(x, T.Tensor) else x
    logits = logits_of(model, data)
    return logits.argmax(axis=1), logits


# --------------------------------------------------------------------------
# Checkpoint container
# --------------------------------------------------------------------------

MAGIC = b"UNSR"
FORMAT_VERSION = 1
KNOWN_TAGS = (*ARCHITECTURES, "noise")


def write_container(path, metadata: dict, arrays: "OrderedDict[str, np.ndarray]") -> None:
    """``UNSR`` | u16 version | u32 len + JSON metadata | records | u32 CRC32.

    Each record is ``u32 name_len, name, u32 rank, rank x u32 extents,
    float32 data``; all integers little-endian.
    """
    meta = json.dumps(metadata, sort_keys=True, separators=(",", ":")).encode()
    parts = [MAGIC, struct.pack("<H", FORMAT_VERSION), struct.pack("<I", len(meta)), meta]
    for name, arr in arrays.items():
        arr = np.ascontiguousarray(arr, dtype="<f4")
        raw_name = name.encode()
        parts += [struct.pack("<I", len(raw_name)), raw_name, struct.pack("<I", arr.ndim)]
        parts += [struct.pack(f"<{arr.ndim}I", *arr.shape), arr.tobytes()]
    body = b"".join(parts)
    Path(path).write_bytes(body + struct.pack("<I", zlib.crc32(body)))


def read_container(path) -> tuple:
    raw = Path(path).read_bytes()
    if len(raw) < 14:
        raise FormatError("checkpoint truncated", offset=len(raw))
    if raw[:4] != MAGIC:
        raise FormatError(f"bad checkpoint magic {raw[:4]!r}", offset=0)
    body, (crc,) = raw[:-4], struct.unpack("<I", raw[-4:])
    if zlib.crc32(body) != crc:
        raise FormatError("checkpoint CRC mismatch", offset=len(raw) - 4)
    (version,) = struct.unpack_from("<H", body, 4)
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}", offset=4)
    (mlen,) = struct.unpack_from("<I", body, 6)
    pos = 10 + mlen
    if pos > len(body):
        raise FormatError("metadata block truncated", offset=10)
    try:
        metadata = json.loads(body[10:pos].decode())
    except ValueError as exc:
        raise FormatError("metadata block is not valid JSON", offset=10) from exc
    arrays = OrderedDict()
    try:
        while pos < len(body):
            start = pos
            (nlen,) = struct.unpack_from("<I", body, pos)
            name = body[pos + 4 : pos + 4 + nlen].decode()
            pos += 4 + nlen
            (rank,) = struct.unpack_from("<I", body, pos)
            shape = struct.unpack_from(f"<{rank}I", body, pos + 4)
            pos += 4 + 4 * rank
            count = int(np.prod(shape))
            if pos + 4 * count > len(body):
                raise FormatError(f"record {name!r} truncated", offset=start)
            arrays[name] = np.frombuffer(body, dtype="<f4", count=count, offset=pos).reshape(shape).astype(np.float32)
            pos += 4 * count
    except (struct.error, UnicodeDecodeError) as exc:
        raise FormatError("malformed parameter record", offset=pos) from exc
    return metadata, arrays


def save_checkpoint(model: Model, path, training: dict | None = None) -> None:
    metadata = {
        "architecture": model.spec.arch,
        "spec": model.spec.to_dict(),
        "training": training if training is not None else model.metadata.get("training", {}),
    }
    write_container(path, metadata, OrderedDict((k, v.data) for k, v in model.params.items()))


def load_checkpoint(path) -> Model:
    metadata, arrays = read_container(path)
    tag = metadata.get("architecture")
    if tag not in ARCHITECTURES:
        raise FormatError(f"unknown architecture tag {tag!r}")
    try:
        spec = ModelSpec.from_dict(metadata["spec"])
        expected = [(n, s) for n, s, _ in _layer_shapes(spec)]
    except (KeyError, TypeError, ShapeError) as exc:
        raise FormatError(f"invalid model spec in checkpoint: {exc}") from exc
    found = [(n, a.shape) for n, a in arrays.items()]
    if found != [(n, tuple(s)) for n, s in expected]:
        raise FormatError("checkpoint parameters do not match the stored spec")
    params = OrderedDict((n, T.Tensor(a, requires_grad=True)) for n, a in arrays.items())
    return Model(spec, params, {"training": metadata.get("training", {})})
