"""Datasets, file loaders, the forget/retain split and seeded batching."""

from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .errors import ConfigError, ContractError, FormatError
from .rng import SplitMix64
from .tensor import Tensor

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


@dataclass(frozen=True, eq=False)
class LabeledDataset:
    """In-memory samples with dense integer labels in ``[0, num_classes)``.

    Arrays are made read-only on construction so a dataset can be shared
    freely between runs and threads.
    """

    samples: np.ndarray
    labels: np.ndarray
    num_classes: int
    name: str = "dataset"
    origin: str = "data"
    label_names: tuple = ()

    def __post_init__(self):
        samples = np.ascontiguousarray(self.samples, dtype=np.float32)
        labels = np.ascontiguousarray(self.labels, dtype=np.int64)
        if samples.ndim < 2 and samples.shape[0] != 0:
            raise ContractError("samples must be an array of shape (n, *input_shape)")
        if samples.shape[0] != labels.shape[0] or labels.ndim != 1:
            raise ContractError(f"{samples.shape[0]} samples but labels of shape {labels.shape}")
        if self.num_classes < 1:
            raise ContractError(f"num_classes must be positive, got {self.num_classes}")
        if labels.size and (labels.min() < 0 or labels.max() >= self.num_classes):
            raise ContractError(f"labels must lie in [0, {self.num_classes})")
        samples.setflags(write=False)
        labels.setflags(write=False)
        object.__setattr__(self, "samples", samples)
        object.__setattr__(self, "labels", labels)

    def __len__(self) -> int:
        return int(self.labels.shape[0])

    @property
    def input_shape(self) -> tuple:
        return tuple(self.samples.shape[1:])

    def subset(self, indices, name: str | None = None) -> "LabeledDataset":
        idx = np.asarray(indices, dtype=np.int64)
        return LabeledDataset(
            self.samples[idx], self.labels[idx], self.num_classes,
            name or self.name, self.origin, self.label_names,
        )

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.num_classes)

    def classes_present(self) -> set:
        return set(np.unique(self.labels).tolist())


def concat(datasets: Sequence[LabeledDataset], name: str = "concat") -> LabeledDataset:
    """Stack datasets that share input shape and class count."""
    if not datasets:
        raise ContractError("nothing to concatenate")
    shape, k = datasets[0].input_shape, datasets[0].num_classes
    for ds in datasets[1:]:
        if ds.input_shape != shape or ds.num_classes != k:
            raise ContractError(f"cannot concatenate {ds.name}: shape/class mismatch")
    origins = {ds.origin for ds in datasets}
    return LabeledDataset(
        np.concatenate([ds.samples for ds in datasets]),
        np.concatenate([ds.labels for ds in datasets]),
        k, name, origins.pop() if len(origins) == 1 else "mixed",
    )


# --------------------------------------------------------------------------
# Loaders
# --------------------------------------------------------------------------


def _read_bytes(path) -> bytes:
    raw = Path(path).read_bytes()
    if raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    return raw


def _idx_header(raw: bytes, magic: int, ndims: int, what: str) -> tuple:
    head = 4 + 4 * ndims
    if len(raw) < head:
        raise FormatError(f"{what}: truncated header, {len(raw)} bytes", offset=len(raw))
    (found,) = struct.unpack(">I", raw[:4])
    if found != magic:
        raise FormatError(f"{what}: bad magic 0x{found:08x}, expected 0x{magic:08x}", offset=0)
    return struct.unpack(">" + "I" * ndims, raw[4:head]), head


def load_idx(images_path, labels_path, num_classes: int | None = None, name: str | None = None) -> LabeledDataset:
    """Read an IDX image/label pair (big-endian, optionally gzipped).

    Images become ``1 x H x W`` floats scaled by 1/255. ``num_classes``
    defaults to ``max(label) + 1``.
    """
    img_raw = _read_bytes(images_path)
    lab_raw = _read_bytes(labels_path)
    (count, rows, cols), img_off = _idx_header(img_raw, IDX_IMAGES_MAGIC, 3, "images")
    (n_labels,), lab_off = _idx_header(lab_raw, IDX_LABELS_MAGIC, 1, "labels")
    if n_labels != count:
        raise FormatError(f"{count} images but {n_labels} labels", offset=4)
    need = img_off + count * rows * cols
    if len(img_raw) < need:
        raise FormatError(f"images: truncated pixel data, need {need} bytes", offset=len(img_raw))
    if len(lab_raw) < lab_off + count:
        raise FormatError(f"labels: truncated, need {lab_off + count} bytes", offset=len(lab_raw))
    pixels = np.frombuffer(img_raw, dtype=np.uint8, count=count * rows * cols, offset=img_off)
    labels = np.frombuffer(lab_raw, dtype=np.uint8, count=count, offset=lab_off).astype(np.int64)
    k = num_classes if num_classes is not None else (int(labels.max()) + 1 if count else 1)
    if count and labels.max() >= k:
        pos = int(np.argmax(labels >= k))
        raise FormatError(f"label {labels[pos]} outside [0, {k})", offset=lab_off + pos)
    samples = pixels.reshape(count, 1, rows, cols).astype(np.float32) / np.float32(255.0)
    return LabeledDataset(samples, labels, k, name or Path(images_path).stem)


def load_cifar_binary(paths, num_classes: int = 10, height: int = 32, width: int = 32,
                      channels: int = 3, name: str = "cifar") -> LabeledDataset:
    """Read CIFAR-style records: one label byte then ``C*H*W`` pixel bytes."""
    if isinstance(paths, (str, Path)):
        paths = [paths]
    record = 1 + channels * height * width
    all_x, all_y = [], []
    for path in paths:
        raw = _read_bytes(path)
        if len(raw) % record:
            raise FormatError(
                f"{path}: length {len(raw)} is not a multiple of record size {record}",
                offset=len(raw) - len(raw) % record,
            )
        recs = np.frombuffer(raw, dtype=np.uint8).reshape(-1, record)
        labels = recs[:, 0].astype(np.int64)
        if labels.size and labels.max() >= num_classes:
            pos = int(np.argmax(labels >= num_classes))
            raise FormatError(f"{path}: label {labels[pos]} outside [0, {num_classes})", offset=pos * record)
        all_x.append(recs[:, 1:].reshape(-1, channels, height, width))
        all_y.append(labels)
    x = np.concatenate(all_x) if all_x else np.zeros((0, channels, height, width), np.uint8)
    y = np.concatenate(all_y) if all_y else np.zeros(0, np.int64)
    return LabeledDataset(x.astype(np.float32) / np.float32(255.0), y, num_classes, name)


@dataclass(frozen=True)
class SyntheticSpec:
    """Gaussian class clusters.

    ``shape`` is either ``(dims,)`` or ``(C, H, W)``. Cluster centers are
    drawn from a standard normal and rescaled so the closest pair sits
    exactly ``separation`` apart.
    """

    num_classes: int = 10
    shape: tuple = (1, 8, 8)
    per_class: int = 100
    separation: float = 10.0
    noise_sigma: float = 1.0


def synthetic_centers(spec: SyntheticSpec, rng: SplitMix64) -> np.ndarray:
    d = int(np.prod(spec.shape))
    centers = rng.normal(spec.num_classes * d).reshape(spec.num_classes, d)
    diff = centers[:, None, :] - centers[None, :, :]
    dist = np.sqrt((diff**2).sum(-1))
    closest = dist[np.triu_indices(spec.num_classes, 1)].min()
    return centers * (spec.separation / closest)


def generate_synthetic(spec: SyntheticSpec, seed: int, name: str = "synthetic") -> LabeledDataset:
    """Balanced Gaussian blobs; sample ``i`` belongs to class ``i % K``."""
    if spec.num_classes < 2:
        raise ConfigError("synthetic data needs at least 2 classes")
    if spec.per_class < 1:
        raise ConfigError("per_class must be at least 1")
    if not spec.separation > 0:
        raise ConfigError(f"separation must be positive, got {spec.separation}")
    if spec.noise_sigma < 0:
        raise ConfigError(f"noise_sigma must be non-negative, got {spec.noise_sigma}")
    rng = SplitMix64(seed)
    centers = synthetic_centers(spec, rng)
    n = spec.num_classes * spec.per_class
    labels = np.arange(n) % spec.num_classes
    noise = rng.normal(n * centers.shape[1]).reshape(n, -1)
    x = centers[labels] + spec.noise_sigma * noise
    return LabeledDataset(x.reshape((n, *spec.shape)), labels, spec.num_classes, name)


def load_digits_dataset(name: str = "digits") -> LabeledDataset:
    """The 8x8 handwritten-digit set bundled with scikit-learn, as ``1 x 8 x 8`` in [0, 1]."""
    from sklearn.datasets import load_digits

    bunch = load_digits()
    x = bunch.images.astype(np.float32)[:, None, :, :] / np.float32(16.0)
    return LabeledDataset(x, bunch.target, 10, name)


def train_test_split(ds: LabeledDataset, test_fraction: float, seed: int) -> tuple:
    """Stratified split; each class contributes ``round(test_fraction * n_c)`` test samples."""
    if not 0 < test_fraction < 1:
        raise ConfigError(f"test_fraction must lie in (0, 1), got {test_fraction}")
    rng = SplitMix64(seed)
    test_idx = []
    for c in range(ds.num_classes):
        members = np.flatnonzero(ds.labels == c)
        k = int(round(test_fraction * members.size))
        test_idx.append(members[rng.choice(members.size, k)])
    test_mask = np.zeros(len(ds), dtype=bool)
    test_mask[np.concatenate(test_idx)] = True
    return (ds.subset(np.flatnonzero(~test_mask), f"{ds.name}/train"),
            ds.subset(np.flatnonzero(test_mask), f"{ds.name}/test"))


# --------------------------------------------------------------------------
# Forget / retain partition
# --------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class ClassPartition:
    forget_classes: frozenset
    forget_set: LabeledDataset
    retain_set: LabeledDataset

    @property
    def retain_classes(self) -> list:
        k = self.forget_set.num_classes
        return [c for c in range(k) if c not in self.forget_classes]


@dataclass(frozen=True, eq=False)
class RetainSubset:
    subset: LabeledDataset
    per_class_count: int | None
    draw_seed: int
    forget_classes: frozenset = field(default_factory=frozenset)

    def __len__(self):
        return len(self.subset)


def check_forget_classes(forget_classes, num_classes: int) -> frozenset:
    fc = frozenset(int(c) for c in forget_classes)
    if not fc:
        raise ContractError("forget_classes must be non-empty")
    bad = [c for c in fc if not 0 <= c < num_classes]
    if bad:
        raise ContractError(f"forget classes {sorted(bad)} outside [0, {num_classes})")
    if len(fc) == num_classes:
        raise ContractError("cannot forget every class: nothing would be retained")
    return fc


def partition(ds: LabeledDataset, forget_classes) -> ClassPartition:
    """Split by label; each side keeps source order."""
    fc = check_forget_classes(forget_classes, ds.num_classes)
    mask = np.isin(ds.labels, sorted(fc))
    return ClassPartition(
        fc,
        ds.subset(np.flatnonzero(mask), f"{ds.name}/forget"),
        ds.subset(np.flatnonzero(~mask), f"{ds.name}/retain"),
    )


def sample_retain_subset(p: ClassPartition, per_class_count: int | None = None, seed: int = 0,
                         fraction: float | None = None) -> RetainSubset:
    """Uniform draw without replacement from each retain class.

    Give either a fixed ``per_class_count`` or a ``fraction`` of each class.
    Classes shorter than the request contribute everything they have. The
    selected indices are kept in source order.
    """
    if (per_class_count is None) == (fraction is None):
        raise ConfigError("give exactly one of per_class_count or fraction")
    if per_class_count is not None and per_class_count < 1:
        raise ConfigError(f"per_class_count must be at least 1, got {per_class_count}")
    if fraction is not None and not 0 < fraction <= 1:
        raise ConfigError(f"fraction must lie in (0, 1], got {fraction}")
    rs = p.retain_set
    rng = SplitMix64(seed)
    chosen = []
    for c in p.retain_classes:
        members = np.flatnonzero(rs.labels == c)
        k = per_class_count if fraction is None else max(1, int(round(fraction * members.size)))
        if members.size:
            chosen.append(members[rng.choice(members.size, min(k, members.size))])
    idx = np.sort(np.concatenate(chosen)) if chosen else np.zeros(0, np.int64)
    sub = rs.subset(idx, f"{rs.name}/sub")
    if np.isin(sub.labels, sorted(p.forget_classes)).any():
        raise ContractError("retain subset contains a forget-class sample")
    return RetainSubset(sub, per_class_count, seed, p.forget_classes)


# --------------------------------------------------------------------------
# Batching
# --------------------------------------------------------------------------


def batch_indices(n: int, batch_size: int, shuffle_seed: int | None = None) -> Iterator[np.ndarray]:
    """Index blocks of ``range(n)``, Fisher-Yates shuffled first when seeded."""
    if batch_size < 1:
        raise ConfigError(f"batch_size must be at least 1, got {batch_size}")
    order = np.arange(n) if shuffle_seed is None else SplitMix64(shuffle_seed).permutation(n)
    for start in range(0, n, batch_size):
        yield order[start : start + batch_size]


def batches(ds: LabeledDataset, batch_size: int, shuffle_seed: int | None = None) -> Iterator[tuple]:
    """Yield ``(Tensor[B x ...], labels)``; the last batch may be short."""
    for idx in batch_indices(len(ds), batch_size, shuffle_seed):
        yield Tensor._wrap(ds.samples[idx]), ds.labels[idx]
