"""UNSIR impair/repair unlearning and the reference methods it is compared with."""

from __future__ import annotations

import logging
import time
import warnings
from collections import Counter
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .data import ClassPartition, LabeledDataset, RetainSubset, concat, sample_retain_subset
from .errors import ConfigError, ZeroGlanceViolation
from .metrics import accuracy
from .models import Model, build_model, sgd_epoch, train
from .noise import NoiseConfig, build_noise_dataset, synthesize_noises
from .rng import derive_seed

logger = logging.getLogger(__name__)

METHODS = ("unsir", "retrain", "finetune", "neggrad")


@dataclass(frozen=True)
class UnsirConfig:
    impair_lr: float = 0.02
    repair_lr: float = 0.01
    impair_epochs: int = 1
    repair_epochs: int = 1
    cycles: int = 1
    batch_size: int = 64
    noise: NoiseConfig = field(default_factory=NoiseConfig)
    retain_per_class: int | None = 100
    retain_fraction: float | None = None
    seed: int = 0

    def __post_init__(self):
        if self.cycles < 1:
            raise ConfigError(f"cycles must be at least 1, got {self.cycles}")
        if self.impair_epochs < 0 or self.repair_epochs < 0:
            raise ConfigError("epoch counts must be non-negative")
        if self.impair_lr < 0 or self.repair_lr < 0:
            raise ConfigError("learning rates must be non-negative")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be at least 1, got {self.batch_size}")
        if (self.retain_per_class is None) == (self.retain_fraction is None):
            raise ConfigError("set exactly one of retain_per_class and retain_fraction")
        if self.impair_lr <= self.repair_lr:
            warnings.warn(
                f"impair lr {self.impair_lr} <= repair lr {self.repair_lr}; impair normally uses the larger rate",
                stacklevel=2,
            )

    def to_dict(self) -> dict:
        d = asdict(self)
        d["noise"] = self.noise.to_dict()
        return d


@dataclass
class UnlearnRecord:
    method: str
    snapshots: list = field(default_factory=list)
    initial: dict | None = None
    stage_seconds: dict = field(default_factory=dict)
    stage_counts: Counter = field(default_factory=Counter)
    zero_glance: bool = True
    real_samples_seen: int = 0
    config: dict = field(default_factory=dict)
    seeds: dict = field(default_factory=dict)
    noise_norms: dict = field(default_factory=dict)
    noise_ce: dict = field(default_factory=dict)

    def to_dict(self, timings: bool = False) -> dict:
        d = {
            "method": self.method,
            "initial": self.initial,
            "snapshots": self.snapshots,
            "stage_counts": dict(sorted(self.stage_counts.items())),
            "zero_glance": self.zero_glance,
            "real_samples_seen": self.real_samples_seen,
            "config": self.config,
            "seeds": self.seeds,
            "noise_norms": {str(k): v for k, v in self.noise_norms.items()},
            "noise_ce": {str(k): v for k, v in self.noise_ce.items()},
        }
        if timings:
            d["stage_seconds"] = self.stage_seconds
        return d


class ZeroGlanceAudit:
    """Batch hook that stops training if a real forget-class sample shows up.

    ``is_noise`` marks rows of the training stream that are synthetic noise;
    every other row must carry a retain label. Indices of real rows consumed
    are collected so tests can prove they all come from the retain subset.
    """

    def __init__(self, forget_classes, is_noise: np.ndarray | None = None):
        self.forget = np.array(sorted(forget_classes), dtype=np.int64)
        self.is_noise = is_noise
        self.real_rows: list = []
        self.noise_rows = 0
        self.batches = 0

    def __call__(self, idx: np.ndarray, labels: np.ndarray) -> None:
        real = np.ones(idx.shape[0], bool) if self.is_noise is None else ~self.is_noise[idx]
        if np.isin(labels[real], self.forget).any():
            raise ZeroGlanceViolation("a forget-class sample reached an unlearning update")
        self.real_rows.extend(idx[real].tolist())
        self.noise_rows += int((~real).sum())
        self.batches += 1


def _check_retain(retain: LabeledDataset, forget_classes) -> None:
    if np.isin(retain.labels, sorted(forget_classes)).any():
        raise ZeroGlanceViolation(f"{retain.name} contains forget-class samples")


def _retain_ds(retain_subset) -> LabeledDataset:
    return retain_subset.subset if isinstance(retain_subset, RetainSubset) else retain_subset


def impair(model: Model, retain_subset, noise_ds: LabeledDataset, lr: float, epochs: int = 1,
           batch_size: int = 64, seed: int = 0, audit: ZeroGlanceAudit | None = None) -> Model:
    """Cross-entropy SGD over the shuffled union of retain samples and noise."""
    retain = _retain_ds(retain_subset)
    forget = sorted(set(noise_ds.labels.tolist()))
    _check_retain(retain, forget)
    stream = concat([retain, noise_ds], name="impair")
    is_noise = np.zeros(len(stream), bool)
    is_noise[len(retain):] = True
    local = ZeroGlanceAudit(forget, is_noise)
    for epoch in range(epochs):
        sgd_epoch(model, stream, lr, batch_size, derive_seed(seed, f"impair/{epoch}"),
                  audit=_chain(local, audit, len(retain)), epoch=epoch)
    return model


def repair(model: Model, retain_subset, lr: float, epochs: int = 1, batch_size: int = 64, seed: int = 0,
           forget_classes=(), audit: ZeroGlanceAudit | None = None) -> Model:
    """Cross-entropy SGD on the retain subset alone."""
    retain = _retain_ds(retain_subset)
    if isinstance(retain_subset, RetainSubset):
        forget_classes = set(forget_classes) | set(retain_subset.forget_classes)
    _check_retain(retain, forget_classes)
    local = ZeroGlanceAudit(forget_classes)
    for epoch in range(epochs):
        sgd_epoch(model, retain, lr, batch_size, derive_seed(seed, f"repair/{epoch}"),
                  audit=_chain(local, audit, len(retain)), epoch=epoch)
    return model


def _chain(local: ZeroGlanceAudit, outer: ZeroGlanceAudit | None, n_real: int):
    if outer is None:
        return local

    def hook(idx, labels):
        local(idx, labels)
        real = idx[idx < n_real] if local.is_noise is not None else idx
        outer.real_rows.extend(real.tolist())
        outer.noise_rows += idx.shape[0] - real.shape[0]
        outer.batches += 1

    return hook


def _snapshot(model: Model, stage: str, eval_sets) -> dict:
    forget_eval, retain_eval = eval_sets
    return {"stage": stage, "A_Df": accuracy(model, forget_eval), "A_Dr": accuracy(model, retain_eval)}


def unsir_unlearn(model: Model, part: ClassPartition, cfg: UnsirConfig, eval_sets=None,
                  retain_subset: RetainSubset | None = None, audit: ZeroGlanceAudit | None = None,
                  return_noises: bool = False):
    """Noise synthesis, then ``cycles`` rounds of impair and repair.

    ``model`` is left untouched; the unlearned copy is returned with an
    :class:`UnlearnRecord`. ``eval_sets`` is ``(forget_eval, retain_eval)``
    and drives the stage snapshots. The forget set inside ``part`` is never
    read: only its class labels and the retain set are used.
    """
    record = UnlearnRecord("unsir", config=cfg.to_dict())
    seeds = {
        "noise": derive_seed(cfg.seed, "unsir/noise"),
        "retain_subset": derive_seed(cfg.seed, "unsir/retain_subset"),
        "impair": derive_seed(cfg.seed, "unsir/impair"),
        "repair": derive_seed(cfg.seed, "unsir/repair"),
    }
    record.seeds = seeds
    if retain_subset is None:
        retain_subset = sample_retain_subset(part, cfg.retain_per_class, seeds["retain_subset"],
                                             fraction=cfg.retain_fraction)
    forget = sorted(part.forget_classes)
    if eval_sets is not None:
        record.initial = _snapshot(model, "before", eval_sets)

    t0 = time.perf_counter()
    frozen = model.clone().freeze()
    noises = synthesize_noises(frozen, forget, replace(cfg.noise, seed=seeds["noise"]))
    noise_ds = build_noise_dataset(noises, cfg.noise.copies, model.spec.num_classes)
    record.stage_seconds["noise"] = time.perf_counter() - t0
    record.stage_counts["noise_matrices"] = len(noises)
    record.noise_norms = {n.class_label: n.norm for n in noises}
    record.noise_ce = {n.class_label: [n.ce_trace[0], n.ce_trace[-1]] for n in noises}

    work = model.clone()
    audit = audit if audit is not None else ZeroGlanceAudit(forget)
    for cycle in range(cfg.cycles):
        t0 = time.perf_counter()
        impair(work, retain_subset, noise_ds, cfg.impair_lr, cfg.impair_epochs, cfg.batch_size,
               derive_seed(seeds["impair"], f"cycle/{cycle}"), audit)
        record.stage_seconds[f"impair/{cycle}"] = time.perf_counter() - t0
        record.stage_counts["impair_epochs"] += cfg.impair_epochs
        if eval_sets is not None:
            record.snapshots.append(_snapshot(work, f"after_impair/{cycle}", eval_sets))
        t0 = time.perf_counter()
        repair(work, retain_subset, cfg.repair_lr, cfg.repair_epochs, cfg.batch_size,
               derive_seed(seeds["repair"], f"cycle/{cycle}"), forget, audit)
        record.stage_seconds[f"repair/{cycle}"] = time.perf_counter() - t0
        record.stage_counts["repair_epochs"] += cfg.repair_epochs
        if eval_sets is not None:
            record.snapshots.append(_snapshot(work, f"after_repair/{cycle}", eval_sets))
    record.real_samples_seen = len(audit.real_rows)
    work.metadata = {"training": {"unlearned_by": "unsir", "forget_classes": forget}}
    if return_noises:
        return work, record, noises
    return work, record


@dataclass(frozen=True)
class BaselineConfig:
    """Hyper-parameters for the reference methods.

    ``retrain_*`` mirror the original training budget. FineTune and NegGrad
    run ``epochs`` passes at ``lr``; NegGrad also stops as soon as training
    forget accuracy falls below ``neggrad_stop``.
    """

    lr: float = 0.02
    epochs: int = 1
    batch_size: int = 64
    retrain_epochs: int = 10
    retrain_lr: float = 0.05
    neggrad_stop: float = 0.01
    seed: int = 0

    def to_dict(self) -> dict:
        return asdict(self)


def run_baseline(kind: str, model: Model, part: ClassPartition, hp: BaselineConfig, eval_sets=None):
    """Retrain, FineTune or NegGrad; returns ``(model, record)``."""
    if kind not in METHODS[1:]:
        raise ConfigError(f"unknown baseline {kind!r}; expected one of {METHODS[1:]}")
    record = UnlearnRecord(kind, config=hp.to_dict())
    seed = derive_seed(hp.seed, f"baseline/{kind}")
    record.seeds = {kind: seed}
    if eval_sets is not None:
        record.initial = _snapshot(model, "before", eval_sets)
    t0 = time.perf_counter()
    if kind == "retrain":
        spec = replace(model.spec, init_seed=derive_seed(seed, "init"))
        out = build_model(spec)
        train(out, part.retain_set, hp.retrain_epochs, hp.batch_size, hp.retrain_lr, seed)
        record.stage_counts["train_epochs"] = hp.retrain_epochs
        record.real_samples_seen = len(part.retain_set) * hp.retrain_epochs
    elif kind == "finetune":
        out = model.clone()
        audit = ZeroGlanceAudit(part.forget_classes)
        for epoch in range(hp.epochs):
            sgd_epoch(out, part.retain_set, hp.lr, hp.batch_size, derive_seed(seed, f"epoch/{epoch}"),
                      audit=audit, epoch=epoch)
        record.stage_counts["finetune_epochs"] = hp.epochs
        record.real_samples_seen = len(audit.real_rows)
    else:
        # gradient ascent on the forget set: deliberately not zero-glance
        out = model.clone()
        record.zero_glance = False
        forget_train = part.forget_set
        done = lambda: accuracy(out, forget_train) < hp.neggrad_stop  # noqa: E731
        steps = 0
        for epoch in range(hp.epochs):
            _, _, n = sgd_epoch(out, forget_train, hp.lr, hp.batch_size, derive_seed(seed, f"epoch/{epoch}"),
                                ascent=True, stop=done, epoch=epoch)
            steps += n
            if done():
                break
        record.stage_counts["neggrad_steps"] = steps
        record.real_samples_seen = min(steps * hp.batch_size, len(forget_train) * hp.epochs)
    record.stage_seconds[kind] = time.perf_counter() - t0
    if eval_sets is not None:
        record.snapshots.append(_snapshot(out, f"after_{kind}", eval_sets))
    out.metadata = {"training": {"unlearned_by": kind, "forget_classes": sorted(part.forget_classes)}}
    return out, record
