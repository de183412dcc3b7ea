"""Readouts for unlearning: accuracies, relearn time, weight distance, prediction spread."""

from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass

import numpy as np

from .data import LabeledDataset
from .errors import ConfigError, ContractError
from .models import Model, predict, sgd_epoch
from .rng import SplitMix64, derive_seed


def accuracy(model: Model, ds: LabeledDataset) -> float:
    if len(ds) == 0:
        raise ContractError(f"accuracy of an empty dataset ({ds.name}) is undefined")
    pred, _ = predict(model, ds.samples)
    return float((pred == ds.labels).mean())


@dataclass(frozen=True)
class ExceededCap:
    """Relearning did not reach the target within ``cap`` epochs."""

    cap: int

    def __str__(self):
        return f">{self.cap}"

    def as_number(self) -> float:
        return float("inf")


def relearn_time(model: Model, full_train: LabeledDataset, forget_eval: LabeledDataset, target: float,
                 lr: float, batch_size: int, samples_per_epoch: int = 500, cap: int = 100,
                 seed: int = 0):
    """Epochs of retraining on fresh random draws until forget accuracy is back.

    Every epoch draws ``samples_per_epoch`` samples without replacement from
    ``full_train`` (forget classes included), trains one epoch on a private
    copy of ``model`` and measures accuracy on ``forget_eval``. Epoch 0 is the
    check before any training, so a model already at ``target`` scores 0.
    """
    if cap < 1:
        raise ConfigError(f"relearn cap must be at least 1, got {cap}")
    if accuracy(model, forget_eval) >= target:
        return 0
    work = model.clone()
    for epoch in range(1, cap + 1):
        rng = SplitMix64(derive_seed(seed, f"relearn/draw/{epoch}"))
        draw = full_train.subset(np.sort(rng.choice(len(full_train), samples_per_epoch)))
        sgd_epoch(work, draw, lr, batch_size, derive_seed(seed, f"relearn/shuffle/{epoch}"), epoch=epoch)
        if accuracy(work, forget_eval) >= target:
            return epoch
    return ExceededCap(cap)


def _check_same_layout(a: Model, b: Model) -> None:
    if a.spec != b.spec or list(a.params) != list(b.params):
        raise ContractError("weight distance needs models with identical specs and parameter names")


def layer_weight_distance(a: Model, b: Model) -> tuple:
    """Per-parameter Euclidean distance and the distance of the full flat vectors."""
    _check_same_layout(a, b)
    per_layer = OrderedDict()
    for name in a.params:
        d = a.params[name].data.astype(np.float64) - b.params[name].data.astype(np.float64)
        per_layer[name] = float(np.sqrt((d * d).sum()))
    flat_a = np.concatenate([p.data.astype(np.float64).ravel() for p in a.params.values()])
    flat_b = np.concatenate([p.data.astype(np.float64).ravel() for p in b.params.values()])
    return per_layer, float(np.linalg.norm(flat_a - flat_b))


def prediction_histogram(model: Model, forget_eval: LabeledDataset) -> tuple:
    """Counts of predicted classes over forget samples and the largest share."""
    if len(forget_eval) == 0:
        raise ContractError("prediction histogram of an empty dataset")
    pred, _ = predict(model, forget_eval.samples)
    counts = np.bincount(pred, minlength=model.spec.num_classes)
    return counts, float(counts.max() / counts.sum())


def max_retain_concentration(counts: np.ndarray, forget_classes) -> float:
    """Largest share of forget-set predictions landing on a single retain class."""
    retain = [c for c in range(len(counts)) if c not in set(forget_classes)]
    return float(counts[retain].max() / counts.sum())


@dataclass
class EvaluationReport:
    method: str
    forget_accuracy: float
    retain_accuracy: float
    relearn_time: object = None
    per_layer_distances: dict | None = None
    total_param_distance: float | None = None
    prediction_histogram: list | None = None
    max_concentration: float | None = None
    max_retain_concentration: float | None = None

    def to_dict(self) -> dict:
        rt = self.relearn_time
        return {
            "method": self.method,
            "A_Df": self.forget_accuracy,
            "A_Dr": self.retain_accuracy,
            "relearn_time": str(rt) if isinstance(rt, ExceededCap) else rt,
            "per_layer_distances": self.per_layer_distances,
            "total_param_distance": self.total_param_distance,
            "prediction_histogram": self.prediction_histogram,
            "max_concentration": self.max_concentration,
            "max_retain_concentration": self.max_retain_concentration,
        }


def evaluate(model: Model, forget_eval: LabeledDataset, retain_eval: LabeledDataset, method: str,
             forget_classes=(), reference: Model | None = None) -> EvaluationReport:
    """Accuracies, prediction spread and (given ``reference``) weight distance."""
    report = EvaluationReport(method, accuracy(model, forget_eval), accuracy(model, retain_eval))
    counts, conc = prediction_histogram(model, forget_eval)
    report.prediction_histogram = counts.tolist()
    report.max_concentration = conc
    report.max_retain_concentration = max_retain_concentration(counts, forget_classes)
    if reference is not None and reference.spec == model.spec:
        per_layer, total = layer_weight_distance(reference, model)
        report.per_layer_distances = dict(per_layer)
        report.total_param_distance = total
    return report
