"""Experiment orchestration: datasets, original model, UNSIR, baselines, reports.

Every stage seed is ``derive_seed(master_seed, tag)`` with a fixed tag per
stage, so any stage can be rerun on its own. Emitted files carry no clock
readings or absolute paths, which keeps reruns byte-identical; the
manifest lists the sha256 of every file in the run directory.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import config as C
from .data import (ClassPartition, LabeledDataset, SyntheticSpec, generate_synthetic, load_cifar_binary,
                   load_digits_dataset, load_idx, partition, train_test_split)
from .errors import ConfigError
from .metrics import ExceededCap, accuracy, evaluate, relearn_time
from .models import Model, ModelSpec, build_model, load_checkpoint, save_checkpoint, train
from .noise import NoiseConfig, save_noise
from .rng import derive_seed
from .unlearn import BaselineConfig, UnsirConfig, run_baseline, unsir_unlearn

logger = logging.getLogger(__name__)

SCHEMA_VERSION = 1
REPORT_COLUMNS = ("method", "A_Df", "A_Dr", "relearn_time", "total_param_distance", "max_concentration",
                  "max_retain_concentration", "zero_glance")
# Choices the method description leaves open; echoed into every report.
PROTOCOL_NOTES = {
    "optimizer": "plain SGD, no momentum or weight decay",
    "normalization": "loaders scale to [0,1]; synthetic clusters are used as generated",
    "augmentation": "none",
    "original_model": "trained from scratch",
    "accuracy_split": "held-out test split of D_f and D_r",
    "noise_objective": "sum over noise samples of -CE + lam * squared L2 norm, plain gradient descent",
    "relearn_lr": "original training lr",
}


def stage_seed(cfg: C.ExperimentConfig, tag: str) -> int:
    return derive_seed(cfg.seed, tag)


# --------------------------------------------------------------------------
# building blocks
# --------------------------------------------------------------------------


@dataclass
class Bench:
    train: LabeledDataset
    test: LabeledDataset

    def split(self, forget_classes) -> tuple:
        """Training partition and ``(forget_eval, retain_eval)`` test sets."""
        part = partition(self.train, forget_classes)
        held = partition(self.test, forget_classes)
        return part, (held.forget_set, held.retain_set)


def load_bench(cfg: C.ExperimentConfig) -> Bench:
    d = cfg.dataset
    test = None
    if d.kind == "synthetic":
        spec = SyntheticSpec(d.num_classes, d.shape, d.per_class, d.separation, d.noise_sigma)
        full = generate_synthetic(spec, stage_seed(cfg, "data"), "synthetic")
    elif d.kind == "idx":
        full = load_idx(d.images, d.labels, d.num_classes, "idx")
        if d.test_images and d.test_labels:
            test = load_idx(d.test_images, d.test_labels, d.num_classes, "idx-test")
    elif d.kind == "cifar":
        c, h, w = d.shape
        full = load_cifar_binary(list(d.paths), d.num_classes, h, w, c, "cifar")
        if d.test_paths:
            test = load_cifar_binary(list(d.test_paths), d.num_classes, h, w, c, "cifar-test")
    else:
        full = load_digits_dataset()
    if test is None:
        return Bench(*train_test_split(full, d.test_fraction, stage_seed(cfg, "split")))
    return Bench(full, test)


def model_spec(cfg: C.ExperimentConfig, bench: Bench) -> ModelSpec:
    m = cfg.model
    return ModelSpec(m.arch, bench.train.input_shape, bench.train.num_classes, m.hidden, m.channels,
                     stage_seed(cfg, "init"))


def original_model(cfg: C.ExperimentConfig, bench: Bench) -> tuple:
    """Load ``model.checkpoint`` when set, otherwise train; returns ``(model, history)``."""
    if cfg.model.checkpoint:
        model = load_checkpoint(cfg.model.checkpoint)
        if model.spec.num_classes != bench.train.num_classes:
            raise ConfigError("checkpoint class count does not match the dataset")
        return model, None
    model = build_model(model_spec(cfg, bench))
    t = cfg.train
    history = train(model, bench.train, t.epochs, t.batch_size, t.lr, stage_seed(cfg, "train"))
    model.metadata = {"training": {"epochs": t.epochs, "lr": t.lr, "batch_size": t.batch_size,
                                   "seed": stage_seed(cfg, "train"), "dataset": bench.train.name,
                                   "optimizer": "sgd"}}
    return model, history


def unsir_config(cfg: C.ExperimentConfig) -> UnsirConfig:
    u, n = cfg.unsir, cfg.unsir.noise
    per_class = None if u.retain_fraction is not None else u.retain_per_class
    return UnsirConfig(
        impair_lr=u.impair_lr, repair_lr=u.repair_lr, impair_epochs=u.impair_epochs,
        repair_epochs=u.repair_epochs, cycles=u.cycles, batch_size=u.batch_size,
        noise=NoiseConfig(n.steps, n.lr, n.lam, n.batch, n.copies, 0, n.clamp),
        retain_per_class=per_class, retain_fraction=u.retain_fraction, seed=stage_seed(cfg, "unsir"),
    )


def baseline_config(cfg: C.ExperimentConfig) -> BaselineConfig:
    b, t = cfg.baselines, cfg.train
    return BaselineConfig(lr=b.lr, epochs=b.epochs, batch_size=t.batch_size, retrain_epochs=t.epochs,
                          retrain_lr=t.lr, neggrad_stop=b.neggrad_stop, seed=stage_seed(cfg, "baselines"))


def measure(cfg: C.ExperimentConfig, model: Model, original: Model, bench: Bench, eval_sets, forget, method: str,
            target: float | None = None) -> dict:
    """Evaluation report for one model, with relearn time when enabled."""
    report = evaluate(model, *eval_sets, method, forget, reference=original)
    if cfg.metrics.relearn_time and target is not None:
        report.relearn_time = relearn_time(
            model, bench.train, eval_sets[0], target, cfg.train.lr, cfg.metrics.relearn_batch_size,
            cfg.metrics.relearn_samples, cfg.metrics.relearn_cap, stage_seed(cfg, "relearn"))
    return report.to_dict()


# --------------------------------------------------------------------------
# artifact bookkeeping
# --------------------------------------------------------------------------


def sha256_file(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _json_bytes(obj) -> bytes:
    return (json.dumps(obj, indent=2, sort_keys=True, allow_nan=True) + "\n").encode()


def _csv_bytes(header, rows) -> bytes:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    writer.writerows(rows)
    return buf.getvalue().encode()


@dataclass
class RunArtifactSet:
    """Files of one run, keyed by path relative to ``directory``."""

    directory: Path
    files: dict = field(default_factory=dict)
    stages: list = field(default_factory=list)
    reports: dict = field(default_factory=dict)
    status: str = "running"

    def path(self, name: str) -> Path:
        return self.directory / name

    def add(self, name: str, payload: bytes | None = None) -> Path:
        target = self.path(name)
        target.parent.mkdir(parents=True, exist_ok=True)
        if payload is not None:
            target.write_bytes(payload)
        self.files[name] = sha256_file(target)
        return target

    def checkpoint(self, name: str, model: Model) -> Path:
        self.path(name).parent.mkdir(parents=True, exist_ok=True)
        save_checkpoint(model, self.path(name))
        return self.add(name)

    def manifest(self, error: BaseException | None = None) -> dict:
        doc = {
            "schema_version": SCHEMA_VERSION,
            "status": "failed" if error is not None else "complete",
            "completed_stages": list(self.stages),
            "files": dict(sorted(self.files.items())),
        }
        if error is not None:
            doc["error"] = f"{type(error).__name__}: {error}"
        return doc

    def finish(self, error: BaseException | None = None) -> None:
        self.status = "failed" if error is not None else "complete"
        self.path("manifest.json").write_bytes(_json_bytes(self.manifest(error)))

    def verify(self) -> bool:
        """True when every file listed in the manifest still hashes the same."""
        doc = json.loads(self.path("manifest.json").read_text())
        return all(self.path(n).exists() and sha256_file(self.path(n)) == h for n, h in doc["files"].items())


def _open_run(cfg: C.ExperimentConfig, out_dir) -> RunArtifactSet:
    directory = Path(out_dir if out_dir is not None else cfg.output_dir)
    directory.mkdir(parents=True, exist_ok=True)
    run = RunArtifactSet(directory)
    run.add("config.txt", C.dumps(cfg.replace(output_dir=".", workers=1)).encode())
    return run


def _run_guarded(run: RunArtifactSet, body) -> RunArtifactSet:
    try:
        body(run)
    except BaseException as exc:
        run.finish(exc)
        raise
    run.finish()
    return run


def _config_echo(cfg: C.ExperimentConfig) -> dict:
    d = cfg.to_dict()
    d.pop("output_dir")
    d.pop("workers")
    return d


def _report_doc(cfg: C.ExperimentConfig, kind: str, **body) -> dict:
    doc = {"schema_version": SCHEMA_VERSION, "kind": kind, "seed": cfg.seed, "config": _config_echo(cfg),
           "protocol": PROTOCOL_NOTES}
    doc.update(body)
    return doc


def _method_row(method: dict, record) -> list:
    return [method["method"], method["A_Df"], method["A_Dr"],
            "" if method["relearn_time"] is None else method["relearn_time"],
            "" if method["total_param_distance"] is None else method["total_param_distance"],
            method["max_concentration"], method["max_retain_concentration"],
            "" if record is None else str(record["zero_glance"]).lower()]


def _emit_plot_data(run: RunArtifactSet, methods: list, records: dict, noises, history) -> None:
    rows = [[m["method"], name, d] for m in methods for name, d in (m["per_layer_distances"] or {}).items()]
    run.add("plot_layer_distances.csv", _csv_bytes(("method", "layer", "distance"), rows))
    rows = [[m["method"], k, c] for m in methods for k, c in enumerate(m["prediction_histogram"])]
    run.add("plot_histograms.csv", _csv_bytes(("method", "class", "count"), rows))
    rows = [[n.class_label, s, j, ce] for n in noises for s, (j, ce) in enumerate(zip(n.loss_trace, n.ce_trace))]
    run.add("plot_noise_trace.csv", _csv_bytes(("class", "step", "objective", "ce"), rows))
    rows = [[name, s["stage"], s["A_Df"], s["A_Dr"]]
            for name, rec in records.items() for s in [rec["initial"], *rec["snapshots"]] if s]
    run.add("plot_stages.csv", _csv_bytes(("method", "stage", "A_Df", "A_Dr"), rows))
    if history is not None:
        rows = [[e, l, a] for e, (l, a) in enumerate(zip(history.loss, history.accuracy))]
        run.add("plot_training.csv", _csv_bytes(("epoch", "loss", "accuracy"), rows))


# --------------------------------------------------------------------------
# workflows
# --------------------------------------------------------------------------


def run_training(cfg: C.ExperimentConfig, out_dir=None) -> RunArtifactSet:
    """Train (or load) the original model and store it as ``original.ckpt``."""

    def body(run):
        bench = load_bench(cfg)
        model, history = original_model(cfg, bench)
        run.checkpoint("original.ckpt", model)
        run.stages.append("train")
        doc = _report_doc(cfg, "train", test_accuracy=accuracy(model, bench.test),
                          history=history.to_dict() if history else None)
        run.reports["train"] = doc
        run.add("report.json", _json_bytes(doc))

    return _run_guarded(_open_run(cfg, out_dir), body)


def run_experiment(cfg: C.ExperimentConfig, out_dir=None, baselines: bool = True) -> RunArtifactSet:
    """Original model, UNSIR, optional baselines, evaluation and reports."""

    def body(run):
        bench = load_bench(cfg)
        forget = sorted(set(cfg.forget.classes))
        part, eval_sets = bench.split(forget)
        model, history = original_model(cfg, bench)
        run.checkpoint("original.ckpt", model)
        run.stages.append("train")

        target = accuracy(model, eval_sets[0])
        original = evaluate(model, *eval_sets, "original", forget).to_dict()
        run.stages.append("evaluate_original")

        unlearned, record, noises = unsir_unlearn(model, part, unsir_config(cfg), eval_sets, return_noises=True)
        run.checkpoint("unlearned.ckpt", unlearned)
        save_noise(noises, run.path("noise.ckpt"))
        run.add("noise.ckpt")
        run.stages.append("unsir")
        methods = [measure(cfg, unlearned, model, bench, eval_sets, forget, "unsir", target)]
        records = {"unsir": record.to_dict()}
        run.stages.append("evaluate_unsir")

        for kind in (cfg.baselines.methods if baselines else ()):
            out, rec = run_baseline(kind, model, part, baseline_config(cfg), eval_sets)
            run.checkpoint(f"{kind}.ckpt", out)
            methods.append(measure(cfg, out, model, bench, eval_sets, forget, kind, target))
            records[kind] = rec.to_dict()
            run.stages.append(kind)

        doc = _report_doc(cfg, "experiment", forget_classes=forget, original=original,
                          relearn_target=target, methods=methods, records=records,
                          label_names=list(bench.train.label_names))
        run.reports["experiment"] = doc
        run.add("report.json", _json_bytes(doc))
        run.add("report.csv", _csv_bytes(REPORT_COLUMNS, [_method_row(m, records.get(m["method"])) for m in methods]))
        _emit_plot_data(run, methods, records, noises, history)
        run.stages.append("report")

    return _run_guarded(_open_run(cfg, out_dir), body)


def check_requests(requests) -> list:
    """Ordered forget requests as sorted lists; overlaps are a config error."""
    out, seen = [], set()
    for req in requests:
        classes = sorted({int(c) for c in req})
        if not classes:
            raise ConfigError("empty forget request")
        overlap = seen.intersection(classes)
        if overlap:
            raise ConfigError(f"forget requests overlap on classes {sorted(overlap)}")
        seen.update(classes)
        out.append(classes)
    if not out:
        raise ConfigError("forget.sequence is empty")
    return out


def run_sequential(cfg: C.ExperimentConfig, out_dir=None) -> RunArtifactSet:
    """Apply UNSIR once per request, each round starting from the previous output.

    Round ``k`` draws its retain subset from classes never forgotten so far
    and synthesizes noise only for the classes of request ``k``. Accuracies
    are reported over every class forgotten up to that round.
    """
    requests = check_requests(cfg.forget.sequence)

    def body(run):
        bench = load_bench(cfg)
        model, _ = original_model(cfg, bench)
        run.checkpoint("original.ckpt", model)
        run.stages.append("train")
        ucfg = unsir_config(cfg)
        current, forgotten, rounds = model, [], []
        for k, req in enumerate(requests):
            forgotten = sorted(forgotten + req)
            cumulative, eval_sets = bench.split(forgotten)
            fresh = partition(bench.train, req)
            part = ClassPartition(frozenset(req), fresh.forget_set, cumulative.retain_set)
            current, record = unsir_unlearn(current, part, ucfg, eval_sets)
            run.checkpoint(f"round_{k}.ckpt", current)
            final = record.snapshots[-1]
            rounds.append({"round": k, "request": req, "forgotten": list(forgotten),
                           "A_Df": final["A_Df"], "A_Dr": final["A_Dr"], "record": record.to_dict()})
            run.stages.append(f"round_{k}")
        last_eval = bench.split(forgotten)[1]
        original = {"A_Dr": accuracy(model, last_eval[1]), "A_Df": accuracy(model, last_eval[0])}
        doc = _report_doc(cfg, "sequential", requests=requests, original=original, rounds=rounds)
        run.reports["sequential"] = doc
        run.add("report.json", _json_bytes(doc))
        rows = [[r["round"], " ".join(map(str, r["request"])), " ".join(map(str, r["forgotten"])),
                 r["A_Df"], r["A_Dr"]] for r in rounds]
        run.add("report.csv", _csv_bytes(("round", "request", "forgotten", "A_Df", "A_Dr"), rows))
        run.stages.append("report")

    return _run_guarded(_open_run(cfg, out_dir), body)


def sweep_config(cfg: C.ExperimentConfig, axis: str, value) -> C.ExperimentConfig:
    """``cfg`` with one sweep axis set to ``value``."""
    key = {"impair_lr": "unsir.impair_lr", "repair_lr": "unsir.repair_lr", "lambda": "unsir.noise.lam",
           "retain_fraction": "unsir.retain_fraction", "repair_steps": "unsir.repair_epochs",
           "cycles": "unsir.cycles"}.get(axis)
    if key is None:
        raise ConfigError(f"unknown sweep axis {axis!r}; expected one of {C.SWEEP_AXES}")
    if axis in ("repair_steps", "cycles"):
        if float(value) != int(value):
            raise ConfigError(f"{axis} values must be integers, got {value}")
        value = int(value)
    else:
        value = float(value)
    return cfg.replace(**{key: value})


def _sweep_point(args) -> tuple:
    cfg, model, bench, forget = args
    part, eval_sets = bench.split(forget)
    unlearned, record = unsir_unlearn(model, part, unsir_config(cfg), eval_sets)
    return unlearned, record


def run_sweep(cfg: C.ExperimentConfig, axis: str | None = None, values=None, out_dir=None) -> RunArtifactSet:
    """One UNSIR run per value, all starting from the same original model."""
    axis = axis if axis is not None else cfg.sweep.axis
    values = list(values if values is not None else cfg.sweep.values)
    if axis is None or not values:
        raise ConfigError("a sweep needs an axis and at least one value")
    points = [sweep_config(cfg, axis, v) for v in values]

    def body(run):
        bench = load_bench(cfg)
        forget = sorted(set(cfg.forget.classes))
        model, _ = original_model(cfg, bench)
        run.checkpoint("original.ckpt", model)
        run.stages.append("train")
        jobs = [(p, model, bench, forget) for p in points]
        if cfg.workers > 1 and len(jobs) > 1:
            with ProcessPoolExecutor(max_workers=cfg.workers) as pool:
                results = list(pool.map(_sweep_point, jobs))
        else:
            results = [_sweep_point(j) for j in jobs]
        rows, entries = [], []
        for i, (value, (unlearned, record)) in enumerate(zip(values, results)):
            run.checkpoint(f"sweep_{i}/unlearned.ckpt", unlearned)
            final = record.snapshots[-1]
            impaired = record.snapshots[0]
            norm = float(np.mean(list(record.noise_norms.values())))
            metrics = {"A_Df": final["A_Df"], "A_Dr": final["A_Dr"], "A_Df_after_impair": impaired["A_Df"],
                       "A_Dr_after_impair": impaired["A_Dr"], "noise_norm": norm}
            rows += [[axis, value, name, v] for name, v in metrics.items()]
            entries.append({"value": value, "metrics": metrics, "record": record.to_dict()})
            run.stages.append(f"sweep_{i}")
        part, eval_sets = bench.split(forget)
        original = {"A_Df": accuracy(model, eval_sets[0]), "A_Dr": accuracy(model, eval_sets[1])}
        doc = _report_doc(cfg, "sweep", axis=axis, values=values, original=original, points=entries)
        run.reports["sweep"] = doc
        run.add("report.json", _json_bytes(doc))
        run.add("sweep.csv", _csv_bytes(("axis", "value", "metric", "metric_value"), rows))
        run.stages.append("report")

    return _run_guarded(_open_run(cfg, out_dir), body)


def format_table(doc: dict) -> str:
    """Plain-text method table for an experiment report."""
    lines = [f"{'method':<10} {'A_Df':>8} {'A_Dr':>8} {'RT':>6} {'dist':>10} {'max_conc':>9}"]
    for m in doc.get("methods", []):
        rt = "-" if m["relearn_time"] is None else str(m["relearn_time"])
        dist = "-" if m["total_param_distance"] is None else f"{m['total_param_distance']:.3f}"
        lines.append(f"{m['method']:<10} {100 * m['A_Df']:>7.2f}% {100 * m['A_Dr']:>7.2f}% {rt:>6} {dist:>10} "
                     f"{m['max_retain_concentration']:>9.2f}")
    return "\n".join(lines)


def relearn_epochs(value) -> float:
    """Numeric view of a relearn time: ``inf`` for an exceeded cap."""
    if isinstance(value, ExceededCap):
        return value.as_number()
    if isinstance(value, str) and value.startswith(">"):
        return float("inf")
    return float(value)
