"""Command-line entry point: ``unsir <subcommand> --config FILE [--seed N]``.

Exit status is 0 on success, 1 for configuration problems (bad file, bad
flag, bad value) and 2 for runtime failures such as divergence or a
corrupt input file.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import config as C
from . import runner as R
from .errors import ConfigError, UnsirError
from .metrics import evaluate, relearn_time
from .models import load_checkpoint, save_checkpoint
from .unlearn import run_baseline, unsir_unlearn

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def _seed(text: str) -> int:
    value = int(text, 0)
    if not 0 <= value < 2**64:
        raise argparse.ArgumentTypeError(f"seed {text} is not an unsigned 64-bit integer")
    return value


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="unsir", description="Class unlearning with error-maximizing noise (impair/repair).")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def command(name, help_text):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", type=Path, help="experiment config (flat key = value text)")
        p.add_argument("--seed", type=_seed, help="override the master seed")
        p.add_argument("--out", type=Path, help="output directory (default: output_dir from the config)")
        p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                       help="override one config key, e.g. --set unsir.cycles=2")
        return p

    command("train", "train the original model")
    p = command("unlearn", "run UNSIR only")
    p.add_argument("--checkpoint", type=Path, help="original model to unlearn (default: train one)")
    p = command("baseline", "run one reference method")
    p.add_argument("--kind", required=True, choices=C.BASELINES)
    p.add_argument("--checkpoint", type=Path, help="original model (default: train one)")
    p = command("evaluate", "accuracies, prediction spread and weight distance of a checkpoint")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--reference", type=Path, help="checkpoint to measure weight distance against")
    p = command("relearn-time", "epochs needed to relearn the forget classes")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--original", type=Path, required=True, help="checkpoint whose forget accuracy is the target")
    p = command("sweep", "one UNSIR run per value of an ablation axis")
    p.add_argument("--axis", choices=C.SWEEP_AXES)
    p.add_argument("--values", help="comma-separated values")
    p = command("sequential", "successive forget requests")
    p.add_argument("--requests", help='ordered requests, e.g. "0;1;2" or "1,2;3"')
    p = command("report", "full experiment (UNSIR and baselines) and its method table")
    p.add_argument("--from-run", type=Path, help="print the table of an existing run instead")
    return parser


def load_config(args) -> C.ExperimentConfig:
    cfg = C.load(args.config) if args.config else C.ExperimentConfig()
    changes = dict(C.parse_override(o) for o in args.overrides)
    if args.seed is not None:
        changes["seed"] = args.seed
    if changes:
        cfg = cfg.replace(**changes)
    return cfg.with_env()


def _out(args, cfg) -> Path:
    return Path(args.out) if args.out else Path(cfg.output_dir)


def _print_json(doc) -> None:
    print(json.dumps(doc, indent=2, sort_keys=True))


def _with_checkpoint(cfg, path):
    return cfg.replace(**{"model.checkpoint": str(path)}) if path else cfg


def _single_method(args, cfg, method: str) -> int:
    cfg = _with_checkpoint(cfg, args.checkpoint)
    out = _out(args, cfg)
    bench = R.load_bench(cfg)
    forget = sorted(set(cfg.forget.classes))
    part, eval_sets = bench.split(forget)
    model, _ = R.original_model(cfg, bench)
    if method == "unsir":
        result, record = unsir_unlearn(model, part, R.unsir_config(cfg), eval_sets)
        name = "unlearned.ckpt"
    else:
        result, record = run_baseline(method, model, part, R.baseline_config(cfg), eval_sets)
        name = f"{method}.ckpt"
    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(result, out / name)
    _print_json({"checkpoint": str(out / name), "record": record.to_dict()})
    return EXIT_OK


def _parse_requests(text: str) -> list:
    try:
        return [[int(c) for c in part.split(",") if c.strip()] for part in text.split(";")]
    except ValueError as exc:
        raise ConfigError(f"cannot parse requests {text!r}") from exc


def dispatch(args) -> int:
    cfg = load_config(args)
    cmd = args.command
    if cmd == "train":
        run = R.run_training(cfg, _out(args, cfg))
        _print_json({"directory": str(run.directory), "test_accuracy": run.reports["train"]["test_accuracy"]})
    elif cmd == "unlearn":
        return _single_method(args, cfg, "unsir")
    elif cmd == "baseline":
        return _single_method(args, cfg, args.kind)
    elif cmd == "evaluate":
        bench = R.load_bench(cfg)
        forget = sorted(set(cfg.forget.classes))
        _, eval_sets = bench.split(forget)
        model = load_checkpoint(args.checkpoint)
        reference = load_checkpoint(args.reference) if args.reference else None
        _print_json(evaluate(model, *eval_sets, Path(args.checkpoint).stem, forget, reference).to_dict())
    elif cmd == "relearn-time":
        bench = R.load_bench(cfg)
        _, eval_sets = bench.split(sorted(set(cfg.forget.classes)))
        model, original = load_checkpoint(args.checkpoint), load_checkpoint(args.original)
        target = R.accuracy(original, eval_sets[0])
        m = cfg.metrics
        rt = relearn_time(model, bench.train, eval_sets[0], target, cfg.train.lr, m.relearn_batch_size,
                          m.relearn_samples, m.relearn_cap, R.stage_seed(cfg, "relearn"))
        _print_json({"target": target, "relearn_time": rt if isinstance(rt, int) else str(rt)})
    elif cmd == "sweep":
        values = [float(v) for v in args.values.split(",")] if args.values else None
        run = R.run_sweep(cfg, args.axis, values, _out(args, cfg))
        for p in run.reports["sweep"]["points"]:
            m = p["metrics"]
            print(f"{run.reports['sweep']['axis']}={p['value']}: A_Df={m['A_Df']:.4f} A_Dr={m['A_Dr']:.4f} "
                  f"noise_norm={m['noise_norm']:.3f}")
    elif cmd == "sequential":
        if args.requests:
            cfg = cfg.replace(**{"forget.sequence": _parse_requests(args.requests)})
        run = R.run_sequential(cfg, _out(args, cfg))
        for r in run.reports["sequential"]["rounds"]:
            print(f"round {r['round']} forget {r['request']}: A_Df={r['A_Df']:.4f} A_Dr={r['A_Dr']:.4f}")
    elif cmd == "report":
        if args.from_run:
            doc = json.loads((Path(args.from_run) / "report.json").read_text())
        else:
            doc = R.run_experiment(cfg, _out(args, cfg)).reports["experiment"]
        print(R.format_table(doc))
    return EXIT_OK


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return dispatch(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (UnsirError, FloatingPointError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
