"""Command-line interface.

Typical sequence::

    mmoe train-mediator --config configs/mnist.ini
    mmoe train-experts --config configs/mnist.ini
    mmoe train-confidence --config configs/mnist.ini
    mmoe eval --config configs/mnist.ini --mode mmoe --threshold 4
    mmoe sweep-threshold --config configs/mnist.ini --t-list 1,2,4,6,8

The ensemble lives in ``<out>/model.mmoe`` between steps.
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import archive, harness, nn, plots
from .builder import ConfigError
from .config import RunConfig, load_config
from .data import IdxError, LabeledDataset
from .gating import RECORD_HEADER, GatingConfig, predict_batch
from .partition import PartitionError
from .training import (DivergenceError, add_expert_incremental, new_ensemble, train_confidence_heads,
                       train_experts, train_mediator)

log = logging.getLogger("mmoe")

MODEL_FILE = "model.mmoe"


class CliError(RuntimeError):
    pass


def _float_list(text):
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}")


def _int_list(text):
    try:
        out = []
        for part in text.split(","):
            part = part.strip()
            if "-" in part:
                lo, hi = part.split("-")
                out.extend(range(int(lo), int(hi) + 1))
            elif part:
                out.append(int(part))
        return out
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="run configuration (INI)")
    common.add_argument("--seed", type=int, help="override [run] seed")
    common.add_argument("--out", type=Path, help="override [run] out directory")
    common.add_argument("--threshold", type=float, help="override [gating] threshold T")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="mmoe", description="Mediated mixture of experts")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("train-mediator", parents=[common], help="train the full-class mediator")
    sub.add_parser("train-experts", parents=[common], help="finetune one expert per superclass")
    sub.add_parser("train-confidence", parents=[common], help="train the confidence heads")
    p = sub.add_parser("add-expert", parents=[common], help="add a superclass incrementally")
    p.add_argument("--classes", type=_int_list, required=True, help="new fine classes, e.g. 7-9")
    p = sub.add_parser("eval", parents=[common], help="evaluate one mode on the test split")
    p.add_argument("--mode", choices=["baseline", "branching", "unmediated", "mmoe"], default="mmoe")
    p = sub.add_parser("sweep-threshold", parents=[common], help="accuracy/complexity against T")
    p.add_argument("--t-list", type=_float_list, default=[0.5, 1, 2, 3, 4, 6, 8, 10, 12, 16])
    p = sub.add_parser("sweep-shared", parents=[common], help="retrain for each shared-prefix depth")
    p.add_argument("--k-list", type=_int_list, default=None)
    p = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient check")
    p.add_argument("--nets", type=int, default=20)
    p.add_argument("--tol", type=float, default=1e-4)
    return parser


def _config(args) -> RunConfig:
    if args.config is None:
        raise ConfigError("--config is required for this command")
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    if args.out is not None:
        cfg.out = args.out
    if args.threshold is not None:
        cfg.gating = GatingConfig(args.threshold, cfg.gating.mediator_weight)
    return cfg


def _covered(ds: LabeledDataset, classes) -> LabeledDataset:
    return ds.where(np.isin(ds.labels, list(classes)))


def _load(cfg: RunConfig):
    path = cfg.out / MODEL_FILE
    if not path.is_file():
        raise CliError(f"no model at {path}; run train-mediator first")
    ens = archive.load_model(path)
    return ens


def _save(cfg: RunConfig, ens) -> None:
    cfg.out.mkdir(parents=True, exist_ok=True)
    archive.save_model(ens, cfg.out / MODEL_FILE)


def _write(path: Path, text: str) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)
    print(path)
    return path


def cmd_train_mediator(args) -> int:
    cfg = _config(args)
    train, _ = cfg.datasets()
    smap = cfg.partition()
    ens = new_ensemble(cfg.architecture, smap, cfg.gating, seed=cfg.seed)
    result = train_mediator(ens, _covered(train, smap.mapping), cfg.training)
    _save(cfg, ens)
    _write(cfg.out / "curves" / "mediator.csv", result.csv())
    return 0


def cmd_train_experts(args) -> int:
    cfg = _config(args)
    train, _ = cfg.datasets()
    ens = _load(cfg)
    results = train_experts(ens, _covered(train, ens.partition.mapping), cfg.training)
    _save(cfg, ens)
    for i, res in enumerate(results):
        _write(cfg.out / "curves" / f"expert{i}.csv", res.csv())
    plots.curves_figure({f"expert {i}": r for i, r in enumerate(results)}, cfg.out / "curves" / "experts.png")
    return 0


def cmd_train_confidence(args) -> int:
    cfg = _config(args)
    train, _ = cfg.datasets()
    ens = _load(cfg)
    results = train_confidence_heads(ens, _covered(train, ens.partition.mapping), cfg.training)
    _save(cfg, ens)
    for i, res in enumerate(results):
        _write(cfg.out / "curves" / f"confidence{i}.csv", res.csv())
    return 0


def cmd_add_expert(args) -> int:
    cfg = _config(args)
    train, _ = cfg.datasets()
    ens = _load(cfg)
    classes = set(ens.partition.mapping) | set(args.classes)
    results = add_expert_incremental(ens, _covered(train, classes), args.classes, cfg.training)
    ens.gating = cfg.gating
    _save(cfg, ens)
    n = ens.partition.n_superclasses - 1
    _write(cfg.out / "curves" / f"expert{n}.csv", results["expert"].csv())
    _write(cfg.out / "curves" / "mediator-increment.csv", results["mediator"].csv())
    return 0


def cmd_eval(args) -> int:
    cfg = _config(args)
    _, test = cfg.datasets()
    ens = _load(cfg)
    test = _covered(test, ens.partition.mapping)
    gating = cfg.gating
    report = harness.evaluate(ens, test, gating, args.mode)
    _write(cfg.out / f"eval_{args.mode}.csv", report.to_csv())
    if args.mode in ("mmoe", "unmediated"):
        run_cfg = gating if args.mode == "mmoe" else GatingConfig(gating.threshold, 0.0)
        records = predict_batch(ens, test.images, run_cfg).records(test.labels)
        _write(cfg.out / f"predictions_{args.mode}.tsv",
               "\n".join([RECORD_HEADER] + [r.to_line() for r in records]) + "\n")
    print(f"{args.mode} top1={report.top1:.4f}")
    return 0


def cmd_sweep_threshold(args) -> int:
    cfg = _config(args)
    _, test = cfg.datasets()
    ens = _load(cfg)
    test = _covered(test, ens.partition.mapping)
    rows = harness.threshold_sweep(ens, test, args.t_list, cfg.gating.mediator_weight)
    csv = _write(cfg.out / "sweep_threshold.csv", harness.sweep_csv(rows))
    base = harness.evaluate(ens, test, mode="baseline").top1
    plots.threshold_figure(rows, csv.with_suffix(".png"), base, ens.param_budget().traditional_moe)
    return 0


def cmd_sweep_shared(args) -> int:
    cfg = _config(args)
    train, test = cfg.datasets()
    smap = cfg.partition()
    k_list = args.k_list if args.k_list is not None else list(range(cfg.architecture.n_conv + 1))
    rows = harness.shared_layers_sweep(cfg.architecture, smap, _covered(train, smap.mapping),
                                       _covered(test, smap.mapping), k_list, cfg.training, cfg.gating)
    csv = _write(cfg.out / "sweep_shared.csv", harness.shared_csv(rows))
    plots.shared_figure(rows, csv.with_suffix(".png"))
    return 0


def cmd_gradcheck(args) -> int:
    seed = 0 if args.seed is None else args.seed
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(args.nets):
        net, x, labels = nn.random_small_net(rng)
        worst = max(worst, nn.gradcheck(net, x, labels))
    ok = worst < args.tol
    print(f"gradcheck nets={args.nets} max_rel_error={worst:.3e} {'PASS' if ok else 'FAIL'}")
    return 0 if ok else 1


COMMANDS = {
    "train-mediator": cmd_train_mediator,
    "train-experts": cmd_train_experts,
    "train-confidence": cmd_train_confidence,
    "add-expert": cmd_add_expert,
    "eval": cmd_eval,
    "sweep-threshold": cmd_sweep_threshold,
    "sweep-shared": cmd_sweep_shared,
    "gradcheck": cmd_gradcheck,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (ConfigError, PartitionError, IdxError, archive.ArchiveError, CliError,
            DivergenceError, OSError, ValueError) as exc:
        print(f"mmoe {args.command}: error: {exc}", file=sys.stderr)
        return 1


def run_cli(argv) -> int:
    """Like ``main`` but returns argparse's exit status instead of raising SystemExit."""
    try:
        return main(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else 1


if __name__ == "__main__":
    sys.exit(main())
