"""Command-line front end: train-base, resrep, convert, eval, ablate.

Every command writes its checkpoint to ``--out`` and side files next to it
(``<out>.log.csv``, ``<out>.events.jsonl``, ``<out>.trace.csv``,
``<out>.widths.csv`` / ``.json``, ``<out>.minimal.json``).
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import checkpoint
from .data import DataError, Dataset, load_cifar10, make_synthetic
from .flops import model_flops
from .graph import evaluate
from .models import ARCHS, ArchSpec, build
from .reparam import EPSILON, FullyPrunedError, convert_model, insert_compactors, prune_channels
from .tensor import ShapeError
from .train import (
    ResRepConfig,
    SparsityTrainer,
    Trainer,
    deduced_flops,
    minimal_structure,
)

log = logging.getLogger("resrep")


class UsageError(Exception):
    """Bad arguments discovered after parsing; exits with status 2."""


# data -------------------------------------------------------------------------


def data_config(args, fallback=None) -> dict:
    cfg = dict(fallback or {})
    for key in ("data", "data_dir", "num_classes", "train_size", "test_size", "noise", "image_size", "data_seed"):
        v = getattr(args, key, None)
        if v is not None:
            cfg[key] = v
    cfg.setdefault("data", "synthetic")
    defaults = {"num_classes": 10, "train_size": 2000, "test_size": 1000, "noise": 4.0, "image_size": 8, "data_seed": 0}
    if cfg["data"] == "synthetic":
        for k, v in defaults.items():
            cfg.setdefault(k, v)
    return cfg


def load_data(cfg: dict, split: str) -> Dataset:
    if cfg["data"] == "synthetic":
        n = cfg["train_size"] if split == "train" else cfg["test_size"]
        size = cfg["image_size"]
        return make_synthetic(cfg["num_classes"], n, cfg["data_seed"], cfg["noise"], (3, size, size), split)
    if cfg["data"] == "cifar10":
        return load_cifar10(cfg.get("data_dir"), split)
    raise UsageError(f"unknown dataset {cfg['data']!r}")


def input_shape(cfg):
    if cfg["data"] == "synthetic":
        return (3, cfg["image_size"], cfg["image_size"]), cfg["num_classes"]
    return (3, 32, 32), 10


# outputs -----------------------------------------------------------------------


def write_csv(path, header, rows):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    checkpoint.atomic_write(path, buf.getvalue())


def side(out, suffix):
    return Path(f"{out}{suffix}")


def write_training_log(out, history):
    keys = ["epoch", "lr", "loss", "accuracy"]
    extra = [k for k in ("masked", "test_accuracy") if any(k in h for h in history)]
    write_csv(side(out, ".log.csv"), keys + extra, [[h.get(k, "") for k in keys + extra] for h in history])


def write_events(out, events):
    checkpoint.atomic_write(side(out, ".events.jsonl"), "".join(json.dumps(e, sort_keys=True) + "\n" for e in events))


def write_trace(out, rows):
    write_csv(side(out, ".trace.csv"), ["epoch", "surviving_sq_sum", "pruned_sq_sum"], rows)


def config_from(args) -> ResRepConfig:
    try:
        return ResRepConfig(
            lam=args.lam,
            theta_init=args.theta_init,
            theta_step=args.theta_step,
            selection_interval=args.interval,
            warmup_epochs=args.warmup_epochs,
            flops_target=args.flops_target,
            compactor_momentum=args.compactor_momentum,
            total_epochs=args.epochs,
            batch_size=args.batch_size,
            initial_lr=args.lr,
            seed=args.seed,
        )
    except ValueError as e:
        raise UsageError(str(e)) from None


# commands ------------------------------------------------------------------------


def cmd_train_base(args):
    cfg = data_config(args)
    shape, classes = input_shape(cfg)
    widths = tuple(int(w) for w in args.widths.split(",")) if args.widths else ()
    spec = ArchSpec(args.arch, shape, widths, 0, classes, args.seed)
    try:
        model = build(spec)
    except ValueError as e:
        raise UsageError(str(e)) from None
    train, test = load_data(cfg, "train"), load_data(cfg, "test")
    trainer = Trainer(model, train, initial_lr=args.lr, total_epochs=args.epochs, batch_size=args.batch_size, seed=args.seed)
    while trainer.epoch < args.epochs:
        rec = trainer.run_epoch()
        rec["test_accuracy"] = evaluate(model, test)
    meta = {"arch": spec.to_dict(), "data": cfg, "seed": args.seed, "epoch": trainer.epoch, "history": trainer.history}
    checkpoint.save(args.out, model, meta)
    write_training_log(args.out, trainer.history)
    print(f"train accuracy {trainer.history[-1]['accuracy']:.4f}  test accuracy {trainer.history[-1]['test_accuracy']:.4f}")
    return 0


def run_sparsity(args, mode):
    """Shared driver for `resrep` and `ablate`; resumes when the input holds a trainer state."""
    model, meta, extra = checkpoint.load(args.checkpoint)
    state = meta.get("train_state")
    if state is not None:
        if state.get("mode", "resrep") != mode:
            raise UsageError(f"checkpoint holds a {state.get('mode')} run, not {mode}")
        config = ResRepConfig(**meta["config"])
        lam = state["lam"]
    else:
        config = config_from(args)
        lam = args.lam
        if mode in ("resrep", "rep-only"):
            model = insert_compactors(model)
        elif model.compactors():
            raise UsageError(f"{mode} needs a base model without compactors")
    cfg = data_config(args, meta.get("data"))
    train, test = load_data(cfg, "train"), load_data(cfg, "test")
    rule = "reset" if mode in ("resrep", "res-only") else "lasso"
    trainer = SparsityTrainer(model, train, config, rule=rule, lam=lam)
    if state is not None:
        trainer.load_state(state, extra)
    stop = config.total_epochs if args.stop_after is None else min(args.stop_after, config.total_epochs)
    while trainer.epoch < stop:
        rec = trainer.run_epoch()
        rec["test_accuracy"] = evaluate(trainer.model, test)
    tstate, tensors = trainer.state()
    tstate["mode"] = mode
    out_meta = {
        "arch": meta.get("arch"),
        "data": cfg,
        "config": config.to_dict(),
        "seed": config.seed,
        "epoch": trainer.epoch,
        "masks": tstate["masks"],
        "train_state": tstate,
    }
    checkpoint.save(args.out, trainer.model, out_meta, tensors)
    write_training_log(args.out, trainer.history)
    write_events(args.out, trainer.events)
    return trainer, test, out_meta


def cmd_resrep(args):
    trainer, test, _ = run_sparsity(args, "resrep")
    write_trace(args.out, trainer.trace_table())
    red = 1 - trainer.deduced_flops() / model_flops(trainer.model)
    print(f"epoch {trainer.epoch}  deduced FLOPs reduction {red:.4f}  test accuracy {evaluate(trainer.model, test):.4f}")
    return 0


def cmd_convert(args):
    model, meta, _ = checkpoint.load(args.checkpoint)
    if not model.compactors():
        raise UsageError("checkpoint has no compactors to convert")
    try:
        converted, widths = convert_model(model, args.eps)
    except FullyPrunedError as e:
        print(f"error: compactor of target layer {e.layer} fully pruned", file=sys.stderr)
        return 3
    cfg = data_config(args, meta.get("data"))
    test = load_data(cfg, "test")
    acc_before, acc_after = evaluate(model, test), evaluate(converted, test)
    f0, f1 = model_flops(model), model_flops(converted)
    report = {
        "layers": [{"index": t, "original_width": a, "final_width": b} for t, a, b in widths],
        "original_flops": f0,
        "final_flops": f1,
        "reduction_pct": round(100.0 * (1 - f1 / f0), 4),
        "accuracy_before": acc_before,
        "accuracy_after": acc_after,
        "epsilon": args.eps,
    }
    out_meta = {k: meta[k] for k in ("arch", "data", "seed") if k in meta}
    out_meta["source_kind"] = model.kind
    out_meta["width_report"] = report
    checkpoint.save(args.out, converted, out_meta)
    write_csv(side(args.out, ".widths.csv"), ["index", "original_width", "final_width"], widths)
    checkpoint.atomic_write(side(args.out, ".widths.json"), json.dumps(report, indent=2) + "\n")
    print(
        f"FLOPs {f0} -> {f1} (reduction {report['reduction_pct']:.2f}%)  "
        f"accuracy {acc_before:.4f} -> {acc_after:.4f}"
    )
    return 0


def cmd_eval(args):
    model, meta, _ = checkpoint.load(args.checkpoint)
    cfg = data_config(args, meta.get("data"))
    data = load_data(cfg, args.split)
    if len(data) == 0:
        raise UsageError("dataset is empty")
    if data.shape != model.input_shape:
        raise UsageError(f"data shape {data.shape} does not match model input {model.input_shape}")
    print(f"{evaluate(model, data):.4f}")
    return 0


def cmd_ablate(args):
    if args.mode in ("group-lasso", "rep-only") and args.lam <= 0:
        raise UsageError("lambda must be positive")
    if args.mode == "resrep":
        return cmd_resrep(args)
    trainer, test, meta = run_sparsity(args, args.mode)
    model = trainer.model
    if args.mode == "res-only":
        keep = {t: np.flatnonzero(m) for t, m in trainer.masks.items()}
        pruned = prune_channels(model, keep)
        report = {"widths": {str(t): int(len(k)) for t, k in keep.items()}, "accuracy_before": evaluate(model, test), "accuracy_after": evaluate(pruned, test)}
        final_keep = trainer.masks
    else:
        ms = minimal_structure(model, test, args.granularity)
        report = {"widths": {str(t): w for t, w in ms.widths.items()}, "accuracy_before": ms.accuracy_before, "accuracy_after": ms.accuracy_after}
        final_keep = {t: m.astype(np.uint8) for t, m in ms.keep.items()}
    base = model_flops(model)
    report["mode"] = args.mode
    report["flops_reduction"] = 1 - deduced_flops(model, final_keep) / base
    checkpoint.atomic_write(side(args.out, ".minimal.json"), json.dumps(report, indent=2, sort_keys=True) + "\n")
    write_trace(args.out, trainer.trace_table(final_keep))
    print(f"{args.mode}: FLOPs reduction {report['flops_reduction']:.4f}  accuracy {report['accuracy_after']:.4f}")
    return 0


# parser --------------------------------------------------------------------------


def _data_args(p):
    g = p.add_argument_group("data")
    g.add_argument("--data", choices=("synthetic", "cifar10"))
    g.add_argument("--data-dir", help="CIFAR-10 binary directory (default: $RESREP_DATA_DIR)")
    g.add_argument("--num-classes", type=int)
    g.add_argument("--train-size", type=int)
    g.add_argument("--test-size", type=int)
    g.add_argument("--noise", type=float)
    g.add_argument("--image-size", type=int)
    g.add_argument("--data-seed", type=int)


def _sparsity_args(p, flops_default=None):
    p.add_argument("checkpoint")
    p.add_argument("--flops-target", type=float, default=flops_default, required=flops_default is None)
    p.add_argument("--lam", type=float, default=1e-4)
    p.add_argument("--theta-init", type=int, default=4)
    p.add_argument("--theta-step", type=int, default=4)
    p.add_argument("--interval", type=int, default=200)
    p.add_argument("--warmup-epochs", type=int, default=5)
    p.add_argument("--epochs", type=int, default=180)
    p.add_argument("--stop-after", type=int, help="stop after this many epochs (resume later)")
    p.add_argument("--lr", type=float, default=0.01)
    p.add_argument("--batch-size", type=int, default=64)
    p.add_argument("--compactor-momentum", type=float, default=0.99)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    _data_args(p)


def make_parser():
    parser = argparse.ArgumentParser(prog="resrep", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train-base", help="train a base model")
    p.add_argument("--arch", choices=ARCHS, required=True)
    p.add_argument("--widths", help="miniconv stage widths, e.g. 16,32,64")
    p.add_argument("--epochs", type=int, default=10)
    p.add_argument("--lr", type=float, default=0.1)
    p.add_argument("--batch-size", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    _data_args(p)
    p.set_defaults(func=cmd_train_base)

    p = sub.add_parser("resrep", help="insert compactors and train with gradient resetting")
    _sparsity_args(p)
    p.set_defaults(func=cmd_resrep)

    p = sub.add_parser("convert", help="merge compactors and emit the width report")
    p.add_argument("checkpoint")
    p.add_argument("--eps", type=float, default=EPSILON)
    p.add_argument("--out", required=True)
    _data_args(p)
    p.set_defaults(func=cmd_convert)

    p = sub.add_parser("eval", help="print top-1 accuracy")
    p.add_argument("checkpoint")
    p.add_argument("--split", choices=("train", "test"), default="test")
    _data_args(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="group-lasso / res-only / rep-only / resrep comparison runs")
    p.add_argument("--mode", choices=("group-lasso", "res-only", "rep-only", "resrep"), required=True)
    p.add_argument("--granularity", type=int, default=1)
    _sparsity_args(p, flops_default=0.5)
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv=None):
    parser = make_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    if args.command in ("resrep", "ablate") and not 0 < args.flops_target < 1:
        parser.error("--flops-target must lie in (0, 1)")
    try:
        return args.func(args)
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except (DataError, ShapeError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except (checkpoint.CheckpointError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
