"""Batch command line: synth, train, eval, predict, gradcheck.

Exit codes: 0 success, 1 usage error, 2 data/load error, 3 numeric failure.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import sys
from pathlib import Path

import torch

from . import checkpoint
from .config import ABLATION_NAMES, LAYOUTS, VARIANTS, LossConfig, ModelConfig, TrainConfig
from .data import SPLITS, Manifest, write_synthetic
from .errors import ConfigError, DGSTMTLError, InputError, LoadError, NumericError
from .graph import write_matrix_csv
from .training import build_model, evaluate, model_grad_check, predict, prepare, train

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _floats(text: str) -> list[float]:
    try:
        return [float(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="dgstmtl", description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", help="write a synthetic coupled two-task dataset")
    s.add_argument("--nodes", type=int, default=8)
    s.add_argument("--length", type=int, default=2000)
    s.add_argument("--coupling", type=float, default=0.8)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--interval", type=int, default=5, help="minutes between samples")
    s.add_argument("--out", type=Path, required=True)

    t = sub.add_parser("train", help="train a model and write checkpoint + loss trace")
    t.add_argument("--manifest", type=Path, required=True)
    t.add_argument("--out", type=Path, required=True)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--batch-size", type=int, default=24)
    t.add_argument("--lr", type=float, default=0.003)
    t.add_argument("--epochs", type=int, default=200, help="maximum epochs")
    t.add_argument("--patience", type=int, default=10)
    t.add_argument("--hidden", type=int, default=64, help="GCN hidden width C'")
    t.add_argument("--head-hidden", type=int, default=64)
    t.add_argument("--ctke-dim", type=int, default=24, help="projection width D (divisible by 3)")
    t.add_argument("--layers", type=int, default=3, help="GCN layers per group block")
    t.add_argument("--history", type=int, default=12)
    t.add_argument("--layout", choices=LAYOUTS, default=None)
    t.add_argument("--threshold", type=float, default=0.7, help="|Pearson r| threshold for A_ST")
    t.add_argument("--corr-mode", choices=("abs", "signed"), default="abs")
    g = t.add_mutually_exclusive_group()
    g.add_argument("--ablation", choices=sorted(ABLATION_NAMES), default="full")
    g.add_argument("--variant", type=int, choices=sorted(VARIANTS), default=None)
    t.add_argument("--beta", type=_floats, default=None)
    t.add_argument("--alpha", type=_floats, default=None)
    t.add_argument("--delta", type=_floats, default=None)
    t.add_argument("--gate-l1", type=float, default=0.0)
    t.add_argument("--gate-activation", choices=("none", "sigmoid"), default="none")
    t.add_argument("--export-graph", action="store_true", help="write basic and prior matrices as CSV")
    t.add_argument("--export-hybrid", action="store_true",
                   help="write each task's hybrid adjacency for the first training sample as CSV")

    for name, helptext in (("eval", "write per-task metrics CSV"), ("predict", "write predictions CSV")):
        e = sub.add_parser(name, help=helptext)
        e.add_argument("--checkpoint", type=Path, required=True)
        e.add_argument("--manifest", type=Path, required=True)
        e.add_argument("--split", choices=SPLITS, default="test")
        e.add_argument("--out", type=Path, required=True)

    c = sub.add_parser("gradcheck", help="finite-difference check of the full model on a toy problem")
    c.add_argument("--eps", type=float, default=1e-6)
    c.add_argument("--sample", type=float, default=0.01, help="fraction of parameters to check")
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--nodes", type=int, default=4)
    c.add_argument("--tasks", type=int, default=2)
    c.add_argument("--hidden", type=int, default=8)
    c.add_argument("--tol", type=float, default=1e-4)
    return p


def _setup_logging(run_dir: Path | None) -> None:
    root = logging.getLogger("dgstmtl")
    root.setLevel(logging.INFO)
    root.handlers.clear()
    if run_dir is not None:
        fh = logging.FileHandler(run_dir / "run.log", mode="w")
        fh.setFormatter(logging.Formatter("%(asctime)s %(levelname)s %(message)s"))
        root.addHandler(fh)


def cmd_synth(args) -> int:
    if args.nodes < 2:
        raise UsageError("--nodes must be at least 2")
    if args.length < 14:
        raise UsageError("--length must be at least 14")
    if not 0 <= args.coupling <= 1:
        raise UsageError("--coupling must be in [0, 1]")
    manifest = write_synthetic(args.out, args.nodes, args.length, args.coupling, args.seed, args.interval)
    print(f"wrote {manifest}")
    return EXIT_OK


def _resolve_train_config(args):
    overrides = dict(VARIANTS[args.variant]) if args.variant else dict(ABLATION_NAMES[args.ablation])
    if args.layout is not None:
        overrides["prior_layout"] = args.layout
    try:
        mcfg = ModelConfig(gcn_layers=args.layers, head_hidden=args.head_hidden,
                           gate_activation=args.gate_activation, **overrides)
        tcfg = TrainConfig(batch_size=args.batch_size, learning_rate=args.lr, max_epochs=args.epochs,
                           patience=args.patience, seed=args.seed, gate_l1=args.gate_l1)
        if args.hidden < 1 or args.ctke_dim < 1 or args.ctke_dim % 3:
            raise ConfigError("--hidden must be positive and --ctke-dim a positive multiple of 3")
        if not 0 <= args.threshold <= 1:
            raise ConfigError("--threshold must be in [0, 1]")
    except ConfigError as exc:
        raise UsageError(str(exc)) from exc
    return mcfg, tcfg


def cmd_train(args) -> int:
    mcfg, tcfg = _resolve_train_config(args)
    manifest = Manifest.read(args.manifest)
    k = len(manifest.tasks)
    try:
        loss_cfg = LossConfig(beta=args.beta or [1.0 / k] * k, alpha=args.alpha or [], delta=args.delta or [])
        if len(loss_cfg.beta) != k:
            raise ConfigError(f"--beta has {len(loss_cfg.beta)} weights for {k} tasks")
    except ConfigError as exc:
        raise UsageError(str(exc)) from exc
    tasks, edges = manifest.load()
    args.out.mkdir(parents=True, exist_ok=True)
    _setup_logging(args.out)
    exp = prepare(tasks, edges, args.history, manifest.split, args.threshold, args.corr_mode, mcfg.prior_layout)
    model = build_model(exp, mcfg, hidden=args.hidden, ctke_dim=args.ctke_dim, seed=tcfg.seed)

    resolved = {
        "manifest": str(args.manifest),
        "model": dataclasses.asdict(mcfg),
        "train": dataclasses.asdict(tcfg),
        "loss": dataclasses.asdict(loss_cfg),
        "hidden": args.hidden, "ctke_dim": args.ctke_dim, "history": args.history,
        "threshold": args.threshold, "corr_mode": args.corr_mode,
        "variant": args.variant, "ablation": args.ablation,
        "n_parameters": model.n_parameters(),
    }
    (args.out / "config.json").write_text(json.dumps(resolved, indent=2, sort_keys=True) + "\n")
    if args.export_graph:
        for name in ("a_s", "a_t", "a_st"):
            write_matrix_csv(args.out / f"{name}.csv", getattr(exp.basic, name))
        write_matrix_csv(args.out / "a_p.csv", exp.prior.a_p)

    result = train(model, exp.splits, tcfg, loss_cfg)
    with (args.out / "trace.csv").open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "train_loss", "val_loss"])
        for r in result.trace:
            w.writerow([r.epoch, repr(r.train_loss), repr(r.val_loss)])
    checkpoint.save(args.out / "checkpoint.zip",
                    checkpoint.Checkpoint(model, exp.task_names, exp.splits["train"].scaler,
                                          {"best_epoch": result.best_epoch, "history": args.history,
                                           "threshold": args.threshold, "corr_mode": args.corr_mode}))
    if args.export_hybrid:
        x = torch.from_numpy(exp.splits["train"].inputs[:1])
        with torch.no_grad():
            b = model.dynamic(x)
            for k_, name in enumerate(exp.task_names):
                a = model.adjacency(k_, b)
                write_matrix_csv(args.out / f"hybrid_{name}.csv", a.reshape(a.shape[-2:]).numpy())
    print(f"trained {len(result.trace)} epochs, best epoch {result.best_epoch} "
          f"(val loss {result.best_val:.6g}); outputs in {args.out}")
    return EXIT_OK


def _load_for_eval(args):
    ckpt = checkpoint.load(args.checkpoint)
    manifest = Manifest.read(args.manifest)
    tasks, edges = manifest.load()
    d = ckpt.model.dims
    if len(tasks) != d.n_tasks or tasks[0].n_nodes != d.n_nodes:
        raise LoadError(f"checkpoint expects {d.n_tasks} tasks on {d.n_nodes} nodes, data has "
                        f"{len(tasks)} tasks on {tasks[0].n_nodes} nodes")
    extra = ckpt.extra
    exp = prepare(tasks, edges, d.history, manifest.split, extra.get("threshold", 0.7),
                  extra.get("corr_mode", "abs"), ckpt.model.cfg.prior_layout, scaler=ckpt.scaler)
    split = exp.splits[args.split]
    return ckpt, split


def cmd_eval(args) -> int:
    ckpt, split = _load_for_eval(args)
    metrics = evaluate(ckpt.model, split, ckpt.task_names)
    with args.out.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["task", "mse", "rmse", "mae", "mape"])
        for m in metrics:
            w.writerow([m.task, repr(m.mse), repr(m.rmse), repr(m.mae), repr(m.mape)])
    for m in metrics:
        print(f"{m.task}: RMSE {m.rmse:.4f} MAE {m.mae:.4f} MAPE {m.mape:.4f}")
    return EXIT_OK


def cmd_predict(args) -> int:
    ckpt, split = _load_for_eval(args)
    y_hat = split.scaler.denormalize(predict(ckpt.model, split.inputs))
    y = split.scaler.denormalize(split.targets)
    with args.out.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["sample", "node", "task", "target", "prediction"])
        for s, idx in enumerate(split.sample_index):
            for i in range(y.shape[1]):
                for k, name in enumerate(ckpt.task_names):
                    w.writerow([int(idx), i, name, repr(float(y[s, i, k])), repr(float(y_hat[s, i, k]))])
    print(f"wrote {len(split)} samples to {args.out}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    if args.sample <= 0 or args.sample > 1:
        raise UsageError("--sample must be a fraction in (0, 1]")
    if args.eps <= 0:
        raise UsageError("--eps must be positive")
    if args.nodes < 1 or args.tasks < 1 or args.hidden < 1:
        raise UsageError("--nodes, --tasks and --hidden must be positive")
    err = model_grad_check(args.nodes, args.tasks, args.hidden, sample=args.sample, eps=args.eps, seed=args.seed)
    ok = err < args.tol
    print(f"max relative error {err:.3e} ({'PASS' if ok else 'FAIL'} at tol {args.tol:g})")
    return EXIT_OK if ok else EXIT_NUMERIC


COMMANDS = {"synth": cmd_synth, "train": cmd_train, "eval": cmd_eval, "predict": cmd_predict,
            "gradcheck": cmd_gradcheck}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    torch.set_num_threads(1)
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"dgstmtl {args.command}: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericError as exc:
        print(f"dgstmtl {args.command}: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (LoadError, InputError, OSError) as exc:
        print(f"dgstmtl {args.command}: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except DGSTMTLError as exc:
        print(f"dgstmtl {args.command}: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
