"""Command-line entry point: synth, train, sweep, eval, gradcheck."""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import diffcore as dc
from . import experiment as ex
from .data import DataError, SynthConfig, drop_incomplete, effective_rate
from .graph import GraphError
from .model import ConfigError, load_checkpoint
from .training import REC_SCOPES, TrainConfig, evaluate

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4
OUT_ENV = "SDRGNN_OUT"
DEFAULT_SWEEP = [round(0.1 * k, 1) for k in range(8)]


class UsageError(ValueError):
    pass


def _dims(text):
    dims = tuple(int(x) for x in text.split(","))
    if len(dims) != 3:
        raise argparse.ArgumentTypeError("dims must be three comma-separated integers")
    return dims


def _rates(text):
    rates = [float(x) for x in text.split(",") if x.strip()]
    if not rates:
        raise argparse.ArgumentTypeError("sweep list is empty")
    return rates


def _add_synth_args(p):
    g = p.add_argument_group("synthetic data")
    g.add_argument("--conversations", type=int, default=8)
    g.add_argument("--utterances", type=int, default=10)
    g.add_argument("--speakers", type=int, default=2)
    g.add_argument("--classes", type=int, default=4)
    g.add_argument("--dims", type=_dims, default=(8, 8, 8))
    g.add_argument("--signal", type=float, default=5.0)
    g.add_argument("--synth-seed", type=int, default=None, help="defaults to --seed")


def _add_run_args(p):
    src = p.add_mutually_exclusive_group()
    src.add_argument("--data", help="directory with train/val/test.jsonl (+ optional manifest.json)")
    src.add_argument("--synth", action="store_true", help="generate synthetic splits in memory (default)")
    _add_synth_args(p)
    p.add_argument("--missing-rate", type=float, default=0.0)
    p.add_argument("--window", type=int, default=2)
    p.add_argument("--hidden", type=int, default=16)
    p.add_argument("--heads", type=int, default=4)
    p.add_argument("--hyper-layers", type=int, default=2)
    p.add_argument("--dropout", type=float, default=0.5)
    p.add_argument("--loss-weight", type=float, default=0.5)
    p.add_argument("--rec-scope", choices=REC_SCOPES, default="all_slots")
    p.add_argument("--epochs", type=int, default=100)
    p.add_argument("--patience", type=int, default=20)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--clip-norm", type=float, default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--repeats", type=int, default=1)
    p.add_argument("--ablate", nargs="*", choices=sorted(ex.ABLATIONS), default=[])
    p.add_argument("--lower-bound", action="store_true", help="drop modality-incomplete utterances")
    p.add_argument("--out")
    p.add_argument("--quiet", action="store_true")


def build_parser():
    ap = argparse.ArgumentParser(prog="sdrgnn", description=__doc__)
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="write synthetic train/val/test files and a manifest")
    _add_synth_args(p)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)

    p = sub.add_parser("train", help="mask, train, evaluate the best checkpoint on test")
    _add_run_args(p)
    p.add_argument("--replay", help="rerun from a previous run directory (config + mask sidecars)")
    p.add_argument("--mask-plan", help="directory holding mask_{train,val,test}.json to reuse")

    p = sub.add_parser("sweep", help="train/eval grid over missing rates (and ablations)")
    _add_run_args(p)
    p.add_argument("--sweep", type=_rates, default=DEFAULT_SWEEP)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    _add_run_args(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", choices=ex.SPLITS, default="test")
    p.add_argument("--mask-plan")

    p = sub.add_parser("gradcheck", help="finite-difference check of every layer")
    p.add_argument("--tolerance", type=float, default=1e-4)
    p.add_argument("--eps", type=float, default=1e-5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--inject-fault", metavar="OP", help="test hook: scale the backward of one op")
    return ap


def _say(args, msg):
    if not getattr(args, "quiet", False):
        print(msg)


def _spec(args, rate=None, ablate=None):
    effective_rate(args.missing_rate if rate is None else rate)
    if args.utterances < 1 or args.conversations < 1:
        raise UsageError("utterances and conversations must be positive")
    if args.repeats < 1:
        raise UsageError("repeats must be positive")
    synth = None
    if args.data is None:
        synth = {"num_conversations": args.conversations, "utterances": args.utterances,
                 "speakers": args.speakers, "classes": args.classes, "dims": list(args.dims),
                 "signal": args.signal, "seed": args.seed if args.synth_seed is None else args.synth_seed}
    model = {"window": args.window, "hidden": args.hidden, "heads": args.heads,
             "hyper_layers": args.hyper_layers, "dropout": args.dropout}
    model = ex.ablate(model, args.ablate if ablate is None else ablate)
    train = {"epochs": args.epochs, "patience": args.patience, "loss_weight": args.loss_weight,
             "rec_scope": args.rec_scope, "lr": args.lr, "clip_norm": args.clip_norm}
    TrainConfig(**train).validate()
    return ex.RunSpec(missing_rate=args.missing_rate if rate is None else rate, seed=args.seed, data=args.data,
                      synth=synth, model=model, train=train, lower_bound=args.lower_bound)


def _out_dir(args, name):
    if args.out:
        return Path(args.out)
    return Path(os.environ.get(OUT_ENV, "runs")) / name


def cmd_synth(args):
    cfg = SynthConfig(args.conversations, args.utterances, args.speakers, args.classes, args.dims,
                      args.signal, seed=args.seed)
    try:
        cfg.validate()
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    out = ex.write_synth(cfg, args.out)
    print(f"wrote {out}/{{train,val,test}}.jsonl and manifest.json")
    return EXIT_OK


def _seed_specs(spec, repeats):
    from dataclasses import replace
    specs = []
    for r in range(repeats):
        s = replace(spec, seed=spec.seed + r)
        if s.synth is not None and spec.synth["seed"] == spec.seed:
            s.synth = {**spec.synth, "seed": spec.seed + r}
        specs.append(s)
    return specs


def cmd_train(args):
    if args.replay:
        specs = [ex.load_spec(args.replay)]
        plans = ex.load_plans(args.replay)
    else:
        specs = _seed_specs(_spec(args), args.repeats)
        plans = ex.load_plans(args.mask_plan) if args.mask_plan else None
    root = _out_dir(args, f"train-seed{specs[0].seed}-m{specs[0].missing_rate}")
    rows = []
    for spec in specs:
        out = root if len(specs) == 1 else root / f"seed{spec.seed}"
        res = ex.run(spec, out, plans=plans, log=None if args.quiet else print)
        _say(args, f"seed {spec.seed}: test WAF1 {res.report.waf1:.4f} ACC {res.report.acc:.4f} -> {out}")
        rows.append(res.report)
    if len(rows) > 1:
        _write_aggregate(root, specs, rows)
    return EXIT_OK


def _write_aggregate(root, specs, reports):
    keys = ["waf1", "acc"]
    with open(root / "aggregate.csv", "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["metric", "mean", "std"] + [f"seed{s.seed}" for s in specs])
        for k in keys:
            vals = [getattr(r, k) for r in reports]
            m, s = ex.aggregate(vals)
            w.writerow([k, repr(m), repr(s)] + [repr(v) for v in vals])
        pooled = [r.mse.get("pooled") for r in reports]
        m, s = ex.aggregate(pooled)
        w.writerow(["mse_pooled", repr(m), repr(s)] + ["" if v is None else repr(v) for v in pooled])
    print((root / "aggregate.csv").read_text())


def cmd_sweep(args):
    rates = args.sweep
    for r in rates:
        effective_rate(r)
    root = _out_dir(args, f"sweep-seed{args.seed}")
    variants = [[]] + [[f] for f in args.ablate]
    grid = {}
    for flags in variants:
        label = ex.row_label(flags)
        for r in rates:
            vals = []
            for spec in _seed_specs(_spec(args, rate=r, ablate=flags), args.repeats):
                cell = root / label.replace(" ", "_").replace("/", "") / f"m{r}" / f"seed{spec.seed}"
                try:
                    vals.append(ex.run(spec, cell).report.waf1)
                except (ArithmeticError, ValueError) as exc:  # recorded, sweep continues
                    print(f"cell {label} M={r} seed={spec.seed} failed: {exc}", file=sys.stderr)
                    vals.append(float("nan"))
            grid[label, r] = ex.aggregate(vals)[0]
            _say(args, f"{label:<20} M={r:.1f} WAF1={grid[label, r]:.4f}")
    _write_grid(root, [ex.row_label(f) for f in variants], rates, grid)
    return EXIT_OK


def _write_grid(root, labels, rates, grid):
    root.mkdir(parents=True, exist_ok=True)
    header = ["method"] + [f"{r:.1f}" for r in rates] + ["Average"]
    rows = []
    for label in labels:
        vals = [grid[label, r] for r in rates]
        rows.append([label] + vals + [float(np.nanmean(vals)) if not np.all(np.isnan(vals)) else float("nan")])
    with open(root / "grid.csv", "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([row[0]] + [repr(v) for v in row[1:]])
    widths = [max(20, max(len(r[0]) for r in rows) + 2)] + [8] * (len(header) - 1)
    lines = ["".join(h.ljust(wd) for h, wd in zip(header, widths))]
    for row in rows:
        cells = [row[0]] + [f"{100 * v:.2f}" for v in row[1:]]
        lines.append("".join(c.ljust(wd) for c, wd in zip(cells, widths)))
    text = "\n".join(lines) + "\n"
    (root / "grid.txt").write_text(text, encoding="utf-8")
    print(text, end="")


def cmd_eval(args):
    model, meta = load_checkpoint(args.checkpoint)
    spec = _spec(args)
    splits = ex.load_splits(spec)
    plans = ex.load_plans(args.mask_plan) if args.mask_plan else None
    splits, plans = ex.mask_splits(splits, spec.missing_rate, spec.seed, plans)
    ds = dict(zip(ex.SPLITS, splits))[args.split]
    if args.lower_bound:
        ds = drop_incomplete(ds)
    if ds.num_classes != model.cfg.num_classes:
        raise ConfigError(f"class count mismatch: checkpoint expects {model.cfg.num_classes}, data has {ds.num_classes}")
    if tuple(ds.dims) != tuple(model.cfg.dims):
        raise ConfigError(f"feature dims mismatch: checkpoint expects {model.cfg.dims}, data has {ds.dims}")
    if ds.num_speakers > model.cfg.num_speakers:
        raise ConfigError(f"speaker roster mismatch: checkpoint supports {model.cfg.num_speakers}, "
                          f"data has {ds.num_speakers}")
    report, ev = evaluate(model, ds, TrainConfig(loss_weight=args.loss_weight, rec_scope=args.rec_scope))
    out = _out_dir(args, "eval")
    out.mkdir(parents=True, exist_ok=True)
    report.save(out, stem=f"eval_{args.split}")
    (out / "zero_fill_mse.json").write_text(json.dumps(ev.zero_fill_mse) + "\n", encoding="utf-8")
    for name, plan in plans.items():
        plan.save(out / f"mask_{name}.json")
    print(report.to_table())
    return EXIT_OK


def cmd_gradcheck(args):
    from . import gradcheck
    if args.inject_fault:
        with dc.inject_backward_fault(args.inject_fault):
            results = gradcheck.run_suite(args.seed, args.eps)
    else:
        results = gradcheck.run_suite(args.seed, args.eps)
    ok = gradcheck.report(results, args.tolerance)
    if not ok:
        bad = [f"{r.group}:{r.worst[0]}" for r in results if r.worst[1] >= args.tolerance]
        print("gradient check failed for " + ", ".join(bad), file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


COMMANDS = {"synth": cmd_synth, "train": cmd_train, "sweep": cmd_sweep, "eval": cmd_eval, "gradcheck": cmd_gradcheck}


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except (UsageError, ConfigError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, GraphError, FileNotFoundError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (ArithmeticError, dc.NonFiniteError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
