"""Command line entry point: train, sweep, prune, report, plot."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys

import numpy as np

from . import harness
from . import model as mdl
from . import pruning

EXIT_OK, EXIT_CONFIG, EXIT_RUN_FAILED = 0, 1, 2


def _floats(text):
    return [float(v) for v in text.split(",") if v.strip()]


def _ints(text):
    return [int(v) for v in text.split(",") if v.strip()]


def _load(args):
    with open(args.config, encoding="utf-8") as fh:
        raw = json.load(fh)
    if args.seed is not None:
        raw["seed"] = args.seed
    if args.out is not None:
        raw["output_dir"] = args.out
    return raw, harness.load_config(raw)


def cmd_train(args):
    _, cfg = _load(args)
    result = harness.run(cfg)
    print(json.dumps(harness._jsonable(result.row), sort_keys=True))
    return EXIT_OK


def cmd_sweep(args):
    raw, cfg = _load(args)
    block = raw.get("sweep", {})
    alphas = _floats(args.alphas) if args.alphas else block.get("alphas", [cfg["regularizer"]["alpha"]])
    seeds = _ints(args.seeds) if args.seeds else block.get("seeds", [cfg["seed"]])
    methods = args.methods.split(",") if args.methods else block.get("methods")
    parallelism = args.parallelism or block.get("parallelism", 1)
    out_csv = os.path.join(cfg["output_dir"], "sweep.csv")
    cfg.pop("sweep", None)
    _, rows = harness.sweep(cfg, alphas, seeds, parallelism, out_csv, methods, args.artifacts)
    failed = sum(int(r["failed"]) for r in rows)
    print(f"{len(rows)} runs, {failed} failed -> {out_csv}")
    return EXIT_RUN_FAILED if failed else EXIT_OK


def cmd_prune(args):
    _, cfg = _load(args)
    model, spec = mdl.load_checkpoint(args.checkpoint)
    data = harness.build_dataset(cfg)
    x_tr, y_tr = data.part("train")
    y_tr2 = y_tr if data.is_classification else mdl._as_2d(y_tr)
    kind = cfg["plan"].get("loss_kind", "mse")
    rng = np.random.default_rng(cfg["seed"])
    bounds = (x_tr.min(axis=0), x_tr.max(axis=0))
    if args.method == "rgp":
        pruned, outcome = pruning.random_gradient_prune(model, spec, rng, args.trials, bounds)
        info = outcome.to_dict()
    elif args.method == "tamade":
        x_ev, y_ev = data.part("val") if len(data.val_idx) else (x_tr, y_tr2)
        evaluator = lambda m: mdl.base_loss(m, spec, x_ev, y_ev, kind)  # noqa: E731
        snap = model.copy()
        snap.theta = model.effective()
        high = max(float(np.max(np.abs(t))) for t in snap.theta)
        outcome = pruning.tamade(evaluator, snap, evaluator(snap), 0.0, high, args.tol, args.r)
        pruned = snap.copy()
        pruned.theta = pruning.magnitude_prune(snap.theta, outcome.threshold)
        pruned.mask = outcome.mask
        info = outcome.to_dict()
    else:
        pruned, flags = pruning.layerwise_prune_network(model, spec, x_tr, args.alpha, rng=rng, bounds=bounds)
        info = {"layers_converged": flags}
    os.makedirs(cfg["output_dir"], exist_ok=True)
    chash = harness.config_hash(cfg)
    out = os.path.join(cfg["output_dir"], f"pruned_{args.method}.checkpoint.json")
    mdl.save_checkpoint(pruned, spec, out, extra={"config_hash": chash, "prune": harness._jsonable(info)})
    print(json.dumps({"checkpoint": out, "nnz": mdl.nonzero_count(pruned), **harness._jsonable(info)}))
    return EXIT_OK


def cmd_report(args):
    rows = harness.read_sweep_csv(args.csv)
    ok = [r for r in rows if not r["failed"]]
    best = harness.best_per_method(ok)
    summary = {"runs": len(rows), "failed": len(rows) - len(ok), "manifest": harness.read_manifest(args.csv),
               "best_alpha": {m: {"alpha": a, "median_dl_bytes": v} for m, (a, v) in best.items()},
               "median_dl_by_alpha": [{"method": m, "alpha": a, "median_dl_bytes": v}
                                      for (m, a), v in harness.best_alpha_table(ok).items()]}
    xs, ys = harness.rows_to_xy(ok, args.x, args.y)
    if args.x == "model_bytes":
        xs = np.maximum(xs, 1.0)
    keep = np.isfinite(xs) & np.isfinite(ys) & (xs > 0)
    if keep.any():
        bins = harness.adaptive_bin_summary(xs[keep], ys[keep])
        summary["bins"] = [{"x_lo": b.x_lo, "x_hi": b.x_hi, "count": b.count, "median": b.median, "iqr": b.iqr}
                           for b in bins]
        summary["u_shaped"] = harness.is_u_shaped(bins)
    text = json.dumps(harness._jsonable(summary), indent=2)
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        with open(os.path.join(args.out, "report.json"), "w", encoding="utf-8") as fh:
            fh.write(text)
    print(text)
    return EXIT_OK


def cmd_plot(args):
    rows = harness.read_sweep_csv(args.csv)
    out = args.out or os.path.splitext(args.csv)[0] + f"_{args.kind.lower()}.svg"
    if os.path.isdir(out):
        out = os.path.join(out, f"{args.kind.lower()}.svg")
    harness.emit_plot(rows, args.kind, out)
    print(out)
    return EXIT_OK


def build_parser():
    parser = argparse.ArgumentParser(prog="sparsemdl", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config_required=True):
        p.add_argument("--config", required=config_required, help="JSON run config")
        p.add_argument("--out", help="output directory (overrides config)")
        p.add_argument("--seed", type=int, help="seed override")

    p = sub.add_parser("train", help="run one configuration end to end")
    common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sweep", help="grid over methods, alphas and seeds")
    common(p)
    p.add_argument("--alphas", help="comma separated alphas")
    p.add_argument("--seeds", help="comma separated seeds")
    p.add_argument("--methods", help="comma separated methods")
    p.add_argument("--parallelism", type=int)
    p.add_argument("--artifacts", action="store_true", help="also write per-run checkpoints and traces")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("prune", help="post-hoc pruning of a checkpoint")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--method", choices=("tamade", "rgp", "layerwise"), default="tamade")
    p.add_argument("--tol", type=float, default=0.05)
    p.add_argument("--r", type=float, default=1e-7)
    p.add_argument("--alpha", type=float, default=1e-3)
    p.add_argument("--trials", type=int, default=1)
    p.set_defaults(func=cmd_prune)

    p = sub.add_parser("report", help="aggregate a sweep CSV")
    common(p, config_required=False)
    p.add_argument("--csv", required=True)
    p.add_argument("--x", default="model_bytes")
    p.add_argument("--y", default="test_loss")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("plot", help="render a sweep CSV as SVG")
    common(p, config_required=False)
    p.add_argument("--csv", required=True)
    p.add_argument("--kind", type=str.upper, choices=(harness.LOSS_VS_BYTES, harness.DL_VS_ALPHA),
                   default=harness.LOSS_VS_BYTES)
    p.set_defaults(func=cmd_plot)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING)
    try:
        return args.func(args)
    except harness.ConfigError as exc:
        print(str(exc), file=sys.stderr)
        return EXIT_CONFIG
    except (OSError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # a single run that blows up
        print(f"run failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUN_FAILED


if __name__ == "__main__":
    sys.exit(main())
