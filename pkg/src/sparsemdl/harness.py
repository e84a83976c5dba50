"""Run configs, single runs, sweeps, adaptive binning and plots."""

from __future__ import annotations

import copy
import csv
import hashlib
import json
import math
import os
import time
import traceback
from concurrent.futures import ProcessPoolExecutor, as_completed
from dataclasses import dataclass, field

import numpy as np

from . import data as dio
from . import model as mdl
from .regularizers import RegularizerSpec
from .training import TrainPlan, train

SWEEP_COLUMNS = (
    "method", "alpha", "seed", "dataset_size", "sigma", "loss_kind", "epochs_run", "converged_epoch",
    "train_loss", "val_loss", "test_loss", "test_accuracy", "nnz", "model_bytes", "data_nll_bits",
    "description_length_bytes", "ei", "cr", "wall_time_s", "config_hash", "failed", "error",
)
METRIC_COLUMNS = SWEEP_COLUMNS[6:18]

DEFAULT_CONFIG = {
    "seed": 0,
    "dataset": {
        "generator": "TEACHER",
        "teacher_dims": [2, 5, 8, 1],
        "teacher_seed": 0,
        "sigma": 0.08,
        "n_train": 300,
        "n_val": 0,
        "input_domain": [-1.0, 1.0],
    },
    "model": {"layer_dims": [2, 25, 25, 1], "activation": "tanh", "head": "linear", "trainable_sigma": False},
    "regularizer": {"method": "RL1", "alpha": 1e-3},
    "plan": {
        "lr": 1e-2,
        "phases": [
            {"kind": "WARMUP", "max_epochs": 1000},
            {"kind": "REGULARIZED", "max_epochs": 2000},
            {"kind": "FINETUNE", "max_epochs": 1000},
        ],
    },
    "description_length": {"loss_kind": "gauss", "resolution_bits": 23.0, "scheme": "min"},
    "output_dir": "out",
}


class ConfigError(ValueError):
    def __init__(self, errors):
        super().__init__("invalid config:\n  " + "\n  ".join(errors))
        self.errors = list(errors)


def _merge(base, override):
    out = copy.deepcopy(base)
    for k, v in override.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def load_config(path_or_dict):
    if isinstance(path_or_dict, dict):
        raw = path_or_dict
    else:
        with open(path_or_dict, encoding="utf-8") as fh:
            raw = json.load(fh)
    cfg = _merge(DEFAULT_CONFIG, raw)
    if "dataset" in raw and raw["dataset"].get("generator", "TEACHER") != "TEACHER":
        cfg["dataset"] = copy.deepcopy(raw["dataset"])
    validate_config(cfg)
    return cfg


def validate_config(cfg):
    """Collect every problem in ``cfg`` and raise them together."""
    errors = []
    ds = cfg.get("dataset", {})
    gen = ds.get("generator")
    if gen == "TEACHER":
        if ds.get("sigma", -1) < 0:
            errors.append("dataset.sigma must be >= 0")
        if int(ds.get("n_train", 0)) < 1:
            errors.append("dataset.n_train must be >= 1")
        if int(ds.get("n_val", 0)) < 0:
            errors.append("dataset.n_val must be >= 0")
    elif gen == "MNIST":
        for key in ("images", "labels"):
            if key not in ds:
                errors.append(f"dataset.{key} is required for MNIST")
    elif gen == "FILE":
        if "path" not in ds:
            errors.append("dataset.path is required for FILE")
    else:
        errors.append(f"dataset.generator must be TEACHER, MNIST or FILE (got {gen!r})")
    if gen in ("MNIST", "FILE"):
        fr = ds.get("fractions", [0.8, 0.1, 0.1])
        if len(fr) != 3 or any(f < 0 for f in fr) or sum(fr) > 1 + 1e-12:
            errors.append("dataset.fractions must be three nonnegative numbers summing to <= 1")
    try:
        spec = model_spec(cfg)
        if gen == "TEACHER":
            dims = ds.get("teacher_dims", [])
            if dims and (dims[0] != spec.layer_dims[0] or dims[-1] != spec.layer_dims[-1]):
                errors.append("teacher and student must share input and output sizes")
    except (ValueError, TypeError, KeyError) as exc:
        errors.append(f"model: {exc}")
    try:
        RegularizerSpec(**cfg.get("regularizer", {}))
    except (ValueError, TypeError) as exc:
        errors.append(f"regularizer: {exc}")
    try:
        plan = TrainPlan(**cfg.get("plan", {}))
        if gen in ("MNIST",) and plan.loss_kind != "xent":
            errors.append("plan.loss_kind must be 'xent' for MNIST")
    except (ValueError, TypeError) as exc:
        errors.append(f"plan: {exc}")
    dl = cfg.get("description_length", {})
    if dl.get("scheme", "min") not in mdl.SCHEMES:
        errors.append(f"description_length.scheme must be one of {mdl.SCHEMES}")
    if dl.get("loss_kind", "gauss") not in ("mse", "gauss", "xent"):
        errors.append("description_length.loss_kind must be mse, gauss or xent")
    if dl.get("resolution_bits", 0.0) < 0:
        errors.append("description_length.resolution_bits must be >= 0")
    if errors:
        raise ConfigError(errors)


def config_hash(cfg):
    """Short stable digest of everything that determines a run's results."""
    doc = {k: v for k, v in cfg.items() if k != "output_dir"}
    blob = json.dumps(doc, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()[:16]


def model_spec(cfg):
    m = cfg["model"]
    return mdl.MlpSpec(tuple(m["layer_dims"]), m.get("activation", "tanh"), m.get("head", "linear"))


def build_dataset(cfg):
    ds = cfg["dataset"]
    seed = int(ds.get("seed", cfg["seed"]))
    if ds["generator"] == "TEACHER":
        n_train, n_val = int(ds["n_train"]), int(ds.get("n_val", 0))
        total = 2 * n_train + n_val
        _, _, data = dio.gen_teacher_student(ds["teacher_dims"], float(ds["sigma"]), total, seed,
                                             tuple(ds.get("input_domain", (-1.0, 1.0))), ds.get("teacher_seed"))
        return dio.split(data, (n_train / total, n_val / total, n_train / total), seed, equal_train_test=True)
    if ds["generator"] == "MNIST":
        data = dio.load_mnist_idx(ds["images"], ds["labels"])
        if ds.get("limit"):
            keep = np.random.default_rng(seed).permutation(len(data))[: int(ds["limit"])]
            data = dio.LabeledDataset(data.inputs[np.sort(keep)], data.targets[np.sort(keep)],
                                      provenance=data.provenance)
    else:
        data = dio.read_dataset_csv(ds["path"])
    return dio.split(data, ds.get("fractions", (0.8, 0.1, 0.1)), seed)


def _seeds(cfg):
    seed = int(cfg["seed"])
    init_seed = cfg["model"].get("init_seed")
    if init_seed is None:
        init_seed = int(np.random.SeedSequence([seed, 1]).generate_state(1)[0])
    return seed, int(init_seed)


def _dl_split(data):
    idx = np.concatenate([data.train_idx, data.test_idx])
    return data.inputs[idx], data.targets[idx]


@dataclass
class RunResult:
    row: dict
    model: mdl.MaskedModel = None
    trace: object = None
    outcome: object = None
    artifacts: dict = field(default_factory=dict)


def run(cfg, write_artifacts=True):
    """Train, prune and evaluate one configuration; returns a RunResult."""
    cfg = load_config(cfg)
    chash = config_hash(cfg)
    t0 = time.perf_counter()
    seed, init_seed = _seeds(cfg)
    spec = model_spec(cfg)
    reg = RegularizerSpec(**cfg["regularizer"])
    plan = TrainPlan(**{**cfg["plan"], "seed": seed})
    data = build_dataset(cfg)
    model = mdl.init_model(spec, init_seed, trainable_sigma=bool(cfg["model"].get("trainable_sigma")))
    fitted, trace, outcome = train(model, spec, data, reg, plan)
    row = metrics_row(cfg, spec, data, fitted, trace, plan.loss_kind)
    row["wall_time_s"] = time.perf_counter() - t0
    row["config_hash"] = chash
    result = RunResult(row, fitted, trace, outcome)
    if write_artifacts:
        result.artifacts = write_run_artifacts(cfg, spec, result)
    return result


def metrics_row(cfg, spec, data, fitted, trace, loss_kind):
    ds = cfg["dataset"]
    reg = cfg["regularizer"]
    row = {c: math.nan for c in SWEEP_COLUMNS}
    row.update(method=reg["method"].upper(), alpha=float(reg.get("alpha", 0.0)), seed=int(cfg["seed"]),
               dataset_size=len(data.train_idx), sigma=float(ds.get("sigma", math.nan)), loss_kind=loss_kind,
               epochs_run=len(trace), converged_epoch=trace.converged_at if trace.converged_at else math.nan,
               failed=0, error="")
    row["train_loss"] = trace.train_loss[-1]
    row["val_loss"] = trace.val_loss[-1] if len(data.val_idx) else math.nan
    x_te, y_te = data.part("test")
    if len(x_te):
        row["test_loss"] = mdl.base_loss(fitted, spec, x_te, y_te, loss_kind)
    if data.is_classification and len(x_te):
        row["test_accuracy"] = mdl.accuracy(fitted, spec, x_te, y_te)
        base = trace.checkpoints.get("WARMUP")
        if base is not None:
            row["ei"] = mdl.error_increase(mdl.accuracy(base, spec, x_te, y_te), row["test_accuracy"])
    dlc = cfg["description_length"]
    dl_kind = "xent" if data.is_classification else dlc.get("loss_kind", "gauss")
    res_bits = 0.0 if data.is_classification else float(dlc.get("resolution_bits", 0.0))
    x_dl, y_dl = _dl_split(data)
    rep = mdl.description_length(fitted, spec, x_dl, y_dl, dl_kind, dlc.get("scheme", "min"), res_bits)
    row.update(nnz=rep.nnz, model_bytes=rep.model_bytes, data_nll_bits=rep.data_nll_bits,
               description_length_bytes=rep.model_bytes + math.ceil(rep.data_nll_bits / 8.0),
               cr=rep.compression_rate)
    return row


def run_tag(cfg):
    reg = cfg["regularizer"]
    return f"{reg['method'].upper()}_a{float(reg.get('alpha', 0.0)):g}_s{int(cfg['seed'])}"


def write_run_artifacts(cfg, spec, result):
    out = cfg.get("output_dir", "out")
    os.makedirs(out, exist_ok=True)
    tag = run_tag(cfg)
    ckpt = os.path.join(out, f"{tag}.checkpoint.json")
    trace_csv = os.path.join(out, f"{tag}.trace.csv")
    report = os.path.join(out, f"{tag}.report.json")
    chash = result.row["config_hash"]
    mdl.save_checkpoint(result.model, spec, ckpt, extra={"config_hash": chash})
    result.trace.to_csv(trace_csv)
    with open(trace_csv, "a", encoding="utf-8") as fh:
        fh.write(f"# config_hash={chash}\n")
    doc = {"config_hash": chash, "config": cfg, "row": _jsonable(result.row),
           "prune": _jsonable(result.outcome.to_dict()) if result.outcome is not None else None}
    with open(report, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
    return {"checkpoint": ckpt, "trace": trace_csv, "report": report}


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if math.isfinite(v) else str(v)
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    return obj


# -- sweeps ---------------------------------------------------------------------

def sweep_configs(template, alphas, seeds, methods=None):
    methods = methods or [template["regularizer"]["method"]]
    out = []
    for method in methods:
        for alpha in alphas:
            for seed in seeds:
                cfg = copy.deepcopy(template)
                cfg["regularizer"] = {**cfg["regularizer"], "method": method, "alpha": float(alpha)}
                cfg["seed"] = int(seed)
                out.append(cfg)
    return out


def _run_row(cfg, write_artifacts):
    try:
        return run(cfg, write_artifacts=write_artifacts).row
    except Exception as exc:  # recorded as a failure row, never aborts the sweep
        row = {c: math.nan for c in SWEEP_COLUMNS}
        reg = cfg.get("regularizer", {})
        row.update(method=str(reg.get("method", "")).upper(), alpha=reg.get("alpha", math.nan),
                   seed=cfg.get("seed"), dataset_size=cfg.get("dataset", {}).get("n_train", math.nan),
                   sigma=cfg.get("dataset", {}).get("sigma", math.nan),
                   loss_kind=cfg.get("plan", {}).get("loss_kind", "mse"), config_hash=config_hash(cfg),
                   failed=1, error=f"{type(exc).__name__}: {exc}".replace("\n", " ")[:500])
        row["wall_time_s"] = math.nan
        traceback.print_exc()
        return row


def _format(value):
    if isinstance(value, float):
        return repr(value)
    return value


def sweep(template, alphas, seeds, parallelism=1, out_csv=None, methods=None, write_artifacts=False):
    """One row per (method, alpha, seed), appended to ``out_csv`` in completion order."""
    if parallelism < 1:
        raise ValueError("parallelism must be >= 1")
    template = load_config(template)
    configs = sweep_configs(template, alphas, seeds, methods)
    for cfg in configs:
        validate_config(cfg)
    out_csv = out_csv or os.path.join(template.get("output_dir", "out"), "sweep.csv")
    os.makedirs(os.path.dirname(os.path.abspath(out_csv)), exist_ok=True)
    rows = []
    with open(out_csv, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(SWEEP_COLUMNS)
        fh.flush()

        def emit(row):
            rows.append(row)
            writer.writerow([_format(row[c]) for c in SWEEP_COLUMNS])
            fh.flush()

        if parallelism == 1:
            for cfg in configs:
                emit(_run_row(cfg, write_artifacts))
        else:
            with ProcessPoolExecutor(max_workers=parallelism) as pool:
                futures = [pool.submit(_run_row, cfg, write_artifacts) for cfg in configs]
                for fut in as_completed(futures):
                    emit(fut.result())
        failed = sum(int(r["failed"]) for r in rows)
        fh.write(f"# manifest config_hash={config_hash(template)} runs={len(rows)} failed={failed}\n")
    return out_csv, rows


def read_sweep_csv(path):
    """Rows as dicts with numeric columns parsed; manifest lines are skipped."""
    with open(path, newline="", encoding="utf-8") as fh:
        lines = [ln for ln in fh if not ln.startswith("#")]
    reader = csv.DictReader(lines)
    rows = []
    for raw in reader:
        row = {}
        for k, v in raw.items():
            if k in ("method", "loss_kind", "config_hash", "error"):
                row[k] = v
            else:
                row[k] = float(v) if v not in ("", None) else math.nan
        rows.append(row)
    return rows


def read_manifest(path):
    with open(path, encoding="utf-8") as fh:
        for ln in fh:
            if ln.startswith("# manifest"):
                return dict(kv.split("=", 1) for kv in ln[len("# manifest"):].split())
    return None


# -- aggregation ------------------------------------------------------------------

@dataclass
class Bin:
    x_lo: float
    x_hi: float
    count: int
    x_median: float
    median: float
    iqr: float
    members: np.ndarray


def adaptive_bin_summary(xs, ys, min_per_bin=10, min_log10_width=0.1):
    """Greedy left-to-right bins on log10(x) with per-bin median and IQR of y.

    A bin closes once it holds ``min_per_bin`` points and the next distinct x
    lies at least ``min_log10_width`` (log10 units) past the bin's left edge.
    Tied x values never straddle a boundary.  A short final bin is merged into
    its predecessor; fewer than ``min_per_bin`` points in total give one bin.
    ``members`` holds indices into the inputs.  Non-finite pairs are skipped.
    """
    xs = np.asarray(xs, dtype=np.float64)
    ys = np.asarray(ys, dtype=np.float64)
    ok = np.isfinite(xs) & np.isfinite(ys)
    if np.any(xs[ok] <= 0):
        raise ValueError("x values must be positive for log-scale binning")
    idx = np.flatnonzero(ok)
    if idx.size == 0:
        raise ValueError("no finite rows to bin")
    idx = idx[np.lexsort((ys[idx], xs[idx]))]
    lx = np.log10(xs[idx])
    uniq, starts = np.unique(lx, return_index=True)
    groups = np.split(np.arange(idx.size), starts[1:])
    bins, current, left = [], [], None
    for gi, grp in enumerate(groups):
        if left is None:
            left = uniq[gi]
        current.extend(grp.tolist())
        nxt = uniq[gi + 1] if gi + 1 < len(uniq) else None
        if nxt is not None and len(current) >= min_per_bin and nxt - left >= min_log10_width:
            bins.append(current)
            current, left = [], None
    if current:
        if bins and len(current) < min_per_bin:
            bins[-1].extend(current)
        else:
            bins.append(current)
    out = []
    for members in bins:
        sel = idx[members]
        y = ys[sel]
        q25, q50, q75 = np.percentile(y, [25, 50, 75])
        out.append(Bin(float(xs[sel].min()), float(xs[sel].max()), len(sel), float(np.median(xs[sel])),
                       float(q50), float(q75 - q25), np.sort(sel)))
    return out


def is_u_shaped(bins):
    """Some interior bin median lies strictly below both end-bin medians."""
    if len(bins) < 3:
        return False
    inner = min(b.median for b in bins[1:-1])
    return inner < bins[0].median and inner < bins[-1].median


def best_alpha_table(rows, metric="description_length_bytes"):
    """Per (method, alpha): median of ``metric`` over seeds, skipping failed rows."""
    table = {}
    for r in rows:
        if r.get("failed") or not math.isfinite(float(r[metric])):
            continue
        table.setdefault((r["method"], float(r["alpha"])), []).append(float(r[metric]))
    return {k: float(np.median(v)) for k, v in sorted(table.items())}


def best_per_method(rows, metric="description_length_bytes"):
    table = best_alpha_table(rows, metric)
    best = {}
    for (method, alpha), value in table.items():
        if method not in best or value < best[method][1]:
            best[method] = (alpha, value)
    return best


# -- plots ----------------------------------------------------------------------------

LOSS_VS_BYTES = "LOSS-VS-BYTES"
DL_VS_ALPHA = "DL-VS-ALPHA"
N_LEVELS = 8


def _dl_levels(dl):
    lo, hi = float(np.min(dl)), float(np.max(dl))
    if hi <= lo:
        hi = lo + 1.0
    return np.linspace(lo, hi, N_LEVELS + 1)


def emit_plot(rows, kind, out_path, title=None):
    """Write a static SVG; returns a summary dict (levels, per-point level, bins)."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    from matplotlib.colors import BoundaryNorm

    kind = kind.upper()
    if kind not in (LOSS_VS_BYTES, DL_VS_ALPHA):
        raise ValueError(f"unknown plot kind {kind!r}")
    rows = [r for r in rows if not r.get("failed")]
    if not rows:
        raise ValueError("no successful rows to plot")
    dl = np.array([float(r["description_length_bytes"]) for r in rows])
    nll = np.array([float(r["data_nll_bits"]) / 8.0 for r in rows])
    if kind == LOSS_VS_BYTES:
        xs = np.maximum(np.array([float(r["model_bytes"]) for r in rows]), 1.0)
        ys = np.array([float(r["test_loss"]) for r in rows])
        xlabel, ylabel = "model size (bytes)", "test loss"
    else:
        xs = np.array([float(r["alpha"]) for r in rows])
        ys = dl
        xlabel, ylabel = "alpha", "description length (bytes)"
    keep = xs > 0
    xs, ys, dl, nll = xs[keep], ys[keep], dl[keep], nll[keep]
    if xs.size == 0:
        raise ValueError("nothing to plot on a log axis")
    levels = _dl_levels(dl)
    point_levels = np.clip(np.searchsorted(levels, dl, side="right") - 1, 0, N_LEVELS - 1)
    cmap = plt.get_cmap("viridis", N_LEVELS)
    norm = BoundaryNorm(levels, N_LEVELS)

    plt.rcParams["svg.hashsalt"] = "sparsemdl"
    fig, ax = plt.subplots(figsize=(6.4, 4.8))
    if kind == LOSS_VS_BYTES and xs.size >= 2:
        _draw_isolines(ax, nll, xs, ys, levels, cmap, norm)
    sc = ax.scatter(xs, ys, c=dl, cmap=cmap, norm=norm, s=18, edgecolors="k", linewidths=0.3, zorder=3)
    bins = adaptive_bin_summary(xs, ys) if xs.size >= 2 else []
    if len(bins) >= 2:
        bx = [b.x_median for b in bins]
        med = np.array([b.median for b in bins])
        lo = [np.percentile(ys[b.members], 25) for b in bins]
        hi = [np.percentile(ys[b.members], 75) for b in bins]
        ax.fill_between(bx, lo, hi, color="0.6", alpha=0.35, zorder=1, label="IQR")
        ax.plot(bx, med, color="crimson", marker="o", zorder=4, label="binned median")
        ax.legend(loc="best", fontsize=8)
    ax.set_xscale("log")
    if np.all(ys > 0):
        ax.set_yscale("log")
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    fig.colorbar(sc, ax=ax, label="description length (bytes)")
    hashes = sorted({str(r.get("config_hash", "")) for r in rows})
    tag = ",".join(h for h in hashes if h)
    if title:
        ax.set_title(title)
    fig.text(0.01, 0.01, f"config {tag[:60]}", fontsize=5, color="0.4")
    fig.tight_layout()
    fig.savefig(out_path, format="svg", metadata={"Date": None, "Description": f"config_hash={tag}"})
    plt.close(fig)
    return {"levels": levels, "point_levels": point_levels.tolist(), "bins": bins}


def _draw_isolines(ax, nll, xs, ys, levels, cmap, norm):
    # data bytes as a function of test loss, interpolated from the runs themselves
    if np.any(ys <= 0):
        return
    ly = np.log(ys)
    order = np.argsort(ly)
    if np.ptp(ly) == 0:
        return
    gx = np.logspace(np.log10(xs.min()), np.log10(xs.max()), 120)
    gy = np.exp(np.linspace(ly.min(), ly.max(), 120))
    nll_grid = np.interp(np.log(gy), ly[order], nll[order])
    X, Y = np.meshgrid(gx, gy)
    Z = X + nll_grid[:, None]
    ax.contour(X, Y, Z, levels=levels, cmap=cmap, norm=norm, linewidths=0.8, zorder=2)


def rows_to_xy(rows, x="model_bytes", y="test_loss"):
    xs = np.array([float(r[x]) for r in rows if not r.get("failed")])
    ys = np.array([float(r[y]) for r in rows if not r.get("failed")])
    return xs, ys
