"""Optimizer, phase schedules and the noise-aware convergence check."""

from __future__ import annotations

import csv
import logging
import math
import warnings
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import autodiff as ad
from . import model as mdl
from .pruning import LOSS_RELATIVE, PruneOutcome, magnitude_prune, random_gradient_prune, tamade
from .regularizers import penalty, pmmp_objective, pmmp_project

log = logging.getLogger(__name__)

WARMUP, REGULARIZED, FINETUNE = "WARMUP", "REGULARIZED", "FINETUNE"
PHASE_KINDS = (WARMUP, REGULARIZED, FINETUNE)


class TrainingDivergedError(FloatingPointError):
    """Loss or gradient became non-finite; carries a snapshot of the run."""

    def __init__(self, message, snapshot):
        super().__init__(message)
        self.snapshot = snapshot


# -- Adam ---------------------------------------------------------------------

@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: list = None
    v: list = None


def adam_step(state, params, grads):
    """One bias-corrected Adam update; returns the new parameter list."""
    if state.m is None:
        state.m = [np.zeros_like(p) for p in params]
        state.v = [np.zeros_like(p) for p in params]
    if len(params) != len(grads) or any(p.shape != g.shape for p, g in zip(params, grads)):
        raise ad.ShapeError("adam_step: parameter and gradient shapes differ")
    state.t += 1
    c1 = 1.0 - state.beta1 ** state.t
    c2 = 1.0 - state.beta2 ** state.t
    out = []
    for i, (p, g) in enumerate(zip(params, grads)):
        state.m[i] = state.beta1 * state.m[i] + (1.0 - state.beta1) * g
        state.v[i] = state.beta2 * state.v[i] + (1.0 - state.beta2) * g * g
        out.append(p - state.lr * (state.m[i] / c1) / (np.sqrt(state.v[i] / c2) + state.eps))
    return out


class Adam:
    def __init__(self, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.state = AdamState(lr, beta1, beta2, eps)

    def step(self, params, grads):
        return adam_step(self.state, list(params), list(grads))


# -- convergence --------------------------------------------------------------

def epanechnikov_smooth(ys, bandwidth):
    """Nadaraya-Watson average with K(t) = 0.75 (1 - t^2) on |t| <= 1, t = (i - j) / bandwidth."""
    ys = np.asarray(ys, dtype=np.float64)
    if bandwidth <= 0:
        raise ValueError("bandwidth must be positive")
    if ys.size == 0:
        raise ValueError("cannot smooth an empty series")
    idx = np.arange(ys.size, dtype=np.float64)
    t = (idx[:, None] - idx[None, :]) / bandwidth
    k = np.where(np.abs(t) <= 1.0, 0.75 * (1.0 - t * t), 0.0)
    return (k @ ys) / k.sum(axis=1)


def convergence_check(trace, w, bandwidth=None):
    """True when the newer half of the last ``w`` values no longer improves on the older half."""
    if w % 2 or w < 2:
        raise ValueError("window must be an even count")
    if len(trace) < w:
        return False
    bandwidth = bandwidth if bandwidth is not None else w / 4.0
    tail = np.asarray(trace[-w:], dtype=np.float64)
    a, b = tail[: w // 2], tail[w // 2:]
    s_a = float(np.std(a - epanechnikov_smooth(a, bandwidth)))
    s_b = float(np.std(b - epanechnikov_smooth(b, bandwidth)))
    return float(b.mean()) >= float(a.mean()) - 0.5 * (s_a + s_b)


# -- plan ---------------------------------------------------------------------

@dataclass
class Phase:
    kind: str
    max_epochs: int
    alpha: float | None = None  # None: take the regularizer's alpha

    def __post_init__(self):
        self.kind = self.kind.upper()
        if self.kind not in PHASE_KINDS:
            raise ValueError(f"unknown phase kind {self.kind!r}")
        if self.max_epochs < 0:
            raise ValueError("max_epochs must be nonnegative")


@dataclass
class ConvergenceSpec:
    window: int = 40
    check_every: int = 5
    bandwidth: float | None = None
    monitor: str = "val"  # val | train, for WARMUP and FINETUNE


@dataclass
class TamadeSpec:
    enabled: bool = True
    tol: float = 0.05
    r: float = 1e-7
    mode: str = LOSS_RELATIVE


@dataclass
class TrainPlan:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    phases: list = field(default_factory=lambda: [Phase(WARMUP, 200), Phase(REGULARIZED, 1000), Phase(FINETUNE, 500)])
    batch_size: int | None = None  # None: full batch
    convergence: ConvergenceSpec = field(default_factory=ConvergenceSpec)
    tamade: TamadeSpec = field(default_factory=TamadeSpec)
    seed: int = 0
    loss_kind: str = "mse"
    u_lr_ratio: float = 1.0
    active_set_eps: float = 1e-2
    alpha_ramp_epochs: int = 0
    rgp_trials: int = 1

    def __post_init__(self):
        self.phases = [p if isinstance(p, Phase) else Phase(**p) for p in self.phases]
        if isinstance(self.convergence, dict):
            self.convergence = ConvergenceSpec(**self.convergence)
        if isinstance(self.tamade, dict):
            self.tamade = TamadeSpec(**self.tamade)
        errors = self.validate()
        if errors:
            raise ValueError("invalid TrainPlan: " + "; ".join(errors))

    def validate(self):
        errors = []
        c = self.convergence
        if c.window < 4 or c.window % 2:
            errors.append(f"convergence.window must be even and >= 4 (got {c.window})")
        if c.check_every < 1:
            errors.append("convergence.check_every must be >= 1")
        if c.monitor not in ("val", "train"):
            errors.append("convergence.monitor must be 'val' or 'train'")
        kinds = [p.kind for p in self.phases]
        if kinds.count(FINETUNE) != 1 or kinds[-1] != FINETUNE:
            errors.append("exactly one FINETUNE phase is required and it must be last")
        if not self.lr > 0:
            errors.append("lr must be positive")
        if self.batch_size is not None and self.batch_size < 1:
            errors.append("batch_size must be >= 1")
        if self.loss_kind not in ("mse", "gauss", "xent"):
            errors.append(f"unknown loss_kind {self.loss_kind!r}")
        if self.rgp_trials < 1:
            errors.append("rgp_trials must be >= 1")
        return errors

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


# -- trace ----------------------------------------------------------------------

@dataclass
class LossTrace:
    epochs: list = field(default_factory=list)
    train_loss: list = field(default_factory=list)
    val_loss: list = field(default_factory=list)
    phase: list = field(default_factory=list)
    phase_converged: dict = field(default_factory=dict)
    checkpoints: dict = field(default_factory=dict, repr=False)  # phase -> model at phase end

    def append(self, train, val, phase):
        self.epochs.append(len(self.epochs) + 1)
        self.train_loss.append(train)
        self.val_loss.append(val)
        self.phase.append(phase)

    def __len__(self):
        return len(self.epochs)

    @property
    def converged_at(self):
        """Epoch at which the sparsifying phase (else warmup) met the criterion."""
        for kind in (REGULARIZED, WARMUP):
            if kind in self.phase_converged:
                return self.phase_converged[kind]
        return None

    def to_csv(self, path):
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["epoch", "train_loss", "val_loss", "phase"])
            for row in zip(self.epochs, self.train_loss, self.val_loss, self.phase):
                writer.writerow([row[0], repr(row[1]), repr(row[2]), row[3]])


# -- loop machinery -------------------------------------------------------------

def _loss_expr(kind, pred, y, log_sigma):
    if kind == "mse":
        return mdl.mse_expr(pred, y)
    if kind == "gauss":
        ls = log_sigma if log_sigma is not None else -0.5 * math.log(2.0 * mdl.LN2)
        return mdl.gauss_bits_expr(pred, y, ls)
    return mdl.xent_bits_expr(pred, y)


def _targets(y, kind):
    return y if kind == "xent" else mdl._as_2d(y)


class _Runner:
    """Shared state for one training run: data, batching rng, trace."""

    def __init__(self, spec, data, plan):
        self.spec = spec
        self.plan = plan
        self.kind = plan.loss_kind
        self.x_tr, y_tr = data.part("train")
        self.y_tr = _targets(y_tr, self.kind)
        x_va, y_va = data.part("val")
        self.has_val = len(x_va) > 0
        self.x_va, self.y_va = (x_va, _targets(y_va, self.kind)) if self.has_val else (self.x_tr, self.y_tr)
        if len(self.x_tr) == 0:
            raise mdl.EmptyDataError("training split is empty")
        self.bounds = (self.x_tr.min(axis=0), self.x_tr.max(axis=0))
        self.rng = np.random.default_rng(plan.seed)
        self.trace = LossTrace()

    def batches(self):
        n = len(self.x_tr)
        bs = self.plan.batch_size or n
        if bs >= n:
            yield self.x_tr, self.y_tr
            return
        perm = self.rng.permutation(n)
        for s in range(0, n, bs):
            idx = perm[s:s + bs]
            yield self.x_tr[idx], self.y_tr[idx]

    def bare_loss(self, model, x, y):
        pred = mdl.forward(model.effective(), self.spec, x)
        return float(_loss_expr(self.kind, pred, y, model.log_sigma))

    def val_loss(self, model):
        return self.bare_loss(model, self.x_va, self.y_va)

    def record(self, model, phase):
        tr = self.bare_loss(model, self.x_tr, self.y_tr)
        va = self.bare_loss(model, self.x_va, self.y_va) if self.has_val else tr
        if not (math.isfinite(tr) and math.isfinite(va)):
            self.fail(f"non-finite loss in {phase}", phase)
        self.trace.append(tr, va, phase)
        return tr, va

    def fail(self, message, phase, cause=None):
        snap = {
            "phase": phase,
            "epoch": len(self.trace),
            "last_train_loss": self.trace.train_loss[-5:],
            "last_val_loss": self.trace.val_loss[-5:],
        }
        err = TrainingDivergedError(f"{message} at epoch {len(self.trace)} ({snap})", snap)
        if cause is not None:
            raise err from cause
        raise err


def _trainable_sigma(model):
    return model.log_sigma is not None


def _plain_objective(runner, mask, alpha, reg, with_sigma):
    spec, kind = runner.spec, runner.kind

    def objective(theta, ls, bx, by):
        eff = [t * m for t, m in zip(theta, mask)]
        out = _loss_expr(kind, mdl.forward(eff, spec, bx), by, ls if with_sigma else None)
        if alpha > 0 and reg is not None and reg.method in ("DRR", "RL1"):
            out = out + penalty(replace(reg, alpha=alpha), eff)
        return out

    return objective


def _run_plain_phase(runner, model, phase, alpha, reg):
    """WARMUP, REGULARIZED (DRR / RL1) or FINETUNE epochs on theta (and sigma)."""
    plan = runner.plan
    conv = plan.convergence
    opt = Adam(plan.lr, plan.beta1, plan.beta2, plan.eps)
    with_sigma = _trainable_sigma(model)
    regularized = phase.kind == REGULARIZED and alpha > 0
    monitor = []
    active_prev = None
    for epoch in range(1, phase.max_epochs + 1):
        a = alpha
        if regularized and plan.alpha_ramp_epochs > 0:
            a = alpha * min(1.0, epoch / plan.alpha_ramp_epochs)
        objective = _plain_objective(runner, model.mask, a, reg, with_sigma)
        obj_sum, n_batches = 0.0, 0
        for bx, by in runner.batches():
            params = list(model.theta) + ([np.array(model.log_sigma)] if with_sigma else [])
            try:
                if with_sigma:
                    val, (g_theta, g_ls) = ad.value_and_grad(lambda t, s: objective(t, s, bx, by),
                                                             model.theta, np.array(model.log_sigma))
                    grads = list(g_theta) + [g_ls]
                else:
                    val, (g_theta,) = ad.value_and_grad(lambda t: objective(t, None, bx, by), model.theta)
                    grads = list(g_theta)
            except ad.NonFiniteError as exc:
                runner.fail(f"non-finite value in {phase.kind}", phase.kind, exc)
            new = opt.step(params, grads)
            model.theta = [p * m for p, m in zip(new[: len(model.theta)], model.mask)]
            if with_sigma:
                model.log_sigma = float(new[-1])
            obj_sum += val
            n_batches += 1
        tr, va = runner.record(model, phase.kind)
        if regularized:
            monitor.append(obj_sum / n_batches)
        else:
            monitor.append(va if conv.monitor == "val" else tr)
        if epoch % conv.check_every == 0 and convergence_check(monitor, conv.window, conv.bandwidth):
            if regularized and reg.method == "RL1":
                active = [np.abs(t) > plan.active_set_eps for t in model.theta]
                stable = active_prev is not None and all(np.array_equal(p, q) for p, q in zip(active, active_prev))
                active_prev = active
                if not stable:
                    continue
            runner.trace.phase_converged[phase.kind] = len(runner.trace)
            return model
    return model


def _phase_alpha(phase, reg):
    if phase.kind != REGULARIZED:
        return 0.0
    return reg.alpha if phase.alpha is None else phase.alpha


def _fix_mask(runner, model, prune_eps_outcome):
    """Apply a threshold outcome, then remove structurally dead weights."""
    plan = runner.plan
    if prune_eps_outcome is not None and prune_eps_outcome.mask is not None:
        model.mask = [m * k for m, k in zip(model.mask, prune_eps_outcome.mask)]
    model.mask = [m * (t != 0) for m, t in zip(model.mask, model.theta)]
    model.theta = [t * m for t, m in zip(model.theta, model.mask)]
    rgp_rng = np.random.default_rng([plan.seed, 0x56B])
    model, rgp = random_gradient_prune(model, runner.spec, rgp_rng, plan.rgp_trials, runner.bounds)
    return model, rgp


def _run_tamade(runner, model, alpha):
    spec = runner.plan.tamade
    if not spec.enabled or alpha <= 0:
        return PruneOutcome(threshold=0.0, steps=0, mask=None, info={"skipped": True})
    eff = model.effective()
    high = max(float(np.max(np.abs(t))) for t in eff)
    if high <= 0:
        return PruneOutcome(threshold=0.0, steps=0, mask=None, info={"skipped": True})
    snapshot = model.copy()
    snapshot.theta = eff
    if spec.mode == LOSS_RELATIVE:
        target = runner.val_loss(snapshot)
        evaluator = runner.val_loss
    else:
        target = mdl.accuracy(snapshot, runner.spec, runner.x_va, runner.y_va)
        evaluator = lambda m: mdl.accuracy(m, runner.spec, runner.x_va, runner.y_va)  # noqa: E731
    out = tamade(evaluator, snapshot, target, 0.0, high, spec.tol, spec.r, spec.mode)
    model.theta = magnitude_prune(eff, out.threshold)
    return out


def train_three_phase(model, spec, data, reg, plan):
    """WARMUP, REGULARIZED (DRR or RL1), threshold search plus RGP, FINETUNE.

    Returns (model, LossTrace, PruneOutcome).  With alpha = 0 the threshold
    search is skipped, so only exact zeros and dead weights are removed.
    """
    if reg.method not in ("DRR", "RL1", "NONE"):
        raise ValueError("train_three_phase handles DRR, RL1 and NONE")
    runner = _Runner(spec, data, plan)
    model = model.copy()
    alpha_used = 0.0
    for phase in plan.phases:
        if phase.kind == FINETUNE:
            tam = _run_tamade(runner, model, alpha_used)
            model, rgp = _fix_mask(runner, model, tam)
            tam.info.update(rgp.info)
            tam.mask = model.mask
        alpha = _phase_alpha(phase, reg) if reg.method != "NONE" else 0.0
        alpha_used = max(alpha_used, alpha)
        model = _run_plain_phase(runner, model, phase, alpha, reg)
        runner.trace.checkpoints[phase.kind] = model.copy()
    tam.post_metric = runner.val_loss(model)
    return model, runner.trace, tam


# -- PMMP -------------------------------------------------------------------------

def round_gates(gamma):
    """Round at 0.5; a gate of exactly 0.5 stays open."""
    return [(g >= 0.5).astype(np.float64) for g in gamma]


def _run_pmmp_phase(runner, model, phase, reg):
    plan = runner.plan
    conv = plan.convergence
    spec, kind = runner.spec, runner.kind
    alpha = reg.alpha if phase.alpha is None else phase.alpha
    n = len(model.theta)
    desc = Adam(plan.lr, plan.beta1, plan.beta2, plan.eps)
    asc = Adam(plan.lr * plan.u_lr_ratio, plan.beta1, plan.beta2, plan.eps)
    monitor, open_frac = [], []
    warned = False
    mask = model.mask

    def objective(theta, w, gamma, u, bx, by):
        eff = [t * m for t, m in zip(theta, mask)]
        base = _loss_expr(kind, mdl.forward(eff, spec, bx), by, None)
        return pmmp_objective(eff, w, gamma, u, alpha, base)

    for epoch in range(1, phase.max_epochs + 1):
        obj_sum, n_batches = 0.0, 0
        for bx, by in runner.batches():
            try:
                val, (gt, gw, gg, gu) = ad.value_and_grad(
                    lambda t, w, g, u: objective(t, w, g, u, bx, by), model.theta, model.w, model.gamma, model.u)
            except ad.NonFiniteError as exc:
                runner.fail("non-finite value in PMMP", phase.kind, exc)
            new = desc.step(model.theta + model.w + model.gamma, gt + gw + gg)
            model.theta = [p * m for p, m in zip(new[:n], mask)]
            model.w, model.gamma = new[n:2 * n], new[2 * n:]
            model.u = asc.step(model.u, [-g for g in gu])
            projected = pmmp_project(model)
            model.gamma, model.u = projected.gamma, projected.u
            obj_sum += val
            n_batches += 1
        runner.record(model, phase.kind)
        monitor.append(obj_sum / n_batches)
        if epoch % conv.check_every == 0:
            flat = np.concatenate([g.ravel() for g in model.gamma])
            open_frac.append(float(np.mean((flat > 0.1) & (flat < 0.9))))
            if not warned and len(open_frac) >= 50 and open_frac[-1] >= open_frac[-50] and open_frac[-1] > 0:
                warnings.warn("PMMP gates are oscillating: undecided fraction has not decreased over 50 checks")
                warned = True
            if convergence_check(monitor, conv.window, conv.bandwidth):
                runner.trace.phase_converged[phase.kind] = len(runner.trace)
                break
    return model


def train_pmmp(model, spec, data, plan, reg):
    """Alternating descent on (theta, w, gamma) and ascent on u, then round the gates.

    After the REGULARIZED phase the mask is round(gamma) and theta is set to
    w * round(gamma); RGP and FINETUNE follow as in the three-phase schedule.
    """
    if reg.method != "PMMP":
        raise ValueError("train_pmmp requires a PMMP regularizer")
    runner = _Runner(spec, data, plan)
    model = model.copy()
    outcome = None
    for phase in plan.phases:
        if phase.kind == REGULARIZED:
            model.w = [t.copy() for t in model.effective()]
            model.gamma = [np.full(t.shape, float(reg.pmmp_p_init)) for t in model.theta]
            model.u = [np.full(t.shape, float(reg.pmmp_u_multi)) for t in model.theta]
            model = _run_pmmp_phase(runner, model, phase, reg)
            runner.trace.checkpoints[phase.kind] = model.copy()
            gates = round_gates(model.gamma)
            model.mask = [m * g for m, g in zip(model.mask, gates)]
            model.theta = [w * g for w, g in zip(model.w, gates)]
            outcome = PruneOutcome(threshold=0.5, steps=0, mask=gates, info={"gates_open": int(sum(g.sum() for g in gates))})
            continue
        if phase.kind == FINETUNE:
            model, rgp = _fix_mask(runner, model, None)
            if outcome is None:
                outcome = PruneOutcome(mask=model.mask)
            outcome.info.update(rgp.info)
            outcome.mask = model.mask
            outcome.pre_metric = runner.val_loss(model)
        model = _run_plain_phase(runner, model, phase, 0.0, None)
        runner.trace.checkpoints[phase.kind] = model.copy()
    outcome.post_metric = runner.val_loss(model)
    return model, runner.trace, outcome


def train(model, spec, data, reg, plan):
    """Dispatch on the regularizer method."""
    if reg.method == "PMMP":
        return train_pmmp(model, spec, data, plan, reg)
    return train_three_phase(model, spec, data, reg, plan)
