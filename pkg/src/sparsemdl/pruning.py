"""Sparsification procedures.

* ``magnitude_prune`` and ``tamade``: threshold pruning and the binary search
  for the largest threshold that keeps a metric within tolerance.
* ``random_gradient_prune``: drop parameters whose gradient at a random probe
  is exactly zero (structurally dead weights).
* ``layerwise_prune`` / ``layerwise_prune_network``: per-layer gate
  optimization against the layer's recorded output batch.
* ``admm_z_update`` / ``admm_l0``: consensus ADMM with the closed-form
  hard-threshold z-step (identity constraint matrices, zero offset).
"""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .model import forward

log = logging.getLogger(__name__)

LOSS_RELATIVE = "loss-relative"
ACC_ABSOLUTE = "acc-absolute"


class AdmmDivergenceError(RuntimeError):
    pass


@dataclass
class PruneOutcome:
    threshold: float = 0.0
    steps: int = 0
    mask: list = None
    pre_metric: float = math.nan
    post_metric: float = math.nan
    info: dict = field(default_factory=dict)

    def to_dict(self):
        return {
            "threshold": self.threshold,
            "steps": self.steps,
            "pre_metric": self.pre_metric,
            "post_metric": self.post_metric,
            "kept": None if self.mask is None else int(sum(m.sum() for m in self.mask)),
            **self.info,
        }


def magnitude_prune(theta, eps):
    """Zero every entry with |theta| <= eps.  Accepts an array or a list of arrays."""
    if eps < 0:
        raise ValueError("eps must be nonnegative")
    if isinstance(theta, (list, tuple)):
        return [np.where(np.abs(t) <= eps, 0.0, t) for t in theta]
    return np.where(np.abs(theta) <= eps, 0.0, theta)


def _passes(metric, target, tol, mode):
    if mode == LOSS_RELATIVE:
        return metric <= (1.0 + tol) * target
    if mode == ACC_ABSOLUTE:
        return metric >= target - tol
    raise ValueError(f"unknown TAMADE mode {mode!r}")


def tamade(evaluator, model, target, low, high, tol, r=1e-7, mode=LOSS_RELATIVE):
    """Largest magnitude threshold whose pruned model still passes.

    ``evaluator(model)`` returns the loss (loss-relative mode: pass when
    loss <= (1 + tol) * target) or the accuracy (acc-absolute mode: pass when
    acc >= target - tol).  Unlike textbook bisection, a passing midpoint is
    recorded and the search continues upward from it.
    """
    if not low < high:
        raise ValueError("need low < high")
    if r <= 0 or tol < 0:
        raise ValueError("need r > 0 and tol >= 0")
    best, steps = low, 0
    best_metric = math.nan
    while abs(high - low) > r:
        steps += 1
        mid = (low + high) / 2.0
        trial = model.copy()
        trial.theta = magnitude_prune(model.theta, mid)
        metric = evaluator(trial)
        if _passes(metric, target, tol, mode):
            best, best_metric = mid, metric
            low = mid
        else:
            high = mid
    pruned = magnitude_prune(model.theta, best)
    mask = [(p != 0).astype(np.float64) * m for p, m in zip(pruned, model.mask)]
    return PruneOutcome(threshold=best, steps=steps, mask=mask, pre_metric=target, post_metric=best_metric,
                        info={"mode": mode, "tol": tol})


def tamade_step_bound(low, high, r):
    return math.ceil(math.log2((high - low) / r)) + 1


# -- random gradient pruning -------------------------------------------------

def probe_gradient(model, spec, z, y):
    """Gradient of ||y - f(z)||^2 with respect to every raw parameter."""
    mask = model.mask

    def objective(theta):
        eff = [t * m for t, m in zip(theta, mask)]
        return ad.total(ad.square(y - forward(eff, spec, z)))

    _, (grads,) = ad.value_and_grad(objective, model.theta)
    return grads


def random_gradient_prune(model, spec, rng, trials=1, bounds=(-1.0, 1.0)):
    """Remove parameters that cannot influence the network output.

    For each trial a probe input is drawn uniformly from the box ``bounds``
    (scalars or per-coordinate arrays) and a target from a standard normal.
    A parameter is pruned when its gradient is exactly 0.0 in every trial.
    """
    if trials < 1:
        raise ValueError("trials must be >= 1")
    lo = np.broadcast_to(np.asarray(bounds[0], dtype=np.float64), (spec.layer_dims[0],))
    hi = np.broadcast_to(np.asarray(bounds[1], dtype=np.float64), (spec.layer_dims[0],))
    dead = [np.ones(t.shape, dtype=bool) for t in model.theta]
    for _ in range(trials):
        z = rng.uniform(lo, hi)[None, :]
        y = rng.standard_normal((1, spec.layer_dims[-1]))
        for d, g in zip(dead, probe_gradient(model, spec, z, y)):
            d &= (g == 0.0)
    out = model.copy()
    out.theta = [np.where(d, 0.0, t) for d, t in zip(dead, model.theta)]
    out.mask = [np.where(d, 0.0, m) for d, m in zip(dead, model.mask)]
    newly = int(sum(np.count_nonzero(d & (m != 0) & (t != 0)) for d, m, t in zip(dead, model.mask, model.theta)))
    return out, PruneOutcome(mask=out.mask, steps=trials, info={"rgp_pruned": newly})


# -- layerwise pruning -------------------------------------------------------

@dataclass
class GDSettings:
    lr: float = 1e-2
    max_steps: int = 5000
    optimizer: str = "adam"  # "adam", "gd" or "alternating"
    gate_tol: float = 1e-3
    refit: bool = True
    gate_init: float = 0.9  # 0.5 is a saddle of the variance term
    jitter: float = 1e-3  # breaks ties between duplicated inputs
    seed: int = 0


@dataclass
class LayerResult:
    weights: np.ndarray
    bias: np.ndarray
    gate: np.ndarray
    converged: bool
    steps: int


def layerwise_objective(w_ext, gamma, X_ext, Y, alpha):
    """alpha*sum(g) + ||Y - X (w g)||^2 + sum(X^2 @ (w^2 g (1 - g)))."""
    resid = Y - X_ext @ (w_ext * gamma)
    var = (X_ext * X_ext) @ (ad.square(w_ext) * (gamma * (1.0 - gamma)))
    return ad.total(gamma) * alpha + ad.total(ad.square(resid)) + ad.total(var)


def _refit(X_ext, Y, keep):
    w = np.zeros(keep.shape)
    for k in range(Y.shape[1]):
        cols = np.flatnonzero(keep[:, k])
        if cols.size:
            w[cols, k] = np.linalg.lstsq(X_ext[:, cols], Y[:, k], rcond=None)[0]
    return w


LAYERWISE_DEFAULTS = dict(max_steps=2000, optimizer="alternating", gate_init=1.0)


def _alternating_column(X_ext, y, s, alpha, g, max_steps, tol):
    """Exact block descent on one output column in the mean parametrization m = w g.

    For fixed gates the objective is a ridge problem in m with per-entry
    weight s_j (1/g_j - 1); for fixed m each gate has the closed-form
    minimizer min(1, |m_j| sqrt(s_j / alpha)).  Both steps are exact, so the
    objective never increases.
    """
    m = np.zeros_like(g)
    step = 0
    for step in range(1, max_steps + 1):
        live = g > 0
        if live.any():
            ridge = np.sqrt(s[live] * (1.0 - g[live]) / g[live])
            A = np.vstack([X_ext[:, live], np.diag(ridge)])
            rhs = np.concatenate([y, np.zeros(int(live.sum()))])
            m = np.zeros_like(g)
            m[live] = np.linalg.lstsq(A, rhs, rcond=None)[0]
        else:
            m = np.zeros_like(g)
        if alpha > 0:
            g = np.minimum(1.0, np.abs(m) * np.sqrt(s / alpha))
        else:
            g = np.ones_like(g)
        if np.all(np.minimum(g, 1.0 - g) <= tol):
            return m, g, True, step
    return m, g, False, step


def layerwise_prune(weights, bias, X, alpha, settings=None):
    """Sparsify one layer so it still reproduces its output on batch ``X``.

    ``weights`` is (fan_in, fan_out), ``X`` is (batch, fan_in).  The bias is
    handled as an extra input row of ones.  The default optimizer alternates
    exact minimization over the gates and the gated weights; ``"gd"`` and
    ``"adam"`` run first-order descent on (w, gamma) with gates clamped to
    [0, 1].  Either way the run stops once every gate is within ``gate_tol``
    of 0 or 1.  Surviving weights are refit by least squares when
    ``settings.refit`` is set.
    """
    from .training import Adam

    settings = settings or GDSettings(**LAYERWISE_DEFAULTS)
    if alpha < 0:
        raise ValueError("alpha must be nonnegative")
    X = np.asarray(X, dtype=np.float64)
    X_ext = np.hstack([X, np.ones((X.shape[0], 1))])
    w0 = np.vstack([weights, bias[None, :]])
    Y = X_ext @ w0
    jit = np.random.default_rng(settings.seed).uniform(-1.0, 1.0, w0.shape) * settings.jitter
    g = np.clip(settings.gate_init - np.abs(jit) if settings.gate_init >= 1 else settings.gate_init + jit, 0.0, 1.0)
    if settings.optimizer == "alternating":
        s = (X_ext * X_ext).sum(axis=0)
        cols = [_alternating_column(X_ext, Y[:, k], s, alpha, g[:, k].copy(), settings.max_steps, settings.gate_tol)
                for k in range(Y.shape[1])]
        w = np.stack([c[0] for c in cols], axis=1)
        g = np.stack([c[1] for c in cols], axis=1)
        converged = all(c[2] for c in cols)
        step = max(c[3] for c in cols)
        w = w / np.where(g > 0, g, 1.0)
    else:
        # start with zero expected residual: w * gamma reproduces the layer
        w = w0 / np.where(g > 0, g, 1.0)
        opt = Adam(lr=settings.lr) if settings.optimizer == "adam" else None
        step_size = settings.lr
        if opt is None:
            # plain descent: lr is relative to a curvature bound of the objective
            gram = np.linalg.eigvalsh(X_ext.T @ X_ext)[-1]
            curv = 2.0 * gram * max(1.0, float(np.max(w * w))) + 2.0 * float(np.max((X_ext * X_ext).sum(axis=0)))
            step_size = settings.lr / curv
        converged, step = False, 0
        for step in range(1, settings.max_steps + 1):
            if np.all(np.minimum(g, 1.0 - g) <= settings.gate_tol):
                converged = True
                break
            _, (gw, gg) = ad.value_and_grad(lambda a, b: layerwise_objective(a, b, X_ext, Y, alpha), w, g)
            if opt is not None:
                w, g = opt.step([w, g], [gw, gg])
            else:
                w, g = w - step_size * gw, g - step_size * gg
            g = np.clip(g, 0.0, 1.0)
        else:
            converged = bool(np.all(np.minimum(g, 1.0 - g) <= settings.gate_tol))
    if not converged:
        warnings.warn(f"layerwise_prune: gates not converged after {settings.max_steps} steps; layer left unchanged")
        return LayerResult(weights.copy(), bias.copy(), np.ones_like(w0), False, step)
    keep = g >= 0.5
    new = _refit(X_ext, Y, keep) if settings.refit else w * keep
    return LayerResult(new[:-1], new[-1], keep.astype(np.float64), True, step)


def layer_inputs(model, spec, x):
    """Activation batch entering each layer."""
    act = np.tanh if spec.activation == "tanh" else (lambda a: np.maximum(a, 0.0))
    eff = model.effective()
    h = np.asarray(x, dtype=np.float64)
    inputs = []
    for layer in range(spec.n_layers):
        inputs.append(h)
        h = h @ eff[2 * layer] + eff[2 * layer + 1]
        if layer < spec.n_layers - 1:
            h = act(h)
    return inputs


def layerwise_prune_network(model, spec, x, alpha, settings=None, rng=None, rgp_trials=1, bounds=(-1.0, 1.0)):
    """Prune layers from last to first, removing dead weights with RGP after each."""
    if len(x) == 0:
        raise ValueError("layerwise pruning needs a nonempty batch")
    rng = rng if rng is not None else np.random.default_rng(0)
    out = model.copy()
    inputs = layer_inputs(model, spec, x)
    flags = []
    for layer in reversed(range(spec.n_layers)):
        k = 2 * layer
        eff = out.effective()
        res = layerwise_prune(eff[k], eff[k + 1], inputs[layer], alpha, settings)
        flags.append(res.converged)
        if res.converged:
            out.theta[k], out.theta[k + 1] = res.weights, res.bias
            out.mask[k] = out.mask[k] * res.gate[:-1]
            out.mask[k + 1] = out.mask[k + 1] * res.gate[-1]
            out.theta[k] = out.theta[k] * out.mask[k]
            out.theta[k + 1] = out.theta[k + 1] * out.mask[k + 1]
        out, _ = random_gradient_prune(out, spec, rng, trials=rgp_trials, bounds=bounds)
    return out, list(reversed(flags))


# -- ADMM ----------------------------------------------------------------------

@dataclass
class ZUpdate:
    w: np.ndarray
    pi: np.ndarray
    z: np.ndarray


def admm_z_update(w_avg, alpha, rho, n_batches):
    """Hard threshold: keep w where 2 alpha < rho N w^2."""
    if not rho > 0 or n_batches < 1:
        raise ValueError("need rho > 0 and N >= 1")
    w = np.asarray(w_avg, dtype=np.float64)
    pi = (2.0 * alpha < rho * n_batches * w * w).astype(np.float64)
    return ZUpdate(w, pi, w * pi)


@dataclass
class AdmmState:
    x: list
    z: list
    u: list
    pi: list
    rho: float
    alpha: float
    residuals: list = field(default_factory=list)
    iterations: int = 0


def _local_solve(f, x0, z, u, rho, settings):
    from .training import Adam

    x = [a.copy() for a in x0]
    target = [zi - ui for zi, ui in zip(z, u)]
    opt = Adam(lr=settings.lr) if settings.optimizer == "adam" else None

    def obj(v):
        out = f(v)
        for vi, ti in zip(v, target):
            out = out + ad.total(ad.square(vi - ti)) * (rho / 2.0)
        return out

    for _ in range(settings.max_steps):
        _, (g,) = ad.value_and_grad(obj, x)
        if opt is not None:
            x = opt.step(x, g)
        else:
            x = [a - settings.lr * ga for a, ga in zip(x, g)]
    return x


def admm_l0(batch_losses, x0, alpha, rho, outer_iters, settings=None, tol=0.0):
    """Consensus ADMM for sum_i f_i(x) + alpha * l0(x).

    ``x0`` is an array or a list of arrays; each ``batch_losses[i]`` maps a
    list of tape Values shaped like ``x0`` to a scalar Value.  Local x-steps
    run gradient descent warm-started from the previous iterate, the z-step
    is the exact hard threshold and the duals are scaled
    (u_i <- u_i + x_i - z).
    """
    if not rho > 0:
        raise ValueError("rho must be positive")
    if not batch_losses:
        raise ValueError("need at least one batch loss")
    settings = settings or GDSettings(lr=0.1, max_steps=50, optimizer="sgd")
    single = not isinstance(x0, (list, tuple))
    x0 = [np.asarray(x0, dtype=np.float64)] if single else [np.asarray(a, dtype=np.float64) for a in x0]
    n = len(batch_losses)
    state = AdmmState(x=[[a.copy() for a in x0] for _ in range(n)], z=[a.copy() for a in x0],
                      u=[[np.zeros_like(a) for a in x0] for _ in range(n)],
                      pi=[np.ones_like(a) for a in x0], rho=rho, alpha=alpha)
    for it in range(outer_iters):
        state.x = [_local_solve(f, xi, state.z, ui, rho, settings)
                   for f, xi, ui in zip(batch_losses, state.x, state.u)]
        zs, pis = [], []
        for k in range(len(x0)):
            w_avg = sum(xi[k] + ui[k] for xi, ui in zip(state.x, state.u)) / n
            zu = admm_z_update(w_avg, alpha, rho, n)
            zs.append(zu.z)
            pis.append(zu.pi)
        state.z, state.pi = zs, pis
        state.u = [[uk + xk - zk for uk, xk, zk in zip(ui, xi, zs)] for ui, xi in zip(state.u, state.x)]
        res = float(np.mean([math.sqrt(sum(float(np.sum((xk - zk) ** 2)) for xk, zk in zip(xi, zs)))
                             for xi in state.x]))
        state.residuals.append(res)
        state.iterations = it + 1
        if it >= 5:
            before = max(state.residuals[-6], 1e-6)
            if res > 10.0 * before:
                raise AdmmDivergenceError(
                    f"ADMM residual grew from {state.residuals[-6]:.3e} to {res:.3e} over 5 iterations "
                    f"(iteration {it + 1}, rho={rho}, alpha={alpha})")
        if tol > 0 and res < tol and it > 0:
            break
    if single:
        state.z, state.pi = state.z[0], state.pi[0]
    return state


def admm_prune_model(model, spec, batches, loss_fn, alpha, rho, outer_iters, settings=None):
    """Run ``admm_l0`` over the parameters of ``model``.

    ``batches`` is a list of (x, y) pairs and ``loss_fn(pred, y)`` the per
    batch loss expression.  Returns a model holding the consensus parameters
    and the final ADMM state.
    """
    mask = model.mask

    def make_loss(bx, by):
        def f(params):
            return loss_fn(forward([p * m for p, m in zip(params, mask)], spec, bx), by)
        return f

    state = admm_l0([make_loss(bx, by) for bx, by in batches], model.effective(), alpha, rho,
                    outer_iters, settings)
    out = model.copy()
    out.theta = [z * m for z, m in zip(state.z, mask)]
    out.mask = [m * (t != 0) for m, t in zip(mask, out.theta)]
    return out, state
