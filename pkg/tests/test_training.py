import csv
import itertools

import numpy as np
import pytest

from sparsemdl import data as D
from sparsemdl import model as mdl
from sparsemdl import regularizers as R
from sparsemdl import training as T


# -- Adam ----------------------------------------------------------------------

def test_adam_zero_gradient_is_noop():
    st = T.AdamState()
    p = [np.array([1.0, -2.0])]
    for _ in range(3):
        p2 = T.adam_step(st, p, [np.zeros(2)])
        assert np.array_equal(p2[0], p[0])


def test_adam_first_step_by_hand():
    g = np.array([0.5, -3.0, 1e-3])
    out = T.adam_step(T.AdamState(lr=0.1), [np.zeros(3)], [g])[0]
    # bias correction makes m_hat = g and v_hat = g^2 after one step
    np.testing.assert_allclose(out, -0.1 * g / (np.abs(g) + 1e-8), rtol=1e-12)


def test_adam_constant_gradient_step_tends_to_lr():
    st = T.AdamState(lr=0.01)
    p = [np.zeros(1)]
    for _ in range(5000):
        prev = p[0].copy()
        p = T.adam_step(st, p, [np.array([2.5])])
    assert abs(prev[0] - p[0][0]) == pytest.approx(0.01, rel=1e-6)


def test_adam_shape_mismatch():
    with pytest.raises(Exception, match="shape"):
        T.adam_step(T.AdamState(), [np.zeros(2)], [np.zeros(3)])


# -- smoothing and convergence ---------------------------------------------------

def smooth_oracle(ys, h):
    out = []
    for i in range(len(ys)):
        num = den = 0.0
        for j in range(len(ys)):
            t = (i - j) / h
            k = 0.75 * (1 - t * t) if abs(t) <= 1 else 0.0
            num += k * ys[j]
            den += k
        out.append(num / den)
    return out


def test_smooth_constant_and_linear():
    np.testing.assert_allclose(T.epanechnikov_smooth(np.full(20, 3.3), 4.0), 3.3, rtol=1e-15)
    lin = 0.5 * np.arange(30) + 1.0
    sm = T.epanechnikov_smooth(lin, 4.0)
    np.testing.assert_allclose(sm[4:-4], lin[4:-4], rtol=1e-13)


def test_smooth_matches_bruteforce_oracle():
    rng = np.random.default_rng(0)
    ys = np.sin(np.linspace(0, 6, 60)) + 0.1 * rng.normal(size=60)
    np.testing.assert_allclose(T.epanechnikov_smooth(ys, 5.0), smooth_oracle(list(ys), 5.0), rtol=0, atol=1e-12)
    with pytest.raises(ValueError):
        T.epanechnikov_smooth(ys, 0.0)
    with pytest.raises(ValueError):
        T.epanechnikov_smooth([], 1.0)


def test_convergence_check_cases():
    assert not T.convergence_check([1.0] * 9, 10)
    assert not T.convergence_check(list(10.0 - np.arange(40.0)), 40)
    assert T.convergence_check([2.0] * 40, 40)
    with pytest.raises(ValueError):
        T.convergence_check([1.0] * 40, 7)


def test_convergence_check_noisy_plateaus():
    hits = sum(T.convergence_check(list(1.0 + 0.05 * np.random.default_rng(s).normal(size=60)), 40)
               for s in range(100))
    assert hits >= 95


# -- plan ------------------------------------------------------------------------

def test_plan_validation():
    T.TrainPlan()
    bad = [dict(convergence={"window": 5}), dict(convergence={"window": 2}),
           dict(phases=[T.Phase("WARMUP", 5)]),
           dict(phases=[T.Phase("FINETUNE", 5), T.Phase("WARMUP", 5)]),
           dict(phases=[T.Phase("FINETUNE", 5), T.Phase("FINETUNE", 5)]),
           dict(lr=0.0), dict(loss_kind="huber"), dict(batch_size=0)]
    for kw in bad:
        with pytest.raises(ValueError):
            T.TrainPlan(**kw)
    with pytest.raises(ValueError):
        T.Phase("COOLDOWN", 3)


def test_plan_round_trip():
    plan = T.TrainPlan(lr=0.02, phases=[{"kind": "warmup", "max_epochs": 3}, {"kind": "FINETUNE", "max_epochs": 2}],
                       convergence={"window": 8, "check_every": 2})
    again = T.TrainPlan.from_dict(plan.to_dict())
    assert again == plan
    assert again.phases[0].kind == T.WARMUP


# -- three-phase training ----------------------------------------------------------

def teacher_data(n=60, sigma=0.05, seed=0):
    _, _, ds = D.gen_teacher_student((2, 5, 8, 1), sigma, n, seed, teacher_seed=0)
    return D.split(ds, (0.8, 0.2, 0.0), seed)


def short_plan(**kw):
    base = dict(lr=1e-2, phases=[T.Phase("WARMUP", 30), T.Phase("REGULARIZED", 60), T.Phase("FINETUNE", 30)],
                convergence={"window": 10, "check_every": 5})
    base.update(kw)
    return T.TrainPlan(**base)


def test_alpha_zero_prunes_only_dead_weights():
    spec = mdl.MlpSpec((2, 6, 1))
    m = mdl.init_model(spec, 1)
    m.theta[2][3, 0] = 0.0
    m.mask[2][3, 0] = 0.0  # hidden unit 3 has no way out
    out, trace, tam = T.train(m, spec, teacher_data(), R.RegularizerSpec("RL1", 0.0), short_plan())
    # the dead bias never moves off 0, so the exact-zero rule takes it before RGP
    assert tam.info.get("skipped") and tam.info["rgp_pruned"] == 2
    expected = [np.ones_like(t) for t in m.theta]
    expected[0][:, 3] = 0.0
    expected[1][3] = 0.0
    expected[2][3, 0] = 0.0
    for a, b in zip(out.mask, expected):
        np.testing.assert_array_equal(a, b)
    assert trace.phase[0] == T.WARMUP and trace.phase[-1] == T.FINETUNE


def test_finetune_keeps_masked_weights_at_zero(monkeypatch):
    seen = []
    orig = T._Runner.record

    def spy(self, model, phase):
        if phase == T.FINETUNE:
            seen.append(all(np.all(t[m == 0] == 0) for t, m in zip(model.theta, model.mask)))
        return orig(self, model, phase)

    monkeypatch.setattr(T._Runner, "record", spy)
    spec = mdl.MlpSpec((2, 8, 1))
    out, trace, tam = T.train(mdl.init_model(spec, 2), spec, teacher_data(), R.RegularizerSpec("DRR", 0.02),
                              short_plan())
    assert seen and all(seen)
    assert sum(int(m.sum()) for m in out.mask) < spec.param_count()


def test_training_is_deterministic():
    spec = mdl.MlpSpec((2, 5, 1))
    runs = [T.train(mdl.init_model(spec, 3), spec, teacher_data(), R.RegularizerSpec("RL1", 1e-3),
                    short_plan(batch_size=16, seed=4)) for _ in range(2)]
    assert runs[0][1].train_loss == runs[1][1].train_loss
    assert runs[0][1].val_loss == runs[1][1].val_loss
    for a, b in zip(runs[0][0].theta, runs[1][0].theta):
        assert np.array_equal(a, b)


def test_trace_csv(tmp_path):
    spec = mdl.MlpSpec((2, 3, 1))
    _, trace, _ = T.train(mdl.init_model(spec, 0), spec, teacher_data(), R.RegularizerSpec("NONE", 0.0),
                          short_plan())
    path = tmp_path / "trace.csv"
    trace.to_csv(path)
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["epoch", "train_loss", "val_loss", "phase"]
    assert [int(r[0]) for r in rows[1:]] == list(range(1, len(trace) + 1))
    assert [float(r[1]) for r in rows[1:]] == trace.train_loss


def test_divergence_raises_with_snapshot():
    spec = mdl.MlpSpec((2, 1))
    plan = short_plan(lr=1e200)
    with pytest.raises(T.TrainingDivergedError) as exc:
        T.train(mdl.init_model(spec, 0), spec, teacher_data(), R.RegularizerSpec("NONE", 0.0), plan)
    assert "phase" in exc.value.snapshot and exc.value.snapshot["phase"] == T.WARMUP


def test_three_phase_rejects_pmmp():
    spec = mdl.MlpSpec((2, 1))
    with pytest.raises(ValueError):
        T.train_three_phase(mdl.init_model(spec, 0), spec, teacher_data(),
                            R.RegularizerSpec("PMMP", 0.1, pmmp_p_init=1.0, pmmp_u_multi=1.0), short_plan())


# -- PMMP --------------------------------------------------------------------------

def parallel_weights_problem():
    x = np.random.default_rng(0).uniform(-1, 1, (64, 1))
    X = np.hstack([x, x])
    spec = mdl.MlpSpec((2, 1))
    m = mdl.init_model(spec, 0)
    m.theta = [np.array([[1.2], [0.8]]), np.zeros(1)]
    return spec, m, D.LabeledDataset(X, 2 * x)


def corner_oracle(X, y, alpha):
    """min over binary gates of alpha*|z| + best MSE with those inputs."""
    best = {}
    for z in itertools.product((0, 1), repeat=X.shape[1]):
        cols = [i for i in range(X.shape[1]) if z[i]]
        if cols:
            coef = np.linalg.lstsq(X[:, cols], y, rcond=None)[0]
            mse = float(np.mean((y - X[:, cols] @ coef) ** 2))
        else:
            mse = float(np.mean(y ** 2))
        best[z] = alpha * sum(z) + mse
    return best


def pmmp_plan(regularized=3000, finetune=500):
    return T.TrainPlan(lr=1e-2, phases=[T.Phase("WARMUP", 0), T.Phase("REGULARIZED", regularized),
                                        T.Phase("FINETUNE", finetune)],
                       convergence={"window": 400, "monitor": "train"})


def test_pmmp_closes_one_of_two_parallel_weights():
    spec, m, ds = parallel_weights_problem()
    X, y = ds.part("train")
    corners = corner_oracle(X, y, 1.0)
    best = min(corners, key=corners.get)
    assert sum(best) == 1
    out, trace, outcome = T.train(m, spec, ds, R.RegularizerSpec("PMMP", 1.0, pmmp_p_init=1.0, pmmp_u_multi=1.0),
                                  pmmp_plan())
    assert out.mask[0].sum() == 1
    assert np.abs(mdl.mlp_forward(out, spec, X) - y).max() <= 1e-3
    assert outcome.info["gates_open"] == 1


def test_pmmp_alpha_zero_keeps_gates():
    spec, m, ds = parallel_weights_problem()
    out, _, outcome = T.train(m, spec, ds, R.RegularizerSpec("PMMP", 0.0, pmmp_p_init=1.0, pmmp_u_multi=1.0),
                              pmmp_plan(300, 50))
    np.testing.assert_array_equal(out.mask[0].ravel(), [1.0, 1.0])


def test_pmmp_feasible_after_rounding():
    spec, m, ds = parallel_weights_problem()
    out, trace, _ = T.train(m, spec, ds, R.RegularizerSpec("PMMP", 1.0, pmmp_p_init=1.0, pmmp_u_multi=1.0),
                            pmmp_plan(finetune=0))
    for t, w, g, k in zip(out.theta, out.w, out.gamma, out.mask):
        assert np.max(np.abs(t - w * np.array(T.round_gates([g])[0]) * k)) == 0.0


def test_round_gates_tie_goes_up():
    g = T.round_gates([np.array([0.0, 0.4999, 0.5, 1.0])])[0]
    np.testing.assert_array_equal(g, [0.0, 0.0, 1.0, 1.0])
