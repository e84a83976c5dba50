import struct

import numpy as np
import pytest

from sparsemdl import data as D
from sparsemdl import model as mdl


def test_noiseless_teacher_residuals_are_zero():
    teacher, spec, ds = D.gen_teacher_student((2, 5, 8, 1), 0.0, 100, 3)
    assert np.array_equal(ds.targets - mdl.mlp_forward(teacher, spec, ds.inputs), np.zeros((100, 1)))
    assert np.all(np.abs(ds.inputs) <= 1.0)


def test_noise_variance():
    teacher, spec, ds = D.gen_teacher_student((2, 5, 8, 1), 0.08, 2000, 11)
    resid = ds.targets - mdl.mlp_forward(teacher, spec, ds.inputs)
    assert abs(np.var(resid, ddof=1) - 0.0064) <= 0.15 * 0.0064


def test_teacher_parameter_count():
    _, spec, _ = D.gen_teacher_student((2, 5, 8, 1), 0.1, 5, 0)
    assert spec.param_count() == 72


def test_teacher_seed_independent_of_data_seed():
    t1, _, d1 = D.gen_teacher_student((2, 3, 1), 0.1, 10, 1, teacher_seed=0)
    t2, _, d2 = D.gen_teacher_student((2, 3, 1), 0.1, 10, 2, teacher_seed=0)
    assert all(np.array_equal(a, b) for a, b in zip(t1.theta, t2.theta))
    assert not np.array_equal(d1.inputs, d2.inputs)
    with pytest.raises(ValueError):
        D.gen_teacher_student((2, 3, 1), -0.1, 10, 1)


def test_regeneration_from_provenance():
    _, _, ds = D.gen_teacher_student((2, 5, 8, 1), 0.08, 50, 9)
    prov = ds.provenance
    teacher, spec = mdl.model_from_checkpoint(prov["teacher"])
    x, y = D.sample_from_teacher(teacher, spec, prov["sigma"], prov["n"], prov["seed"], tuple(prov["input_domain"]))
    assert np.array_equal(x, ds.inputs) and np.array_equal(y, ds.targets)


# -- split ---------------------------------------------------------------------

def toy(n):
    return D.LabeledDataset(np.arange(n, dtype=float)[:, None], np.arange(n, dtype=float)[:, None])


def test_split_all_train():
    s = D.split(toy(10), (1, 0, 0), 0)
    assert sorted(s.train_idx) == list(range(10)) and len(s.val_idx) == 0 and len(s.test_idx) == 0


def test_split_equal_train_test():
    s = D.split(toy(600), (0.5, 0.0, 0.5), 4, equal_train_test=True)
    assert len(s.train_idx) == len(s.test_idx) == 300
    assert not set(s.train_idx) & set(s.test_idx)


def test_split_deterministic_and_disjoint():
    a, b = D.split(toy(97), (0.6, 0.2, 0.2), 5), D.split(toy(97), (0.6, 0.2, 0.2), 5)
    for name in ("train_idx", "val_idx", "test_idx"):
        assert np.array_equal(getattr(a, name), getattr(b, name))
    parts = [set(a.train_idx), set(a.val_idx), set(a.test_idx)]
    assert sum(map(len, parts)) == 97 and len(set.union(*parts)) == 97
    assert a.provenance["split"]["seed"] == 5


def test_split_errors_and_warnings():
    with pytest.raises(ValueError):
        D.split(toy(10), (0.8, 0.3, 0.0), 0)
    with pytest.raises(ValueError):
        D.split(toy(10), (0.5, 0.5), 0)
    with pytest.warns(UserWarning, match="val"):
        D.split(toy(10), (0.95, 0.05, 0.0), 0)


# -- IDX -----------------------------------------------------------------------

def synthetic_mnist(tmp_path, n=7, suffix=""):
    rng = np.random.default_rng(0)
    images = rng.integers(0, 256, size=(n, 28, 28), dtype=np.uint8)
    labels = rng.integers(0, 10, size=n, dtype=np.uint8)
    ip, lp = tmp_path / f"img.idx{suffix}", tmp_path / f"lab.idx{suffix}"
    D.write_idx(ip, images)
    D.write_idx(lp, labels)
    return images, labels, ip, lp


@pytest.mark.parametrize("suffix", ["", ".gz"])
def test_idx_round_trip(tmp_path, suffix):
    images, labels, ip, lp = synthetic_mnist(tmp_path, suffix=suffix)
    ds = D.load_mnist_idx(ip, lp)
    assert ds.inputs.shape == (7, 784)
    assert np.array_equal(np.round(ds.inputs * 255).astype(np.uint8).reshape(7, 28, 28), images)
    assert np.array_equal(ds.targets, labels)
    assert ds.is_classification and ds.inputs.max() <= 1.0


def test_idx_header_layout(tmp_path):
    _, _, ip, _ = synthetic_mnist(tmp_path, n=3)
    raw = ip.read_bytes()
    assert struct.unpack(">4I", raw[:16]) == (0x803, 3, 28, 28)
    assert len(raw) == 16 + 3 * 784


def test_idx_errors(tmp_path):
    _, _, ip, lp = synthetic_mnist(tmp_path)
    with pytest.raises(D.BadMagicError):
        D.load_mnist_idx(lp, lp)
    cut = tmp_path / "cut.idx"
    cut.write_bytes(ip.read_bytes()[:1000])
    with pytest.raises(D.TruncatedFileError, match=r"expected 5504 bytes, got 1000"):
        D.load_mnist_idx(cut, lp)
    short = tmp_path / "short.idx"
    D.write_idx(short, np.zeros(5, dtype=np.uint8))
    with pytest.raises(D.CountMismatchError):
        D.load_mnist_idx(ip, short)
    assert issubclass(D.BadMagicError, D.IdxError)


def test_dataset_csv_round_trip(tmp_path):
    _, _, ds = D.gen_teacher_student((2, 3, 1), 0.3, 25, 2)
    path = tmp_path / "d.csv"
    D.write_dataset_csv(ds, path)
    back = D.read_dataset_csv(path)
    assert np.array_equal(back.inputs, ds.inputs) and np.array_equal(back.targets, ds.targets)
