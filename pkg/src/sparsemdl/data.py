"""Teacher-student data generation, MNIST IDX files and seeded splits."""

from __future__ import annotations

import csv
import gzip
import math
import struct
import warnings
from dataclasses import dataclass, field

import numpy as np

from .model import MlpSpec, checkpoint_dict, init_model, mlp_forward

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


class IdxError(ValueError):
    pass


class BadMagicError(IdxError):
    pass


class TruncatedFileError(IdxError):
    pass


class CountMismatchError(IdxError):
    pass


@dataclass
class LabeledDataset:
    inputs: np.ndarray
    targets: np.ndarray
    train_idx: np.ndarray = None
    val_idx: np.ndarray = None
    test_idx: np.ndarray = None
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        n = len(self.inputs)
        if self.train_idx is None:
            self.train_idx = np.arange(n)
        if self.val_idx is None:
            self.val_idx = np.arange(0)
        if self.test_idx is None:
            self.test_idx = np.arange(0)

    def __len__(self):
        return len(self.inputs)

    @property
    def is_classification(self):
        return self.targets.ndim == 1 and np.issubdtype(self.targets.dtype, np.integer)

    def part(self, name):
        idx = {"train": self.train_idx, "val": self.val_idx, "test": self.test_idx}[name]
        return self.inputs[idx], self.targets[idx]


def teacher_seed_stream(seed):
    """Seed for teacher weights, independent of the data stream of ``seed``."""
    return int(np.random.SeedSequence([seed, 0x7EAC]).generate_state(1)[0])


def sample_from_teacher(teacher, spec, sigma, n, seed, input_domain=(-1.0, 1.0)):
    """x ~ U(domain)^d, y = teacher(x) + N(0, sigma^2)."""
    if sigma < 0 or n < 1:
        raise ValueError("need sigma >= 0 and n >= 1")
    rng = np.random.default_rng(seed)
    lo, hi = input_domain
    x = rng.uniform(lo, hi, size=(n, spec.layer_dims[0]))
    noise = rng.standard_normal((n, spec.layer_dims[-1]))
    y = mlp_forward(teacher, spec, x) + sigma * noise
    return x, y


def gen_teacher_student(teacher_dims, sigma, n, seed, input_domain=(-1.0, 1.0), teacher_seed=None):
    """Build a tanh teacher and sample ``n`` noisy points from it.

    The teacher comes from ``teacher_seed`` (defaults to a stream derived from
    ``seed``); the inputs and noise come from ``seed`` alone, so a stored
    teacher plus (sigma, n, seed) regenerates the data exactly.
    """
    spec = MlpSpec(tuple(teacher_dims), "tanh", "linear")
    if teacher_seed is None:
        teacher_seed = teacher_seed_stream(seed)
    teacher = init_model(spec, teacher_seed)
    x, y = sample_from_teacher(teacher, spec, sigma, n, seed, input_domain)
    prov = {
        "generator": "TEACHER",
        "teacher_spec": spec.to_dict(),
        "teacher": checkpoint_dict(teacher, spec),
        "teacher_seed": teacher_seed,
        "sigma": sigma,
        "n": n,
        "seed": seed,
        "input_domain": list(input_domain),
    }
    return teacher, spec, LabeledDataset(x, y, provenance=prov)


def split(dataset, fractions, seed, equal_train_test=False):
    """Seeded shuffle followed by contiguous train/val/test assignment.

    ``fractions`` is (train, val, test).  With ``equal_train_test`` the
    validation share is taken first and the rest is halved between train and
    test, so both have the same size.
    """
    fractions = tuple(float(f) for f in fractions)
    if len(fractions) != 3 or any(f < 0 for f in fractions) or sum(fractions) > 1 + 1e-12:
        raise ValueError(f"fractions must be three nonnegative numbers summing to <= 1: {fractions}")
    n = len(dataset)
    perm = np.random.default_rng(seed).permutation(n)
    if equal_train_test:
        n_val = int(round(fractions[1] * n))
        n_train = (n - n_val) // 2
        sizes = (n_train, n_val, n_train)
    else:
        n_train = int(math.floor(fractions[0] * n + 1e-9))
        n_val = int(math.floor(fractions[1] * n + 1e-9))
        n_test = int(math.floor(fractions[2] * n + 1e-9))
        if abs(sum(fractions) - 1.0) < 1e-12:
            n_train = n - n_val - n_test
        sizes = (n_train, n_val, n_test)
    for name, f, size in zip(("train", "val", "test"), fractions, sizes):
        if f > 0 and size == 0:
            warnings.warn(f"{name} split requested with fraction {f} but rounds to 0 of {n} points")
    a, b = sizes[0], sizes[0] + sizes[1]
    out = LabeledDataset(dataset.inputs, dataset.targets, np.sort(perm[:a]), np.sort(perm[a:b]),
                         np.sort(perm[b:b + sizes[2]]), dict(dataset.provenance))
    out.provenance["split"] = {"fractions": list(fractions), "seed": seed, "equal_train_test": equal_train_test}
    return out


# -- IDX ----------------------------------------------------------------------

def _read_bytes(path):
    opener = gzip.open if str(path).endswith(".gz") else open
    with opener(path, "rb") as fh:
        return fh.read()


def _parse_idx(raw, path, magic, ndim):
    header = 4 + 4 * ndim
    if len(raw) >= 4:
        got = struct.unpack(">I", raw[:4])[0]
        if got != magic:
            raise BadMagicError(f"{path}: bad magic 0x{got:08x}, expected 0x{magic:08x}")
    if len(raw) < header:
        raise TruncatedFileError(f"{path}: expected at least {header} header bytes, got {len(raw)}")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    expected = header + int(np.prod(dims))
    if len(raw) < expected:
        raise TruncatedFileError(f"{path}: expected {expected} bytes, got {len(raw)}")
    return np.frombuffer(raw, dtype=np.uint8, count=expected - header, offset=header).reshape(dims)


def load_mnist_idx(images_path, labels_path):
    images = _parse_idx(_read_bytes(images_path), images_path, IDX_IMAGES_MAGIC, 3)
    labels = _parse_idx(_read_bytes(labels_path), labels_path, IDX_LABELS_MAGIC, 1)
    if len(images) != len(labels):
        raise CountMismatchError(f"{len(images)} images but {len(labels)} labels")
    x = images.reshape(len(images), -1).astype(np.float64) / 255.0
    return LabeledDataset(x, labels.astype(np.int64),
                          provenance={"generator": "MNIST", "images": str(images_path), "labels": str(labels_path)})


def write_idx(path, array):
    """Write a uint8 array as IDX (images: 3-d, labels: 1-d)."""
    array = np.asarray(array, dtype=np.uint8)
    magic = {3: IDX_IMAGES_MAGIC, 1: IDX_LABELS_MAGIC}[array.ndim]
    opener = gzip.open if str(path).endswith(".gz") else open
    with opener(path, "wb") as fh:
        fh.write(struct.pack(">I", magic))
        fh.write(struct.pack(f">{array.ndim}I", *array.shape))
        fh.write(array.tobytes())


# -- CSV cache ----------------------------------------------------------------

def write_dataset_csv(dataset, path):
    """Raw (x, y) rows; floats written with repr so they read back exactly."""
    d_in = dataset.inputs.shape[1]
    y = dataset.targets if dataset.targets.ndim == 2 else dataset.targets[:, None]
    header = [f"x{i}" for i in range(d_in)] + [f"y{i}" for i in range(y.shape[1])]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for xi, yi in zip(dataset.inputs, y):
            writer.writerow([repr(float(v)) for v in xi] + [repr(float(v)) for v in yi])


def read_dataset_csv(path):
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        rows = np.array([[float(v) for v in row] for row in reader], dtype=np.float64)
    d_in = sum(1 for h in header if h.startswith("x"))
    return LabeledDataset(rows[:, :d_in], rows[:, d_in:], provenance={"generator": "FILE", "path": str(path)})
