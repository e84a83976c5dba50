"""Masked MLPs in factored-parameter form, losses and description-length accounting.

Parameters are kept as a flat list ``[W1, b1, W2, b2, ...]`` with weight
matrices shaped ``(fan_in, fan_out)`` so a layer is ``x @ W + b``.  The same
layout is used for the PMMP companions ``w``, ``gamma``, ``u`` and for the
binary ``mask``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad

LN2 = math.log(2.0)
HALF_LOG2_2PI = 0.5 * math.log2(2.0 * math.pi)
CHECKPOINT_VERSION = 1

ACTIVATIONS = ("tanh", "relu")
HEADS = ("linear", "softmax")
SCHEMES = ("dense", "sparse", "min")


class EmptyDataError(ValueError):
    pass


@dataclass(frozen=True)
class MlpSpec:
    layer_dims: tuple
    activation: str = "tanh"
    head: str = "linear"

    def __post_init__(self):
        dims = tuple(int(d) for d in self.layer_dims)
        object.__setattr__(self, "layer_dims", dims)
        if len(dims) < 2 or any(d < 1 for d in dims):
            raise ValueError(f"layer_dims must have >= 2 positive entries, got {dims}")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.head not in HEADS:
            raise ValueError(f"unknown head {self.head!r}")

    @property
    def n_layers(self):
        return len(self.layer_dims) - 1

    def param_shapes(self):
        shapes = []
        for fan_in, fan_out in zip(self.layer_dims[:-1], self.layer_dims[1:]):
            shapes += [(fan_in, fan_out), (fan_out,)]
        return shapes

    def param_count(self):
        return sum(int(np.prod(s)) for s in self.param_shapes())

    def to_dict(self):
        return {"layer_dims": list(self.layer_dims), "activation": self.activation, "head": self.head}

    @classmethod
    def from_dict(cls, d):
        return cls(tuple(d["layer_dims"]), d.get("activation", "tanh"), d.get("head", "linear"))


@dataclass
class MaskedModel:
    theta: list
    w: list
    gamma: list
    u: list
    mask: list
    log_sigma: float | None = None
    rng_seed: int | None = None

    def copy(self):
        return MaskedModel(
            theta=[a.copy() for a in self.theta],
            w=[a.copy() for a in self.w],
            gamma=[a.copy() for a in self.gamma],
            u=[a.copy() for a in self.u],
            mask=[a.copy() for a in self.mask],
            log_sigma=self.log_sigma,
            rng_seed=self.rng_seed,
        )

    def effective(self):
        return [t * m for t, m in zip(self.theta, self.mask)]

    @property
    def sigma(self):
        return None if self.log_sigma is None else math.exp(self.log_sigma)


def init_model(spec, seed, trainable_sigma=False):
    """Glorot-uniform weights, zero biases, all gates open."""
    rng = np.random.default_rng(seed)
    theta = []
    for fan_in, fan_out in zip(spec.layer_dims[:-1], spec.layer_dims[1:]):
        limit = math.sqrt(6.0 / (fan_in + fan_out))
        theta.append(rng.uniform(-limit, limit, size=(fan_in, fan_out)))
        theta.append(np.zeros(fan_out))
    return MaskedModel(
        theta=theta,
        w=[t.copy() for t in theta],
        gamma=[np.ones_like(t) for t in theta],
        u=[np.zeros_like(t) for t in theta],
        mask=[np.ones_like(t) for t in theta],
        log_sigma=0.0 if trainable_sigma else None,
        rng_seed=seed,
    )


def forward(params, spec, x):
    """Run the MLP on effective parameters; works for arrays and tape Values."""
    act = ad.tanh if spec.activation == "tanh" else ad.relu
    h = x
    n = spec.n_layers
    for layer in range(n):
        W, b = params[2 * layer], params[2 * layer + 1]
        h = h @ W + b
        if layer < n - 1:
            h = act(h)
    return h


def mlp_forward(model, spec, x):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != spec.layer_dims[0]:
        raise ad.ShapeError(f"mlp_forward: expected input (n, {spec.layer_dims[0]}), got {x.shape}")
    return forward(model.effective(), spec, x)


# -- per-batch loss expressions (generic over arrays and Values) -------------

def _as_2d(y):
    y = np.asarray(y, dtype=np.float64)
    return y[:, None] if y.ndim == 1 else y


def mse_expr(pred, y):
    return ad.mean(ad.square(pred - y))


def gauss_bits_expr(pred, y, log_sigma):
    """Mean per-sample code length in bits under N(pred, sigma^2) per output."""
    n, d = y.shape
    sq = ad.total(ad.square(pred - y)) * (1.0 / (2.0 * LN2 * n))
    if isinstance(log_sigma, ad.Value):
        return sq * ad.exp(log_sigma * -2.0) + log_sigma * (d / LN2) + d * HALF_LOG2_2PI
    return sq * math.exp(-2.0 * log_sigma) + d * (log_sigma / LN2 + HALF_LOG2_2PI)


def xent_bits_expr(logits, labels):
    return ad.softmax_cross_entropy(logits, labels) * (1.0 / LN2)


def _require_data(x):
    if len(x) == 0:
        raise EmptyDataError("empty dataset")


def mse_loss(model, spec, x, y):
    _require_data(x)
    return float(mse_expr(mlp_forward(model, spec, x), _as_2d(y)))


def gauss_mdl_loss(model, spec, x, y, sigma):
    """Mean bits per sample: 1/2 log2(2 pi s^2) + r^2 / (2 ln2 s^2), summed over outputs."""
    if sigma is None or not sigma > 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    _require_data(x)
    return float(gauss_bits_expr(mlp_forward(model, spec, x), _as_2d(y), math.log(sigma)))


def cross_entropy(model, spec, x, labels):
    """Mean cross-entropy in bits."""
    _require_data(x)
    return float(xent_bits_expr(mlp_forward(model, spec, x), labels))


def accuracy(model, spec, x, labels):
    """Top-1 accuracy in percent."""
    _require_data(x)
    pred = np.argmax(mlp_forward(model, spec, x), axis=1)
    return 100.0 * float(np.mean(pred == np.asarray(labels)))


def base_loss(model, spec, x, y, loss_kind):
    """Value of the training loss ``loss_kind`` (mse | gauss | xent)."""
    if loss_kind == "mse":
        return mse_loss(model, spec, x, y)
    if loss_kind == "gauss":
        sigma = model.sigma if model.sigma is not None else 1.0 / math.sqrt(2.0 * LN2)
        return gauss_mdl_loss(model, spec, x, y, sigma)
    if loss_kind == "xent":
        return cross_entropy(model, spec, x, y)
    raise ValueError(f"unknown loss kind {loss_kind!r}")


# -- counting and byte accounting ---------------------------------------------

def total_params(model):
    return sum(t.size for t in model.theta)


def nonzero_count(model):
    return int(sum(np.count_nonzero(e) for e in model.effective()))


def byte_size(total, nnz, scheme="min"):
    """Bytes to store ``nnz`` float32 values out of ``total`` parameters.

    dense: every parameter as float32.  sparse: value plus a
    ceil(log2(total))-bit index per survivor.  min: the cheaper of the two.
    """
    if scheme not in SCHEMES:
        raise ValueError(f"unknown byte scheme {scheme!r}")
    dense = 4 * total
    index_bits = math.ceil(math.log2(total)) if total > 1 else 0
    sparse = math.ceil(nnz * (4 + index_bits / 8))
    if scheme == "dense":
        return dense
    if scheme == "sparse":
        return sparse
    return min(dense, sparse)


def model_byte_size(model, scheme="min"):
    return byte_size(total_params(model), nonzero_count(model), scheme)


def error_increase(base_acc, pruned_acc):
    """Test-error increase in percentage points."""
    for a in (base_acc, pruned_acc):
        if not 0.0 <= a <= 100.0:
            raise ValueError(f"accuracy {a} outside [0, 100]")
    return (100.0 - pruned_acc) - (100.0 - base_acc)


def compression_rate(total, nnz):
    return math.inf if nnz == 0 else total / nnz


@dataclass
class DLReport:
    nnz: int
    model_bytes: int
    data_nll_bits: float
    description_length_bits: float
    error_increase: float = math.nan
    compression_rate: float = math.nan
    total_params: int = 0
    notes: dict = field(default_factory=dict)


def data_bits(model, spec, x, y, loss_kind, resolution_bits=0.0):
    """Total code length of the targets in bits.

    ``mse`` codes residuals with the fixed Gaussian sigma^2 = 1/(2 ln 2);
    ``gauss`` uses the model's trained sigma, or the maximum-likelihood sigma
    of the residuals when the model has none; ``xent`` uses the softmax head.
    ``resolution_bits`` is the per-coordinate cost of quantizing continuous
    targets and is added for regression only.
    """
    _require_data(x)
    n = len(x)
    if loss_kind == "xent":
        return n * cross_entropy(model, spec, x, y)
    y2 = _as_2d(y)
    if loss_kind == "mse":
        sigma = 1.0 / math.sqrt(2.0 * LN2)
    elif loss_kind == "gauss":
        sigma = model.sigma
        if sigma is None:
            resid = mlp_forward(model, spec, x) - y2
            # a Gaussian cannot resolve finer than the target quantization step
            floor = 2.0 ** -resolution_bits if resolution_bits > 0 else 1e-12
            sigma = max(math.sqrt(float(np.mean(resid ** 2))), floor)
    else:
        raise ValueError(f"unknown loss kind {loss_kind!r}")
    per_sample = gauss_mdl_loss(model, spec, x, y2, sigma)
    return n * per_sample + y2.size * resolution_bits


def description_length(model, spec, x, y, loss_kind="mse", scheme="min", resolution_bits=0.0):
    nll = data_bits(model, spec, x, y, loss_kind, resolution_bits)
    mbytes = model_byte_size(model, scheme)
    nnz = nonzero_count(model)
    total = total_params(model)
    return DLReport(
        nnz=nnz,
        model_bytes=mbytes,
        data_nll_bits=nll,
        description_length_bits=8 * mbytes + nll,
        compression_rate=compression_rate(total, nnz),
        total_params=total,
    )


# -- checkpoints --------------------------------------------------------------

def checkpoint_dict(model, spec):
    layers = []
    for i in range(spec.n_layers):
        layer = {}
        for part, k in (("weight", 2 * i), ("bias", 2 * i + 1)):
            layer[part] = {
                "shape": list(model.theta[k].shape),
                "theta": model.theta[k].ravel().tolist(),
                "w": model.w[k].ravel().tolist(),
                "gamma": model.gamma[k].ravel().tolist(),
                "u": model.u[k].ravel().tolist(),
                "mask": model.mask[k].ravel().tolist(),
            }
        layers.append(layer)
    return {
        "format_version": CHECKPOINT_VERSION,
        "spec": spec.to_dict(),
        "layers": layers,
        "sigma": model.sigma,
        "log_sigma": model.log_sigma,
        "rng_seed": model.rng_seed,
    }


def model_from_checkpoint(doc):
    if doc.get("format_version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {doc.get('format_version')!r}")
    spec = MlpSpec.from_dict(doc["spec"])
    fields = {name: [] for name in ("theta", "w", "gamma", "u", "mask")}
    for layer in doc["layers"]:
        for part in ("weight", "bias"):
            entry = layer[part]
            shape = tuple(entry["shape"])
            for name in fields:
                fields[name].append(np.array(entry[name], dtype=np.float64).reshape(shape))
    log_sigma = doc.get("log_sigma")
    if log_sigma is None and doc.get("sigma") is not None:
        log_sigma = math.log(doc["sigma"])
    model = MaskedModel(**fields, log_sigma=log_sigma, rng_seed=doc.get("rng_seed"))
    return model, spec


def save_checkpoint(model, spec, path, extra=None):
    doc = checkpoint_dict(model, spec)
    if extra:
        doc.update(extra)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh)


def load_checkpoint(path):
    with open(path, encoding="utf-8") as fh:
        return model_from_checkpoint(json.load(fh))
