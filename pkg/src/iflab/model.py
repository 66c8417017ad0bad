"""Softmax classifiers with exact gradients and Hessian-vector products.

Two hypothesis classes share one code path: multinomial logistic
regression is an MLP with no hidden layer. Parameters live in one flat
``float64`` vector; :meth:`ModelSpec.layout` maps it onto layers, each
layer stored as its weight matrix (row-major, ``fan_in x fan_out``)
followed by its bias.

The L2 term ``weight_decay / 2 * ||theta||^2`` covers every parameter,
biases included, and belongs to each per-sample loss. A batch risk is the
mean of per-sample losses, so the penalty is counted once.

Hessian-vector products use the R-operator (forward-mode directional
derivative of the backward pass), which is exact up to rounding.
"""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .exceptions import DimensionError, EmptySetError, LabelError, SizeError
from .numerics import RngState, check_finite

__all__ = [
    "ModelSpec",
    "LayerSlice",
    "Checkpoint",
    "HESSIAN_CAP",
    "init_params",
    "loss",
    "grad",
    "batch_risk",
    "batch_grad",
    "hvp",
    "explicit_hessian",
    "per_sample_losses",
    "per_sample_grads",
    "per_sample_curvature",
    "predict_proba",
    "predict",
    "accuracy",
]

HESSIAN_CAP = 2000


@dataclass(frozen=True)
class LayerSlice:
    name: str
    start: int
    stop: int
    shape: tuple

    @property
    def slice(self):
        return slice(self.start, self.stop)


@dataclass(frozen=True)
class ModelSpec:
    kind: str
    input_dim: int
    num_classes: int
    hidden_sizes: tuple = ()
    activation: str = "tanh"
    weight_decay: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "hidden_sizes", tuple(int(h) for h in self.hidden_sizes))
        if self.kind not in ("logistic", "mlp"):
            raise ValueError(f"unknown model kind {self.kind!r}")
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")
        if self.input_dim < 1:
            raise ValueError("input_dim must be >= 1")
        if (self.kind == "mlp") != bool(self.hidden_sizes):
            raise ValueError("hidden_sizes must be nonempty iff kind == 'mlp'")
        if any(h < 1 for h in self.hidden_sizes):
            raise ValueError("hidden sizes must be positive")
        if self.activation not in ("tanh", "relu"):
            raise ValueError(f"unknown activation {self.activation!r}")
        if not (self.weight_decay >= 0 and math.isfinite(self.weight_decay)):
            raise ValueError("weight_decay must be finite and >= 0")

    @property
    def sizes(self):
        return (self.input_dim, *self.hidden_sizes, self.num_classes)

    @property
    def generalized_hessian(self) -> bool:
        # relu has no classical second derivative at the kink
        return self.kind == "mlp" and self.activation == "relu"

    def layout(self) -> list[LayerSlice]:
        out, pos = [], 0
        sizes = self.sizes
        for l in range(len(sizes) - 1):
            fan_in, fan_out = sizes[l], sizes[l + 1]
            out.append(LayerSlice(f"W{l}", pos, pos + fan_in * fan_out, (fan_in, fan_out)))
            pos += fan_in * fan_out
            out.append(LayerSlice(f"b{l}", pos, pos + fan_out, (fan_out,)))
            pos += fan_out
        return out

    @property
    def n_params(self) -> int:
        return self.layout()[-1].stop

    def to_dict(self):
        d = asdict(self)
        d["hidden_sizes"] = list(self.hidden_sizes)
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(**{**d, "hidden_sizes": tuple(d.get("hidden_sizes", ()))})

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


@dataclass
class Checkpoint:
    params: np.ndarray
    step: int
    learning_rate_at_step: float = 0.0
    tag: str = ""
    meta: dict = field(default_factory=dict)

    def with_tag(self, tag):
        return Checkpoint(self.params.copy(), self.step, self.learning_rate_at_step, tag, dict(self.meta))


# ---------------------------------------------------------------- internals

def _check_params(spec, theta):
    theta = np.asarray(theta, dtype=np.float64)
    if theta.ndim != 1 or theta.size != spec.n_params:
        raise DimensionError(
            f"parameter vector has size {theta.size}, spec needs {spec.n_params}"
        )
    return theta


def _unpack(spec, theta):
    layers = spec.layout()
    return [
        (theta[w.slice].reshape(w.shape), theta[b.slice])
        for w, b in zip(layers[::2], layers[1::2])
    ]


def _as_xy(spec, data):
    """Accept a Dataset, a Sample, or an ``(X, y)`` pair."""
    if hasattr(data, "X"):
        X, y = data.X, data.y
    elif hasattr(data, "x"):
        X, y = data.x, data.y
    else:
        X, y = data
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y)
    if X.ndim == 1:
        X = X[None, :]
        y = np.atleast_1d(y)
    if X.shape[1] != spec.input_dim:
        raise DimensionError(f"features have dim {X.shape[1]}, model expects {spec.input_dim}")
    if X.shape[0] != y.shape[0]:
        raise DimensionError("feature and label counts differ")
    if y.size and (y.min() < 0 or y.max() >= spec.num_classes):
        raise LabelError(f"label out of range [0, {spec.num_classes})")
    return X, y.astype(np.int64)


def _act(spec, a):
    if spec.activation == "tanh":
        f = np.tanh(a)
        d1 = 1.0 - f * f
        return f, d1, -2.0 * f * d1
    mask = (a > 0).astype(np.float64)
    return a * mask, mask, np.zeros_like(a)


def _softmax(z):
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _forward(spec, theta, X):
    params = _unpack(spec, theta)
    hs, pre, d1s, d2s = [X], [], [], []
    for l, (W, b) in enumerate(params):
        a = hs[-1] @ W + b
        if l == len(params) - 1:
            return params, hs, pre, d1s, d2s, a
        f, d1, d2 = _act(spec, a)
        pre.append(a)
        d1s.append(d1)
        d2s.append(d2)
        hs.append(f)


def _ce(logits, y):
    m = logits.max(axis=1)
    lse = m + np.log(np.exp(logits - m[:, None]).sum(axis=1))
    return lse - logits[np.arange(len(y)), y]


def _onehot(y, k):
    out = np.zeros((len(y), k))
    out[np.arange(len(y)), y] = 1.0
    return out


def _rop(spec, theta, X, y, v):
    """Forward and R-forward passes plus backward and R-backward deltas."""
    params, hs, pre, d1s, d2s, logits = _forward(spec, theta, X)
    vparams = _unpack(spec, v)
    L = len(params)
    Rhs = [np.zeros_like(X)]
    Ras = []
    for l in range(L):
        W, _ = params[l]
        VW, vb = vparams[l]
        Ra = Rhs[-1] @ W + hs[l] @ VW + vb
        if l < L - 1:
            Ras.append(Ra)
            Rhs.append(d1s[l] * Ra)
        else:
            Rz = Ra
    P = _softmax(logits)
    RP = P * (Rz - np.sum(P * Rz, axis=1, keepdims=True))
    delta = P - _onehot(y, spec.num_classes)
    Rdelta = RP
    deltas = [None] * L
    for l in range(L - 1, -1, -1):
        deltas[l] = (delta, Rdelta)
        if l > 0:
            W, _ = params[l]
            VW, _ = vparams[l]
            back = delta @ W.T
            Rback = Rdelta @ W.T + delta @ VW.T
            delta, Rdelta = back * d1s[l - 1], Rback * d1s[l - 1] + back * d2s[l - 1] * Ras[l - 1]
    return hs, Rhs, deltas, vparams


# ------------------------------------------------------------------ public

def init_params(spec: ModelSpec, rng: RngState) -> np.ndarray:
    """Weights ~ N(0, 1/fan_in), biases zero."""
    gen = rng.generator()
    theta = np.zeros(spec.n_params)
    for sl in spec.layout():
        if sl.name.startswith("W"):
            theta[sl.slice] = gen.standard_normal(sl.stop - sl.start) / math.sqrt(sl.shape[0])
    return theta


def predict_proba(spec, params, X):
    theta = _check_params(spec, params)
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1:
        X = X[None, :]
    return _softmax(_forward(spec, theta, X)[-1])


def predict(spec, params, X):
    return predict_proba(spec, params, X).argmax(axis=1)


def accuracy(spec, params, data) -> float:
    X, y = _as_xy(spec, data)
    if len(y) == 0:
        raise EmptySetError("accuracy of an empty dataset")
    return float(np.mean(predict(spec, params, X) == y))


def per_sample_losses(spec, params, data, include_decay=True):
    theta = _check_params(spec, params)
    X, y = _as_xy(spec, data)
    out = _ce(_forward(spec, theta, X)[-1], y)
    if include_decay:
        out = out + 0.5 * spec.weight_decay * float(theta @ theta)
    return check_finite(out, "loss")


def loss(spec, params, sample) -> float:
    return float(per_sample_losses(spec, params, sample)[0])


def batch_risk(spec, params, dataset) -> float:
    theta = _check_params(spec, params)
    X, y = _as_xy(spec, dataset)
    if len(y) == 0:
        raise EmptySetError("risk of an empty dataset")
    ce = _ce(_forward(spec, theta, X)[-1], y)
    return float(check_finite(ce.mean() + 0.5 * spec.weight_decay * float(theta @ theta), "risk"))


def per_sample_grads(spec, params, data, include_decay=True):
    """Gradient of each per-sample loss, stacked as rows of an ``N x p`` array."""
    theta = _check_params(spec, params)
    X, y = _as_xy(spec, data)
    layout = _unpack(spec, theta)
    _, hs, _, d1s, _, logits = _forward(spec, theta, X)
    delta = _softmax(logits) - _onehot(y, spec.num_classes)
    G = np.empty((len(y), spec.n_params))
    slices = spec.layout()
    for l in range(len(layout) - 1, -1, -1):
        ws, bs = slices[2 * l], slices[2 * l + 1]
        G[:, ws.slice] = np.einsum("ni,nj->nij", hs[l], delta).reshape(len(y), -1)
        G[:, bs.slice] = delta
        if l > 0:
            delta = (delta @ layout[l][0].T) * d1s[l - 1]
    if include_decay and spec.weight_decay:
        G += spec.weight_decay * theta
    return check_finite(G, "gradient")


def grad(spec, params, sample) -> np.ndarray:
    return per_sample_grads(spec, params, sample)[0]


def batch_grad(spec, params, dataset) -> np.ndarray:
    theta = _check_params(spec, params)
    X, y = _as_xy(spec, dataset)
    n = len(y)
    if n == 0:
        raise EmptySetError("gradient of an empty dataset")
    layout = _unpack(spec, theta)
    _, hs, _, d1s, _, logits = _forward(spec, theta, X)
    delta = (_softmax(logits) - _onehot(y, spec.num_classes)) / n
    g = np.empty(spec.n_params)
    slices = spec.layout()
    for l in range(len(layout) - 1, -1, -1):
        g[slices[2 * l].slice] = (hs[l].T @ delta).ravel()
        g[slices[2 * l + 1].slice] = delta.sum(axis=0)
        if l > 0:
            delta = (delta @ layout[l][0].T) * d1s[l - 1]
    g += spec.weight_decay * theta
    return check_finite(g, "gradient")


def hvp(spec, params, dataset, v) -> np.ndarray:
    """Exact product of the batch-risk Hessian with ``v`` (weight decay included)."""
    theta = _check_params(spec, params)
    v = np.asarray(v, dtype=np.float64)
    if v.shape != theta.shape:
        raise DimensionError(f"v has size {v.size}, expected {theta.size}")
    X, y = _as_xy(spec, dataset)
    n = len(y)
    if n == 0:
        raise EmptySetError("Hessian of an empty dataset")
    hs, Rhs, deltas, _ = _rop(spec, theta, X, y, v)
    out = np.empty_like(theta)
    slices = spec.layout()
    for l, (delta, Rdelta) in enumerate(deltas):
        out[slices[2 * l].slice] = ((Rhs[l].T @ delta + hs[l].T @ Rdelta) / n).ravel()
        out[slices[2 * l + 1].slice] = Rdelta.sum(axis=0) / n
    out += spec.weight_decay * v
    return check_finite(out, "Hessian-vector product")


def per_sample_curvature(spec, params, data, u) -> np.ndarray:
    """``u^T (Hessian of each per-sample loss) u`` for every sample, as a vector."""
    theta = _check_params(spec, params)
    u = np.asarray(u, dtype=np.float64)
    if u.shape != theta.shape:
        raise DimensionError(f"u has size {u.size}, expected {theta.size}")
    X, y = _as_xy(spec, data)
    hs, Rhs, deltas, uparams = _rop(spec, theta, X, y, u)
    q = np.full(len(y), spec.weight_decay * float(u @ u))
    for l, (delta, Rdelta) in enumerate(deltas):
        UW, ub = uparams[l]
        q += np.sum((Rhs[l] @ UW) * delta, axis=1)
        q += np.sum((hs[l] @ UW) * Rdelta, axis=1)
        q += Rdelta @ ub
    return check_finite(q, "curvature")


def explicit_hessian(spec, params, dataset, damping=0.0, cap=HESSIAN_CAP) -> np.ndarray:
    """Dense ``H + damping * I`` assembled column by column from :func:`hvp`."""
    theta = _check_params(spec, params)
    p = theta.size
    if p > cap:
        raise SizeError(
            f"{p} parameters exceeds the explicit-Hessian cap of {cap}; "
            "use the LiSSA or diagonal-Fisher backends instead"
        )
    if damping < 0:
        raise ValueError("damping must be >= 0")
    H = np.empty((p, p))
    e = np.zeros(p)
    for j in range(p):
        e[j] = 1.0
        H[:, j] = hvp(spec, theta, dataset, e)
        e[j] = 0.0
    H = 0.5 * (H + H.T)
    H[np.diag_indices(p)] += damping
    return H
