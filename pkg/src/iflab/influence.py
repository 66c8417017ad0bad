"""Influence estimators.

Standard influence (explicit solve or LiSSA) and TracIn score a training
point by how much its removal is predicted to change the validation risk;
they are signed, and mislabeled points sit at the low end. The
validation-minima estimators (``vm``/``fvm``) work at parameters tuned on
the validation set and score a point by the positive quadratic form
``g^T H_val^{-1} g`` of its own gradient, so mislabeled points sit at the
high end. Every report records which end is "noisier".

All estimators share the same pattern: build a read-only context once
(factorization, mean validation gradient, preconditioner, probe solves),
then score training points in fixed-size chunks. Chunking is independent
of the worker count, so scores are bitwise reproducible.
"""
from __future__ import annotations

import json
import os
import time
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields

import numpy as np
from scipy.linalg import solve_triangular

from .exceptions import (
    DefinitenessError,
    DimensionError,
    DivergenceError,
    EmptySetError,
    UsageError,
)
from .model import (
    Checkpoint,
    batch_grad,
    explicit_hessian,
    hvp,
    per_sample_curvature,
    per_sample_grads,
)
from .numerics import RngState, check_finite, solve_spd, spectral_norm_estimate
from scipy.linalg import lapack

__all__ = [
    "LissaConfig",
    "EstimatorConfig",
    "DiagonalPreconditioner",
    "InfluenceReport",
    "INFLUENCE_FORMAT",
    "VARIANTS",
    "lissa_solve",
    "lissa_ihvp",
    "exact_if_set",
    "tracin_score",
    "build_diag_fisher",
    "randomized_quadratic_form",
    "vmfvm_set_score",
    "vmfvm_sample_score",
    "build_context",
    "score_dataset",
    "worker_count",
]

INFLUENCE_FORMAT = "iflab-inf-1"
VARIANTS = ("exact_if", "lissa_if", "tracin", "vm", "fvm")
_DEFAULT_BACKEND = {
    "exact_if": "explicit",
    "lissa_if": "lissa",
    "tracin": "none",
    "vm": "diag_fisher",
    "fvm": "diag_fisher",
}
_CHUNK = 256
_LISSA_BLOWUP = 1e6


@dataclass(frozen=True)
class LissaConfig:
    depth: int = 500
    repeats: int = 4
    scale: float | None = None  # None -> 1.5 x power-iteration estimate of ||H + damping I||
    batch_size: int | None = None  # None -> exact full-batch HVPs
    seed: int = 0

    def __post_init__(self):
        if self.depth < 0 or self.repeats < 1:
            raise ValueError("lissa depth must be >= 0 and repeats >= 1")
        if self.scale is not None and not self.scale > 0:
            raise ValueError("lissa scale must be > 0")


@dataclass(frozen=True)
class EstimatorConfig:
    variant: str = "fvm"
    damping: float = 1e-3
    epsilon: float | None = None  # None -> 1/N
    lissa: LissaConfig = field(default_factory=LissaConfig)
    hessian_backend: str | None = None  # None -> per-variant default
    probes: int = 0
    auto_damping: bool = False  # explicit backend: lift damping past the most negative eigenvalue

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown estimator variant {self.variant!r}")
        if not self.damping >= 0:
            raise ValueError("damping must be >= 0")
        if self.epsilon is not None and not self.epsilon > 0:
            raise ValueError("epsilon must be > 0")
        if self.probes < 0:
            raise ValueError("probes must be >= 0")
        if self.backend not in ("explicit", "lissa", "diag_fisher", "none"):
            raise ValueError(f"unknown hessian backend {self.backend!r}")
        if self.variant in ("vm", "fvm") and self.backend == "none":
            raise ValueError("vm/fvm need a Hessian backend")

    @property
    def backend(self) -> str:
        return self.hessian_backend or _DEFAULT_BACKEND[self.variant]

    @property
    def direction(self) -> str:
        return "higher_is_noisier" if self.variant in ("vm", "fvm") else "lower_is_noisier"

    def to_dict(self):
        d = asdict(self)
        d["hessian_backend"] = self.backend
        return d

    @classmethod
    def from_dict(cls, d):
        """Inverse of :meth:`to_dict`; extra provenance keys from reports are ignored."""
        names = {f.name for f in fields(cls)}
        d = {k: v for k, v in d.items() if k in names}
        if isinstance(d.get("lissa"), dict):
            d["lissa"] = LissaConfig(**d["lissa"])
        return cls(**d)


@dataclass(frozen=True)
class DiagonalPreconditioner:
    diag: np.ndarray

    def __post_init__(self):
        d = np.asarray(self.diag, dtype=np.float64)
        check_finite(d, "preconditioner")
        bad = np.flatnonzero(d <= 0)
        if bad.size:
            raise DefinitenessError(
                f"damped Fisher diagonal is non-positive at index {bad[0]}", pivot=None
            )
        object.__setattr__(self, "diag", d)

    def inverse_apply(self, g):
        return np.asarray(g) / self.diag

    def quadratic(self, G):
        """``g^T P^{-1} g`` for each row of ``G``."""
        G = np.atleast_2d(G)
        return np.sum(G * G / self.diag, axis=1)


@dataclass
class InfluenceReport:
    estimator: dict
    checkpoint_tag: str
    ids: np.ndarray
    values: np.ndarray
    direction: str
    wall_time: float = 0.0

    @property
    def scores(self) -> dict:
        return {int(i): float(s) for i, s in zip(self.ids, self.values)}

    def noisiness(self) -> np.ndarray:
        """Scores oriented so that larger means more likely mislabeled."""
        return self.values if self.direction == "higher_is_noisier" else -self.values

    def aligned(self, ids) -> np.ndarray:
        lookup = self.scores
        return np.array([lookup[int(i)] for i in ids])

    def to_json(self) -> dict:
        return {
            "version": INFLUENCE_FORMAT,
            "estimator": self.estimator,
            "checkpoint_tag": self.checkpoint_tag,
            "direction": self.direction,
            "scores": [[int(i), float(s)] for i, s in zip(self.ids, self.values)],
            "wall_time": self.wall_time,
        }

    @classmethod
    def from_json(cls, d) -> "InfluenceReport":
        if d.get("version") != INFLUENCE_FORMAT:
            raise ValueError(f"unsupported influence report version {d.get('version')!r}")
        pairs = d["scores"]
        return cls(
            d["estimator"],
            d["checkpoint_tag"],
            np.array([p[0] for p in pairs], dtype=np.int64),
            np.array([p[1] for p in pairs], dtype=np.float64),
            d["direction"],
            d.get("wall_time", 0.0),
        )

    def save(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_json(), fh)

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            return cls.from_json(json.load(fh))


def worker_count(workers=None) -> int:
    if workers is not None:
        return max(1, int(workers))
    env = os.environ.get("IFLAB_THREADS")
    return max(1, int(env)) if env else 1


# --------------------------------------------------------------- LiSSA

def lissa_solve(matvec, v, damping, depth, scale, repeats=1, matvec_factory=None):
    """Truncated Neumann recursion for ``(H + damping I)^{-1} v``.

    ``r_0 = v``, ``r_{t+1} = v + (I - (H + damping I)/scale) r_t``, answer
    ``r_depth / scale``. With ``matvec_factory`` each repeat draws its own
    stochastic Hessian operator and the answers are averaged.
    """
    v = np.asarray(v, dtype=np.float64)
    vnorm = max(float(np.linalg.norm(v)), 1e-300)
    total = np.zeros_like(v)
    runs = repeats if matvec_factory is not None else 1
    for rep in range(runs):
        mv = matvec_factory(rep) if matvec_factory is not None else matvec
        r = v.copy()
        for t in range(depth):
            r = v + r - (mv(r) + damping * r) / scale
            if float(np.linalg.norm(r)) > _LISSA_BLOWUP * vnorm * max(1.0, depth):
                raise DivergenceError(
                    f"LiSSA iterate blew up at depth {t + 1}; use a larger scale",
                    last_finite_step=t,
                )
        total += r
    return check_finite(total / (runs * scale), "LiSSA estimate")


def _lissa_operator(spec, theta, dataset, cfg: LissaConfig):
    if cfg.batch_size is None or cfg.batch_size >= len(dataset):
        return (lambda r: hvp(spec, theta, dataset, r)), None

    def factory(rep):
        gen = RngState(cfg.seed, rep).generator()
        state = {"gen": gen}

        def mv(r):
            idx = state["gen"].choice(len(dataset), size=cfg.batch_size, replace=False)
            return hvp(spec, theta, (dataset.X[idx], dataset.y[idx]), r)

        return mv

    return None, factory


def _lissa_scale(spec, theta, dataset, damping, cfg: LissaConfig):
    if cfg.scale is not None:
        return cfg.scale
    norm = spectral_norm_estimate(
        lambda r: hvp(spec, theta, dataset, r), theta.size, RngState(cfg.seed, 2**32)
    )
    return 1.5 * (norm + damping)


def lissa_ihvp(v, dataset, spec, checkpoint, config: EstimatorConfig):
    theta = np.asarray(getattr(checkpoint, "params", checkpoint), dtype=np.float64)
    cfg = config.lissa
    scale = _lissa_scale(spec, theta, dataset, config.damping, cfg)
    mv, factory = _lissa_operator(spec, theta, dataset, cfg)
    return lissa_solve(mv, v, config.damping, cfg.depth, scale, cfg.repeats, factory)


# ----------------------------------------------------------- primitives

def _theta(checkpoint):
    return np.asarray(getattr(checkpoint, "params", checkpoint), dtype=np.float64)


def _grads(spec, theta, data):
    return per_sample_grads(spec, theta, data)


def _damped_cholesky(H, damping, auto):
    """Lower Cholesky factor of ``H + lam I``; returns ``(factor, lam)``."""
    lam = damping
    if auto:
        lo = float(np.linalg.eigvalsh(H)[0])
        lam = damping + max(0.0, -lo)
    A = H.copy()
    A[np.diag_indices_from(A)] += lam
    c, info = lapack.dpotrf(A, lower=1, clean=1)
    if info > 0:
        raise DefinitenessError(
            f"damped Hessian is not positive definite: pivot {info - 1} failed "
            f"(damping={lam:g})",
            pivot=info - 1,
        )
    return c, lam


def exact_if_set(z_tr, train_set, S_val, checkpoint, damping, spec):
    """``mean_m g_m^T (H_tr + damping I)^{-1} g_tr`` via the mean validation gradient."""
    theta = _theta(checkpoint)
    H = explicit_hessian(spec, theta, train_set, damping)
    u = solve_spd(H, batch_grad(spec, theta, S_val))
    return float(_grads(spec, theta, z_tr)[0] @ u)


def tracin_score(z_tr, S_val, checkpoints, learning_rates, spec):
    if len(checkpoints) == 0:
        raise ValueError("TracIn needs at least one checkpoint")
    if len(checkpoints) != len(learning_rates):
        raise DimensionError("one learning rate per checkpoint required")
    total = 0.0
    for ck, lr in zip(checkpoints, learning_rates):
        theta = _theta(ck)
        total += lr * float(batch_grad(spec, theta, S_val) @ _grads(spec, theta, z_tr)[0])
    return total


def build_diag_fisher(S_val, spec, checkpoint, damping) -> DiagonalPreconditioner:
    """Diagonal of the empirical Fisher on ``S_val`` plus ``damping``."""
    if len(S_val) == 0:
        raise EmptySetError("Fisher diagonal of an empty set")
    theta = _theta(checkpoint)
    acc = np.zeros(theta.size)
    for a in range(0, len(S_val), _CHUNK):
        G = _grads(spec, theta, (S_val.X[a:a + _CHUNK], S_val.y[a:a + _CHUNK]))
        acc += np.sum(G * G, axis=0)
    return DiagonalPreconditioner(acc / len(S_val) + damping)


def randomized_quadratic_form(G, inverse_apply, probes, rng: RngState):
    """Unbiased estimate of ``g^T H^{-1} g`` for each row of ``G``.

    For standard normal ``V``, ``E[(g^T H^{-1} V)(V^T g)] = g^T H^{-1} g``,
    so one inverse solve per probe serves every ``g``. Returns the
    per-probe products as a ``rows x probes`` array; average over axis 1.
    """
    G = np.atleast_2d(G)
    V = rng.generator().standard_normal((G.shape[1], probes))
    W = np.column_stack([inverse_apply(V[:, k]) for k in range(probes)])
    return (G @ W) * (G @ V)


# --------------------------------------------------------------- contexts

class _Context:
    """Read-only scoring context: ``score(X, y)`` for arbitrary labeled points."""

    direction = "lower_is_noisier"
    tag = ""
    meta: dict

    def score(self, X, y):  # pragma: no cover - interface
        raise NotImplementedError


class _LinearContext(_Context):
    def __init__(self, spec, theta, u, tag, meta):
        self.spec, self.theta, self.u, self.tag, self.meta = spec, theta, u, tag, meta

    def score(self, X, y):
        return _grads(self.spec, self.theta, (X, y)) @ self.u


class _TracInContext(_Context):
    def __init__(self, spec, terms, tag):
        self.spec, self.terms, self.tag, self.meta = spec, terms, tag, {}

    def score(self, X, y):
        out = np.zeros(len(y))
        for theta, lr, gval in self.terms:
            out += lr * (_grads(self.spec, theta, (X, y)) @ gval)
        return out


class _QuadraticContext(_Context):
    direction = "higher_is_noisier"

    def __init__(self, spec, theta, quad, tag, meta):
        self.spec, self.theta, self.quad, self.tag, self.meta = spec, theta, quad, tag, meta

    def score(self, X, y):
        return self.quad(_grads(self.spec, self.theta, (X, y)))


def _pick(checkpoints, variant):
    cks = [checkpoints] if isinstance(checkpoints, Checkpoint) else list(checkpoints)
    if not cks:
        raise UsageError("no checkpoints supplied")
    if variant in ("vm", "fvm"):
        tuned = [c for c in cks if c.tag in ("vm", "fvm")]
        if not tuned:
            raise UsageError(f"{variant} needs a checkpoint tagged 'vm' or 'fvm'")
        match = [c for c in tuned if c.tag == variant]
        return (match or tuned)[-1]
    if variant == "tracin":
        return cks
    star = [c for c in cks if c.tag == "theta_star"]
    return (star or cks)[-1]


def build_context(config: EstimatorConfig, train_set, S_val, checkpoints, spec) -> _Context:
    """Precompute everything shared across training points for one estimator."""
    if len(S_val) == 0:
        raise EmptySetError("empty validation set")
    v = config.variant
    picked = _pick(checkpoints, v)

    if v == "tracin":
        terms = []
        for ck in picked:
            theta = _theta(ck)
            terms.append((theta, float(ck.learning_rate_at_step), batch_grad(spec, theta, S_val)))
        return _TracInContext(spec, terms, ",".join(c.tag or str(c.step) for c in picked))

    theta = _theta(picked)
    meta = {}
    if v in ("exact_if", "lissa_if"):
        gval = batch_grad(spec, theta, S_val)
        if config.backend == "lissa":
            u = lissa_ihvp(gval, train_set, spec, theta, config)
        elif config.backend == "explicit":
            c, lam = _damped_cholesky(explicit_hessian(spec, theta, train_set), config.damping,
                                      config.auto_damping)
            meta["damping_used"] = lam
            u, _ = lapack.dpotrs(c, gval, lower=1)
        else:
            raise UsageError(f"{v} does not support backend {config.backend!r}")
        return _LinearContext(spec, theta, u, picked.tag, meta)

    backend = config.backend
    if backend == "diag_fisher":
        pre = build_diag_fisher(S_val, spec, theta, config.damping)
        meta["preconditioner_min"] = float(pre.diag.min())
        quad = pre.quadratic
    elif backend == "explicit":
        c, lam = _damped_cholesky(explicit_hessian(spec, theta, S_val), config.damping,
                                  config.auto_damping)
        meta["damping_used"] = lam

        def quad(G, c=c):
            Z = solve_triangular(c, G.T, lower=True, check_finite=False)
            return np.sum(Z * Z, axis=0)
    elif backend == "lissa":
        if config.probes > 0:
            def inv(r):
                return lissa_ihvp(r, S_val, spec, theta, config)

            V = RngState(config.lissa.seed, 7).generator().standard_normal((theta.size, config.probes))
            W = np.column_stack([inv(V[:, k]) for k in range(config.probes)])

            def quad(G, W=W, V=V):
                return np.mean((G @ W) * (G @ V), axis=1)
        else:
            warnings.warn("lissa backend without probes runs one LiSSA solve per sample",
                          stacklevel=2)

            def quad(G):
                return np.array([g @ lissa_ihvp(g, S_val, spec, theta, config) for g in G])
    else:
        raise UsageError(f"{v} does not support backend {backend!r}")
    return _QuadraticContext(spec, theta, quad, picked.tag, meta)


def vmfvm_set_score(z_tr, S_val, tuned, spec, backend="diag_fisher", damping=1e-3, probes=0,
                    lissa=None):
    """Set-level validation-minima score ``g^T (H_val + damping)^{-1} g`` (non-negative)."""
    tag = getattr(tuned, "tag", None)
    if tag not in ("vm", "fvm"):
        raise UsageError(f"checkpoint must be tagged 'vm' or 'fvm', got {tag!r}")
    cfg = EstimatorConfig(tag, damping, None, lissa or LissaConfig(), backend, probes)
    ctx = build_context(cfg, None, S_val, [tuned], spec)
    X, y = _xy(z_tr)
    return float(ctx.score(X, y)[0])


def vmfvm_sample_score(z_tr, z_val, tuned, spec, epsilon, damping=1e-3, backend="explicit",
                       S_val=None, lissa=None):
    """Per-validation-sample score with the second-order loss term.

    ``<g_val, u> + epsilon/2 * u^T Hess(loss(z_val)) u`` where
    ``u = (H_val + damping I)^{-1} g_tr``. ``S_val`` defines ``H_val``;
    the diagonal backend uses its Fisher diagonal instead.
    """
    tag = getattr(tuned, "tag", None)
    if tag not in ("vm", "fvm"):
        raise UsageError(f"checkpoint must be tagged 'vm' or 'fvm', got {tag!r}")
    if not epsilon > 0:
        raise ValueError("epsilon must be > 0")
    if S_val is None:
        raise UsageError("S_val is required to form the validation Hessian")
    theta = _theta(tuned)
    g_tr = _grads(spec, theta, _xy(z_tr))[0]
    u = _inverse_apply(spec, theta, S_val, g_tr, damping, backend, lissa)
    Xv, yv = _xy(z_val)
    g_val = _grads(spec, theta, (Xv, yv))
    curv = per_sample_curvature(spec, theta, (Xv, yv), u)
    out = g_val @ u + 0.5 * epsilon * curv
    return float(out[0]) if out.size == 1 else out


def _inverse_apply(spec, theta, S_val, g, damping, backend, lissa=None):
    if backend == "explicit":
        return solve_spd(explicit_hessian(spec, theta, S_val, damping), g)
    if backend == "diag_fisher":
        return build_diag_fisher(S_val, spec, theta, damping).inverse_apply(g)
    if backend == "lissa":
        cfg = EstimatorConfig("vm", damping, None, lissa or LissaConfig(), "lissa")
        return lissa_ihvp(g, S_val, spec, theta, cfg)
    raise UsageError(f"unknown backend {backend!r}")


def _xy(z):
    if hasattr(z, "X"):
        return z.X, z.y
    if hasattr(z, "x"):
        return np.atleast_2d(z.x), np.atleast_1d(z.y)
    X, y = z
    X = np.asarray(X, dtype=np.float64)
    return (X[None, :], np.atleast_1d(y)) if X.ndim == 1 else (X, np.asarray(y))


def _score_chunks(ctx, X, y, workers):
    starts = list(range(0, len(y), _CHUNK))

    def run(a):
        return ctx.score(X[a:a + _CHUNK], y[a:a + _CHUNK])

    if workers <= 1 or len(starts) <= 1:
        parts = [run(a) for a in starts]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(run, starts))
    return np.concatenate(parts) if parts else np.zeros(0)


def score_dataset(config: EstimatorConfig, train_set, S_val, checkpoints, spec,
                  workers=None, context=None) -> InfluenceReport:
    """Score every training sample; scores are keyed by sample id."""
    t0 = time.perf_counter()
    ctx = context or build_context(config, train_set, S_val, checkpoints, spec)
    values = _score_chunks(ctx, train_set.X, train_set.y, worker_count(workers))
    check_finite(values, "influence scores")
    est = config.to_dict()
    est.update(ctx.meta)
    if config.variant in ("vm", "fvm") and config.epsilon is None:
        est["epsilon"] = 1.0 / len(train_set)
    return InfluenceReport(est, ctx.tag, np.array(train_set.ids), values, config.direction,
                           time.perf_counter() - t0)
