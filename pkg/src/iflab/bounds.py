"""Leave-one-out ground truth and sign-error bounds for influence estimators.

The LOO target for a training point ``z`` is the change in validation
risk when the model is retrained without it,
``R_val(theta_{-z}) - R_val(theta)``. Positive means ``z`` was helpful.

The bound machinery compares an estimator's sign against that target.
Scores enter the bound in loss-change units (the same units as the
validation risk that sets its scale), so each estimator supplies a
conversion factor: ``1/N`` for standard influence, ``eps^2/2`` for the
validation-minima quadratic form with ``eps = 1/N``.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.linalg import solve_triangular

from .exceptions import DivergenceError, EmptySetError, PartitionError
from .influence import (
    EstimatorConfig,
    InfluenceReport,
    build_context,
    build_diag_fisher,
    score_dataset,
    _damped_cholesky,
)
from .model import ModelSpec, batch_risk, explicit_hessian, init_params, per_sample_grads
from .numerics import RngState
from .optim import SgdConfig, TuneConfig, minimize_risk, sharpness_risk, train, tune_on_validation

__all__ = [
    "BOUND_FORMAT",
    "LooConfig",
    "LooResult",
    "SignPartition",
    "BoundReport",
    "BoundTask",
    "loo_retrain",
    "loo_all",
    "sign_partition",
    "normalized_scores",
    "sign_error",
    "theorem_bound",
    "corollary_bound",
    "prepare_bound_task",
    "bound_report",
    "bound_experiment",
    "save_bound_results",
]

BOUND_FORMAT = "iflab-bound-1"


@dataclass(frozen=True)
class LooConfig:
    """``full_batch`` retrains deterministically to ``||grad|| <= tol``;
    ``sgd`` replays a fixed-step SGD run with a shared seed."""

    mode: str = "full_batch"
    tol: float = 1e-10
    method: str = "newton"
    sgd: SgdConfig = field(default_factory=SgdConfig)
    seed: int = 0

    def __post_init__(self):
        if self.mode not in ("full_batch", "sgd"):
            raise ValueError(f"unknown LOO mode {self.mode!r}")


@dataclass
class LooResult:
    sample_id: int
    delta_val_risk: float
    seeds_used: int
    std_across_seeds: float

    def to_json(self):
        return asdict(self)


@dataclass
class SignPartition:
    positive_ids: frozenset
    negative_ids: frozenset
    zero_ids: frozenset
    tolerance: float = 0.0

    @property
    def signed(self) -> dict:
        out = {i: 1 for i in self.positive_ids}
        out.update({i: -1 for i in self.negative_ids})
        return out


@dataclass
class BoundReport:
    mu: float
    sharp_risk: float
    gamma: float
    theorem_bound: float
    delta: float
    n: int
    corollary_bound: float
    measured_error: float
    assumptions_hold: bool
    mean_positive: float = float("nan")
    mean_negative: float = float("nan")
    estimator: str = ""
    centering: str = "none"
    score_unit: float = 1.0
    meta: dict = field(default_factory=dict)

    @property
    def theorem_bound_clamped(self):
        return min(1.0, max(0.0, self.theorem_bound))

    @property
    def corollary_bound_clamped(self):
        return min(1.0, max(0.0, self.corollary_bound))

    @property
    def valid(self) -> bool | None:
        """``measured_error <= clamp(corollary)`` when assumptions hold, else ``None``."""
        if not self.assumptions_hold:
            return None
        return self.measured_error <= self.corollary_bound_clamped

    def to_json(self):
        d = asdict(self)
        d.update(version=BOUND_FORMAT,
                 theorem_bound_clamped=self.theorem_bound_clamped,
                 corollary_bound_clamped=self.corollary_bound_clamped)
        return d


# ----------------------------------------------------------------- LOO

def _fit(spec, dataset, cfg: LooConfig, seed_index, init=None):
    rng = RngState(cfg.seed, seed_index)
    if cfg.mode == "full_batch":
        theta0 = init_params(spec, rng) if init is None else init
        return minimize_risk(spec, dataset, theta0, tol=cfg.tol, method=cfg.method)
    return train(spec, dataset, cfg.sgd, rng)[-1].params


def loo_all(train_set, spec, cfg: LooConfig, S_val, num_seeds=1, sample_ids=None):
    """LOO deltas for many samples, sharing the full-data fit per seed."""
    if num_seeds < 1:
        raise ValueError("num_seeds must be >= 1")
    ids = list(train_set.ids if sample_ids is None else sample_ids)
    deltas = np.zeros((num_seeds, len(ids)))
    for s in range(num_seeds):
        try:
            full = _fit(spec, train_set, cfg, s)
            base = batch_risk(spec, full, S_val)
            for j, sid in enumerate(ids):
                # convex full-batch fits have a unique optimum, so warm starts are exact
                warm = full if cfg.mode == "full_batch" else None
                theta = _fit(spec, train_set.without(int(sid)), cfg, s, init=warm)
                deltas[s, j] = batch_risk(spec, theta, S_val) - base
        except DivergenceError as exc:
            exc.seed_index = s
            raise
    return [
        LooResult(int(sid), float(deltas[:, j].mean()), num_seeds, float(deltas[:, j].std()))
        for j, sid in enumerate(ids)
    ]


def loo_retrain(train_set, sample_id, spec, train_config: LooConfig, S_val, num_seeds=1):
    if sample_id not in set(int(i) for i in train_set.ids):
        raise KeyError(f"sample id {sample_id} not present")
    return loo_all(train_set, spec, train_config, S_val, num_seeds, [sample_id])[0]


def sign_partition(loo_results, tolerance=None) -> SignPartition:
    deltas = np.array([r.delta_val_risk for r in loo_results])
    if tolerance is None:
        tolerance = 1e-9 * (float(np.abs(deltas).max()) if deltas.size else 0.0)
    if tolerance < 0:
        raise ValueError("tolerance must be >= 0")
    pos, neg, zero = set(), set(), set()
    for r in loo_results:
        if r.delta_val_risk > tolerance:
            pos.add(r.sample_id)
        elif r.delta_val_risk < -tolerance:
            neg.add(r.sample_id)
        else:
            zero.add(r.sample_id)
    return SignPartition(frozenset(pos), frozenset(neg), frozenset(zero), tolerance)


# --------------------------------------------------------------- bounds

def normalized_scores(report: InfluenceReport, centering=None):
    """Scores oriented so positive means helpful; returns ``(values, centering)``.

    Positive-only estimators (``higher_is_noisier``) are median-centered so
    that above-median scores read as harmful.
    """
    helpful = -report.noisiness()
    if centering is None:
        centering = "median" if report.direction == "higher_is_noisier" else "none"
    if centering == "median":
        helpful = helpful - np.median(helpful)
    return helpful, centering


def _effective(report, partition):
    signed = partition.signed
    if not signed:
        raise EmptySetError("no samples with a well-defined LOO sign")
    lookup = dict(zip((int(i) for i in report.ids), range(len(report.ids))))
    missing = [i for i in signed if i not in lookup]
    if missing:
        raise KeyError(f"partition ids missing from report: {missing[:5]}")
    ids = sorted(signed)
    return ids, np.array([lookup[i] for i in ids]), np.array([signed[i] for i in ids])


def sign_error(report: InfluenceReport, partition: SignPartition, centering=None) -> float:
    """Fraction of samples (zero-sign ids excluded) whose estimated sign is wrong."""
    values, _ = normalized_scores(report, centering)
    _, idx, truth = _effective(report, partition)
    return float(np.mean(np.sign(values[idx]) != truth))


def theorem_bound(report: InfluenceReport, partition: SignPartition, sharp_risk,
                  score_unit=1.0, centering=None):
    """``exp(-2 mu^2 / sharp_risk^2)`` with ``mu`` the smaller class-mean magnitude.

    Returns ``(bound, mu, assumptions_hold, mean_positive, mean_negative)``.
    """
    if not partition.positive_ids or not partition.negative_ids:
        raise PartitionError("both sign classes must be nonempty")
    if not sharp_risk > 0:
        raise ValueError("sharp_risk must be > 0")
    values, _ = normalized_scores(report, centering)
    values = values * score_unit
    lookup = {int(i): v for i, v in zip(report.ids, values)}
    mean_pos = float(np.mean([lookup[i] for i in partition.positive_ids]))
    mean_neg = float(np.mean([lookup[i] for i in partition.negative_ids]))
    mu = min(abs(mean_pos), abs(mean_neg))
    hold = mean_pos > 0 and mean_neg < 0
    return math.exp(-2.0 * mu * mu / (sharp_risk * sharp_risk)), mu, hold, mean_pos, mean_neg


def corollary_bound(theorem_value, delta, N):
    if not 0.0 < delta < 1.0:
        raise ValueError("delta must lie in (0, 1)")
    if N < 1:
        raise ValueError("N must be >= 1")
    return theorem_value + math.sqrt(-math.log(delta) / (2.0 * N))


# ----------------------------------------------------------- experiment

@dataclass(frozen=True)
class BoundTask:
    """Small convex task where LOO over every training point is affordable."""

    num_classes: int = 3
    dim: int = 5
    n_train: int = 100
    n_val: int = 100
    class_sep: float = 2.0
    noise_rate: float = 0.1
    weight_decay: float = 0.05
    seed: int = 0
    delta: float = 0.05
    num_probes: int = 20
    tune: TuneConfig = field(default_factory=lambda: TuneConfig(
        False, SgdConfig(0.5, 0.9, 500, 10_000, "constant")))


@dataclass
class PreparedTask:
    task: BoundTask
    spec: ModelSpec
    train_set: object
    val_set: object
    theta_star: object
    loo: list
    partition: SignPartition
    tuned: dict = field(default_factory=dict)


def prepare_bound_task(task: BoundTask, loo_cfg: LooConfig | None = None) -> PreparedTask:
    from .data import NoiseSpec, gen_gaussian_mixture, inject_label_noise, split

    rng = RngState(task.seed)
    total = task.n_train + task.n_val
    per_class = -(-total // task.num_classes)
    full = gen_gaussian_mixture(task.num_classes, per_class, task.dim, task.class_sep, rng)
    full = full.subset(np.arange(total))
    tr, va = split(full, [task.n_train / total, task.n_val / total], rng.advance(1))
    tr = inject_label_noise(tr, NoiseSpec("symmetric", task.noise_rate), rng.advance(2))
    spec = ModelSpec("logistic", task.dim, task.num_classes, weight_decay=task.weight_decay)
    cfg = loo_cfg or LooConfig(seed=task.seed)
    loo = loo_all(tr, spec, cfg, va)
    star = _fit(spec, tr, cfg, 0)
    from .model import Checkpoint

    ck = Checkpoint(star, 0, 0.0, "theta_star")
    return PreparedTask(task, spec, tr, va, ck, loo, sign_partition(loo))


def _param_change_gamma(spec, theta, hess_set, G, damping, backend, eps):
    """Largest predicted parameter change ``||eps H^{-1} g||`` over training points."""
    if backend == "diag_fisher":
        pre = build_diag_fisher(hess_set, spec, theta, damping)
        U = G / pre.diag
        return eps * float(np.max(np.linalg.norm(U, axis=1)))
    c, _ = _damped_cholesky(explicit_hessian(spec, theta, hess_set), damping, False)
    Z = solve_triangular(c, G.T, lower=True)
    U = solve_triangular(c, Z, lower=True, trans="T")
    return eps * float(np.max(np.linalg.norm(U, axis=0)))


def bound_report(config: EstimatorConfig, prep: PreparedTask) -> BoundReport:
    spec, tr, va, task = prep.spec, prep.train_set, prep.val_set, prep.task
    n = len(tr)
    eps = 1.0 / n
    if config.variant in ("vm", "fvm"):
        flat = config.variant == "fvm"
        if config.variant not in prep.tuned:
            tcfg = TuneConfig(flat, task.tune.sgd, task.tune.sam_gamma)
            prep.tuned[config.variant] = tune_on_validation(
                spec, prep.theta_star, va, tcfg, RngState(task.seed, 4))
        ck = prep.tuned[config.variant]
        hess_set = va
        unit = 0.5 * eps * eps
    else:
        ck = prep.theta_star
        hess_set = tr
        unit = eps
    report = score_dataset(config, tr, va, [ck], spec)
    G = per_sample_grads(spec, ck.params, tr)
    backend = "diag_fisher" if config.backend == "diag_fisher" else "explicit"
    gamma = _param_change_gamma(spec, ck.params, hess_set, G, config.damping, backend, eps)
    sharp = sharpness_risk(spec, ck.params, va, gamma, task.num_probes,
                           RngState(task.seed, 5))
    measured = sign_error(report, prep.partition)
    _, centering = normalized_scores(report)
    thm, mu, hold, mpos, mneg = theorem_bound(report, prep.partition, sharp, unit)
    cor = corollary_bound(thm, task.delta, n)
    return BoundReport(mu, sharp, gamma, thm, task.delta, n, cor, measured, hold, mpos, mneg,
                       config.variant, centering, unit,
                       meta={"noise_rate": task.noise_rate, "seed": task.seed,
                             "n_zero": len(prep.partition.zero_ids)})


def bound_experiment(estimator_config: EstimatorConfig, task_config: BoundTask) -> BoundReport:
    return bound_report(estimator_config, prepare_bound_task(task_config))


def save_bound_results(path, reports, loo_results=()):
    with open(path, "w") as fh:
        json.dump({"version": BOUND_FORMAT,
                   "reports": [r.to_json() for r in reports],
                   "loo": [r.to_json() for r in loo_results]}, fh, indent=1)
