"""Training and validation-tuning loops: SGD, SAM, full-batch solvers, sharpness."""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .exceptions import DefinitenessError, DivergenceError, EmptySetError, ParseError
from .model import (
    Checkpoint,
    ModelSpec,
    batch_grad,
    batch_risk,
    explicit_hessian,
    init_params,
)
from .numerics import RngState, check_finite, solve_spd

__all__ = [
    "SgdConfig",
    "SamConfig",
    "TuneConfig",
    "sgd_update",
    "sam_update",
    "sgd_step",
    "sam_step",
    "cosine_lr",
    "train",
    "tune_path",
    "tune_on_validation",
    "minimize_risk",
    "sharpness_of",
    "sharpness_risk",
    "CHECKPOINT_MAGIC",
    "save_checkpoint",
    "load_checkpoint",
]

CHECKPOINT_MAGIC = b"IFLAB-CKPT-1"
_NORM_FLOOR = 1e-12
_BLOWUP = 1e8


@dataclass(frozen=True)
class SgdConfig:
    learning_rate: float = 0.1
    momentum: float = 0.0
    steps: int = 100
    batch_size: int = 128
    schedule: str = "constant"
    checkpoint_every: int = 0  # 0 keeps only the initial and final states

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be > 0")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must lie in [0, 1)")
        if self.steps < 0 or self.batch_size < 1 or self.checkpoint_every < 0:
            raise ValueError("steps >= 0, batch_size >= 1 and checkpoint_every >= 0 required")
        if self.schedule not in ("constant", "cosine"):
            raise ValueError(f"unknown schedule {self.schedule!r}")

    def to_dict(self):
        return asdict(self)


@dataclass(frozen=True)
class SamConfig:
    gamma: float = 0.05
    base: SgdConfig = field(default_factory=SgdConfig)

    def __post_init__(self):
        if not self.gamma > 0:
            raise ValueError("SAM radius gamma must be > 0")


@dataclass(frozen=True)
class TuneConfig:
    """``flat=False`` tunes with plain SGD (validation minima), ``True`` with SAM."""

    flat: bool = False
    sgd: SgdConfig = field(
        default_factory=lambda: SgdConfig(0.01, 0.9, 1000, 128, "cosine")
    )
    sam_gamma: float = 0.05

    def __post_init__(self):
        if self.flat and not self.sam_gamma > 0:
            raise ValueError("sam_gamma must be > 0 when flat=True")

    @property
    def tag(self):
        return "fvm" if self.flat else "vm"

    def to_dict(self):
        return {"flat": self.flat, "sgd": self.sgd.to_dict(), "sam_gamma": self.sam_gamma}


def sgd_update(theta, g, lr, momentum=0.0, state=None):
    """One heavy-ball step ``buf = m*buf + g; theta -= lr*buf``."""
    if not lr > 0:
        raise ValueError("learning rate must be > 0")
    buf = g if (state is None or momentum == 0.0) else momentum * state + g
    return theta - lr * buf, (buf if momentum else None)


def sam_update(theta, grad_fn, lr, gamma, momentum=0.0, state=None):
    """SAM: ascend to ``theta + gamma * g/||g||``, descend with the gradient found there."""
    if not gamma > 0:
        raise ValueError("gamma must be > 0")
    g = grad_fn(theta)
    norm = float(np.linalg.norm(g))
    if norm < _NORM_FLOOR:
        return sgd_update(theta, g, lr, momentum, state)
    g_adv = grad_fn(theta + (gamma / norm) * g)
    return sgd_update(theta, g_adv, lr, momentum, state)


def _nonempty(batch):
    if len(batch[1] if isinstance(batch, tuple) else batch.y) == 0:
        raise EmptySetError("empty minibatch")


def sgd_step(spec, params, minibatch, lr, momentum_state=None, momentum=0.0):
    _nonempty(minibatch)
    g = batch_grad(spec, params, minibatch)
    return sgd_update(params, g, lr, momentum, momentum_state)


def sam_step(spec, params, minibatch, lr, gamma, momentum_state=None, momentum=0.0):
    _nonempty(minibatch)
    return sam_update(
        params, lambda t: batch_grad(spec, t, minibatch), lr, gamma, momentum, momentum_state
    )


def cosine_lr(base_lr, step, total_steps):
    if total_steps < 1 or not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    return base_lr * (1.0 + math.cos(math.pi * step / total_steps)) / 2.0


def _lr_at(cfg: SgdConfig, step):
    if cfg.schedule == "cosine":
        return cosine_lr(cfg.learning_rate, step, cfg.steps)
    return cfg.learning_rate


def _batches(n, batch_size, gen):
    """Endless stream of index batches, reshuffled every epoch."""
    if batch_size >= n:
        full = np.arange(n)
        while True:
            yield full
    while True:
        perm = gen.permutation(n)
        for a in range(0, n, batch_size):
            yield np.sort(perm[a:a + batch_size])


def _run(spec, theta, dataset, cfg: SgdConfig, rng: RngState, gamma=None,
         tag="", every=0):
    if len(dataset) == 0:
        raise EmptySetError("cannot optimize on an empty dataset")
    gen = rng.generator()
    batches = _batches(len(dataset), cfg.batch_size, gen)
    state = None
    out = [Checkpoint(theta.copy(), 0, _lr_at(cfg, 0) if cfg.steps else 0.0, "init")]
    for step in range(cfg.steps):
        idx = next(batches)
        mb = (dataset.X[idx], dataset.y[idx])
        lr = _lr_at(cfg, step)
        if gamma is None:
            new, state = sgd_step(spec, theta, mb, lr, state, cfg.momentum)
        else:
            new, state = sam_step(spec, theta, mb, lr, gamma, state, cfg.momentum)
        if not np.all(np.isfinite(new)) or np.abs(new).max() > _BLOWUP:
            raise DivergenceError(
                f"parameters diverged at step {step + 1}", last_finite_step=step
            )
        theta = new
        done = step + 1
        if every and done % every == 0 and done != cfg.steps:
            out.append(Checkpoint(theta.copy(), done, lr, f"step{done}"))
    if cfg.steps:
        out.append(Checkpoint(theta.copy(), cfg.steps, _lr_at(cfg, cfg.steps - 1), tag))
    else:
        out[-1].tag = tag
    return out


def train(spec: ModelSpec, train_set, config: SgdConfig, rng: RngState, init=None):
    """SGD from a seeded init; returns checkpoints, the last tagged ``theta_star``."""
    theta = init_params(spec, rng) if init is None else np.array(init, dtype=np.float64)
    return _run(spec, theta, train_set, config, rng.advance(1),
                tag="theta_star", every=config.checkpoint_every)


def tune_path(spec, start: Checkpoint, val_set, config: TuneConfig, rng: RngState, every=0):
    """Tune ``start`` on the validation set, keeping a checkpoint every ``every`` steps."""
    gamma = config.sam_gamma if config.flat else None
    path = _run(spec, np.array(start.params, dtype=np.float64), val_set, config.sgd, rng,
                gamma=gamma, tag=config.tag, every=every)
    for ck in path:
        ck.meta.update(start_tag=start.tag, tuning=config.to_dict())
    return path


def tune_on_validation(spec, start: Checkpoint, val_set, config: TuneConfig, rng: RngState):
    return tune_path(spec, start, val_set, config, rng)[-1]


def minimize_risk(spec, dataset, theta0, tol=1e-10, max_iter=100_000, method="newton"):
    """Full-batch deterministic minimizer run to ``||grad|| <= tol``.

    ``newton`` uses the explicit Hessian with a backtracking line search and
    is meant for small convex problems; ``gd`` is Armijo-backtracked gradient
    descent. Raises :class:`DivergenceError` if the tolerance is not reached.
    """
    theta = np.array(theta0, dtype=np.float64)
    f = batch_risk(spec, theta, dataset)
    step = 1.0
    for it in range(max_iter):
        g = batch_grad(spec, theta, dataset)
        gn = float(np.linalg.norm(g))
        if gn <= tol:
            return theta
        if method == "newton":
            H = explicit_hessian(spec, theta, dataset)
            try:
                d = -solve_spd(H, g)
            except DefinitenessError:
                d = -g
            t = 1.0
        else:
            d = -g
            t = min(step * 2.0, 1e6)
        slope = float(g @ d)
        while True:
            cand = theta + t * d
            fc = batch_risk(spec, cand, dataset)
            if fc <= f + 1e-4 * t * slope or t < 1e-14:
                break
            # predicted decrease below float resolution of f: judge by the gradient instead
            if abs(t * slope) < 1e-12 * max(1.0, abs(f)):
                if np.linalg.norm(batch_grad(spec, cand, dataset)) < gn:
                    break
            t *= 0.5
        if t < 1e-14:
            # line search stalled: rounding floor reached
            if gn <= tol * 1e3:
                return theta
            raise DivergenceError(f"line search stalled at iteration {it}, |g|={gn:.3e}",
                                  last_finite_step=it)
        step = t
        theta, f = cand, fc
    raise DivergenceError(f"no convergence in {max_iter} iterations", last_finite_step=max_iter)


def sharpness_of(risk_fn, grad_fn, theta, gamma, num_probes, rng: RngState):
    """Lower estimate of ``max_{||d|| <= gamma} risk(theta + d)``.

    Candidates are the normalized gradient-ascent point and ``num_probes``
    random directions scaled to norm ``gamma``; the base risk is included
    so the estimate never drops below ``risk(theta)``.
    """
    if not gamma > 0:
        raise ValueError("gamma must be > 0")
    if num_probes < 1:
        raise ValueError("num_probes must be >= 1")
    theta = np.asarray(theta, dtype=np.float64)
    best = risk_fn(theta)
    g = np.asarray(grad_fn(theta))
    gn = float(np.linalg.norm(g))
    if gn >= _NORM_FLOOR:
        best = max(best, risk_fn(theta + (gamma / gn) * g))
    probes = rng.generator().standard_normal((num_probes, theta.size))
    for d in probes:
        dn = float(np.linalg.norm(d))
        if dn > 0:
            best = max(best, risk_fn(theta + (gamma / dn) * d))
    return float(check_finite(best, "sharpness risk"))


def sharpness_risk(spec, params, dataset, gamma, num_probes, rng: RngState) -> float:
    if len(dataset) == 0:
        raise EmptySetError("sharpness of an empty dataset")
    return sharpness_of(
        lambda t: batch_risk(spec, t, dataset),
        lambda t: batch_grad(spec, t, dataset),
        params, gamma, num_probes, rng,
    )


# ------------------------------------------------------------ checkpoints
# Layout: magic line, one JSON header line, then the raw parameters as
# little-endian float64.

def save_checkpoint(path, checkpoint: Checkpoint, spec: ModelSpec) -> None:
    params = np.ascontiguousarray(checkpoint.params, dtype="<f8")
    if params.ndim != 1 or params.size != spec.n_params:
        raise ValueError(f"checkpoint has {params.size} parameters, spec needs {spec.n_params}")
    header = {
        "spec_hash": spec.digest(),
        "spec": spec.to_dict(),
        "step": int(checkpoint.step),
        "learning_rate_at_step": float(checkpoint.learning_rate_at_step),
        "tag": checkpoint.tag,
        "n_params": int(params.size),
        "meta": checkpoint.meta,
    }
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC + b"\n")
        fh.write(json.dumps(header, sort_keys=True, default=str).encode() + b"\n")
        fh.write(params.tobytes())


def load_checkpoint(path, spec: ModelSpec | None = None):
    """Read a checkpoint; returns ``(checkpoint, spec)``.

    When ``spec`` is given its hash must match the stored one.
    """
    with open(path, "rb") as fh:
        blob = fh.read()
    magic, sep, rest = blob.partition(b"\n")
    if magic != CHECKPOINT_MAGIC or not sep:
        raise ParseError(f"{path}: not a checkpoint (bad magic {magic[:16]!r})")
    head, sep, body = rest.partition(b"\n")
    try:
        header = json.loads(head)
        stored = ModelSpec.from_dict(header["spec"])
        n = int(header["n_params"])
    except (ValueError, KeyError, TypeError) as exc:
        raise ParseError(f"{path}: malformed checkpoint header ({exc})") from None
    if stored.digest() != header.get("spec_hash"):
        raise ParseError(f"{path}: spec hash does not match the stored spec")
    if spec is not None and spec.digest() != stored.digest():
        raise ParseError(f"{path}: checkpoint was written for a different model spec")
    if len(body) != 8 * n or n != stored.n_params:
        raise ParseError(f"{path}: expected {n} float64 parameters, found {len(body)} bytes")
    params = np.frombuffer(body, dtype="<f8").astype(np.float64)
    ck = Checkpoint(params, int(header["step"]), float(header["learning_rate_at_step"]),
                    str(header["tag"]), dict(header.get("meta", {})))
    return ck, stored
