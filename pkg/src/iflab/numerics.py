"""Dense linear algebra and counter-based random streams.

Vectors and matrices are plain ``float64`` numpy arrays. Every public
function here refuses non-finite input or output rather than letting a
NaN propagate silently.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.linalg import lapack

from .exceptions import DefinitenessError, DimensionError, NonFiniteError

__all__ = [
    "RngState",
    "as_vector",
    "as_matrix",
    "check_finite",
    "dot",
    "solve_spd",
    "rand_gaussian",
    "spectral_norm_estimate",
]


def check_finite(x, what="value"):
    arr = np.asarray(x)
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"{what} contains NaN or Inf")
    return x


def as_vector(x, what="vector"):
    v = np.asarray(x, dtype=np.float64)
    if v.ndim != 1:
        raise DimensionError(f"{what} must be 1-D, got shape {v.shape}")
    return check_finite(v, what)


def as_matrix(a, what="matrix"):
    m = np.asarray(a, dtype=np.float64)
    if m.ndim != 2:
        raise DimensionError(f"{what} must be 2-D, got shape {m.shape}")
    return check_finite(m, what)


def dot(a, b) -> float:
    a = as_vector(a, "a")
    b = as_vector(b, "b")
    if a.shape != b.shape:
        raise DimensionError(f"length mismatch: {a.size} vs {b.size}")
    return float(check_finite(np.dot(a, b), "dot product"))


def solve_spd(A, b):
    """Solve ``A x = b`` for symmetric positive definite ``A``.

    Uses a Cholesky factorization. Damping is the caller's business; a
    non-positive pivot raises :class:`DefinitenessError` with its index.
    """
    A = as_matrix(A, "A")
    b = as_vector(b, "b")
    n, m = A.shape
    if n != m:
        raise DimensionError(f"A must be square, got {A.shape}")
    if b.size != m:
        raise DimensionError(f"len(b)={b.size} does not match A.cols={m}")
    c, info = lapack.dpotrf(A, lower=1, clean=1)
    if info > 0:
        raise DefinitenessError(
            f"matrix is not positive definite: pivot {info - 1} is non-positive",
            pivot=info - 1,
        )
    if info < 0:
        raise DimensionError(f"dpotrf rejected argument {-info}")
    x, info = lapack.dpotrs(c, b, lower=1)
    if info != 0:
        raise DimensionError(f"dpotrs rejected argument {-info}")
    return check_finite(x, "solution")


@dataclass(frozen=True)
class RngState:
    """Value-semantic handle on a counter-based random stream.

    Each ``(seed, counter)`` pair names one independent Philox stream, so
    the same pair reproduces the same draws on every platform. Consumers
    take a generator for the current counter and hand back ``advance()``.
    """

    seed: int
    counter: int = 0

    def __post_init__(self):
        if not (0 <= int(self.seed) < 2**64) or not (0 <= int(self.counter) < 2**64):
            raise ValueError("seed and counter must fit in an unsigned 64-bit integer")

    def generator(self) -> np.random.Generator:
        ss = np.random.SeedSequence(int(self.seed), spawn_key=(int(self.counter),))
        return np.random.Generator(np.random.Philox(ss))

    def advance(self, k: int = 1) -> "RngState":
        return RngState(self.seed, self.counter + k)

    def split(self, n: int) -> list["RngState"]:
        """Derive ``n`` disjoint child states for parallel workers."""
        ss = np.random.SeedSequence(int(self.seed), spawn_key=(int(self.counter),))
        return [
            RngState(int(child.generate_state(1, np.uint64)[0]), 0)
            for child in ss.spawn(n)
        ]


def rand_gaussian(rng: RngState, n: int):
    """Draw ``n`` standard normals; returns ``(values, next_state)``."""
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    return rng.generator().standard_normal(n), rng.advance()


def spectral_norm_estimate(matvec, dim, rng: RngState, iters=50, tol=1e-6):
    """Power iteration estimate of the largest |eigenvalue| of a symmetric operator."""
    v, _ = rand_gaussian(rng, dim)
    v /= np.linalg.norm(v)
    est = 0.0
    for _ in range(iters):
        w = np.asarray(matvec(v), dtype=np.float64)
        norm = float(np.linalg.norm(w))
        if norm == 0.0:
            return 0.0
        v = w / norm
        if math.isclose(norm, est, rel_tol=tol):
            est = norm
            break
        est = norm
    return check_finite(est, "spectral norm")
