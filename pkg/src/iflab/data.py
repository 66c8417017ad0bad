"""Synthetic noisy-label classification data, splits, and JSON-lines I/O."""
from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .exceptions import DimensionError, LabelError, ParseError
from .numerics import RngState

__all__ = [
    "Sample",
    "Dataset",
    "NoiseSpec",
    "NOISE_PRESETS",
    "DATASET_FORMAT",
    "gen_gaussian_mixture",
    "inject_label_noise",
    "split",
    "largest_remainder_sizes",
    "save_dataset",
    "load_dataset",
]

DATASET_FORMAT = "iflab-ds-1"


@dataclass(frozen=True)
class Sample:
    id: int
    x: np.ndarray
    y: int
    true_label: int | None = None
    is_noisy: bool | None = None


@dataclass(frozen=True, eq=False)
class Dataset:
    """Immutable labeled point set, stored column-wise for vectorized use.

    ``true_y`` uses -1 for "unknown" entries when only some samples carry a
    clean label; ``noisy`` is ``None`` when no flags are recorded.
    """

    X: np.ndarray
    y: np.ndarray
    num_classes: int
    ids: np.ndarray = None
    true_y: np.ndarray | None = None
    noisy: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        X = np.asarray(self.X, dtype=np.float64)
        if X.ndim == 1 and X.size == 0:
            X = X.reshape(0, 0)
        if X.ndim != 2:
            raise DimensionError(f"X must be 2-D, got shape {X.shape}")
        n = X.shape[0]
        y = np.asarray(self.y, dtype=np.int64).reshape(-1)
        if y.size != n:
            raise DimensionError("X and y disagree on the number of samples")
        ids = np.arange(n) if self.ids is None else np.asarray(self.ids, dtype=np.int64)
        if ids.size != n or np.unique(ids).size != n:
            raise ValueError("sample ids must be unique, one per sample")
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")
        if n and (y.min() < 0 or y.max() >= self.num_classes):
            raise LabelError(f"label out of range [0, {self.num_classes})")
        true_y = None if self.true_y is None else np.asarray(self.true_y, dtype=np.int64)
        noisy = None if self.noisy is None else np.asarray(self.noisy, dtype=bool)
        if true_y is not None:
            if true_y.size != n:
                raise DimensionError("true_y length mismatch")
            if n and (true_y.max() >= self.num_classes or true_y.min() < -1):
                raise LabelError("true label out of range")
        if noisy is not None:
            if noisy.size != n:
                raise DimensionError("noisy flag length mismatch")
            if true_y is not None:
                known = true_y >= 0
                if np.any(noisy[known] != (true_y[known] != y[known])):
                    raise ValueError("noisy flags disagree with true labels")
        for name, val in (("X", X), ("y", y), ("ids", ids), ("true_y", true_y), ("noisy", noisy)):
            if val is not None:
                val.setflags(write=False)
            object.__setattr__(self, name, val)

    def __len__(self):
        return self.X.shape[0]

    @property
    def dim(self) -> int:
        return self.X.shape[1]

    @property
    def samples(self) -> list[Sample]:
        return [self.sample(i) for i in range(len(self))]

    def sample(self, i: int) -> Sample:
        t = None if self.true_y is None or self.true_y[i] < 0 else int(self.true_y[i])
        f = None if self.noisy is None else bool(self.noisy[i])
        return Sample(int(self.ids[i]), self.X[i].copy(), int(self.y[i]), t, f)

    def subset(self, index) -> "Dataset":
        index = np.asarray(index, dtype=np.int64)
        return Dataset(
            self.X[index],
            self.y[index],
            self.num_classes,
            ids=self.ids[index],
            true_y=None if self.true_y is None else self.true_y[index],
            noisy=None if self.noisy is None else self.noisy[index],
            meta=dict(self.meta),
        )

    def without(self, sample_id: int) -> "Dataset":
        keep = np.flatnonzero(self.ids != sample_id)
        if keep.size == len(self):
            raise KeyError(f"sample id {sample_id} not present")
        return self.subset(keep)

    def with_labels(self, y) -> "Dataset":
        y = np.asarray(y, dtype=np.int64)
        noisy = None if self.true_y is None else (self.true_y != y) & (self.true_y >= 0)
        return Dataset(self.X, y, self.num_classes, ids=self.ids, true_y=self.true_y,
                       noisy=noisy, meta=dict(self.meta))

    def index_of(self, sample_id: int) -> int:
        hit = np.flatnonzero(self.ids == sample_id)
        if hit.size == 0:
            raise KeyError(f"sample id {sample_id} not present")
        return int(hit[0])

    def equals(self, other: "Dataset") -> bool:
        def same(a, b):
            if a is None or b is None:
                return a is None and b is None
            return a.shape == b.shape and np.array_equal(a, b)

        return (
            self.num_classes == other.num_classes
            and self.X.shape == other.X.shape
            and same(self.X, other.X)
            and same(self.y, other.y)
            and same(self.ids, other.ids)
            and same(self.true_y, other.true_y)
            and same(self.noisy, other.noisy)
        )


@dataclass(frozen=True)
class NoiseSpec:
    kind: str = "symmetric"
    rate: float = 0.0

    def __post_init__(self):
        if self.kind not in ("symmetric", "asymmetric_pairflip"):
            raise ValueError(f"unknown noise kind {self.kind!r}")
        if not (0.0 <= self.rate < 1.0):
            raise ValueError("noise rate must lie in [0, 1)")


# Rough analogues of the CIFAR-10N settings; the real noise is
# instance-dependent, these are not.
NOISE_PRESETS = {
    "clean": NoiseSpec("symmetric", 0.0),
    "aggre-like": NoiseSpec("symmetric", 0.10),
    "random-like": NoiseSpec("symmetric", 0.18),
    "worst-like": NoiseSpec("symmetric", 0.40),
}


def gen_gaussian_mixture(K, per_class_n, dim, class_sep, rng: RngState) -> Dataset:
    """Isotropic unit-variance Gaussian blobs with class means ``class_sep`` from the origin."""
    if dim < 1:
        raise DimensionError("dim must be >= 1")
    if K < 2 or per_class_n < 1 or not class_sep > 0:
        raise ValueError("need K >= 2, per_class_n >= 1 and class_sep > 0")
    gen = rng.generator()
    if dim >= K:
        q, _ = np.linalg.qr(gen.standard_normal((dim, K)))
        means = class_sep * q.T
    else:
        d = gen.standard_normal((K, dim))
        means = class_sep * d / np.linalg.norm(d, axis=1, keepdims=True)
    y = np.repeat(np.arange(K), per_class_n)
    X = means[y] + gen.standard_normal((y.size, dim))
    order = gen.permutation(y.size)
    X, y = X[order], y[order]
    return Dataset(X, y, K, true_y=y.copy(), noisy=np.zeros(y.size, dtype=bool))


def inject_label_noise(dataset: Dataset, spec: NoiseSpec, rng: RngState) -> Dataset:
    """Corrupt exactly ``round(rate * N)`` labels, chosen without replacement."""
    if dataset.true_y is None or np.any(dataset.true_y < 0):
        raise ValueError("label noise needs the true label of every sample")
    n = len(dataset)
    target = spec.rate * n
    if target < 1:
        if spec.rate > 0:
            warnings.warn(f"rate * N = {target:.3g} < 1; labels left unchanged", stacklevel=2)
        out = dataset.with_labels(dataset.true_y)
        out.meta["noise_warning"] = spec.rate > 0
        return out
    n_flip = int(math.floor(target + 0.5))
    K = dataset.num_classes
    gen = rng.generator()
    chosen = gen.choice(n, size=n_flip, replace=False)
    y = dataset.true_y.copy()
    if spec.kind == "symmetric":
        offset = gen.integers(1, K, size=n_flip)
        y[chosen] = (y[chosen] + offset) % K
    else:
        y[chosen] = (y[chosen] + 1) % K
    out = dataset.with_labels(y)
    out.meta.update(noise_kind=spec.kind, noise_rate=spec.rate, noise_warning=False)
    return out


def largest_remainder_sizes(n: int, fractions) -> list[int]:
    """Integer part sizes summing to ``n``; leftovers go to the largest remainders."""
    fr = np.asarray(fractions, dtype=np.float64)
    if fr.ndim != 1 or fr.size == 0 or np.any(fr <= 0) or abs(fr.sum() - 1.0) > 1e-9:
        raise ValueError("fractions must be positive and sum to 1")
    raw = fr * n
    sizes = np.floor(raw).astype(int)
    rem = n - sizes.sum()
    # stable sort keeps earlier parts first on equal remainders
    order = np.argsort(-(raw - sizes), kind="stable")
    sizes[order[:rem]] += 1
    return sizes.tolist()


def split(dataset: Dataset, fractions, rng: RngState) -> list[Dataset]:
    sizes = largest_remainder_sizes(len(dataset), fractions)
    perm = rng.generator().permutation(len(dataset))
    cuts = np.cumsum([0, *sizes])
    return [dataset.subset(np.sort(perm[a:b])) for a, b in zip(cuts[:-1], cuts[1:])]


def save_dataset(dataset: Dataset, path) -> None:
    path = Path(path)
    with path.open("w") as fh:
        header = {"format": DATASET_FORMAT, "version": DATASET_FORMAT,
                  "K": dataset.num_classes, "dim": dataset.dim, "n": len(dataset),
                  "has_true_y": dataset.true_y is not None, "has_noisy": dataset.noisy is not None}
        fh.write(json.dumps(header) + "\n")
        for i in range(len(dataset)):
            rec = {"id": int(dataset.ids[i]), "x": dataset.X[i].tolist(), "y": int(dataset.y[i])}
            if dataset.true_y is not None and dataset.true_y[i] >= 0:
                rec["true_y"] = int(dataset.true_y[i])
            if dataset.noisy is not None:
                rec["noisy"] = bool(dataset.noisy[i])
            fh.write(json.dumps(rec) + "\n")


def load_dataset(path) -> Dataset:
    path = Path(path)
    with path.open() as fh:
        lines = fh.read().splitlines()
    if not lines:
        raise ParseError(f"{path}: empty file, expected a header line")
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}:1: header is not JSON ({exc.msg})") from None
    if header.get("version", header.get("format")) != DATASET_FORMAT:
        raise ParseError(f"{path}:1: unsupported dataset version {header.get('version')!r}")
    try:
        K, dim = int(header["K"]), int(header["dim"])
    except (KeyError, TypeError, ValueError):
        raise ParseError(f"{path}:1: header must carry integer K and dim") from None

    ids, xs, ys, trues, flags = [], [], [], [], []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ParseError(f"{path}:{lineno}: not JSON ({exc.msg})") from None
        for key in ("id", "x", "y"):
            if key not in rec:
                raise ParseError(f"{path}:{lineno}: missing field {key!r}")
        x = rec["x"]
        if not isinstance(x, list) or len(x) != dim:
            raise ParseError(f"{path}:{lineno}: field 'x' must have {dim} entries")
        y = rec["y"]
        if not isinstance(y, int) or not 0 <= y < K:
            raise ParseError(f"{path}:{lineno}: field 'y'={y!r} outside [0, {K})")
        t = rec.get("true_y")
        if t is not None and (not isinstance(t, int) or not 0 <= t < K):
            raise ParseError(f"{path}:{lineno}: field 'true_y'={t!r} outside [0, {K})")
        ids.append(rec["id"])
        xs.append(x)
        ys.append(y)
        trues.append(-1 if t is None else t)
        flags.append(rec.get("noisy"))

    n = len(ids)
    # the header flags keep empty columns; files without them infer from the lines
    has_true = bool(header.get("has_true_y", any(t >= 0 for t in trues)))
    has_flags = bool(header.get("has_noisy", any(f is not None for f in flags)))
    if has_flags and any(f is None for f in flags):
        raise ParseError(f"{path}: 'noisy' must be present on every line or none")
    try:
        return Dataset(
            np.asarray(xs, dtype=np.float64).reshape(n, dim),
            np.asarray(ys, dtype=np.int64),
            K,
            ids=np.asarray(ids, dtype=np.int64),
            true_y=np.asarray(trues, dtype=np.int64) if has_true else None,
            noisy=np.asarray(flags, dtype=bool) if has_flags else None,
        )
    except ValueError as exc:
        raise ParseError(f"{path}: {exc}") from None
