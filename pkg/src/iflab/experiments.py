"""Desk-scale experiment protocols.

A run trains a small classifier on a noisy Gaussian-mixture task, tunes
it on a clean validation set (plain SGD for validation minima, SAM for
flat validation minima) and then asks each estimator to rank the
training points. Everything below is deterministic given the seed.

Seed streams: ``RngState(seed)`` draws the data, ``.advance(1)`` the
split, ``.advance(2)`` the label noise, ``.advance(3)`` training and
``.advance(4)`` tuning. Both tuning flavours share the tuning stream so
they see the same minibatches at equal step budget.
"""
from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy.linalg import solve_triangular
from scipy.stats import pearsonr

from .data import NOISE_PRESETS, NoiseSpec, gen_gaussian_mixture, inject_label_noise, load_dataset, split
from .exceptions import UsageError
from .influence import (
    EstimatorConfig,
    _damped_cholesky,
    build_context,
    build_diag_fisher,
    lissa_ihvp,
    score_dataset,
)
from .metrics import MetricsReport, average_precision, pseudo_label, recall_at_s, relabel_all, roc_auc
from .model import (
    ModelSpec,
    accuracy,
    batch_risk,
    explicit_hessian,
    per_sample_curvature,
    per_sample_grads,
)
from .numerics import RngState
from .optim import SgdConfig, TuneConfig, sharpness_risk, train, tune_on_validation, tune_path

__all__ = [
    "RUN_FORMAT",
    "SWEEP_FORMAT",
    "TaskConfig",
    "RunConfig",
    "Task",
    "make_task",
    "tuned_checkpoint",
    "checkpoints_for",
    "detect",
    "relabel_accuracy",
    "recall_experiment",
    "if_magnitude_change",
    "sharpness_comparison",
    "run_detection",
    "epoch_sweep",
    "write_sweep",
]

RUN_FORMAT = "iflab-run-1"
SWEEP_FORMAT = "iflab-sweep-1"


@dataclass(frozen=True)
class TaskConfig:
    """Generator settings, or paths to pre-made train/validation files."""

    num_classes: int = 4
    dim: int = 20
    n_train: int = 1000
    n_val: int = 400
    class_sep: float = 3.0
    noise_kind: str = "symmetric"
    noise_rate: float = 0.4
    train_path: str | None = None
    val_path: str | None = None

    def __post_init__(self):
        NoiseSpec(self.noise_kind, self.noise_rate)
        if (self.train_path is None) != (self.val_path is None):
            raise UsageError("train_path and val_path must be given together")
        if self.n_train < 1 or self.n_val < 1:
            raise ValueError("n_train and n_val must be >= 1")

    @property
    def from_files(self) -> bool:
        return self.train_path is not None


def _default_estimators():
    return (
        EstimatorConfig("exact_if", 1e-3, auto_damping=True),
        EstimatorConfig("vm", 1e-3),
        EstimatorConfig("fvm", 1e-3),
    )


@dataclass(frozen=True)
class RunConfig:
    task: TaskConfig = field(default_factory=TaskConfig)
    model_kind: str = "mlp"
    hidden_sizes: tuple = (32,)
    activation: str = "tanh"
    weight_decay: float = 5e-4
    train: SgdConfig = field(default_factory=lambda: SgdConfig(0.1, 0.9, 800, 128, "cosine"))
    tune: TuneConfig = field(default_factory=TuneConfig)
    estimators: tuple = field(default_factory=_default_estimators)
    metrics: tuple = ("roc_auc", "average_precision")
    seeds: tuple = (0,)
    output_dir: str = "runs"
    sweep_mode: str = "tune"
    sweep_every: int = 100
    sharpness_gamma: float = 0.05
    num_probes: int = 10
    workers: int | None = None

    def __post_init__(self):
        if not self.seeds:
            raise UsageError("a run needs at least one seed")
        if self.sweep_mode not in ("train", "tune"):
            raise UsageError(f"sweep_mode must be 'train' or 'tune', not {self.sweep_mode!r}")
        unknown = set(self.metrics) - {"roc_auc", "average_precision", "relabel_top1", "recall_at_s"}
        if unknown:
            raise UsageError(f"unknown metrics {sorted(unknown)}")

    def model_spec(self, dim, num_classes) -> ModelSpec:
        hidden = self.hidden_sizes if self.model_kind == "mlp" else ()
        return ModelSpec(self.model_kind, dim, num_classes, tuple(hidden), self.activation,
                         self.weight_decay)

    def estimator(self, variant) -> EstimatorConfig:
        for est in self.estimators:
            if est.variant == variant:
                return est
        return EstimatorConfig(variant)

    def to_dict(self):
        return {
            "version": RUN_FORMAT,
            "task": asdict(self.task),
            "model": {"kind": self.model_kind, "hidden_sizes": list(self.hidden_sizes),
                      "activation": self.activation, "weight_decay": self.weight_decay},
            "train": self.train.to_dict(),
            "tune": self.tune.to_dict(),
            "estimators": [e.to_dict() for e in self.estimators],
            "metrics": list(self.metrics),
            "seeds": list(self.seeds),
            "output_dir": self.output_dir,
            "sweep": {"mode": self.sweep_mode, "every": self.sweep_every,
                      "gamma": self.sharpness_gamma, "num_probes": self.num_probes},
            "workers": self.workers,
        }

    @classmethod
    def from_dict(cls, d, base_dir="."):
        if d.get("version") != RUN_FORMAT:
            raise UsageError(f"run config version must be {RUN_FORMAT!r}, got {d.get('version')!r}")
        base = Path(base_dir)
        task = dict(d.get("task", {}))
        preset = task.pop("noise", None)
        if preset is not None:
            if preset not in NOISE_PRESETS:
                raise UsageError(f"unknown noise preset {preset!r}")
            task.setdefault("noise_kind", NOISE_PRESETS[preset].kind)
            task.setdefault("noise_rate", NOISE_PRESETS[preset].rate)
        for key in ("train_path", "val_path"):
            if task.get(key) is not None:
                p = Path(task[key])
                p = p if p.is_absolute() else base / p
                if not p.exists():
                    raise UsageError(f"{key} {str(p)!r} does not exist")
                task[key] = str(p)
        model = d.get("model", {})
        tune = d.get("tune", {})
        sweep = d.get("sweep", {})
        ests = d.get("estimators")
        kw = {}
        if ests is not None:
            kw["estimators"] = tuple(
                EstimatorConfig(e) if isinstance(e, str) else EstimatorConfig.from_dict(e)
                for e in ests
            )
        try:
            return cls(
                task=TaskConfig(**task),
                model_kind=model.get("kind", "mlp"),
                hidden_sizes=tuple(model.get("hidden_sizes", (32,))),
                activation=model.get("activation", "tanh"),
                weight_decay=float(model.get("weight_decay", 5e-4)),
                train=SgdConfig(**d["train"]) if "train" in d else cls.train_default(),
                tune=TuneConfig(bool(tune.get("flat", False)),
                                SgdConfig(**tune["sgd"]) if "sgd" in tune else TuneConfig().sgd,
                                float(tune.get("sam_gamma", 0.05))),
                metrics=tuple(d.get("metrics", ("roc_auc", "average_precision"))),
                seeds=tuple(int(s) for s in d.get("seeds", (0,))),
                output_dir=d.get("output_dir", "runs"),
                sweep_mode=sweep.get("mode", "tune"),
                sweep_every=int(sweep.get("every", 100)),
                sharpness_gamma=float(sweep.get("gamma", 0.05)),
                num_probes=int(sweep.get("num_probes", 10)),
                workers=d.get("workers"),
                **kw,
            )
        except TypeError as exc:
            raise UsageError(f"bad run config: {exc}") from None

    @staticmethod
    def train_default():
        return SgdConfig(0.1, 0.9, 800, 128, "cosine")

    @classmethod
    def load(cls, path):
        path = Path(path)
        try:
            d = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise UsageError(f"{path}: not JSON ({exc.msg})") from None
        return cls.from_dict(d, path.parent)

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=1))


@dataclass
class Task:
    config: RunConfig
    seed: int
    spec: ModelSpec
    train_set: object
    val_set: object
    path: list
    tuned: dict = field(default_factory=dict)

    @property
    def theta_star(self):
        return self.path[-1]

    @property
    def rng(self):
        return RngState(self.seed)


def _make_data(tc: TaskConfig, rng: RngState):
    if tc.from_files:
        return load_dataset(tc.train_path), load_dataset(tc.val_path)
    total = tc.n_train + tc.n_val
    per_class = -(-total // tc.num_classes)
    full = gen_gaussian_mixture(tc.num_classes, per_class, tc.dim, tc.class_sep, rng)
    full = full.subset(np.arange(total))
    tr, va = split(full, [tc.n_train / total, tc.n_val / total], rng.advance(1))
    tr = inject_label_noise(tr, NoiseSpec(tc.noise_kind, tc.noise_rate), rng.advance(2))
    return tr, va


def make_task(config: RunConfig, seed: int, train_config: SgdConfig | None = None) -> Task:
    """Build data and train to ``theta_star``."""
    rng = RngState(seed)
    tr, va = _make_data(config.task, rng)
    spec = config.model_spec(tr.dim, tr.num_classes)
    path = train(spec, tr, train_config or config.train, rng.advance(3))
    return Task(config, seed, spec, tr, va, path)


def tuned_checkpoint(task: Task, flat: bool):
    tag = "fvm" if flat else "vm"
    if tag not in task.tuned:
        tc = task.config.tune
        cfg = TuneConfig(flat, tc.sgd, tc.sam_gamma)
        task.tuned[tag] = tune_on_validation(task.spec, task.theta_star, task.val_set, cfg,
                                             task.rng.advance(4))
    return task.tuned[tag]


def checkpoints_for(task: Task, est: EstimatorConfig):
    if est.variant in ("vm", "fvm"):
        return [tuned_checkpoint(task, est.variant == "fvm")]
    if est.variant == "tracin":
        return task.path
    return [task.theta_star]


def detect(task: Task, est: EstimatorConfig):
    """Score the training set; returns ``(report, {"roc_auc", "average_precision"})``."""
    report = score_dataset(est, task.train_set, task.val_set, checkpoints_for(task, est),
                           task.spec, workers=task.config.workers)
    flags = task.train_set.noisy
    return report, {
        "roc_auc": roc_auc(report.values, flags, report.direction),
        "average_precision": average_precision(report.values, flags, report.direction),
    }


def relabel_accuracy(task: Task, est: EstimatorConfig):
    """Relabel every training input and compare with its true class.

    Returns accuracy on the mislabeled subset (the quantity the relabeling
    protocol reports), on all samples, and the tie count.
    """
    tr = task.train_set
    ctx = build_context(est, tr, task.val_set, checkpoints_for(task, est), task.spec)
    labels, ties = relabel_all(tr.X, tr.num_classes, ctx)
    correct = labels == tr.true_y
    noisy = tr.noisy
    return {
        "relabel_top1": float(correct[noisy].mean()) if noisy.any() else float("nan"),
        "relabel_all": float(correct.mean()),
        "ties": int(ties.sum()),
    }


def _per_val_scores(task: Task, est: EstimatorConfig, val_idx):
    """``N x m`` matrix of per-validation-sample scores, larger = more helpful."""
    spec, tr, va = task.spec, task.train_set, task.val_set
    Xv, yv = va.X[val_idx], va.y[val_idx]
    v = est.variant
    cks = checkpoints_for(task, est)
    if v == "tracin":
        out = np.zeros((len(tr), len(val_idx)))
        for ck in cks:
            out += ck.learning_rate_at_step * (
                per_sample_grads(spec, ck.params, tr) @ per_sample_grads(spec, ck.params, (Xv, yv)).T)
        return out
    theta = cks[-1].params
    G_tr = per_sample_grads(spec, theta, tr)
    G_val = per_sample_grads(spec, theta, (Xv, yv))
    if v in ("exact_if", "lissa_if"):
        if est.backend == "explicit":
            c, _ = _damped_cholesky(explicit_hessian(spec, theta, tr), est.damping, est.auto_damping)
            Z = solve_triangular(c, G_val.T, lower=True)
            U = solve_triangular(c, Z, lower=True, trans="T")
        else:
            U = np.column_stack([lissa_ihvp(g, tr, spec, theta, est) for g in G_val])
        return G_tr @ U
    # validation minima: u_i = H_val^{-1} g_i, then <g_val, u_i> + eps/2 u_i^T H_j u_i
    eps = est.epsilon if est.epsilon is not None else 1.0 / len(tr)
    if est.backend == "diag_fisher":
        U = G_tr / build_diag_fisher(va, spec, theta, est.damping).diag
    else:
        c, _ = _damped_cholesky(explicit_hessian(spec, theta, va), est.damping, est.auto_damping)
        Z = solve_triangular(c, G_tr.T, lower=True)
        U = solve_triangular(c, Z, lower=True, trans="T").T
    out = U @ G_val.T
    for i in range(len(tr)):
        out[i] += 0.5 * eps * per_sample_curvature(spec, theta, (Xv, yv), U[i])
    return out


def recall_experiment(task: Task, est: EstimatorConfig, num_val=20, direction="largest"):
    """Pseudo-label recall protocol on ``num_val`` validation points.

    For each validation point the ``s`` most influential training points
    (``s`` = training examples carrying its label) should share its label.
    Also reports ROC AUC and AP against the pseudo labels.
    """
    va = task.val_set
    m = min(num_val, len(va))
    idx = np.arange(m)
    scores = _per_val_scores(task, est, idx)
    labels = task.train_set.y
    rec, aucs, aps = [], [], []
    for j in range(m):
        yj = int(va.y[idx[j]])
        flags = pseudo_label(labels, yj)
        s = int(flags.sum())
        rec.append(recall_at_s(scores[:, j], labels, yj, s, direction))
        if 0 < s < flags.size:
            aucs.append(roc_auc(scores[:, j], flags, direction))
            aps.append(average_precision(scores[:, j], flags, direction))
    return {"recall_at_s": float(np.mean(rec)), "roc_auc": float(np.mean(aucs)),
            "average_precision": float(np.mean(aps)), "num_val": m, "direction": direction}


def if_magnitude_change(task: Task, est: EstimatorConfig | None = None, flat=True):
    """Standard-IF magnitudes over clean training points at ``theta_star`` and after tuning."""
    est = est or task.config.estimator("exact_if")
    if est.variant not in ("exact_if", "lissa_if"):
        raise UsageError("magnitude check needs a standard influence estimator")
    clean = ~task.train_set.noisy
    out = {}
    for name, ck in (("star", task.theta_star), ("tuned", tuned_checkpoint(task, flat))):
        rep = score_dataset(est, task.train_set, task.val_set, [ck.with_tag("theta_star")],
                            task.spec, workers=task.config.workers)
        mag = np.abs(rep.values[clean])
        out[f"median_{name}"] = float(np.median(mag))
        out[f"mean_{name}"] = float(np.mean(mag))
    return out


def sharpness_comparison(task: Task, gamma=None, num_probes=None):
    """Validation sharpness at the plain and SAM-tuned points, same probes."""
    cfg = task.config
    gamma = cfg.sharpness_gamma if gamma is None else gamma
    num_probes = cfg.num_probes if num_probes is None else num_probes
    return {
        tag: sharpness_risk(task.spec, tuned_checkpoint(task, tag == "fvm").params, task.val_set,
                            gamma, num_probes, task.rng.advance(6))
        for tag in ("vm", "fvm")
    }


def run_detection(config: RunConfig, estimators=None, with_relabel=False, progress=None):
    """Detection (and optionally relabeling) over every seed; one MetricsReport per variant."""
    estimators = list(estimators or config.estimators)
    per = {e.variant: [] for e in estimators}
    for seed in config.seeds:
        task = make_task(config, seed)
        for est in estimators:
            _, m = detect(task, est)
            row = {"seed": seed, **m, "relabel_top1": None, "recall_at_s": None}
            if with_relabel:
                row.update(relabel_accuracy(task, est))
            per[est.variant].append(row)
            if progress:
                progress(seed, est.variant, row)
    return {v: MetricsReport.aggregate(rows) for v, rows in per.items()}


# ----------------------------------------------------------------- sweeps

def _sweep_row(task, ck, label, estimators, path_so_far):
    cfg = task.config
    spec, tr, va = task.spec, task.train_set, task.val_set
    row = {
        "checkpoint": label,
        "step": ck.step,
        "val_accuracy": accuracy(spec, ck.params, va),
        "val_risk": batch_risk(spec, ck.params, va),
        "sharpness_risk": sharpness_risk(spec, ck.params, va, cfg.sharpness_gamma,
                                         cfg.num_probes, task.rng.advance(6)),
    }
    clean = ~tr.noisy
    for est in estimators:
        v = est.variant
        if v == "tracin":
            cks = path_so_far
        elif v in ("vm", "fvm"):
            if cfg.sweep_mode == "train":
                flat = v == "fvm"
                tcfg = TuneConfig(flat, cfg.tune.sgd, cfg.tune.sam_gamma)
                cks = [tune_on_validation(spec, ck, va, tcfg, task.rng.advance(4))]
            else:
                cks = [ck.with_tag(v)]
        else:
            cks = [ck.with_tag("theta_star")]
        rep = score_dataset(est, tr, va, cks, spec, workers=cfg.workers)
        row[f"{v}_roc_auc"] = roc_auc(rep.values, tr.noisy, rep.direction)
        if v in ("exact_if", "lissa_if"):
            row[f"{v}_median_abs_clean"] = float(np.median(np.abs(rep.values[clean])))
    return row


def epoch_sweep(config: RunConfig, seed=None, estimators=None):
    """Per-checkpoint table of validation accuracy, risk, sharpness and detection AUC.

    ``sweep_mode="train"`` walks the training checkpoints; ``"tune"`` walks
    the tuning path (flavour set by ``config.tune.flat``).
    """
    if config.sweep_every < 1:
        raise UsageError("sweep needs checkpoint granularity sweep_every >= 1")
    seed = config.seeds[0] if seed is None else seed
    estimators = list(estimators or config.estimators)
    rows = []
    if config.sweep_mode == "train":
        tcfg = replace(config.train, checkpoint_every=config.sweep_every)
        task = make_task(config, seed, tcfg)
        for k, ck in enumerate(task.path):
            if k == 0 and len(task.path) > 1:
                continue  # the random init carries no signal
            rows.append(_sweep_row(task, ck, ck.tag or f"step{ck.step}", estimators,
                                   task.path[:k + 1]))
    else:
        task = make_task(config, seed)
        tpath = tune_path(task.spec, task.theta_star, task.val_set, config.tune,
                          task.rng.advance(4), every=config.sweep_every)
        for ck in tpath:
            rows.append(_sweep_row(task, ck, f"tune{ck.step}", estimators, task.path))
    summary = {}
    key = next((f"{e.variant}_roc_auc" for e in estimators
                if e.variant in ("exact_if", "lissa_if")), None)
    if key and len(rows) >= 3:
        acc = [r["val_accuracy"] for r in rows]
        auc = [r[key] for r in rows]
        if np.std(acc) > 0 and np.std(auc) > 0:
            summary["pearson_val_accuracy_vs_" + key] = float(pearsonr(acc, auc)[0])
    return {"version": SWEEP_FORMAT, "mode": config.sweep_mode, "seed": seed,
            "rows": rows, "summary": summary}


def write_sweep(report, out_prefix):
    """Write ``<prefix>.tsv`` and ``<prefix>.json``; returns both paths."""
    out_prefix = Path(out_prefix)
    out_prefix.parent.mkdir(parents=True, exist_ok=True)
    rows = report["rows"]
    cols = list(rows[0]) if rows else []
    for r in rows[1:]:
        cols += [c for c in r if c not in cols]
    tsv = out_prefix.with_suffix(".tsv")
    with open(tsv, "w", newline="") as fh:
        w = csv.DictWriter(fh, cols, delimiter="\t", restval="")
        w.writeheader()
        for r in rows:
            w.writerow({k: (f"{v:.6g}" if isinstance(v, float) else v) for k, v in r.items()})
    js = out_prefix.with_suffix(".json")
    js.write_text(json.dumps(report, indent=1))
    return tsv, js
