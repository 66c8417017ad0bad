"""Command-line entry point: ``iflab <subcommand> [flags]``.

Exit codes: 0 success, 1 usage error, 2 runtime error.
"""
from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .bounds import BoundTask, LooConfig, bound_report, loo_all, prepare_bound_task, save_bound_results
from .data import (
    NOISE_PRESETS,
    NoiseSpec,
    gen_gaussian_mixture,
    inject_label_noise,
    load_dataset,
    save_dataset,
    split,
)
from .exceptions import UsageError
from .experiments import (
    RunConfig,
    checkpoints_for,
    epoch_sweep,
    make_task,
    recall_experiment,
    relabel_accuracy,
    run_detection,
    write_sweep,
)
from .influence import VARIANTS, EstimatorConfig, InfluenceReport, score_dataset
from .metrics import MetricsReport, average_precision, roc_auc
from .model import ModelSpec, accuracy
from .numerics import RngState
from .optim import TuneConfig, load_checkpoint, save_checkpoint, train, tune_on_validation

SUBCOMMANDS = ("gen-data", "train", "tune", "influence", "detect", "relabel", "recall",
               "bound", "loo", "sweep", "report")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}\n{self.format_usage().rstrip()}")


def _noise(value) -> NoiseSpec:
    if value in NOISE_PRESETS:
        return NOISE_PRESETS[value]
    try:
        return NoiseSpec("symmetric", float(value))
    except ValueError:
        raise UsageError(f"--noise must be a preset {sorted(NOISE_PRESETS)} or a rate in [0, 1)") from None


def _load_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if getattr(args, "config", None) else RunConfig()
    if getattr(args, "seed", None) is not None:
        cfg = replace(cfg, seeds=(args.seed,))
    if getattr(args, "seeds", None):
        cfg = replace(cfg, seeds=tuple(args.seeds))
    if getattr(args, "threads", None) is not None:
        cfg = replace(cfg, workers=args.threads)
    if getattr(args, "out_dir", None):
        cfg = replace(cfg, output_dir=args.out_dir)
    return cfg


def _estimator(cfg: RunConfig, name) -> EstimatorConfig:
    if name not in VARIANTS:
        raise UsageError(f"unknown estimator {name!r}; choose from {', '.join(VARIANTS)}")
    return cfg.estimator(name)


def _out_path(cfg: RunConfig, args, default_name) -> Path:
    path = Path(args.out) if getattr(args, "out", None) else Path(cfg.output_dir) / default_name
    path.parent.mkdir(parents=True, exist_ok=True)
    return path


def _write_json(path, obj):
    Path(path).write_text(json.dumps(obj, indent=1))


def _model_spec(cfg: RunConfig, data) -> ModelSpec:
    return cfg.model_spec(data.dim, data.num_classes)


# ------------------------------------------------------------ subcommands

def cmd_gen_data(args):
    noise = _noise(args.noise)
    total = args.n + args.n_val
    rng = RngState(args.seed)
    full = gen_gaussian_mixture(args.k, -(-total // args.k), args.dim, args.sep, rng)
    full = full.subset(np.arange(total))
    if args.n_val:
        tr, va = split(full, [args.n / total, args.n_val / total], rng.advance(1))
    else:
        tr, va = full, None
    tr = inject_label_noise(tr, replace(noise, kind=args.noise_kind), rng.advance(2))
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    save_dataset(tr, args.out)
    counts = np.bincount(tr.y, minlength=args.k)
    print(f"wrote {args.out}: n={len(tr)} K={args.k} dim={args.dim} "
          f"noisy={int(tr.noisy.sum())} class_counts={counts.tolist()}")
    if va is not None:
        val_out = args.val_out or str(Path(args.out).with_suffix("")) + ".val.jsonl"
        Path(val_out).parent.mkdir(parents=True, exist_ok=True)
        save_dataset(va, val_out)
        print(f"wrote {val_out}: n={len(va)} (clean validation)")
    return 0


def _datasets(cfg: RunConfig, args, seed):
    """Datasets from --train/--val files, else from the run config generator."""
    tr_path, va_path = getattr(args, "train", None), getattr(args, "val", None)
    if tr_path or va_path:
        if not (tr_path and va_path):
            raise UsageError("--train and --val must be given together")
        return load_dataset(tr_path), load_dataset(va_path)
    task = make_task(replace(cfg, train=replace(cfg.train, steps=0)), seed)
    return task.train_set, task.val_set


def cmd_train(args):
    cfg = _load_config(args)
    seed = cfg.seeds[0]
    tr, _ = _datasets(cfg, args, seed)
    spec = _model_spec(cfg, tr)
    path = train(spec, tr, cfg.train, RngState(seed).advance(3))
    out = _out_path(cfg, args, f"theta_star_seed{seed}.ckpt")
    save_checkpoint(out, path[-1], spec)
    print(f"trained {spec.kind} ({spec.n_params} params) for {cfg.train.steps} steps; "
          f"train accuracy {accuracy(spec, path[-1].params, tr):.4f}; wrote {out}")
    return 0


def cmd_tune(args):
    cfg = _load_config(args)
    seed = cfg.seeds[0]
    _, va = _datasets(cfg, args, seed)
    start, spec = load_checkpoint(args.checkpoint)
    flat = args.flat if args.flat is not None else cfg.tune.flat
    tcfg = TuneConfig(flat, cfg.tune.sgd, cfg.tune.sam_gamma)
    tuned = tune_on_validation(spec, start, va, tcfg, RngState(seed).advance(4))
    out = _out_path(cfg, args, f"{tcfg.tag}_seed{seed}.ckpt")
    save_checkpoint(out, tuned, spec)
    print(f"tuned ({tcfg.tag}) for {tcfg.sgd.steps} steps; validation accuracy "
          f"{accuracy(spec, tuned.params, va):.4f}; wrote {out}")
    return 0


def cmd_influence(args):
    cfg = _load_config(args)
    est = _estimator(cfg, args.estimator)
    seed = cfg.seeds[0]
    if args.checkpoint:
        tr, va = _datasets(cfg, args, seed)
        cks, spec = [], None
        for p in args.checkpoint:
            ck, spec = load_checkpoint(p, spec)
            cks.append(ck)
    else:
        task = make_task(cfg, seed)
        tr, va, spec, cks = task.train_set, task.val_set, task.spec, checkpoints_for(task, est)
    report = score_dataset(est, tr, va, cks, spec, workers=cfg.workers)
    out = _out_path(cfg, args, f"influence_{est.variant}_seed{seed}.json")
    report.save(out)
    print(f"{est.variant}: scored {len(report.ids)} samples at '{report.checkpoint_tag}' "
          f"({report.direction}) in {report.wall_time:.2f}s; wrote {out}")
    return 0


def _detect_from_report(args):
    report = InfluenceReport.load(args.influence)
    if not args.train:
        raise UsageError("--influence needs --train to supply the noisy flags")
    tr = load_dataset(args.train)
    if tr.noisy is None:
        raise UsageError(f"{args.train} carries no noisy flags")
    flags = tr.noisy[[tr.index_of(int(i)) for i in report.ids]]
    row = {"roc_auc": roc_auc(report.values, flags, report.direction),
           "average_precision": average_precision(report.values, flags, report.direction)}
    return report.estimator.get("variant", "?"), MetricsReport.aggregate([row])


def cmd_detect(args):
    cfg = _load_config(args)
    if args.influence:
        name, rep = _detect_from_report(args)
        reports = {name: rep}
    else:
        names = args.estimator or [e.variant for e in cfg.estimators]
        ests = [_estimator(cfg, n) for n in names]
        reports = run_detection(cfg, ests, progress=_progress)
    for name, rep in reports.items():
        out = _out_path(cfg, args if len(reports) == 1 else argparse.Namespace(),
                        f"detect_{name}.json")
        _write_json(out, {**rep.to_json(), "estimator": name})
        print(f"{name}: ROC AUC {rep.roc_auc:.4f}  AP {rep.average_precision:.4f}  -> {out}")
    return 0


def _progress(seed, name, row):
    print(f"  seed {seed} {name}: roc_auc={row['roc_auc']:.4f}", file=sys.stderr)


def cmd_relabel(args):
    cfg = _load_config(args)
    names = args.estimator or [e.variant for e in cfg.estimators]
    for name in names:
        est = _estimator(cfg, name)
        rows = []
        for seed in cfg.seeds:
            task = make_task(cfg, seed)
            rows.append({"seed": seed, "roc_auc": None, "average_precision": None,
                         **relabel_accuracy(task, est)})
        rep = MetricsReport.aggregate(rows)
        out = _out_path(cfg, args if len(names) == 1 else argparse.Namespace(),
                        f"relabel_{name}.json")
        _write_json(out, {**rep.to_json(), "estimator": name})
        print(f"{name}: relabel top-1 on mislabeled samples {rep.relabel_top1:.4f} -> {out}")
    return 0


def cmd_recall(args):
    cfg = _load_config(args)
    est = _estimator(cfg, args.estimator)
    rows = []
    for seed in cfg.seeds:
        task = make_task(cfg, seed)
        r = recall_experiment(task, est, args.num_val, args.direction)
        rows.append({"seed": seed, "relabel_top1": None, **r})
    rep = MetricsReport.aggregate(rows)
    out = _out_path(cfg, args, f"recall_{est.variant}.json")
    _write_json(out, {**rep.to_json(), "estimator": est.variant, "direction": args.direction})
    print(f"{est.variant}: recall@s {rep.recall_at_s:.4f} (pseudo-label ROC AUC "
          f"{rep.roc_auc:.4f}) -> {out}")
    return 0


def _bound_task(args, seed, noise_rate):
    return BoundTask(num_classes=args.k, dim=args.dim, n_train=args.n, n_val=args.n_val,
                     class_sep=args.sep, noise_rate=noise_rate, weight_decay=args.weight_decay,
                     seed=seed, delta=args.delta)


def cmd_bound(args):
    reports, loo = [], []
    for rate in args.noise_rates:
        for seed in args.seeds:
            prep = prepare_bound_task(_bound_task(args, seed, rate))
            loo.extend(prep.loo)
            for name in args.estimator:
                if name not in VARIANTS:
                    raise UsageError(f"unknown estimator {name!r}")
                damping = 0.0 if name == "exact_if" else args.damping
                rep = bound_report(EstimatorConfig(name, damping), prep)
                reports.append(rep)
                status = {True: "valid", False: "VIOLATED", None: "assumptions fail"}[rep.valid]
                print(f"noise={rate} seed={seed} {name}: error {rep.measured_error:.3f} "
                      f"bound {rep.corollary_bound_clamped:.3f} ({status})")
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_bound_results(out, reports, loo)
    print(f"wrote {out}")
    return 0 if all(r.valid is not False for r in reports) else 2


def cmd_loo(args):
    if args.train or args.val:
        if not (args.train and args.val):
            raise UsageError("--train and --val must be given together")
        tr, va = load_dataset(args.train), load_dataset(args.val)
        spec = ModelSpec("logistic", tr.dim, tr.num_classes, weight_decay=args.weight_decay)
        results = loo_all(tr, spec, LooConfig(seed=args.seeds[0]), va)
    else:
        results = prepare_bound_task(_bound_task(args, args.seeds[0], args.noise_rates[0])).loo
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_bound_results(out, [], results)
    d = np.array([r.delta_val_risk for r in results])
    print(f"LOO over {len(results)} samples: {int((d > 0).sum())} helpful, "
          f"{int((d < 0).sum())} harmful; wrote {out}")
    return 0


def cmd_sweep(args):
    cfg = _load_config(args)
    if args.mode:
        cfg = replace(cfg, sweep_mode=args.mode)
    if args.every:
        cfg = replace(cfg, sweep_every=args.every)
    ests = [_estimator(cfg, n) for n in args.estimator] if args.estimator else None
    report = epoch_sweep(cfg, estimators=ests)
    prefix = Path(args.out) if args.out else Path(cfg.output_dir) / f"sweep_{cfg.sweep_mode}"
    tsv, js = write_sweep(report, prefix)
    print(f"{len(report['rows'])} rows; wrote {tsv} and {js}")
    for k, v in report["summary"].items():
        print(f"{k}: {v:.4f}")
    return 0


def _summarize(path):
    d = json.loads(Path(path).read_text())
    v = d.get("version", "?")
    if v == "iflab-metrics-1":
        parts = [f"{k}={d[k]:.4f}" for k in ("roc_auc", "average_precision", "relabel_top1",
                                             "recall_at_s") if d.get(k) is not None]
        return f"{path}: {d.get('estimator', '')} " + " ".join(parts)
    if v == "iflab-inf-1":
        return f"{path}: {d['estimator'].get('variant')} {len(d['scores'])} scores ({d['direction']})"
    if v == "iflab-bound-1":
        reps = d["reports"]
        held = [r for r in reps if r["assumptions_hold"]]
        ok = sum(r["measured_error"] <= r["corollary_bound_clamped"] for r in held)
        return (f"{path}: {len(reps)} bound reports, {len(held)} with assumptions, "
                f"{ok} valid; {len(d['loo'])} LOO results")
    if v == "iflab-sweep-1":
        return f"{path}: {d['mode']} sweep, {len(d['rows'])} rows, summary {d['summary']}"
    if v == "iflab-run-1":
        return f"{path}: run config, seeds {d.get('seeds')}"
    return f"{path}: unrecognized version {v!r}"


def cmd_report(args):
    files = []
    for p in args.inputs:
        p = Path(p)
        files.extend(sorted(p.glob("*.json")) if p.is_dir() else [p])
    if not files:
        raise UsageError("no JSON artifacts found")
    for f in files:
        print(_summarize(f))
    return 0


# ---------------------------------------------------------------- parser

def _add_run(p, estimator="single"):
    p.add_argument("--config", help="RunConfig JSON (version iflab-run-1)")
    p.add_argument("--seed", type=int, help="override the config's seeds with one seed")
    p.add_argument("--seeds", type=int, nargs="+", help="override the config's seeds")
    p.add_argument("--threads", type=int, help="worker count (else IFLAB_THREADS)")
    p.add_argument("--out", help="output file")
    p.add_argument("--out-dir", help="output directory (default from config)")
    if estimator == "single":
        p.add_argument("--estimator", required=True, help=f"one of {', '.join(VARIANTS)}")
    elif estimator == "multi":
        p.add_argument("--estimator", action="append",
                       help="estimator variant; repeatable (default: all in config)")


def _add_bound_task(p):
    p.add_argument("--k", type=int, default=3)
    p.add_argument("--dim", type=int, default=5)
    p.add_argument("--n", type=int, default=100)
    p.add_argument("--n-val", type=int, default=100)
    p.add_argument("--sep", type=float, default=2.0)
    p.add_argument("--weight-decay", type=float, default=0.05)
    p.add_argument("--delta", type=float, default=0.05)
    p.add_argument("--noise-rates", type=float, nargs="+", default=[0.1, 0.3])
    p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    p.add_argument("--out", default="bound.json")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="iflab", description="Influence estimation for noisy-label detection.")
    parser.add_argument("--version", action="version", version=f"iflab {__version__}")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("gen-data", help="generate a Gaussian-mixture dataset with label noise")
    p.add_argument("--k", type=int, required=True)
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--dim", type=int, required=True)
    p.add_argument("--noise", default="clean", help="preset name or symmetric rate")
    p.add_argument("--noise-kind", default="symmetric", choices=["symmetric", "asymmetric_pairflip"])
    p.add_argument("--sep", type=float, default=3.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--n-val", type=int, default=0, help="also write a clean validation split")
    p.add_argument("--val-out")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train to theta_star and write a checkpoint")
    _add_run(p, None)
    p.add_argument("--train")
    p.add_argument("--val")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("tune", help="tune a checkpoint on the validation set")
    _add_run(p, None)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--train")
    p.add_argument("--val")
    g = p.add_mutually_exclusive_group()
    g.add_argument("--flat", dest="flat", action="store_true", default=None, help="SAM tuning (fvm)")
    g.add_argument("--plain", dest="flat", action="store_false", help="plain SGD tuning (vm)")
    p.set_defaults(func=cmd_tune)

    p = sub.add_parser("influence", help="score every training sample")
    _add_run(p)
    p.add_argument("--checkpoint", action="append", help="checkpoint file; repeatable")
    p.add_argument("--train")
    p.add_argument("--val")
    p.set_defaults(func=cmd_influence)

    p = sub.add_parser("detect", help="mislabeled-sample detection metrics")
    _add_run(p, "multi")
    p.add_argument("--influence", help="score an existing influence report instead")
    p.add_argument("--train", help="dataset with noisy flags (with --influence)")
    p.set_defaults(func=cmd_detect)

    p = sub.add_parser("relabel", help="relabeling accuracy on mislabeled samples")
    _add_run(p, "multi")
    p.set_defaults(func=cmd_relabel)

    p = sub.add_parser("recall", help="pseudo-label recall@s")
    _add_run(p)
    p.add_argument("--num-val", type=int, default=20)
    p.add_argument("--direction", default="largest", choices=["largest", "smallest"])
    p.set_defaults(func=cmd_recall)

    p = sub.add_parser("bound", help="sign-error bound validity on a convex task")
    _add_bound_task(p)
    p.add_argument("--estimator", nargs="+", default=["exact_if", "lissa_if"])
    p.add_argument("--damping", type=float, default=1e-3)
    p.set_defaults(func=cmd_bound)

    p = sub.add_parser("loo", help="leave-one-out retraining deltas")
    _add_bound_task(p)
    p.add_argument("--train")
    p.add_argument("--val")
    p.set_defaults(func=cmd_loo)

    p = sub.add_parser("sweep", help="per-checkpoint sweep table (TSV + JSON)")
    _add_run(p, "multi")
    p.add_argument("--mode", choices=["train", "tune"])
    p.add_argument("--every", type=int)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("report", help="summarize JSON artifacts")
    p.add_argument("inputs", nargs="+")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError(parser.format_usage().rstrip())
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except KeyboardInterrupt:
        return 2
    except Exception as exc:  # runtime failure: report and exit 2
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
