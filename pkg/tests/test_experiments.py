import json
from dataclasses import replace

import numpy as np
import pytest

from iflab.data import save_dataset
from iflab.exceptions import UsageError
from iflab.experiments import (
    RunConfig,
    TaskConfig,
    detect,
    epoch_sweep,
    if_magnitude_change,
    make_task,
    recall_experiment,
    relabel_accuracy,
    run_detection,
    sharpness_comparison,
    write_sweep,
)
from iflab.influence import EstimatorConfig
from iflab.optim import SgdConfig, TuneConfig


@pytest.fixture(scope="module")
def small_cfg():
    return RunConfig(
        task=TaskConfig(3, 5, 150, 60, 2.5, noise_rate=0.3),
        hidden_sizes=(8,),
        train=SgdConfig(0.1, 0.9, 200, 64, "cosine"),
        tune=TuneConfig(False, SgdConfig(0.02, 0.9, 200, 64, "cosine")),
        sweep_every=100,
    )


@pytest.fixture(scope="module")
def small(small_cfg):
    return make_task(small_cfg, 0)


def test_run_config_round_trip(small_cfg, tmp_path):
    p = tmp_path / "run.json"
    small_cfg.save(p)
    back = RunConfig.load(p)
    assert back.to_dict() == small_cfg.to_dict()
    # unset estimator backends resolve to their defaults on the first save
    assert RunConfig.from_dict(back.to_dict()) == back


def test_run_config_validation(tmp_path):
    with pytest.raises(UsageError):
        RunConfig.from_dict({"version": "iflab-run-0"})
    with pytest.raises(UsageError):
        RunConfig.from_dict({"version": "iflab-run-1", "task": {"train_path": "no.jsonl",
                                                                "val_path": "no.jsonl"}})
    with pytest.raises(UsageError):
        RunConfig.from_dict({"version": "iflab-run-1", "task": {"noise": "bogus"}})
    with pytest.raises(UsageError):
        RunConfig(seeds=())
    with pytest.raises(UsageError):
        RunConfig(metrics=("accuracy",))
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    with pytest.raises(UsageError):
        RunConfig.load(bad)
    cfg = RunConfig.from_dict({"version": "iflab-run-1", "estimators": ["tracin", {"variant": "vm"}],
                               "task": {"noise": "clean"}})
    assert [e.variant for e in cfg.estimators] == ["tracin", "vm"]
    assert cfg.task.noise_rate == 0.0


def test_task_from_files(small, small_cfg, tmp_path):
    save_dataset(small.train_set, tmp_path / "tr.jsonl")
    save_dataset(small.val_set, tmp_path / "va.jsonl")
    d = small_cfg.to_dict()
    d["task"] = {"train_path": "tr.jsonl", "val_path": "va.jsonl"}
    (tmp_path / "run.json").write_text(json.dumps(d))
    cfg = RunConfig.load(tmp_path / "run.json")
    task = make_task(cfg, 0)
    assert task.train_set.equals(small.train_set)
    np.testing.assert_array_equal(task.theta_star.params, small.theta_star.params)


def test_detection_reports(small, small_cfg):
    for v in ("exact_if", "vm", "fvm", "tracin"):
        rep, m = detect(small, small_cfg.estimator(v))
        assert len(rep.ids) == 150
        assert 0.0 <= m["roc_auc"] <= 1.0
    _, m = detect(small, small_cfg.estimator("vm"))
    assert m["roc_auc"] > 0.8
    out = run_detection(replace(small_cfg, seeds=(0, 1)), [small_cfg.estimator("vm")])
    assert len(out["vm"].per_seed) == 2
    assert out["vm"].mean_std["roc_auc"]["std"] >= 0


def test_magnitude_and_sharpness(small):
    mag = if_magnitude_change(small)
    assert mag["median_tuned"] < mag["median_star"]
    sh = sharpness_comparison(small)
    assert set(sh) == {"vm", "fvm"} and all(v >= 0 for v in sh.values())
    with pytest.raises(UsageError):
        if_magnitude_change(small, EstimatorConfig("vm"))


def test_recall_experiment_shapes(small):
    r = recall_experiment(small, EstimatorConfig("exact_if", 1e-3, auto_damping=True), num_val=5)
    assert r["num_val"] == 5 and 0 <= r["recall_at_s"] <= 1
    r = recall_experiment(small, EstimatorConfig("vm", 1e-3), num_val=3, direction="smallest")
    assert r["direction"] == "smallest"


def test_vm_relabel_beats_trusting_labels_on_logistic():
    cfg = RunConfig(task=TaskConfig(3, 5, 200, 100, 3.0, noise_rate=0.3), model_kind="logistic",
                    weight_decay=0.01, train=SgdConfig(0.1, 0.9, 400, 64, "cosine"),
                    tune=TuneConfig(False, SgdConfig(0.05, 0.9, 300, 100, "cosine")))
    task = make_task(cfg, 0)
    r = relabel_accuracy(task, EstimatorConfig("vm", 1e-3))
    assert r["relabel_all"] > 1 - 0.3
    assert r["relabel_top1"] > 0.5


def test_tune_sweep_rows(small_cfg, tmp_path):
    ests = [small_cfg.estimator("exact_if"), small_cfg.estimator("vm")]
    rep = epoch_sweep(small_cfg, estimators=ests)
    assert [r["step"] for r in rep["rows"]] == [0, 100, 200]
    last = rep["rows"][-1]
    task = make_task(small_cfg, 0)
    _, m = detect(task, small_cfg.estimator("vm"))
    assert last["vm_roc_auc"] == pytest.approx(m["roc_auc"])
    assert "exact_if_median_abs_clean" in last
    tsv, js = write_sweep(rep, tmp_path / "sw")
    lines = tsv.read_text().strip().splitlines()
    assert len(lines) == 4 and lines[0].split("\t")[0] == "checkpoint"
    assert json.loads(js.read_text())["version"] == "iflab-sweep-1"


def test_train_sweep_single_checkpoint(small_cfg):
    cfg = replace(small_cfg, sweep_mode="train", sweep_every=10_000,
                  train=replace(small_cfg.train, steps=50))
    rep = epoch_sweep(cfg, estimators=[small_cfg.estimator("tracin")])
    assert len(rep["rows"]) == 1 and rep["summary"] == {}
    with pytest.raises(UsageError):
        epoch_sweep(replace(cfg, sweep_every=0))
