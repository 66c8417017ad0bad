import json
import warnings

import numpy as np
import pytest

from iflab.data import (
    NOISE_PRESETS,
    Dataset,
    NoiseSpec,
    gen_gaussian_mixture,
    inject_label_noise,
    largest_remainder_sizes,
    load_dataset,
    save_dataset,
    split,
)
from iflab.exceptions import DimensionError, LabelError, ParseError
from iflab.model import ModelSpec, accuracy, init_params
from iflab.numerics import RngState
from iflab.optim import minimize_risk


def test_well_separated_mixture_is_linearly_separable():
    d = gen_gaussian_mixture(2, 100, 2, 6.0, RngState(0))
    spec = ModelSpec("logistic", 2, 2, weight_decay=1e-3)
    theta = minimize_risk(spec, d, init_params(spec, RngState(0)), tol=1e-8)
    assert accuracy(spec, theta, d) >= 0.99


def test_mixture_basics():
    d = gen_gaussian_mixture(3, 1, 5, 1.0, RngState(0))
    assert len(d) == 3 and sorted(d.y.tolist()) == [0, 1, 2]
    a = gen_gaussian_mixture(3, 10, 5, 1.0, RngState(4))
    b = gen_gaussian_mixture(3, 10, 5, 1.0, RngState(4))
    assert a.equals(b)
    assert not a.noisy.any() and np.array_equal(a.true_y, a.y)
    with pytest.raises(DimensionError):
        gen_gaussian_mixture(2, 3, 0, 1.0, RngState(0))


def test_noise_counts_and_flags():
    d = gen_gaussian_mixture(4, 125, 3, 2.0, RngState(0))
    n = inject_label_noise(d, NoiseSpec("symmetric", 0.4), RngState(1))
    assert n.noisy.sum() == 200
    assert np.all(n.y[n.noisy] != n.true_y[n.noisy])
    assert np.all(n.y[~n.noisy] == n.true_y[~n.noisy])
    assert inject_label_noise(d, NoiseSpec("symmetric", 0.0), RngState(1)).equals(d)


def test_binary_symmetric_noise_flips_to_other_class():
    d = gen_gaussian_mixture(2, 50, 2, 2.0, RngState(0))
    n = inject_label_noise(d, NoiseSpec("symmetric", 0.3), RngState(2))
    assert np.all(n.y[n.noisy] == 1 - n.true_y[n.noisy])


def test_pairflip():
    d = gen_gaussian_mixture(3, 20, 2, 2.0, RngState(0))
    n = inject_label_noise(d, NoiseSpec("asymmetric_pairflip", 0.5), RngState(2))
    assert np.all(n.y[n.noisy] == (n.true_y[n.noisy] + 1) % 3)


def test_tiny_rate_warns_and_flags():
    d = gen_gaussian_mixture(2, 5, 2, 2.0, RngState(0))
    with pytest.warns(UserWarning):
        n = inject_label_noise(d, NoiseSpec("symmetric", 0.01), RngState(0))
    assert n.meta["noise_warning"] is True
    assert not n.noisy.any()


def test_presets():
    assert NOISE_PRESETS["worst-like"].rate == 0.4
    assert NOISE_PRESETS["aggre-like"].rate == 0.1
    assert NOISE_PRESETS["random-like"].rate == 0.18
    with pytest.raises(ValueError):
        NoiseSpec("symmetric", 1.0)


def test_split_examples():
    d = gen_gaussian_mixture(2, 50, 2, 2.0, RngState(0))
    (whole,) = split(d, [1.0], RngState(0))
    assert sorted(whole.ids) == sorted(d.ids)
    a, b = split(d, [0.8, 0.2], RngState(1))
    assert (len(a), len(b)) == (80, 20)
    assert set(a.ids) | set(b.ids) == set(d.ids) and not set(a.ids) & set(b.ids)
    with pytest.raises(ValueError):
        split(d, [0.5, 0.6], RngState(0))


def test_largest_remainder():
    assert largest_remainder_sizes(10, [1 / 3, 1 / 3, 1 / 3]) == [4, 3, 3]
    assert sum(largest_remainder_sizes(7, [0.25, 0.25, 0.5])) == 7


def test_dataset_validation():
    with pytest.raises(LabelError):
        Dataset(np.zeros((2, 2)), np.array([0, 2]), 2)
    with pytest.raises(ValueError):
        Dataset(np.zeros((2, 2)), np.array([0, 1]), 2, ids=np.array([1, 1]))
    d = Dataset(np.zeros((3, 2)), np.array([0, 1, 0]), 2)
    assert len(d.without(int(d.ids[1]))) == 2


def test_round_trip(tmp_path):
    d = inject_label_noise(gen_gaussian_mixture(3, 7, 4, 2.0, RngState(0)),
                           NoiseSpec("symmetric", 0.3), RngState(1))
    p = tmp_path / "d.jsonl"
    save_dataset(d, p)
    assert json.loads(p.read_text().splitlines()[0])["version"] == "iflab-ds-1"
    assert load_dataset(p).equals(d)


def test_round_trip_empty(tmp_path):
    d = Dataset(np.zeros((0, 3)), np.zeros(0, dtype=int), 4)
    p = tmp_path / "e.jsonl"
    save_dataset(d, p)
    back = load_dataset(p)
    assert len(back) == 0 and back.num_classes == 4 and back.dim == 3


def test_parse_errors_carry_line(tmp_path):
    p = tmp_path / "bad.jsonl"
    p.write_text('{"version": "iflab-ds-1", "K": 2, "dim": 1, "n": 2}\n'
                 '{"id": 0, "x": [0.0], "y": 1}\n{"id": 1, "x": [0.0], "y": 2}\n')
    with pytest.raises(ParseError, match=r"bad.jsonl:3"):
        load_dataset(p)
    p.write_text('{"version": "iflab-ds-1", "K": 2, "dim": 2, "n": 1}\n{"id": 0, "x": [0.0], "y": 1}\n')
    with pytest.raises(ParseError, match="'x'"):
        load_dataset(p)
    p.write_text("not json\n")
    with pytest.raises(ParseError):
        load_dataset(p)
