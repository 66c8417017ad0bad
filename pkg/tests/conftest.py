import numpy as np
import pytest

from iflab.data import NoiseSpec, gen_gaussian_mixture, inject_label_noise, split
from iflab.model import ModelSpec
from iflab.numerics import RngState


def fd_grad(f, theta, h=1e-5):
    out = np.empty_like(theta)
    e = np.zeros_like(theta)
    for i in range(theta.size):
        e[i] = h
        out[i] = (f(theta + e) - f(theta - e)) / (2 * h)
        e[i] = 0.0
    return out


def rel_err(a, b):
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-12))


@pytest.fixture
def small_task():
    """Three-class convex problem with 20% symmetric noise."""
    rng = RngState(3)
    full = gen_gaussian_mixture(3, 40, 4, 2.5, rng)
    tr, va = split(full, [0.5, 0.5], rng.advance(1))
    tr = inject_label_noise(tr, NoiseSpec("symmetric", 0.2), rng.advance(2))
    spec = ModelSpec("logistic", 4, 3, weight_decay=0.05)
    return spec, tr, va


_ACCEPTANCE = pytest.StashKey[list]()


@pytest.fixture
def verdict(request, capsys):
    """Record one PASS/FAIL line for an acceptance criterion and echo it live."""
    lines = request.config.stash.setdefault(_ACCEPTANCE, [])

    def record(number, ok, detail):
        line = f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}"
        lines.append(line)
        with capsys.disabled():
            print(f"\n{line}")
        return ok

    return record


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(_ACCEPTANCE, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
