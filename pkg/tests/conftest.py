import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.dirname(__file__))

from emaprune import model as M  # noqa: E402
from emaprune.data import Dataset, generate_gaussian_mixture, split_dataset  # noqa: E402


@pytest.fixture
def spec242():
    return M.ModelSpec(2, (4,), 2, "classification", "tanh")


@pytest.fixture
def small_data():
    rng = np.random.default_rng(3)
    means = rng.standard_normal((3, 5)) * 2.0
    ds = generate_gaussian_mixture(11, 240, 5, 3, means, 1.0)
    return split_dataset(ds, (0.8, 0.1, 0.1), seed=0)


@pytest.fixture
def small_spec():
    return M.ModelSpec(5, (6,), 3, "classification", "tanh")


def regression_data(n=120, d=4, seed=0):
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((n, d))
    w = rng.standard_normal(d)
    y = X @ w + 0.1 * rng.standard_normal(n)
    return split_dataset(Dataset(X=X, y=y, task="regression"), (0.8, 0.1, 0.1), seed=seed)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split()[2])):
            terminalreporter.write_line(line)
