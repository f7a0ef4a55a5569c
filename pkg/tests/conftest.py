from pathlib import Path

import numpy as np
import pytest

from icexplain import data, models

FIXTURES = Path(__file__).parent / "fixtures"


@pytest.fixture(scope="session")
def fixtures_dir():
    return FIXTURES


@pytest.fixture(scope="session")
def recidivism():
    return data.load_dataset("recidivism")


@pytest.fixture(scope="session")
def recidivism_lr(recidivism):
    return models.train(recidivism, "lr")


@pytest.fixture(scope="session")
def recidivism_ann(recidivism):
    return models.train(recidivism, "ann-l")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def toy_dataset(n=400, d=3, seed=0, min_test=20):
    """Linearly separable-ish synthetic tabular data, split and standardized."""
    g = np.random.default_rng(seed)
    X = g.normal(size=(n, d)) * np.arange(1, d + 1)
    w = np.linspace(1.0, -0.5, d)
    y = (X @ w + 0.3 * g.normal(size=n) > 0).astype(int)
    ds = data.from_arrays(X, y, split=["pool"] * n, name="toy")
    return data.standardize(data.split(ds, seed=seed, min_test=min_test))


def pytest_terminal_summary(terminalreporter):
    from acceptance_log import VERDICTS, summary_lines
    if VERDICTS:
        terminalreporter.section("acceptance criteria")
        for line in summary_lines():
            terminalreporter.write_line(line)
