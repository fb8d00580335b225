import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.dirname(__file__))

from hmmfdp import GaussianDensity, ModelParams, TransitionMatrix  # noqa: E402


def random_gaussian_model(rng):
    """Random valid two-state model with Gaussian emissions."""
    while True:
        a01, a10 = rng.uniform(0.02, 0.98, size=2)
        if abs((1 - a01) - a10) > 0.05:
            break
    A = TransitionMatrix(1 - a01, a01, a10, 1 - a10)
    mu1 = rng.uniform(0.5, 4.0)
    return ModelParams(A, GaussianDensity(0.0, 1.0), GaussianDensity(mu1, rng.uniform(0.5, 2.0)))


def oracle_dict(params):
    return {"A": params.A.as_array(), "means": (params.f0.mean, params.f1.mean), "sds": (params.f0.sd, params.f1.sd)}


@pytest.fixture
def paper_params():
    return ModelParams(TransitionMatrix(0.95, 0.05, 0.2, 0.8), GaussianDensity(0.0, 1.0), GaussianDensity(3.0, 1.0))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
