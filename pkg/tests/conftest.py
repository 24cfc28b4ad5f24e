import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.dirname(__file__))

from facefit import gen_synthetic_model
from facefit.head import sample_face_params


@pytest.fixture(scope="session")
def model():
    return gen_synthetic_model(seed=0, n_grid=16)


@pytest.fixture(scope="session")
def small_model():
    return gen_synthetic_model(seed=1, n_grid=8)


def random_params(model, seed):
    """A random face in the same distribution as the embedding dataset."""
    return sample_face_params(model, np.random.default_rng(seed))


def pytest_terminal_summary(terminalreporter):
    module = sys.modules.get("test_acceptance")
    lines = getattr(module, "RESULT_LINES", [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
