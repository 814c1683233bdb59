import numpy as np
import pytest

from osq.episode import Example
from osq.model import Hyperparams, init_params
from osq.numerics import Rng


@pytest.fixture
def small_model():
    """Two-layer, three-unit model with weights large enough to be far from uniform."""
    hyper = Hyperparams(2, 3, 2, 4, init_scale=0.8)
    return init_params(hyper, Rng(7))


def make_example(hyper, T1, targets, seed=0, ex_id="ex"):
    rng = np.random.default_rng(seed)
    return Example(rng.normal(size=(T1, hyper.input_dim)), tuple(targets), ex_id)


# One line per acceptance criterion, printed after the test summary.
ACCEPTANCE_LINES: dict[str, str] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE_LINES, key=lambda k: int(k[1:])):
        terminalreporter.write_line(ACCEPTANCE_LINES[key])
