import numpy as np
import pytest

from inhibmoe import autograd as ag
from inhibmoe import data
from inhibmoe.data import Samples


def stand_in_digits(n, seed=0):
    """Digit-like samples: a blurred bar whose position encodes the label.

    Real MNIST is not available offline, so the tests that only need a
    learnable second data type use this instead.
    """
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, 10, n)
    pixels = np.zeros((n, 28, 28), dtype=np.uint8)
    for i, lab in enumerate(labels):
        col = 2 + 2 * int(lab)
        pixels[i, 4:24, col:col + 3] = 200 + rng.integers(0, 56)
    return Samples(pixels, labels, np.zeros(n, dtype=np.uint8))


def tiny_mixed(n_per_type, seed=0):
    return data.build_mixed_dataset(stand_in_digits(n_per_type, seed), data.gen_squares(n_per_type, seed), seed)


@pytest.fixture(autouse=True)
def fresh_tape():
    ag.reset_tape()
    yield
    ag.reset_tape()


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("tests.test_acceptance")
    if mod is None or not mod.LINES:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(mod.LINES):
        terminalreporter.write_line(mod.LINES[number])
