import numpy as np
import pytest

from groundview import scene_synth
from groundview.core_types import stack_samples
from groundview.generator import GeneratorConfig


@pytest.fixture(scope="session")
def small_dataset():
    return scene_synth.make_dataset(5, 8, 0.5)


@pytest.fixture(scope="session")
def small_arrays(small_dataset):
    return stack_samples(small_dataset)


@pytest.fixture
def micro_config():
    # narrow enough for fast forward/backward passes in unit tests
    return GeneratorConfig(variant="concat", widths=(1, 2, 2, 2))


def rand_images(seed, n, side):
    return np.random.default_rng(seed).uniform(-1, 1, (n, side, side, 3)).astype(np.float32)


ACCEPTANCE_LINES = []


@pytest.fixture
def acceptance():
    """Record one PASS/FAIL line for a criterion, then assert it."""

    def record(criterion, passed, detail):
        line = f"{'PASS' if passed else 'FAIL'}  {criterion}: {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)
        assert passed, line

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
