import numpy as np
import pytest

from dgnet import tensor as T
from dgnet.data import SplitSpec, index_directory, split_dataset
from dgnet.synthetic import write_dataset

# criterion number -> (passed, detail); filled by the acceptance tests
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def f64():
    with T.precision(np.float64):
        yield


@pytest.fixture(scope="session")
def synth_root(tmp_path_factory):
    return write_dataset(tmp_path_factory.mktemp("synth"), count=24, size=96, seed=0)


@pytest.fixture(scope="session")
def synth_split(synth_root):
    return split_dataset(index_directory(synth_root), SplitSpec(16, 8, 0))


@pytest.fixture(scope="session")
def tiny_root(tmp_path_factory):
    """Six 32x32 pairs for fast trainer and CLI tests."""
    return write_dataset(tmp_path_factory.mktemp("tiny"), count=6, size=32, seed=1)


@pytest.fixture(scope="session")
def tiny_split(tiny_root):
    return split_dataset(index_directory(tiny_root), SplitSpec(4, 2, 0))


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[k]
        terminalreporter.write_line(f"criterion {k:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
