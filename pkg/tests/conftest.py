import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from _report import LINES as ACCEPTANCE_LINES  # noqa: E402


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def lol_dir(tmp_path_factory):
    """Small LoL-layout tree of synthetic 400x600 pairs."""
    from dark.synthetic import write_lol_layout

    return write_lol_layout(tmp_path_factory.mktemp("lol"), n_train=3, n_test=2)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
