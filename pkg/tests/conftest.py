import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from simcache.catalog import Catalog, CostModel  # noqa: E402


@pytest.fixture
def line4():
    """Objects at 0, 1, 2, 3 on a line, l1 cost, c_f = 2, k = 2."""
    cat = Catalog(np.array([[0.0], [1.0], [2.0], [3.0]]), "l1")
    return cat, CostModel(k=2, h=2, cf=2.0, metric="l1")


_ACCEPTANCE = []


@pytest.fixture
def criterion():
    """Record one pass/fail line per acceptance check; printed in the terminal summary."""
    def record(label, passed, detail):
        line = f"{'PASS' if passed else 'FAIL'}  {label}: {detail}"
        _ACCEPTANCE.append(line)
        print(line)
        return passed
    return record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in _ACCEPTANCE:
            terminalreporter.write_line(line)
