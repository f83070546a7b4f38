import os
import sys

import numpy as np
import pytest

from macgnn.micro_graph import InteractionLog

sys.path.insert(0, os.path.dirname(__file__))

ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
ML100K_DIR = os.path.join(ROOT, "data", "ml-100k")


def random_log(rng, n, m, density, tmax=1000, negatives=0.3):
    """Random bipartite log: each pair present with ``density``; some records negative."""
    rows = []
    for u in range(n):
        for i in range(m):
            if rng.random() < density:
                label = int(rng.random() >= negatives)
                rows.append((u, i, label, int(rng.integers(0, tmax))))
    order = rng.permutation(len(rows)) if rows else []
    rows = [rows[k] for k in order]
    return InteractionLog.from_records(rows, n=n, m=m)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


CRITERIA: dict[int, str] = {}


def record_criterion(number: int, passed: bool, detail: str) -> None:
    line = f"criterion {number}: {'PASS' if passed else 'FAIL'} | {detail}"
    CRITERIA[number] = line
    print(line)


def pytest_terminal_summary(terminalreporter):
    if CRITERIA:
        terminalreporter.section("acceptance criteria")
        for k in sorted(CRITERIA):
            terminalreporter.write_line(CRITERIA[k])
