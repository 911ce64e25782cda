import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from ctxasr import autograd as ag  # noqa: E402


@pytest.fixture
def f64():
    with ag.default_dtype(np.float64):
        yield


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# acceptance verdicts, collected here so they print together at the end of the run
VERDICTS = {}


def verdict(n: int, ok: bool, detail: str):
    line = f"criterion {n:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
    VERDICTS.setdefault(n, []).append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if VERDICTS:
        terminalreporter.section("acceptance criteria")
        for n in sorted(VERDICTS):
            for line in VERDICTS[n]:
                terminalreporter.write_line(line)
