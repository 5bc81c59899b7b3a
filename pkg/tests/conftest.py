import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from vwapopt.market_data import builtin_symbols, builtin_world, synthesize  # noqa: E402


@pytest.fixture(scope="session")
def world20():
    return builtin_world(T=20, symbols=4)


@pytest.fixture(scope="session")
def data20(world20):
    model, prof = world20
    return synthesize(model, prof, 30.0, 40, builtin_symbols(4), seed=11)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    if mod is None or not mod.VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(mod.VERDICTS):
        terminalreporter.write_line(mod.VERDICTS[n].splitlines()[0])
