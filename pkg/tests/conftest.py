import numpy as np
import pytest

from emergelab import agents as ag


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_arch():
    """Architecture small enough for exhaustive finite differences."""
    return ag.ArchConfig(channels=(2, 2, 2, 2), feature_dim=4, hidden=4, symbol_embed=3, mlp_hidden=4)


# one (criterion, passed, detail) line per acceptance check, echoed at the end of the run
ACCEPTANCE: list[tuple[int, bool, str]] = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n, ok, detail in sorted(ACCEPTANCE):
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")
