import pytest

import support
from messplus.zoo import synth_trace, wmt14_like


@pytest.fixture(scope="session")
def small_wmt():
    cfg = wmt14_like(3000)
    return cfg, synth_trace(cfg, seed=11)


def pytest_terminal_summary(terminalreporter):
    if support.ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in support.ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
