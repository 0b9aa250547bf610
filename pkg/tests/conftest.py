import numpy as np
import pytest

from ghostcs import make_double_slit, preset_layout

SLIT = dict(a=30e-6, d=60e-6, h=120e-6)


@pytest.fixture(scope="session")
def paper_layout():
    return preset_layout("paper")


@pytest.fixture(scope="session")
def fast_layout():
    return preset_layout("fast")


@pytest.fixture(scope="session")
def double_slit(paper_layout):
    return make_double_slit(SLIT["a"], SLIT["d"], SLIT["h"], paper_layout.object_pitch,
                            paper_layout.window)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


PAPER_SEED = 2009


@pytest.fixture(scope="session")
def paper_campaign(paper_layout, double_slit):
    """Lensed paper layout, 2000 realizations (about 1.3 GB of frames)."""
    from ghostcs import run_campaign

    return run_campaign(paper_layout, double_slit, 2000, PAPER_SEED)


# one line per acceptance criterion, echoed in the terminal summary
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
