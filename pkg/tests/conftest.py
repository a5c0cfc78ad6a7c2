import numpy as np
import pytest

from qcurv.energy import PrescribedCurvature
from qcurv.grid import GridSpec
from qcurv.minimizer import continue_branch

# criterion number -> (passed, detail), filled by test_acceptance
ACCEPTANCE = {}

Q0 = -1.0
BRANCH_LAMBDAS = (0.05, 0.1, 0.15, 0.2)


@pytest.fixture(scope="session")
def spec16():
    return GridSpec(16)


@pytest.fixture(scope="session")
def pc_iso():
    return PrescribedCurvature((1.0, 1.0, 1.0, 1.0))


@pytest.fixture(scope="session")
def branch16(spec16, pc_iso):
    """Minimizer branch on N=16 shared by the branch and saddle tests."""
    return continue_branch(pc_iso, Q0, BRANCH_LAMBDAS, spec16)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[k]
        terminalreporter.write_line(f"criterion {k:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
