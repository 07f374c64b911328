import numpy as np
import pytest

from delaystab.design import build_design
from delaystab.spectral import build_basis

# summary lines from tests/test_acceptance.py, printed after the run
_CRITERIA = {}


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        ok, details = _CRITERIA[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {'; '.join(details)}")


@pytest.fixture
def record_criterion():
    def record(n, ok, detail=""):
        entry = _CRITERIA.setdefault(n, [True, []])
        entry[0] = entry[0] and bool(ok)
        if detail:
            entry[1].append(detail)
        return ok

    return record


@pytest.fixture(scope="session")
def ref_basis():
    return build_basis(2, 2.0, 1.0)


@pytest.fixture(scope="session")
def ref_design(ref_basis):
    return build_design(ref_basis, 5.0, gammas=[6.0, 7.0])


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPT_CONFIG = dict(c=2.0, alpha=1.0, rho=5.0, tau=0.2, gammas=[6.0, 7.0], y0="sin-mix",
                     grid_m=400, dt=1e-3, t_final=10.0)


@pytest.fixture(scope="session")
def acceptance_run(ref_design, ref_basis):
    """The closed-loop reference run and its wall time."""
    import time

    from delaystab.pdesim import SimConfig, run_closed_loop

    t0 = time.perf_counter()
    traj = run_closed_loop(SimConfig(**ACCEPT_CONFIG), design=ref_design, basis=ref_basis)
    return traj, time.perf_counter() - t0
