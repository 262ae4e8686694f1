import numpy as np
import pytest

from agecomp.grid import GridState
from agecomp.kernels import AgeKernel
from agecomp.model import ModelParams, Strain


def const_strain(beta, mu=1.0, name=""):
    return Strain(AgeKernel.constant(beta), AgeKernel.constant(mu), name)


def const_params(betas, mus=None, lam=1.0, mu_s=1.0):
    mus = mus or [1.0] * len(betas)
    strains = [const_strain(b, m) for b, m in zip(betas, mus)]
    return ModelParams.with_floor(lam, mu_s, strains)


def window_init(params, grid, heights, s0=1.0, hi=1.0):
    x = np.zeros((params.n, grid.steps))
    for j, h in enumerate(heights):
        x[j, grid.mids < hi] = h
    return GridState(0.0, s0, x)


def smooth_init(params, grid, heights, s0=2.0):
    """Positive at every age, so endemic functionals are finite from t = 0."""
    a = grid.mids
    x = np.array([h * np.exp(-0.5 * a) * (1 + 0.5 * np.sin(a)) for h in heights])
    return GridState(0.0, s0, x)


@pytest.fixture
def r0_two():
    return const_params([2.0])


# -- acceptance reporting: one line per criterion in the terminal summary ---------

_criteria: dict[int, tuple[str, str]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n): acceptance criterion number")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or rep.when != "call":
        return
    n = mark.args[0]
    detail = "; ".join(str(v) for k, v in item.user_properties if k == "detail")
    _criteria[n] = ("PASS" if rep.passed else "FAIL", detail)


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_criteria):
        status, detail = _criteria[n]
        terminalreporter.write_line(f"criterion {n}: {status}  {detail}")
