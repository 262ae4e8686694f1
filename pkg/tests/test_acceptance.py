"""The nine acceptance criteria, each at its stated tolerance and time budget.

A PASS/FAIL line per criterion is printed in the pytest terminal summary.
"""
import functools
import math
import time

import numpy as np
import pytest

from agecomp import lyapunov as ly
from agecomp.classify import Tolerances, analyze, c_s
from agecomp.equilibria import disease_free, endemic_point, residual
from agecomp.grid import Grid, GridState
from agecomp.kernels import AgeKernel
from agecomp.model import ModelParams, Strain, blocks, validate
from agecomp.oracle import compare, integrate, reduce
from agecomp.solver import duhamel_check, simulate

from conftest import const_params, smooth_init, window_init


def note(record_property, text):
    record_property("detail", text)


def random_kernel(rng, floor=0.0, max_pieces=3):
    n = int(rng.integers(1, max_pieces + 1))
    edges = [0.0] + list(np.round(np.cumsum(rng.uniform(0.2, 2.0, n)), 2))
    values = list(rng.uniform(floor + 0.1, 3.0, n))
    if floor > 0:
        edges[-1] = math.inf
    return AgeKernel.piecewise(edges, values)


def random_params(rng, n_max=3):
    strains = [Strain(random_kernel(rng), random_kernel(rng, floor=0.3))
               for _ in range(int(rng.integers(1, n_max + 1)))]
    p = ModelParams.with_floor(float(rng.uniform(0.2, 3.0)), float(rng.uniform(0.3, 2.0)),
                               strains)
    assert validate(p).ok
    return p


# -- 1 ------------------------------------------------------------------------------

@pytest.mark.criterion(1)
def test_equilibrium_stationarity(record_property):
    start = time.perf_counter()
    rng = np.random.default_rng(11)
    worst_e0 = 0.0
    for _ in range(20):
        p = random_params(rng)
        grid = p.grid(1e-2)
        worst_e0 = max(worst_e0, residual(p, p.derive(grid), disease_free(p, grid)))
    ratios = []
    cases = [const_params([2.0]), const_params([2.0, 2.0], lam=2.0, mu_s=1.5)]
    while len(cases) < 5:
        p = random_params(rng, n_max=2)
        if max(p.r0_values()) > 1.2:
            cases.append(p)
    for p in cases:
        b = blocks(p)
        if b.n_gt == 0:
            continue
        alpha = np.zeros(p.n)
        alpha[list(b.groups[0])] = 1.0 / len(b.groups[0])
        res = []
        for da in (2e-3, 1e-3):
            grid = p.grid(da)
            d = p.derive(grid)
            res.append(residual(p, d, endemic_point(p, d, b, 1, alpha)))
        ratios.append(res[0] / res[1])
    elapsed = time.perf_counter() - start
    note(record_property, f"max residual(E0)={worst_e0:.2e}; endemic halving ratios="
                          f"{[round(r, 3) for r in ratios]}; {elapsed:.1f}s")
    assert worst_e0 <= 1e-14
    assert all(abs(r - 2.0) <= 0.3 for r in ratios)
    assert elapsed < 10


# -- 2 ------------------------------------------------------------------------------

ORACLE_CASES = {"R0=2": [2.0], "R0=0.5": [1.0], "R0=(2,1.5,0.8)": [2.0, 1.5, 0.8]}


@pytest.mark.criterion(2)
def test_oracle_equivalence(record_property):
    start = time.perf_counter()
    lines, ok = [], True
    for name, betas in ORACLE_CASES.items():
        mus = [2.0] if betas == [1.0] else None
        p = const_params(betas, mus)
        h = 1e-4
        errors = []
        ref = None
        for da, every in ((1e-3, 10), (5e-4, 20)):
            grid = p.grid(da)
            init = window_init(p, grid, [0.1] * p.n)
            traj = simulate(p, init, grid, 50.0, record_every=every)
            if ref is None:
                ref = integrate(reduce(p), init.s, init.masses(grid.da), 50.0, h=h,
                                sample_every=10)
            errors.append(compare(traj.times, traj.s, traj.mass, ref))
        coarse = max(errors[0].values())
        ratios = [errors[0][k] / errors[1][k] for k in errors[0]]
        ok &= coarse <= 1e-3 and all(1.6 <= r <= 2.4 for r in ratios)
        lines.append(f"{name}: err={coarse:.2e} ratio={min(ratios):.3f}..{max(ratios):.3f}")
    elapsed = time.perf_counter() - start
    note(record_property, "; ".join(lines) + f"; {elapsed:.0f}s")
    assert ok
    assert elapsed < 120


# -- 3 ------------------------------------------------------------------------------

@pytest.mark.criterion(3)
def test_duhamel_exactness(record_property):
    start = time.perf_counter()
    rng = np.random.default_rng(5)
    worst = 0.0
    for _ in range(5):
        p = random_params(rng)
        grid = p.grid(1e-2)
        d = p.derive(grid)
        x = rng.uniform(0.0, 1.0, (p.n, grid.steps)) * (rng.uniform(size=(p.n, grid.steps)) > 0.3)
        init = GridState(0.0, float(rng.uniform(0.1, 3.0)), x)
        times = sorted(rng.uniform(0.0, grid.a_max * 0.9, 4).round(2))
        traj = simulate(p, init, grid, max(times) + grid.dt, d, snapshot_times=times,
                        record_every=1000)
        worst = max(worst, duhamel_check(traj, init, d, grid))
    elapsed = time.perf_counter() - start
    note(record_property, f"max deviation {worst:.2e}; {elapsed:.1f}s")
    assert worst <= 1e-13
    assert elapsed < 5


# -- shared runs for 4, 6 and 7 ---------------------------------------------------

GAS_DA = 2e-3


@functools.lru_cache(maxsize=None)
def gas_case(name):
    """Runs of the four theorem scenarios, with timing."""
    if name == "a":
        p, heights, horizon = const_params([1.0, 0.8], [2.0, 1.0]), [0.1, 0.3], 100.0
    elif name == "b":
        p, heights, horizon = const_params([2.0, 1.5]), [0.1, 0.3], 200.0
    elif name == "c":
        p, heights, horizon = const_params([2.0, 2.0]), [0.1, 0.3], 200.0
    else:
        p, heights, horizon = const_params([2.0, 2.0]), [0.0, 0.3], 200.0
    grid = p.grid(GAS_DA)
    start = time.perf_counter()
    an = analyze(p, window_init(p, grid, heights), grid, horizon, blocks(p))
    return p, an, time.perf_counter() - start


@functools.lru_cache(maxsize=None)
def full_support_case(name):
    """Transients whose functional is finite from t = 0."""
    betas, mus, heights = {
        "single": ([2.0], None, [0.8]),
        "exclusion": ([2.0, 1.5], None, [0.05, 0.4]),
        "tie": ([2.0, 2.0], None, [0.1, 0.3]),
        "subcritical": ([1.0, 0.8], [2.0, 1.0], [0.5, 0.2]),
    }[name]
    p = const_params(betas, mus)
    grid = p.grid(GAS_DA)
    return p, analyze(p, smooth_init(p, grid, heights), grid, 60.0, blocks(p),
                      tols=Tolerances(warmup=30.0))


# -- 4 ------------------------------------------------------------------------------

@pytest.mark.criterion(4)
def test_lyapunov_monotonicity(record_property):
    start = time.perf_counter()
    lines, ok = [], True
    runs = [(f"6{k}", gas_case(k)[1]) for k in "abcd"]
    runs += [(k, full_support_case(k)[1]) for k in ("single", "exclusion", "tie", "subcritical")]
    for name, an in runs:
        rep = an.report
        mono = rep.lyapunov
        ok &= mono is not None and mono.ok and rep.dl_max <= 0
        lines.append(f"{name} {rep.functional} +{mono.max_increment:.1e}")
    elapsed = time.perf_counter() - start
    note(record_property, "; ".join(lines))
    assert ok
    assert elapsed < 120


# -- 5 ------------------------------------------------------------------------------

def _fd_error(times, values, analytic, t_from):
    keep = times >= t_from
    t, v, a = times[keep], values[keep], analytic[keep]
    _, fd = ly.finite_difference(t, v)
    mid = 0.5 * (a[1:] + a[:-1])
    return float(np.max(np.abs(fd - mid) / (np.abs(mid) + 1)))


@pytest.mark.criterion(5)
def test_derivative_identity(record_property):
    errs = {}
    for name, betas, mus, heights, k in [
        ("L0 subcritical", [1.0, 0.8], [2.0, 1.0], [0.5, 0.2], None),
        ("L0 supercritical", [2.0, 1.5], None, [0.1, 0.3], None),
        ("L1 exclusion", [2.0, 1.5], None, [0.05, 0.4], 1),
        ("L1 tie", [2.0, 2.0], None, [0.1, 0.3], 1),
    ]:
        p = const_params(betas, mus)
        grid = p.grid(1e-3)
        d, b = p.derive(grid), blocks(p)
        probe = ly.LyapunovProbe(p, d, b, k)
        traj = simulate(p, smooth_init(p, grid, heights), grid, 10.0, d,
                        monitors={"L": probe}, monitor_every=5, record_every=100)
        t, s = traj.series_times, traj.series
        if k is None:
            errs[name] = _fd_error(t, probe.l0(s), probe.l0_dt(s), 1.0)
        else:
            alpha = np.zeros(p.n)
            alpha[list(b.groups[0])] = 1.0 / len(b.groups[0])
            errs[name] = _fd_error(t, probe.lk(s, alpha), probe.lk_dt(s, alpha), 1.0)
    note(record_property, "; ".join(f"{k} {v:.1e}" for k, v in errs.items()))
    assert max(errs.values()) <= 1e-2


# -- 6 ------------------------------------------------------------------------------

@pytest.mark.criterion(6)
def test_gas_reproduction(record_property):
    res = {k: gas_case(k) for k in "abcd"}
    elapsed = sum(v[2] for v in res.values())
    rep = {k: v[1].report for k, v in res.items()}
    traj = {k: v[1].trajectory for k, v in res.items()}
    checks = {
        "a": rep["a"].target == "E0" and rep["a"].distance <= 1e-3,
        "b": (rep["b"].target == "E1,{1}" and rep["b"].distance <= 1e-3
              and traj["b"].mass[1, -1] <= 1e-6),
        "c": (rep["c"].target == "E1,{1,2}" and rep["c"].distance <= 1e-3
              and abs(sum(rep["c"].alpha_hat) - 1) <= 1e-6),
        "d": (rep["d"].target == "E1,{2}" and rep["d"].distance <= 1e-3
              and not traj["d"].mass[0].any() and not traj["d"].final.x[0].any()),
    }
    note(record_property, "; ".join(
        f"({k}) {rep[k].target} d={rep[k].distance:.1e} {'ok' if checks[k] else 'FAIL'}"
        for k in "abcd") + f"; alpha_hat(c)={tuple(round(a, 4) for a in rep['c'].alpha_hat)}"
        f"; {elapsed:.0f}s")
    assert all(checks.values())
    assert all(r.ok for r in rep.values()), {k: r.failures for k, r in rep.items()}
    assert elapsed < 300


# -- 7 ------------------------------------------------------------------------------

@pytest.mark.criterion(7)
def test_persistence_floors(record_property):
    lines, ok = [], True
    for k in "bcd":
        p, an, _ = gas_case(k)
        fl = an.report.floors
        assert fl.c_s == c_s(p)
        ok &= fl.s_min >= fl.c_s - 1e-6 and all(v > 1e-4 for v in fl.force_floor.values())
        lines.append(f"({k}) S_min={fl.s_min:.4f} >= c_S={fl.c_s:.4f}, "
                     f"F_min={min(fl.force_floor.values()):.3f}")
    note(record_property, "; ".join(lines))
    assert ok


# -- 8 ------------------------------------------------------------------------------

@pytest.mark.criterion(8)
def test_invariance_and_dissipativity(record_property):
    start = time.perf_counter()
    rng = np.random.default_rng(8)
    zero_ok = norm_ok = pos_ok = True
    worst_excess = -math.inf
    for i in range(200):
        p = random_params(rng)
        da = float(rng.choice([0.01, 0.1, 0.5, 2.0, 5.0]))
        grid = p.grid(da, tail_tol=1e-6)
        x = rng.uniform(0, 5, (p.n, grid.steps))
        absent = int(rng.integers(0, p.n))
        x[absent] = 0.0
        init = GridState(0.0, float(rng.uniform(0, 10)), x)
        traj = simulate(p, init, grid, 200 * grid.dt, record_every=1)
        zero_ok &= not traj.mass[absent].any() and not traj.final.x[absent].any()
        pos_ok &= bool(np.all(traj.s >= 0) and np.all(traj.final.x >= 0)
                       and np.all(np.isfinite(traj.s)))
        bound = max(p.lam / p.mu0, traj.norms()[0]) + 10 * grid.dt * p.lam
        worst_excess = max(worst_excess, float(traj.norms().max() - bound))
        norm_ok &= worst_excess <= 0
    elapsed = time.perf_counter() - start
    note(record_property, f"200 configs: zero strain bit-zero={zero_ok}, positivity={pos_ok}, "
                          f"max(norm - bound)={worst_excess:.2e}; {elapsed:.0f}s")
    assert zero_ok and pos_ok and norm_ok
    assert elapsed < 60


# -- 9 ------------------------------------------------------------------------------

@pytest.mark.criterion(9)
def test_set_comparison_inequality(record_property):
    rng = np.random.default_rng(9)
    models = {}
    violations = draws = 0
    while draws < 500:
        n = int(rng.integers(2, 6))
        if n not in models:
            mus = list(rng.uniform(0.5, 2.0, n))
            p = const_params([2 * m for m in mus], mus)  # every R0 = 2, psi = 1
            grid = p.grid(2e-2)
            models[n] = (p, grid, p.derive(grid), blocks(p))
        p, grid, d, b = models[n]
        tau = rng.dirichlet(np.ones(n))
        tau_p = rng.dirichlet(np.ones(n))
        if rng.uniform() < 0.2:
            tau_p[int(rng.integers(n))] = 0.0
            tau_p /= tau_p.sum()
        above = tau > tau_p
        if not above.any() or above.all():
            continue
        alpha = np.where(above, tau, 0.0) / tau[above].sum()
        cfg = ly.lyapunov_config(p, d, b, 1, alpha)
        l_tau = ly.lk(endemic_point(p, d, b, 1, tau).as_state(), d, p, cfg)
        l_tau_p = ly.lk(endemic_point(p, d, b, 1, tau_p).as_state(), d, p, cfg)
        violations += not l_tau < l_tau_p
        draws += 1
    note(record_property, f"{draws} draws, {violations} violations")
    assert violations == 0
