import math

import numpy as np
import pytest

from agecomp import lyapunov as ly
from agecomp.equilibria import disease_free, endemic_point
from agecomp.grid import GridState
from agecomp.model import blocks
from agecomp.solver import simulate

from conftest import const_params, smooth_init


def test_g_values():
    assert ly.g(1.0) == 0.0
    assert ly.g(2.0) == pytest.approx(1 - math.log(2), rel=1e-15)
    assert ly.g(0.5) == pytest.approx(math.log(2) - 0.5, rel=1e-15)
    assert ly.g(1 + 1e-9) == pytest.approx(5e-19, rel=1e-6)
    for bad in (0.0, -1.0, math.nan):
        with pytest.raises(ValueError):
            ly.g(bad)


@pytest.fixture(scope="module")
def tied():
    p = const_params([2.0, 2.0])
    grid = p.grid(2e-3)
    return p, grid, p.derive(grid), blocks(p)


def test_l0_examples():
    p = const_params([2.0])
    grid = p.grid(1e-3)
    d = p.derive(grid)
    assert ly.l0(disease_free(p, grid).as_state(), d, p) == 0.0
    assert ly.l0_dt(disease_free(p, grid).as_state(), d, p) == 0.0
    zero = np.zeros((1, grid.steps))
    assert ly.l0(GridState(0.0, 2.0, zero), d, p) == pytest.approx(ly.g(2.0), rel=1e-15)
    x = zero.copy()
    x[0, :500] = 0.6
    assert ly.l0(GridState(0.0, 1.0, x), d, p) == pytest.approx(0.3, rel=1e-11)
    with pytest.raises(ly.LyapunovDomainError):
        ly.l0(GridState(0.0, 0.0, x), d, p)


def test_l0_dt_negative_below_threshold():
    p = const_params([1.0], [2.0])
    grid = p.grid(1e-3)
    d = p.derive(grid)
    x = np.zeros((1, grid.steps))
    x[0, :1000] = 0.1
    assert ly.l0_dt(GridState(0.0, 1.0, x), d, p) < 0


def test_lk_examples(tied):
    p, grid, d, b = tied
    cfg = ly.lyapunov_config(p, d, b, 1, [0.5, 0.5])
    own = endemic_point(p, d, b, 1, [0.5, 0.5]).as_state()
    assert ly.lk(own, d, p, cfg) == 0.0
    assert ly.lk_dt(own, d, p, cfg) == pytest.approx(0.0, abs=1e-12)
    other = endemic_point(p, d, b, 1, [0.3, 0.7]).as_state()
    assert ly.lk(other, d, p, cfg) == pytest.approx(0.25 * (ly.g(0.6) + ly.g(1.4)), rel=1e-9)


def test_eta_rule(tied):
    p, grid, d, b = tied
    cfg = ly.lyapunov_config(p, d, b, 1, [1.0, 0.0])
    assert cfg.eta == (0, 1)
    state = endemic_point(p, d, b, 1, [1.0, 0.0]).as_state()
    x = np.array(state.x)
    x[1, :100] = 0.2
    extra = np.dot(d[1].psi_cell, x[1]) * grid.da
    assert ly.lk(GridState(0.0, state.s, x), d, p, cfg) == pytest.approx(extra, rel=1e-12)


def test_eta_outside_block():
    p = const_params([2.0, 1.5])
    grid = p.grid(5e-3)
    d, b = p.derive(grid), blocks(p)
    assert ly.lyapunov_config(p, d, b, 1, [1.0, 0.0]).eta == (0, 1)


def test_lk_infinite_when_weighted_strain_absent(tied):
    p, grid, d, b = tied
    cfg = ly.lyapunov_config(p, d, b, 1, [0.5, 0.5])
    x = np.array(endemic_point(p, d, b, 1, [0.5, 0.5]).densities)
    x[1] = 0.0
    assert ly.lk(GridState(0.0, 0.5, x), d, p, cfg) == math.inf


def test_lk_partial_hole_is_domain_error(tied):
    p, grid, d, b = tied
    cfg = ly.lyapunov_config(p, d, b, 1, [0.5, 0.5])
    x = np.array(endemic_point(p, d, b, 1, [0.5, 0.5]).densities)
    x[1, 40:60] = 0.0
    with pytest.raises(ly.LyapunovDomainError) as info:
        ly.lk(GridState(0.0, 0.5, x), d, p, cfg)
    assert info.value.strain == 1 and info.value.cell == 40


def test_lk_dt_scaling_and_zero_force(tied):
    p, grid, d, b = tied
    cfg = ly.lyapunov_config(p, d, b, 1, [0.5, 0.5])
    pt = endemic_point(p, d, b, 1, [0.5, 0.5])
    doubled = GridState(0.0, pt.s_star, 2 * pt.densities)
    assert ly.lk_dt(doubled, d, p, cfg) == pytest.approx(0.0, abs=1e-15)
    x = np.array(pt.densities)
    x[0] = 0.0
    with pytest.raises(ly.LyapunovDomainError):
        ly.lk_dt(GridState(0.0, 0.5, x), d, p, cfg)


def test_lk_dt_sign_for_ordered_blocks():
    p = const_params([2.0, 1.5])
    grid = p.grid(5e-3)
    d, b = p.derive(grid), blocks(p)
    cfg = ly.lyapunov_config(p, d, b, 1, [1.0, 0.0])
    rng = np.random.default_rng(3)
    for _ in range(20):
        x = rng.uniform(0.01, 1.0, (2, grid.steps))
        assert ly.lk_dt(GridState(0.0, rng.uniform(0.1, 2.0), x), d, p, cfg) <= 0


@pytest.fixture(scope="module")
def transient():
    p = const_params([2.0, 2.0])
    grid = p.grid(1e-3)
    d, b = p.derive(grid), blocks(p)
    probe = ly.LyapunovProbe(p, d, b, 1)
    init = smooth_init(p, grid, [0.3, 0.1])
    traj = simulate(p, init, grid, 8.0, d, monitors={"L": probe}, monitor_every=5,
                    record_every=50)
    return p, d, b, probe, traj


def _rel_fd_error(times, values, analytic):
    _, fd = ly.finite_difference(times, values)
    mid = 0.5 * (analytic[1:] + analytic[:-1])
    return np.max(np.abs(fd - mid) / (np.abs(mid) + 1))


def test_l0_derivative_identity(transient):
    p, d, b, probe, traj = transient
    s = traj.series
    assert _rel_fd_error(traj.series_times, probe.l0(s), probe.l0_dt(s)) < 1e-2


def test_lk_derivative_identity(transient):
    p, d, b, probe, traj = transient
    s, alpha = traj.series, [0.5, 0.5]
    values, dl = probe.lk(s, alpha), probe.lk_dt(s, alpha)
    assert np.all(np.isfinite(values))
    assert _rel_fd_error(traj.series_times, values, dl) < 1e-2


def test_susceptible_coefficient_is_block_inflow(transient):
    # counting weighted strains instead of using lam - mu_s*S* breaks the identity
    p, d, b, probe, traj = transient
    s, alpha = traj.series, [0.5, 0.5]
    values, dl = probe.lk(s, alpha), probe.lk_dt(s, alpha)
    gs = ly.g(probe.s_star / s["S"])
    count = dl + (p.lam - p.mu_s * probe.s_star) * gs - 2 * gs
    assert _rel_fd_error(traj.series_times, values, count) > 5e-2


def test_probe_matches_pointwise(transient):
    p, d, b, probe, traj = transient
    cfg = ly.lyapunov_config(p, d, b, 1, [0.7, 0.3])
    s = traj.series
    assert probe.lk(s, [0.7, 0.3])[-1] == pytest.approx(ly.lk(traj.final, d, p, cfg), rel=1e-12)
    assert probe.lk_dt(s, [0.7, 0.3])[-1] == pytest.approx(
        ly.lk_dt(traj.final, d, p, cfg), rel=1e-10, abs=1e-14)
    assert probe.l0(s)[-1] == pytest.approx(ly.l0(traj.final, d, p), rel=1e-12)


def test_monitor_constant_and_corrupted():
    t = np.linspace(0, 10, 101)
    rep = ly.monitor(t, np.ones_like(t), 1e-6)
    assert rep.ok and rep.max_increment == 0.0
    v = np.exp(-t)
    v[t >= 5] += 0.5
    rep = ly.monitor(t, v, 1e-6)
    assert rep.first_violation == pytest.approx(5.0)
    assert rep.max_increment > 0.4
