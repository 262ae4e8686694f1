"""Lyapunov functionals for the disease-free point and the endemic families.

Two evaluation routes are provided. The pointwise functions (``l0``, ``lk`` and
their derivatives) take a single grid state. :class:`LyapunovProbe` is a
simulation monitor that records a handful of per-strain integrals from which
``L0`` and ``Lk`` for *any* block weights can be rebuilt afterwards; this is
what allows checking the functional attached to the empirical limit weights,
which are only known once the run is over.

Time derivatives follow from differentiating along the PDE. For the endemic
functional the susceptible-ratio term carries the coefficient
``lam - mu_s * S*`` (the total equilibrium inflow of the block).
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .equilibria import block_level, endemic_point, profile_scale
from .grid import GridState
from .kernels import DerivedStrain
from .model import BlockStructure, ModelParams

DEFAULT_FLOOR = 1e-300


class LyapunovDomainError(ValueError):
    """State outside the region where the functional is finite."""

    def __init__(self, message: str, strain: int | None = None, cell: int | None = None):
        super().__init__(message)
        self.strain = strain
        self.cell = cell


def g(x):
    """``x - ln x - 1``, evaluated as ``(x-1) - log1p(x-1)`` for accuracy near 1."""
    arr = np.asarray(x, dtype=float)
    if np.any(~(arr > 0)):
        raise ValueError("g is defined on positive reals only")
    y = arr - 1.0
    out = np.where(np.isinf(arr), np.inf, y - np.log1p(y))
    return float(out) if out.ndim == 0 else out


def _g_unchecked(x: np.ndarray) -> np.ndarray:
    y = x - 1.0
    return y - np.log1p(y)


@dataclass(frozen=True, eq=False)
class LyapunovConfig:
    block: int
    weights: np.ndarray
    eta: tuple[int, ...]
    s_star: float
    x_star: np.ndarray
    positivity_floor: float = DEFAULT_FLOOR

    @property
    def active(self) -> tuple[int, ...]:
        """Strains carried by the logarithmic term (weight > 0 inside the block)."""
        return tuple(j for j, e in enumerate(self.eta) if e == 0)


def eta_flags(blocks: BlockStructure, k: int, weights: Sequence[float]) -> tuple[int, ...]:
    members = set(blocks.groups[k - 1])
    return tuple(0 if (j in members and weights[j] > 0) else 1 for j in range(len(weights)))


def lyapunov_config(params: ModelParams, derived: Sequence[DerivedStrain],
                    blocks: BlockStructure, k: int, weights,
                    positivity_floor: float = DEFAULT_FLOOR) -> LyapunovConfig:
    point = endemic_point(params, derived, blocks, k, weights)
    w = np.asarray(weights, dtype=float)
    return LyapunovConfig(k, w, eta_flags(blocks, k, w), point.s_star, point.densities,
                          positivity_floor)


def _psi_mass(state: GridState, derived: Sequence[DerivedStrain]) -> np.ndarray:
    return np.array([np.dot(d.psi_cell, xj) * d.da for d, xj in zip(derived, state.x)])


def _forces(state: GridState, derived: Sequence[DerivedStrain]) -> np.ndarray:
    return np.array([np.dot(d.beta_cell, xj) * d.da for d, xj in zip(derived, state.x)])


def _require_s(state: GridState) -> None:
    if not state.s > 0:
        raise LyapunovDomainError(f"susceptibles must be positive, got {state.s}")


def l0(state: GridState, derived: Sequence[DerivedStrain], params: ModelParams) -> float:
    _require_s(state)
    s0 = params.s_free
    return float(s0 * g(state.s / s0) + _psi_mass(state, derived).sum())


def l0_dt(state: GridState, derived: Sequence[DerivedStrain], params: ModelParams) -> float:
    _require_s(state)
    F = _forces(state, derived)
    lead = -(params.lam - params.mu_s * state.s) ** 2 / (params.mu_s * state.s)
    return float(lead + sum((d.r0 - 1.0) / d.r * f for d, f in zip(derived, F)))


def lk(state: GridState, derived: Sequence[DerivedStrain], params: ModelParams,
       cfg: LyapunovConfig) -> float:
    """Endemic functional; ``math.inf`` when a weighted strain is entirely absent."""
    _require_s(state)
    total = cfg.s_star * g(state.s / cfg.s_star)
    for j, d in enumerate(derived):
        x = state.x[j]
        if cfg.eta[j]:
            total += np.dot(d.psi_cell, x) * d.da
            continue
        xs = cfg.x_star[j]
        on = (xs > 0) & (d.psi_cell > 0)
        low = on & ~(x > cfg.positivity_floor * xs)
        if low.any():
            if low.sum() == on.sum():
                return math.inf
            cell = int(np.argmax(low))
            raise LyapunovDomainError(
                f"strain {j + 1} density {x[cell]:.3e} not above the floor at cell {cell}",
                strain=j, cell=cell)
        ratio = x[on] / xs[on]
        total += np.dot(d.psi_cell[on] * xs[on], _g_unchecked(ratio)) * d.da
        total += np.dot(d.psi_cell[~on], x[~on]) * d.da
    return float(total)


def lk_dt(state: GridState, derived: Sequence[DerivedStrain], params: ModelParams,
          cfg: LyapunovConfig) -> float:
    _require_s(state)
    s, s_star = state.s, cfg.s_star
    F = _forces(state, derived)
    total = -params.mu_s * (s - s_star) ** 2 / s
    total -= (params.lam - params.mu_s * s_star) * g(s_star / s)
    for j, d in enumerate(derived):
        if cfg.eta[j]:
            total -= F[j] * (1.0 / d.r - s_star)
            continue
        if not F[j] > 0:
            raise LyapunovDomainError(f"strain {j + 1} has zero force of infection", strain=j)
        xs = cfg.x_star[j]
        f_star = np.dot(d.beta_cell, xs) * d.da
        on = (xs > 0) & (d.beta_cell > 0)
        x = state.x[j][on]
        if np.any(~(x > 0)):
            cell = int(np.flatnonzero(on)[np.argmax(~(x > 0))])
            raise LyapunovDomainError(f"strain {j + 1} vanishes at cell {cell}", strain=j, cell=cell)
        ratio = x * f_star / (xs[on] * F[j])
        total -= s_star * np.dot(d.beta_cell[on] * xs[on], _g_unchecked(ratio)) * d.da
    return float(total)


class LyapunovProbe:
    """Simulation monitor recording the integrals behind ``L0`` and ``Lk``.

    Per strain ``j`` it stores the force ``F_j``, ``P_j = int psi x_j`` and, for
    strains of the watched block ``k``, ``Q_j = int psi u_j ln(x_j/u_j)`` and
    ``G_j = S* int beta u_j g(x_j F*/(u_j F))`` where ``u_j`` is the full-weight
    equilibrium profile. ``Lk`` for weights ``alpha`` is affine in these.
    """

    def __init__(self, params: ModelParams, derived: Sequence[DerivedStrain],
                 blocks: BlockStructure | None = None, k: int | None = None):
        self.params = params
        self.derived = list(derived)
        self.blocks = blocks
        self.k = k
        self.watched: tuple[int, ...] = ()
        if blocks is not None and k is not None and 1 <= k <= blocks.n_gt:
            self.watched = tuple(blocks.groups[k - 1])
            self.s_star = block_level(derived, blocks, k)
            self.unit = {j: profile_scale(params, derived[j]) * derived[j].pi_cell
                         for j in self.watched}
            self.mask = {j: (self.unit[j] > 0) & (derived[j].psi_cell > 0) for j in self.watched}
            self.bmask = {j: (self.unit[j] > 0) & (derived[j].beta_cell > 0) for j in self.watched}
            self.A = {j: float(np.dot(derived[j].psi_cell[self.mask[j]],
                                      self.unit[j][self.mask[j]]) * derived[j].da)
                      for j in self.watched}
            self.f_unit = {j: float(np.dot(derived[j].beta_cell, self.unit[j]) * derived[j].da)
                           for j in self.watched}

    def __call__(self, state: GridState) -> dict[str, float]:
        out = {"S": float(state.s)}
        F = _forces(state, self.derived)
        P = _psi_mass(state, self.derived)
        for j in range(len(self.derived)):
            out[f"F_{j + 1}"] = float(F[j])
            out[f"P_{j + 1}"] = float(P[j])
        for j in self.watched:
            d, x, u = self.derived[j], state.x[j], self.unit[j]
            m = self.mask[j]
            xm = x[m]
            if np.all(xm > 0):
                q = np.dot(d.psi_cell[m] * u[m], np.log(xm / u[m])) * d.da
            else:
                q = math.nan
            b = self.bmask[j]
            xb = x[b]
            if F[j] > 0 and np.all(xb > 0):
                ratio = xb * self.f_unit[j] / (u[b] * F[j])
                gg = self.s_star * np.dot(d.beta_cell[b] * u[b], _g_unchecked(ratio)) * d.da
            else:
                gg = math.nan
            out[f"Q_{j + 1}"] = float(q)
            out[f"G_{j + 1}"] = float(gg)
        return out

    # -- reconstruction from recorded series --------------------------------

    def l0(self, series: Mapping[str, np.ndarray]) -> np.ndarray:
        s = np.asarray(series["S"])
        s0 = self.params.s_free
        total = s0 * g(s / s0)
        for j in range(len(self.derived)):
            total = total + series[f"P_{j + 1}"]
        return total

    def l0_dt(self, series: Mapping[str, np.ndarray]) -> np.ndarray:
        p = self.params
        s = np.asarray(series["S"])
        total = -(p.lam - p.mu_s * s) ** 2 / (p.mu_s * s)
        for j, d in enumerate(self.derived):
            total = total + (d.r0 - 1.0) / d.r * series[f"F_{j + 1}"]
        return total

    def _weights(self, alpha) -> tuple[np.ndarray, tuple[int, ...]]:
        if not self.watched:
            raise ValueError("probe was not built for a supercritical block")
        w = np.asarray(alpha, dtype=float)
        endemic_point(self.params, self.derived, self.blocks, self.k, w)  # validates weights
        return w, eta_flags(self.blocks, self.k, w)

    def lk(self, series: Mapping[str, np.ndarray], alpha) -> np.ndarray:
        w, eta = self._weights(alpha)
        s = np.asarray(series["S"])
        total = self.s_star * g(s / self.s_star)
        for j in range(len(self.derived)):
            total = total + series[f"P_{j + 1}"]
            if not eta[j]:
                a, A = w[j], self.A[j]
                total = total - a * A - a * series[f"Q_{j + 1}"] + a * math.log(a) * A
        return total

    def lk_dt(self, series: Mapping[str, np.ndarray], alpha) -> np.ndarray:
        w, eta = self._weights(alpha)
        p, s_star = self.params, self.s_star
        s = np.asarray(series["S"])
        total = -p.mu_s * (s - s_star) ** 2 / s - (p.lam - p.mu_s * s_star) * g(s_star / s)
        for j, d in enumerate(self.derived):
            if eta[j]:
                total = total - series[f"F_{j + 1}"] * (1.0 / d.r - s_star)
            else:
                total = total - w[j] * series[f"G_{j + 1}"]
        return total


@dataclass(frozen=True)
class MonotonicityReport:
    max_increment: float
    first_violation: float | None
    total_decrease: float
    tolerance: float
    samples: int

    @property
    def ok(self) -> bool:
        return self.first_violation is None


def monitor(times: Sequence[float], values: Sequence[float], tolerance: float) -> MonotonicityReport:
    """Check that ``values`` never rises by more than ``tolerance`` between samples.

    The reported violation time is the later sample of the first offending pair.
    """
    t = np.asarray(times, dtype=float)
    v = np.asarray(values, dtype=float)
    if v.size < 2:
        return MonotonicityReport(0.0, None, 0.0, tolerance, int(v.size))
    inc = np.diff(v)
    bad = np.flatnonzero(~(inc <= tolerance))
    first = float(t[bad[0] + 1]) if bad.size else None
    return MonotonicityReport(
        max_increment=float(max(np.nanmax(inc), 0.0)) if np.any(np.isfinite(inc)) else math.inf,
        first_violation=first,
        total_decrease=float(v[0] - v[-1]),
        tolerance=tolerance,
        samples=int(v.size),
    )


def finite_difference(times: Sequence[float], values: Sequence[float]) -> tuple[np.ndarray, np.ndarray]:
    """Forward differences and the midpoint times they refer to."""
    t = np.asarray(times, dtype=float)
    v = np.asarray(values, dtype=float)
    return 0.5 * (t[1:] + t[:-1]), np.diff(v) / np.diff(t)
