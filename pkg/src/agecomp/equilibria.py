"""Stationary states: the disease-free point and the endemic families.

Each supercritical R0 block carries a continuum of equilibria indexed by
weights on the block simplex. Points are built on the solver grid as cell
averages of the exact profiles.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .grid import Grid, GridState
from .kernels import DerivedStrain
from .model import BlockStructure, ModelParams

SIMPLEX_TOL = 1e-12


@dataclass(frozen=True, eq=False)
class EquilibriumPoint:
    s_star: float
    densities: np.ndarray

    def as_state(self, t: float = 0.0) -> GridState:
        return GridState(t=t, s=self.s_star, x=self.densities)


@dataclass(frozen=True)
class EquilibriumSet:
    """Names the disease-free point, a block family, or a survivor-restricted family.

    ``block`` is 1-based; ``survivors`` holds 0-based original strain indices.
    ``weights``, when given, pins one member (full length-``n`` vector).
    """

    kind: str
    block: int = 0
    survivors: tuple[int, ...] = ()
    weights: tuple[float, ...] | None = None

    def __post_init__(self):
        if self.kind not in ("disease_free", "block"):
            raise ValueError(f"unknown equilibrium set kind {self.kind!r}")
        if self.kind == "block":
            if self.block < 1:
                raise ValueError("block index is 1-based")
            if not self.survivors:
                raise ValueError("a block equilibrium set needs at least one survivor")
            if self.weights is not None:
                w = np.asarray(self.weights)
                off = [j for j in range(w.size) if j not in self.survivors and w[j] != 0]
                if off or abs(w.sum() - 1) > SIMPLEX_TOL or np.any(w < 0):
                    raise ValueError(f"weights {self.weights} not on the survivor simplex")

    @classmethod
    def disease_free(cls) -> "EquilibriumSet":
        return cls("disease_free")

    def label(self) -> str:
        if self.kind == "disease_free":
            return "E0"
        names = ",".join(str(j + 1) for j in self.survivors)
        return f"E{self.block},{{{names}}}"

    __str__ = label


def disease_free(params: ModelParams, grid: Grid) -> EquilibriumPoint:
    return EquilibriumPoint(params.s_free, np.zeros((params.n, grid.steps)))


def block_level(derived: Sequence[DerivedStrain], blocks: BlockStructure, k: int) -> float:
    """Susceptible level ``1 / r`` shared by the members of block ``k``."""
    last = blocks.groups[k - 1][-1]
    return 1.0 / derived[last].r


def profile_scale(params: ModelParams, d: DerivedStrain) -> float:
    """Density at age 0 of the full-weight equilibrium: ``mu_s (R0 - 1) / r``."""
    return params.mu_s * (d.r0 - 1.0) / d.r


def _check_alpha(alpha, blocks: BlockStructure, k: int, n: int) -> np.ndarray:
    a = np.asarray(alpha, dtype=float)
    if a.shape != (n,):
        raise ValueError(f"weights must have one entry per strain ({n}), got shape {a.shape}")
    if not 1 <= k <= blocks.n_gt:
        raise ValueError(f"block {k} is not supercritical (n_> = {blocks.n_gt})")
    members = set(blocks.groups[k - 1])
    if np.any(a < 0) or abs(a.sum() - 1.0) > SIMPLEX_TOL:
        raise ValueError(f"weights {a.tolist()} are not on the simplex")
    outside = [j for j in range(n) if j not in members and a[j] != 0]
    if outside:
        raise ValueError(f"weights put mass on strains {[j + 1 for j in outside]} outside block {k}")
    return a


def endemic_point(params: ModelParams, derived: Sequence[DerivedStrain],
                  blocks: BlockStructure, k: int, alpha) -> EquilibriumPoint:
    a = _check_alpha(alpha, blocks, k, params.n)
    x = np.zeros((params.n, derived[0].pi_cell.size))
    for j in blocks.groups[k - 1]:
        if a[j] > 0:
            x[j] = profile_scale(params, derived[j]) * a[j] * derived[j].pi_cell
    return EquilibriumPoint(block_level(derived, blocks, k), x)


def _force(x: np.ndarray, derived: Sequence[DerivedStrain]) -> np.ndarray:
    return np.array([np.dot(d.beta_cell, xj) * d.da for d, xj in zip(derived, x)])


def residual(params: ModelParams, derived: Sequence[DerivedStrain],
             point: EquilibriumPoint | GridState) -> float:
    """Stationarity defect of a grid state, using forward differences in age."""
    s = point.s_star if isinstance(point, EquilibriumPoint) else point.s
    x = point.densities if isinstance(point, EquilibriumPoint) else point.x
    F = _force(x, derived)
    total = abs(params.lam - params.mu_s * s - s * F.sum())
    for d, xj, fj in zip(derived, x, F):
        transport = np.diff(xj) / d.da + d.mu_cell[:-1] * xj[:-1]
        total += abs(xj[0] - s * fj) + float(np.abs(transport).sum() * d.da)
    return float(total)


@dataclass(frozen=True)
class SetDistance:
    distance: float
    alpha_hat: tuple[float, ...]
    degenerate: bool = False


def set_target(eq: EquilibriumSet, params: ModelParams, derived: Sequence[DerivedStrain],
               blocks: BlockStructure, alpha) -> EquilibriumPoint:
    if eq.kind == "disease_free":
        return EquilibriumPoint(params.s_free, np.zeros((params.n, derived[0].pi_cell.size)))
    return endemic_point(params, derived, blocks, eq.block, alpha)


def distance_to_set(state: GridState, eq: EquilibriumSet, params: ModelParams,
                    derived: Sequence[DerivedStrain], blocks: BlockStructure) -> SetDistance:
    """Upper bound on the L1 distance from ``state`` to an equilibrium set.

    Weights are fitted by matching each survivor's mass against its
    full-weight profile, then renormalized onto the simplex. The bound is
    exact when every survivor density is proportional to its survival profile.
    """
    n = params.n
    da = derived[0].da if derived else 1.0
    if eq.kind == "disease_free":
        d = abs(state.s - params.s_free) + float(np.abs(state.x).sum() * da)
        return SetDistance(d, tuple([0.0] * n))
    missing = [j for j in eq.survivors if j not in blocks.groups[eq.block - 1]]
    if missing:
        raise ValueError(f"survivors {[j + 1 for j in missing]} are not in block {eq.block}")
    degenerate = False
    if eq.weights is not None:
        alpha = np.asarray(eq.weights, dtype=float)
    else:
        alpha = np.zeros(n)
        for j in eq.survivors:
            unit = profile_scale(params, derived[j]) * derived[j].pi_cell.sum() * da
            alpha[j] = max(state.x[j].sum() * da / unit, 0.0)
        total = alpha.sum()
        if total > 0 and math.isfinite(total):
            alpha /= total
        else:
            degenerate = True
            alpha[list(eq.survivors)] = 1.0 / len(eq.survivors)
    target = endemic_point(params, derived, blocks, eq.block, alpha)
    d = abs(state.s - target.s_star) + float(np.abs(state.x - target.densities).sum() * da)
    return SetDistance(d, tuple(float(v) for v in alpha), degenerate)


def write_point_csv(path, point: EquilibriumPoint, grid: Grid) -> None:
    """Columns ``a, x_1..x_n`` at cell midpoints, 17 significant digits."""
    n = point.densities.shape[0]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["a"] + [f"x_{j + 1}" for j in range(n)])
        for i, a in enumerate(grid.mids):
            w.writerow([f"{a:.17g}"] + [f"{point.densities[j, i]:.17g}" for j in range(n)])
