"""Age-dependent rate kernels and the per-strain quantities derived from them.

Kernels are piecewise constant in infection age, which keeps every integral
against the survival function available in closed form. The quantities built
here (survival, reproduction integral, the weight ``psi``) are therefore exact
up to rounding on grids whose nodes contain the kernel breakpoints.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .grid import Grid

INF = math.inf


@dataclass(frozen=True)
class AgeKernel:
    """Piecewise-constant nonnegative rate: ``values[i]`` on ``[edges[i], edges[i+1])``.

    ``edges[0]`` is always 0; the last edge may be ``inf``. The kernel is zero
    beyond a finite last edge.
    """

    edges: tuple[float, ...]
    values: tuple[float, ...]
    form: str = "piecewise"

    def __post_init__(self):
        edges = tuple(float(e) for e in self.edges)
        values = tuple(float(v) for v in self.values)
        object.__setattr__(self, "edges", edges)
        object.__setattr__(self, "values", values)
        if len(edges) != len(values) + 1 or not values:
            raise ValueError("kernel needs len(edges) == len(values) + 1 >= 2")
        if edges[0] != 0.0:
            raise ValueError(f"first kernel edge must be 0, got {edges[0]}")
        if any(not (lo < hi) for lo, hi in zip(edges, edges[1:])):
            raise ValueError(f"kernel edges must be strictly increasing: {edges}")
        if any(math.isinf(e) for e in edges[:-1]) or math.isnan(edges[-1]):
            raise ValueError("only the last kernel edge may be infinite")
        if any(not math.isfinite(v) or v < 0 for v in values):
            raise ValueError(f"kernel values must be finite and >= 0: {values}")
        if self.form not in ("constant", "piecewise"):
            raise ValueError(f"unknown kernel form {self.form!r}")

    # -- constructors ------------------------------------------------------

    @classmethod
    def constant(cls, value: float, lo: float = 0.0, hi: float = INF) -> "AgeKernel":
        """``value`` on the window ``[lo, hi)``, zero elsewhere."""
        if not (0.0 <= lo < hi):
            raise ValueError(f"bad window [{lo}, {hi})")
        if lo > 0:
            return cls((0.0, lo, hi), (0.0, value), form="constant")
        return cls((0.0, hi), (value,), form="constant")

    @classmethod
    def piecewise(cls, edges: Sequence[float], values: Sequence[float]) -> "AgeKernel":
        edges = [float(e) for e in edges]
        values = [float(v) for v in values]
        if edges and edges[0] > 0:
            edges = [0.0] + edges
            values = [0.0] + values
        return cls(tuple(edges), tuple(values), form="piecewise")

    @classmethod
    def from_record(cls, rec: dict) -> "AgeKernel":
        """Build from a config record ``{form, value(s), window, edges}``."""
        form = rec.get("form", "constant")
        if form == "constant":
            lo, hi = rec.get("window", (0.0, INF))
            return cls.constant(float(rec["value"]), float(lo), float(hi))
        if form == "piecewise":
            return cls.piecewise(rec["edges"], rec["values"])
        raise ValueError(f"unknown kernel form {form!r}")

    def to_record(self) -> dict:
        if self.form == "constant":
            lo, hi = self.window
            return {"form": "constant", "value": self.sup_norm, "window": [lo, hi]}
        return {"form": "piecewise", "edges": list(self.edges), "values": list(self.values)}

    # -- pointwise ---------------------------------------------------------

    @property
    def window(self) -> tuple[float, float]:
        """Smallest ``[lo, hi)`` outside which the kernel vanishes."""
        return self.support_lo, self.support_sup

    @property
    def sup_norm(self) -> float:
        return max(self.values)

    @property
    def ess_inf(self) -> float:
        """Essential infimum over ``[0, inf)``."""
        low = min(self.values)
        return low if math.isinf(self.edges[-1]) else 0.0

    @property
    def support_lo(self) -> float:
        for e, v in zip(self.edges, self.values):
            if v > 0:
                return e
        return INF

    @property
    def support_sup(self) -> float:
        for i in range(len(self.values) - 1, -1, -1):
            if self.values[i] > 0:
                return self.edges[i + 1]
        return 0.0

    @property
    def is_zero(self) -> bool:
        return self.sup_norm == 0.0

    @property
    def is_constant(self) -> bool:
        """True when the kernel is one constant on all of ``[0, inf)``."""
        return math.isinf(self.edges[-1]) and len(set(self.values)) == 1

    @property
    def breakpoints(self) -> tuple[float, ...]:
        """Finite interior edges, plus a finite last edge."""
        return tuple(e for e in self.edges[1:] if math.isfinite(e))

    def eval(self, a):
        """Right-continuous value at age(s) ``a``; zero outside the support."""
        arr = np.asarray(a, dtype=float)
        if np.any(arr < 0) or np.any(np.isnan(arr)):
            raise ValueError("kernel evaluated at a negative age")
        idx = np.searchsorted(self.edges, arr, side="right") - 1
        vals = np.append(np.asarray(self.values), 0.0)
        out = vals[np.clip(idx, 0, len(self.values))]
        return float(out) if out.ndim == 0 else out

    __call__ = eval

    def cumulative(self, a):
        """``int_0^a kernel``, exact."""
        arr = np.asarray(a, dtype=float)
        if np.any(arr < 0):
            raise ValueError("negative age")
        edges = np.asarray(self.edges)
        vals = np.asarray(self.values)
        finite = np.isfinite(edges)
        widths = np.diff(np.where(finite, edges, 0.0))[: int(finite.sum()) - 1]
        cum = np.concatenate(([0.0], np.cumsum(vals[: len(widths)] * widths)))
        idx = np.searchsorted(edges, arr, side="right") - 1
        inside = idx < len(vals)
        j = np.clip(idx, 0, len(vals) - 1)
        out = np.where(inside, cum[j] + vals[j] * (arr - edges[j]), cum[-1])
        # inf ages: only reachable through the last piece
        if np.any(np.isinf(arr)):
            out = np.where(np.isinf(arr), INF if (math.isinf(self.edges[-1]) and vals[-1] > 0)
                           else cum[-1], out)
        return float(out) if out.ndim == 0 else out

    def integral(self, lo: float, hi: float) -> float:
        return float(self.cumulative(hi) - self.cumulative(lo))

    def cell_averages(self, grid: Grid) -> np.ndarray:
        return np.diff(self.cumulative(grid.nodes)) / grid.da


def _partition(lo: float, hi: float, *kernels: AgeKernel) -> list[float]:
    pts = {lo, hi}
    for k in kernels:
        pts.update(e for e in k.edges if lo < e < hi)
    return sorted(pts)


def discounted_integral(beta: AgeKernel, mu: AgeKernel, lo: float, hi: float = INF) -> float:
    """``int_lo^hi beta(s) exp(-int_lo^s mu) ds`` in closed form.

    ``hi`` may be infinite; the result is then finite whenever ``mu`` is
    bounded below by a positive constant on the tail of ``beta``.
    """
    pts = _partition(lo, hi, beta, mu)
    total = 0.0
    hazard = 0.0
    for u, v in zip(pts, pts[1:]):
        b = beta.eval(u)
        m = mu.eval(u)
        width = v - u
        if b > 0:
            if m > 0:
                piece = b / m if math.isinf(width) else b * -math.expm1(-m * width) / m
            else:
                piece = b * width
            total += math.exp(-hazard) * piece
        hazard += m * width if width < INF else (INF if m > 0 else 0.0)
    return total


def survival(mu: AgeKernel, ages) -> np.ndarray:
    """Survival ``exp(-int_0^a mu)`` at the given ages (or at the nodes of a grid)."""
    a = ages.nodes if isinstance(ages, Grid) else np.asarray(ages, dtype=float)
    if a.size == 0:
        raise ValueError("survival needs at least one age")
    return np.exp(-np.asarray(mu.cumulative(a), dtype=float))


def reproduction_integral(beta: AgeKernel, mu: AgeKernel) -> float:
    """``r = int_0^inf beta * pi``, exact."""
    return discounted_integral(beta, mu, 0.0, INF)


def reproduction(beta: AgeKernel, mu: AgeKernel, grid: Grid, lam: float,
                 mu_s: float) -> tuple[float, float]:
    """Return ``(r, R0)`` with ``R0 = lam * r / mu_s``.

    Raises :class:`~agecomp.grid.GridError` when the grid truncates more than
    ``grid.tail_tol`` of the integrand's worst-case tail.
    """
    mu0 = mu.ess_inf
    if mu0 <= 0:
        raise ValueError("mortality kernel must be bounded below by a positive constant")
    grid.check_tail(mu0, scale=max(beta.sup_norm / mu0, 1.0))
    r = reproduction_integral(beta, mu)
    return r, lam * r / mu_s


def _cell_pieces(beta: AgeKernel, mu: AgeKernel, grid: Grid):
    """Per-cell closed forms, valid where no breakpoint falls strictly inside the cell."""
    nodes = grid.nodes
    # midpoints, so a breakpoint off a node by round-off cannot leak into the next cell
    b = np.asarray(beta.eval(grid.mids))
    m = np.asarray(mu.eval(grid.mids))
    split = set()
    slack = 1e-9 * grid.da
    for e in beta.breakpoints + mu.breakpoints:
        i = int(math.floor(e / grid.da))
        if 0 <= i < grid.steps and nodes[i] + slack < e < nodes[i + 1] - slack:
            split.add(i)
    return nodes, b, m, sorted(split)


def _phi(m: np.ndarray, da: float) -> np.ndarray:
    """``(1 - exp(-m da)) / (m da)`` with the ``m -> 0`` limit."""
    x = m * da
    with np.errstate(invalid="ignore", divide="ignore"):
        out = -np.expm1(-x) / x
    return np.where(x > 1e-300, out, 1.0)


def psi(beta: AgeKernel, mu: AgeKernel, r: float, grid: Grid) -> np.ndarray:
    """Nodal values of ``psi(a) = (1/r) int_a^inf beta(s) exp(-int_a^s mu) ds``.

    Backward recursion over cells with exact cell integrals; the value at
    ``a_max`` is the exact tail, so nothing is dropped at truncation.
    """
    if not r > 0:
        raise ValueError(f"psi needs r > 0, got {r}")
    nodes, b, m, split = _cell_pieces(beta, mu, grid)
    decay = np.exp(-np.diff(mu.cumulative(nodes)))
    cell = b * grid.da * _phi(m, grid.da)
    for i in split:
        cell[i] = discounted_integral(beta, mu, nodes[i], nodes[i + 1])
    out = np.empty(grid.steps + 1)
    out[-1] = discounted_integral(beta, mu, grid.a_max, INF) / r
    for i in range(grid.steps - 1, -1, -1):
        out[i] = decay[i] * out[i + 1] + cell[i] / r
    return out


def psi_tail_bound(beta: AgeKernel, mu: AgeKernel, r: float, a: float, a_max: float) -> float:
    """Analytic bound on the part of ``psi(a)`` coming from ages beyond ``a_max``."""
    mu0 = mu.ess_inf
    return beta.sup_norm / (r * mu0) * math.exp(-mu0 * max(a_max - a, 0.0))


@dataclass(frozen=True)
class DerivedStrain:
    """Grid-resolved quantities for one strain.

    Nodal vectors (``pi``, ``psi``) have ``steps + 1`` entries; cell vectors
    (``*_cell``, ``decay``) have ``steps``.
    """

    r: float
    r0: float
    pi: np.ndarray = field(repr=False)
    pi_cell: np.ndarray = field(repr=False)
    psi: np.ndarray = field(repr=False)
    psi_cell: np.ndarray = field(repr=False)
    beta_cell: np.ndarray = field(repr=False)
    mu_cell: np.ndarray = field(repr=False)
    decay: np.ndarray = field(repr=False)
    beta_sup: float
    beta_lo: float
    beta_norm: float
    mu_floor: float
    da: float

    @property
    def r_grid(self) -> float:
        """Reproduction integral as the grid sees it (truncated at ``a_max``)."""
        return float(np.dot(self.beta_cell, self.pi_cell) * self.da)


def derive(beta: AgeKernel, mu: AgeKernel, grid: Grid, lam: float, mu_s: float) -> DerivedStrain:
    r, r0 = reproduction(beta, mu, grid, lam, mu_s)
    nodes, b, m, split = _cell_pieces(beta, mu, grid)
    pi = survival(mu, grid)
    mu_cell = mu.cell_averages(grid)
    beta_cell = beta.cell_averages(grid)
    decay = np.exp(-mu_cell * grid.da)
    phi = _phi(m, grid.da)
    pi_cell = pi[:-1] * phi
    unit = AgeKernel.constant(1.0)
    for i in split:
        pi_cell[i] = pi[i] * discounted_integral(unit, mu, nodes[i], nodes[i + 1]) / grid.da
    psi_nodes = psi(beta, mu, r, grid)
    psi_cell = (b / (r * np.where(m > 0, m, 1.0))) * (1.0 - phi) + phi * psi_nodes[1:]
    psi_cell = np.where(m > 0, psi_cell, psi_nodes[1:] + b * grid.da / (2 * r))
    for i in split:
        psi_cell[i] = 0.5 * (psi_nodes[i] + psi_nodes[i + 1])
    out = DerivedStrain(
        r=r, r0=r0, pi=pi, pi_cell=pi_cell, psi=psi_nodes, psi_cell=psi_cell,
        beta_cell=beta_cell, mu_cell=mu_cell, decay=decay,
        beta_sup=beta.support_sup, beta_lo=beta.support_lo,
        beta_norm=beta.sup_norm, mu_floor=mu.ess_inf, da=grid.da,
    )
    return out
