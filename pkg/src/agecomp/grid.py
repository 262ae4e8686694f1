"""Age/time discretization shared by every numerical routine.

Cell ``i`` covers ages ``[i*da, (i+1)*da)``. Density vectors hold cell
averages; survival and weight vectors are sampled at the ``steps + 1`` nodes.
The time step is always ``da`` so that transport follows characteristics.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

DEFAULT_TAIL_TOL = 1e-12


class GridError(ValueError):
    """The age window is too short for the requested tail tolerance."""

    def __init__(self, message: str, required_a_max: float | None = None):
        super().__init__(message)
        self.required_a_max = required_a_max


@dataclass(frozen=True)
class Grid:
    da: float
    steps: int
    tail_tol: float = DEFAULT_TAIL_TOL

    def __post_init__(self):
        if not (self.da > 0 and math.isfinite(self.da)):
            raise ValueError(f"age step must be positive and finite, got {self.da}")
        if self.steps < 1:
            raise ValueError(f"grid needs at least one cell, got {self.steps}")
        if not (0 < self.tail_tol < 1):
            raise ValueError(f"tail tolerance must lie in (0, 1), got {self.tail_tol}")

    @property
    def dt(self) -> float:
        return self.da

    @property
    def a_max(self) -> float:
        return self.steps * self.da

    @property
    def nodes(self) -> np.ndarray:
        return self.da * np.arange(self.steps + 1)

    @property
    def mids(self) -> np.ndarray:
        return self.da * (np.arange(self.steps) + 0.5)

    def tail_weight(self, mu0: float) -> float:
        return math.exp(-mu0 * self.a_max)

    def check_tail(self, mu0: float, scale: float = 1.0) -> None:
        """Raise :class:`GridError` unless ``scale * exp(-mu0 * a_max) <= tail_tol``."""
        if scale * self.tail_weight(mu0) > self.tail_tol:
            need = required_a_max(mu0, self.tail_tol, scale)
            raise GridError(
                f"a_max={self.a_max:g} leaves tail {scale * self.tail_weight(mu0):.3e} "
                f"> {self.tail_tol:g}; need a_max >= {need:.6g}",
                required_a_max=need,
            )

    @classmethod
    def covering(cls, da: float, mu0: float, tail_tol: float = DEFAULT_TAIL_TOL,
                 scale: float = 1.0, a_max: float | None = None) -> "Grid":
        """Smallest grid of step ``da`` whose tail passes :meth:`check_tail`.

        An explicit ``a_max`` is honoured (rounded up to whole cells) and then
        checked rather than extended.
        """
        target = required_a_max(mu0, tail_tol, scale) if a_max is None else a_max
        steps = max(1, int(math.ceil(target / da - 1e-9)))
        grid = cls(da=da, steps=steps, tail_tol=tail_tol)
        grid.check_tail(mu0, scale)
        return grid


def required_a_max(mu0: float, tail_tol: float, scale: float = 1.0) -> float:
    if mu0 <= 0:
        raise ValueError("mortality floor must be positive")
    return max(math.log(max(scale, 1e-300) / tail_tol), 0.0) / mu0


@dataclass(frozen=True, eq=False)
class GridState:
    """Susceptibles plus one row of cell-average densities per strain."""

    t: float
    s: float
    x: np.ndarray

    def __post_init__(self):
        x = np.array(self.x, dtype=float, ndmin=2, copy=True)
        x.setflags(write=False)
        object.__setattr__(self, "x", x)

    @property
    def n(self) -> int:
        return self.x.shape[0]

    def masses(self, da: float) -> np.ndarray:
        return self.x.sum(axis=1) * da

    def norm(self, da: float) -> float:
        """``|S| + sum_k ||x_k||_1``."""
        return abs(self.s) + float(np.abs(self.x).sum() * da)

    def replace(self, **kw) -> "GridState":
        fields = {"t": self.t, "s": self.s, "x": self.x}
        fields.update(kw)
        return GridState(**fields)
