"""Model parameters, assumption checks, and the grouping of strains by R0."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

from .grid import DEFAULT_TAIL_TOL, Grid
from .kernels import AgeKernel, DerivedStrain, derive, reproduction_integral

DEFAULT_TIE_TOL = 1e-9


@dataclass(frozen=True)
class Strain:
    beta: AgeKernel
    mu: AgeKernel
    name: str = ""


@dataclass(frozen=True)
class ModelParams:
    lam: float
    mu_s: float
    mu0: float
    strains: tuple[Strain, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "strains", tuple(self.strains))

    @property
    def n(self) -> int:
        return len(self.strains)

    @property
    def s_free(self) -> float:
        """Susceptible level of the disease-free state."""
        return self.lam / self.mu_s

    def r_values(self) -> list[float]:
        return [reproduction_integral(s.beta, s.mu) for s in self.strains]

    def r0_values(self) -> list[float]:
        return [self.lam * r / self.mu_s for r in self.r_values()]

    def tail_scale(self) -> float:
        """Worst ``||beta||/mu0`` over strains; sizes the age window."""
        return max([1.0] + [s.beta.sup_norm / self.mu0 for s in self.strains])

    def grid(self, da: float, tail_tol: float = DEFAULT_TAIL_TOL,
             a_max: float | None = None) -> Grid:
        return Grid.covering(da, self.mu0, tail_tol, scale=self.tail_scale(), a_max=a_max)

    def derive(self, grid: Grid) -> list[DerivedStrain]:
        return [derive(s.beta, s.mu, grid, self.lam, self.mu_s) for s in self.strains]

    @classmethod
    def with_floor(cls, lam: float, mu_s: float, strains: Sequence[Strain]) -> "ModelParams":
        """Use the largest admissible mortality floor."""
        mu0 = min([mu_s] + [s.mu.ess_inf for s in strains])
        return cls(lam, mu_s, mu0, tuple(strains))


@dataclass(frozen=True)
class Failure:
    item: str
    strain: int | None
    message: str

    def __str__(self):
        where = "" if self.strain is None else f" (strain {self.strain + 1})"
        return f"Assumption 1.{self.item}{where}: {self.message}"


@dataclass(frozen=True)
class ValidationReport:
    failures: tuple[Failure, ...] = ()

    @property
    def ok(self) -> bool:
        return not self.failures

    def __str__(self):
        return "valid" if self.ok else "\n".join(str(f) for f in self.failures)


def validate(params: ModelParams) -> ValidationReport:
    """Check every structural requirement on the parameters; never raises."""
    out = []

    def bad(item, strain, msg):
        out.append(Failure(item, strain, msg))

    for name, value in (("lambda", params.lam), ("mu_s", params.mu_s), ("mu0", params.mu0)):
        if not (math.isfinite(value) and value > 0):
            bad("1", None, f"{name} must be positive and finite, got {value}")
    if params.mu0 > 0 and params.mu_s < params.mu0:
        bad("1", None, f"mu_s={params.mu_s} is below the floor mu0={params.mu0}")
    if params.n == 0:
        bad("1", None, "at least one strain is required")
    for k, s in enumerate(params.strains):
        if s.beta.is_zero:
            bad("1", k, "beta_k must not vanish identically")
        if s.mu.ess_inf < params.mu0:
            bad("1", k, f"mu_k drops to {s.mu.ess_inf} below mu0={params.mu0}")
        if not s.beta.is_zero:
            lo, hi = s.beta.window
            # positive on the whole window, not just somewhere in it
            inside = [v for e0, e1, v in zip(s.beta.edges, s.beta.edges[1:], s.beta.values)
                      if e0 >= lo and e1 <= hi]
            if any(v <= 0 for v in inside):
                bad("2", k, f"beta_k vanishes inside its support window [{lo}, {hi})")
    return ValidationReport(tuple(out))


@dataclass(frozen=True)
class BlockStructure:
    """Strains grouped by tied R0, in descending order of R0.

    ``groups[k]`` lists original (0-based) strain indices of block ``k+1``;
    ``sigma`` holds the cumulative block ends ``sigma_1 < ... < sigma_nR = n``.
    """

    order: tuple[int, ...]
    sigma: tuple[int, ...]
    groups: tuple[tuple[int, ...], ...]
    r0: tuple[float, ...]
    n_gt: int
    tie_tol: float = DEFAULT_TIE_TOL
    r0_of_block: tuple[float, ...] = field(default=())

    @property
    def n_r(self) -> int:
        return len(self.sigma)

    def block_of(self, strain: int) -> int:
        """1-based block index of an original strain index."""
        for k, g in enumerate(self.groups, start=1):
            if strain in g:
                return k
        raise KeyError(strain)

    def supercritical(self) -> tuple[tuple[int, ...], ...]:
        return self.groups[: self.n_gt]


def _ties(a: float, b: float, tol: float) -> bool:
    return abs(a - b) <= tol * max(abs(a), abs(b))


def blocks_from_r0(r0: Sequence[float], tie_tol: float = DEFAULT_TIE_TOL) -> BlockStructure:
    order = tuple(sorted(range(len(r0)), key=lambda j: -r0[j]))
    groups: list[list[int]] = []
    for j in order:
        if groups and _ties(r0[groups[-1][0]], r0[j], tie_tol):
            groups[-1].append(j)
        else:
            groups.append([j])
    return _finish(order, groups, r0, tie_tol)


def _finish(order, groups, r0, tie_tol) -> BlockStructure:
    sigma, acc = [], 0
    for g in groups:
        acc += len(g)
        sigma.append(acc)
    lead = [r0[g[0]] for g in groups]
    # a block tied with 1 counts as critical, not supercritical
    n_gt = sum(1 for v in lead if v > 1 and not _ties(v, 1.0, tie_tol))
    return BlockStructure(
        order=tuple(order), sigma=tuple(sigma), groups=tuple(tuple(g) for g in groups),
        r0=tuple(float(v) for v in r0), n_gt=n_gt, tie_tol=tie_tol, r0_of_block=tuple(lead),
    )


def blocks(params: ModelParams, tie_tol: float = DEFAULT_TIE_TOL) -> BlockStructure:
    """Sort strains by descending R0 (stable) and group ties within ``tie_tol``."""
    return blocks_from_r0(params.r0_values(), tie_tol)


def blocks_from_groups(params: ModelParams, groups: Sequence[Sequence[int]],
                       tie_tol: float = DEFAULT_TIE_TOL) -> BlockStructure:
    """Explicitly declared blocks (0-based strain indices), bypassing tie detection.

    Blocks must cover every strain once and be listed by strictly decreasing R0.
    """
    r0 = params.r0_values()
    flat = [j for g in groups for j in g]
    if sorted(flat) != list(range(params.n)):
        raise ValueError(f"declared blocks {groups} must partition strains 0..{params.n - 1}")
    lead = [max(r0[j] for j in g) for g in groups]
    if any(b >= a for a, b in zip(lead, lead[1:])):
        raise ValueError("declared blocks must be ordered by strictly decreasing R0")
    return _finish(tuple(flat), [list(g) for g in groups], r0, tie_tol)
