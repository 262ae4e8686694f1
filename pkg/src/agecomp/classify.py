"""Which equilibrium set attracts an initial state, and whether a run got there.

:func:`predict` reads the answer off the R0 blocks and the set of strains
present in the initial data. :func:`verify` checks a finished trajectory
against a prediction: distance to the target set, persistence floors, the
matching Lyapunov functional and the absence of competing limits.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .equilibria import EquilibriumSet, distance_to_set
from .grid import Grid, GridState
from .kernels import DerivedStrain
from .lyapunov import LyapunovProbe, MonotonicityReport, monitor
from .model import BlockStructure, ModelParams
from .solver import TrajectoryRecord, simulate

PRESENT, ABSENT = "S", "dS"


@dataclass(frozen=True)
class Membership:
    """Per-strain presence, judged on the initial mass that can still infect."""

    masses: tuple[float, ...]
    threshold: float

    @property
    def flags(self) -> tuple[str, ...]:
        return tuple(PRESENT if m > self.threshold else ABSENT for m in self.masses)

    @property
    def present(self) -> tuple[bool, ...]:
        return tuple(m > self.threshold for m in self.masses)

    @property
    def ambiguous(self) -> tuple[bool, ...]:
        """Positive mass that does not clear the threshold."""
        return tuple(0 < m <= self.threshold for m in self.masses)


def infectious_window_weights(beta_sup: float, grid: Grid) -> np.ndarray:
    """Fraction of each age cell lying below ``beta_sup``."""
    lo = grid.nodes[:-1]
    return np.clip((beta_sup - lo) / grid.da, 0.0, 1.0)


def membership(init: GridState, params: ModelParams, grid: Grid,
               threshold: float | None = None) -> Membership:
    total = float(np.sum(init.x) * grid.da)
    if threshold is None:
        threshold = 1e-12 * (total + 1.0)
    masses = []
    for st, xk in zip(params.strains, init.x):
        w = infectious_window_weights(st.beta.support_sup, grid)
        masses.append(float(np.dot(w, xk) * grid.da))
    return Membership(tuple(masses), float(threshold))


@dataclass(frozen=True)
class Prediction:
    target: EquilibriumSet | None
    clause: str
    rationale: str

    @property
    def ambiguous(self) -> bool:
        return self.target is None


def predict(params: ModelParams, blocks: BlockStructure, member: Membership) -> Prediction:
    present, unsure = member.present, member.ambiguous
    for k in range(1, blocks.n_gt + 1):
        group = blocks.groups[k - 1]
        if any(unsure[j] for j in group):
            names = [j + 1 for j in group if unsure[j]]
            return Prediction(None, "ambiguous",
                              f"strains {names} of block {k} sit on the membership threshold; "
                              "boundary-ambiguous")
        chosen = tuple(j for j in group if present[j])
        if chosen:
            eq = EquilibriumSet("block", k, chosen)
            earlier = "" if k == 1 else f"; blocks 1..{k - 1} absent"
            return Prediction(eq, "item 2",
                              f"block {k} is the first supercritical block with a strain present"
                              f"{earlier}; survivors {[j + 1 for j in chosen]}")
    if blocks.n_gt == 0:
        why = "no strain has R0 > 1"
    else:
        why = "every strain with R0 > 1 is absent"
    return Prediction(EquilibriumSet.disease_free(), "item 1", why)


def c_s(params: ModelParams) -> float:
    """Lower bound reached eventually by the susceptibles."""
    total = sum(st.beta.sup_norm for st in params.strains)
    return params.lam / (params.mu_s + params.lam / params.mu0 * total)


def default_warmup(params: ModelParams, grid: Grid) -> float:
    return max(10.0 / params.mu0, 4.0 * grid.a_max)


@dataclass(frozen=True)
class FloorReport:
    c_s: float
    warmup: float
    s_min: float
    s_floor_ok: bool
    force_floor: dict[int, float]
    force_floor_ok: bool

    @property
    def ok(self) -> bool:
        return self.s_floor_ok and self.force_floor_ok


def floors(traj: TrajectoryRecord, params: ModelParams, survivors: Sequence[int],
           warmup: float, s_tol: float = 1e-6, force_min: float = 1e-4) -> FloorReport:
    late = traj.times >= warmup
    if not late.any():
        raise ValueError(f"trajectory ends at t={traj.times[-1]:g}, before warm-up {warmup:g}")
    cs = c_s(params)
    s_min = float(traj.s[late].min())
    ff = {j: float(traj.force[j, late].min()) for j in survivors}
    return FloorReport(cs, warmup, s_min, s_min >= cs - s_tol, ff,
                       all(v > force_min for v in ff.values()))


@dataclass(frozen=True)
class Tolerances:
    distance: float = 1e-3
    s_floor: float = 1e-6
    force_floor: float = 1e-4
    lyapunov: float = 1e-6
    excluded_mass: float = 1e-6
    sign: float = 1e-12
    alternative_factor: float = 10.0
    warmup: float | None = None
    lyapunov_warmup: float | None = None


@dataclass
class Verification:
    target: str
    distance: float
    converged: bool
    alpha_hat: tuple[float, ...]
    floors: FloorReport | None
    functional: str
    lyapunov: MonotonicityReport | None
    dl_max: float
    decay_ok: bool
    excluded_mass: dict[int, float]
    alternatives: dict[str, float]
    failures: list[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.failures

    def to_dict(self) -> dict:
        out = asdict(self)
        out["ok"] = self.ok
        out["excluded_mass"] = {str(k + 1): v for k, v in self.excluded_mass.items()}
        if self.floors is not None:
            out["floors"]["force_floor"] = {str(k + 1): v
                                            for k, v in self.floors.force_floor.items()}
        if self.lyapunov is not None:
            out["lyapunov"]["ok"] = self.lyapunov.ok
        return out

    def to_text(self) -> str:
        def fmt(v):
            return f"{v:.6g}" if isinstance(v, float) else str(v)

        lines = [f"target: {self.target}", f"verified: {self.ok}",
                 f"distance: {fmt(self.distance)}", f"converged: {self.converged}",
                 "alpha_hat: " + ", ".join(fmt(a) for a in self.alpha_hat)]
        if self.floors is not None:
            f = self.floors
            lines += [f"c_S: {fmt(f.c_s)}", f"warmup: {fmt(f.warmup)}",
                      f"S_min_after_warmup: {fmt(f.s_min)}", f"S_floor_ok: {f.s_floor_ok}"]
            lines += [f"F_{j + 1}_min_after_warmup: {fmt(v)}" for j, v in f.force_floor.items()]
        lines.append(f"functional: {self.functional}")
        if self.lyapunov is not None:
            m = self.lyapunov
            lines += [f"lyapunov_max_increment: {fmt(m.max_increment)}",
                      f"lyapunov_first_violation: {m.first_violation}",
                      f"lyapunov_total_decrease: {fmt(m.total_decrease)}"]
        lines.append(f"dL_analytic_max: {fmt(self.dl_max)}")
        lines.append(f"decay_ok: {self.decay_ok}")
        lines += [f"excluded_mass_{j + 1}: {fmt(v)}" for j, v in self.excluded_mass.items()]
        lines += [f"alternative {k}: {fmt(v)}" for k, v in self.alternatives.items()]
        lines += [f"failure: {msg}" for msg in self.failures]
        return "\n".join(lines)


def _first_finite_from(values: np.ndarray, start: int) -> int:
    bad = np.flatnonzero(~np.isfinite(values[start:]))
    return start if bad.size == 0 else start + int(bad[-1]) + 1


def verify(traj: TrajectoryRecord, prediction: Prediction, params: ModelParams,
           derived: Sequence[DerivedStrain], blocks: BlockStructure, grid: Grid,
           init: GridState, member: Membership, probe: LyapunovProbe | None = None,
           tols: Tolerances = Tolerances()) -> Verification:
    """Check a finished run against ``prediction``; failures are collected, not raised."""
    failures: list[str] = []
    if prediction.target is None:
        return Verification("ambiguous", math.nan, False, (), None, "none", None, math.nan,
                            True, {}, {}, ["initial state is boundary-ambiguous"])
    eq = prediction.target
    final = traj.final
    sd = distance_to_set(final, eq, params, derived, blocks)
    converged = sd.distance <= tols.distance
    if not converged:
        failures.append(f"not converged: distance {sd.distance:.6g} > {tols.distance:g}")
    survivors = eq.survivors if eq.kind == "block" else ()

    warmup = tols.warmup if tols.warmup is not None else default_warmup(params, grid)
    fl = None
    if survivors:
        if traj.times[-1] < warmup:
            failures.append(f"horizon {traj.times[-1]:g} shorter than warm-up {warmup:g}")
        else:
            fl = floors(traj, params, survivors, warmup, tols.s_floor, tols.force_floor)
            if not fl.s_floor_ok:
                failures.append(f"S fell to {fl.s_min:.6g} below c_S={fl.c_s:.6g} after warm-up")
            if not fl.force_floor_ok:
                failures.append(f"force floor violated: {fl.force_floor}")

    functional, mono, dl_max = "none", None, math.nan
    if probe is not None and traj.series:
        t = traj.series_times
        if eq.kind == "disease_free":
            functional = "L0"
            values, dl = probe.l0(traj.series), probe.l0_dt(traj.series)
            start = 0
        else:
            functional = f"L{eq.block}^alpha_hat"
            if probe.k != eq.block:
                raise ValueError(f"probe watches block {probe.k}, target is block {eq.block}")
            values, dl = probe.lk(traj.series, sd.alpha_hat), probe.lk_dt(traj.series, sd.alpha_hat)
            lw = tols.lyapunov_warmup or 0.0
            start = _first_finite_from(values, int(np.searchsorted(t, lw)))
        if start >= t.size - 1:
            failures.append(f"{functional} never finite after warm-up")
        else:
            scale = max(1.0, abs(float(values[start])))
            mono = monitor(t[start:], values[start:], tols.lyapunov * scale)
            dl_max = float(np.nanmax(dl[start:]))
            if not mono.ok:
                failures.append(f"{functional} increased at t={mono.first_violation:g}")
            if dl_max > tols.sign * scale:
                failures.append(f"analytic d{functional}/dt positive: {dl_max:.3g}")

    # strains absent at the start can only carry transported, decaying mass
    decay_ok = True
    elapsed = traj.times - traj.times[0]
    for j, here in enumerate(member.present):
        if here:
            continue
        bound = traj.mass[j, 0] * np.exp(-params.mu0 * elapsed) * (1 + 1e-9) + 1e-300
        if np.any(traj.mass[j] > bound):
            decay_ok = False
            failures.append(f"absent strain {j + 1} did not decay")
    excluded = {j: float(traj.mass[j, -1]) for j in range(params.n) if j not in survivors}
    for j, m in excluded.items():
        if m > tols.excluded_mass:
            failures.append(f"excluded strain {j + 1} keeps mass {m:.3g}")

    alternatives: dict[str, float] = {}
    candidates = [] if eq.kind == "disease_free" else [EquilibriumSet.disease_free()]
    candidates += [EquilibriumSet("block", k, blocks.groups[k - 1])
                   for k in range(1, blocks.n_gt + 1) if eq.kind == "disease_free" or k != eq.block]
    for alt in candidates:
        d = distance_to_set(final, alt, params, derived, blocks).distance
        alternatives[alt.label()] = d
        if d <= tols.alternative_factor * tols.distance:
            failures.append(f"also within {d:.3g} of {alt.label()}")

    return Verification(eq.label(), sd.distance, converged, sd.alpha_hat, fl, functional,
                        mono, dl_max, decay_ok, excluded, alternatives, failures)


@dataclass
class Analysis:
    membership: Membership
    prediction: Prediction
    trajectory: TrajectoryRecord
    probe: LyapunovProbe
    report: Verification


def analyze(params: ModelParams, init: GridState, grid: Grid, horizon: float,
            blocks: BlockStructure, derived: Sequence[DerivedStrain] | None = None,
            tols: Tolerances = Tolerances(), membership_threshold: float | None = None,
            record_every: int = 10, monitor_every: int = 10, snapshot_times=(),
            engine: str = "auto") -> Analysis:
    """Predict, simulate with the matching Lyapunov probe, and verify."""
    if derived is None:
        derived = params.derive(grid)
    member = membership(init, params, grid, membership_threshold)
    pred = predict(params, blocks, member)
    k = pred.target.block if pred.target is not None and pred.target.kind == "block" else None
    probe = LyapunovProbe(params, derived, blocks, k)
    traj = simulate(params, init, grid, horizon, derived, monitors={"lyapunov": probe},
                    monitor_every=monitor_every, record_every=record_every,
                    snapshot_times=snapshot_times, engine=engine)
    report = verify(traj, pred, params, derived, blocks, grid, init, member, probe, tols)
    return Analysis(member, pred, traj, probe, report)
