"""ODE reduction for age-independent kernels, used as an independent reference.

When every ``beta_k`` and ``mu_k`` is constant on ``[0, inf)`` the force of
infection is ``beta_k * I_k`` with ``I_k`` the strain mass, and the PDE
collapses to

    S'   = lam - mu_s S - S sum_k beta_k I_k
    I_k' = S beta_k I_k - mu_k I_k

which is integrated here with classical fourth-order Runge-Kutta.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .model import ModelParams


class NotReducibleError(ValueError):
    pass


@dataclass(frozen=True)
class ReducedSystem:
    lam: float
    mu_s: float
    beta: tuple[float, ...]
    mu: tuple[float, ...]

    @property
    def n(self) -> int:
        return len(self.beta)

    @property
    def mu0(self) -> float:
        return min((self.mu_s,) + self.mu)

    def rhs(self, y: Sequence[float]) -> list[float]:
        s = y[0]
        infect = [b * i for b, i in zip(self.beta, y[1:])]
        ds = self.lam - self.mu_s * s - s * sum(infect)
        return [ds] + [s * f - m * i for f, m, i in zip(infect, self.mu, y[1:])]


@dataclass
class ReferenceTrajectory:
    times: np.ndarray
    s: np.ndarray
    mass: np.ndarray

    def at(self, t: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        t = np.asarray(t, dtype=float)
        s = np.interp(t, self.times, self.s)
        m = np.array([np.interp(t, self.times, row) for row in self.mass])
        return s, m


def reduce(params: ModelParams) -> ReducedSystem:
    bad = [k + 1 for k, st in enumerate(params.strains)
           if not (st.beta.is_constant and st.mu.is_constant)]
    if bad:
        raise NotReducibleError(f"strains {bad} have age-dependent kernels")
    return ReducedSystem(
        params.lam, params.mu_s,
        tuple(st.beta.values[0] for st in params.strains),
        tuple(st.mu.values[0] for st in params.strains),
    )


def integrate(system: ReducedSystem, s0: float, masses: Sequence[float], horizon: float,
              h: float = 1e-4, sample_every: int = 1) -> ReferenceTrajectory:
    """RK4 with fixed step ``h``; keeps every ``sample_every``-th step and the last."""
    if h > 1e-4 * max(1.0, 1.0 / system.mu0) * (1 + 1e-12):
        raise ValueError(f"reference step h={h} exceeds 1e-4*max(1, 1/mu0)")
    nsteps = int(round(horizon / h))
    f = system.rhs
    y = [float(s0)] + [float(m) for m in masses]
    dim = len(y)
    out_t, out_y = [0.0], [list(y)]
    half = 0.5 * h
    sixth = h / 6.0
    for m in range(1, nsteps + 1):
        k1 = f(y)
        k2 = f([y[i] + half * k1[i] for i in range(dim)])
        k3 = f([y[i] + half * k2[i] for i in range(dim)])
        k4 = f([y[i] + h * k3[i] for i in range(dim)])
        y = [y[i] + sixth * (k1[i] + 2.0 * (k2[i] + k3[i]) + k4[i]) for i in range(dim)]
        if m % sample_every == 0 or m == nsteps:
            out_t.append(m * h)
            out_y.append(y)
    arr = np.array(out_y)
    return ReferenceTrajectory(np.array(out_t), arr[:, 0], arr[:, 1:].T)


def compare(times: np.ndarray, s: np.ndarray, mass: np.ndarray,
            ref: ReferenceTrajectory) -> dict[str, float]:
    """Sup-in-time absolute errors of ``S`` and each strain mass."""
    times = np.asarray(times)
    if times[-1] > ref.times[-1] * (1 + 1e-12) + 1e-12 or times[0] < ref.times[0] - 1e-12:
        raise ValueError(f"reference covers [{ref.times[0]}, {ref.times[-1]}], "
                         f"trajectory needs [{times[0]}, {times[-1]}]")
    rs, rm = ref.at(times)
    out = {"S": float(np.max(np.abs(s - rs)))}
    for k in range(rm.shape[0]):
        out[f"mass_{k + 1}"] = float(np.max(np.abs(mass[k] - rm[k])))
    return out
