# oracle.py
"""Brute-force references on small state spaces: the truncated chemical master
equation and closed-form birth-death moments."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from functools import cached_property
from typing import Optional

import numpy as np
import pandas as pd
from scipy import sparse

from errors import BudgetError, IntegrationError, ValidationError
from model import ReactionNetwork, observable_eval, propensities, stoichiometry

logger = logging.getLogger(__name__)

DEFAULT_STATE_CAP = 200_000
DEFAULT_CME_STEPS = 10_000
NEGATIVE_PROBABILITY_TOLERANCE = 1e-9
BOUNDARY_WARNING = 1e-6


@dataclass(frozen=True)
class TruncatedStateSpace:
    """All states with 0 <= x_i <= bounds[i], in lexicographic order (last species fastest)."""

    bounds: tuple
    policy: str = "reflecting"
    cap: int = DEFAULT_STATE_CAP

    def __post_init__(self):
        if any(int(b) < 0 for b in self.bounds):
            raise ValidationError("state-space bounds must be nonnegative")
        if self.policy != "reflecting":
            raise ValidationError(f"unsupported boundary policy {self.policy!r}")
        if self.size > self.cap:
            raise BudgetError(f"truncated state space has {self.size} states, above the cap of {self.cap}")

    @property
    def size(self):
        return math.prod(int(b) + 1 for b in self.bounds)

    @cached_property
    def strides(self):
        dims = [int(b) + 1 for b in self.bounds]
        strides = np.ones(len(dims), dtype=np.int64)
        for i in range(len(dims) - 2, -1, -1):
            strides[i] = strides[i + 1] * dims[i + 1]
        return strides

    @cached_property
    def states(self):
        dims = tuple(int(b) + 1 for b in self.bounds)
        return np.array(list(np.ndindex(*dims)), dtype=float).reshape(-1, len(dims))

    def contains(self, states):
        states = np.asarray(states)
        return np.all((states >= 0) & (states <= np.asarray(self.bounds)), axis=-1)

    def ordinal(self, states):
        return np.asarray(states, dtype=np.int64) @ self.strides

    def on_boundary(self):
        return np.any(self.states == np.asarray(self.bounds, dtype=float), axis=1)


@dataclass(frozen=True)
class CmeResult:
    space: TruncatedStateSpace
    p: np.ndarray
    leakage: float
    boundary_mass: float

    def expectation(self, values):
        return float(np.asarray(values, dtype=float) @ self.p)

    def mean(self):
        return self.p @ self.space.states

    def frame(self, species_names):
        """Distribution as a table: one column per species plus ``probability``."""
        df = pd.DataFrame(self.space.states.astype(np.int64), columns=list(species_names))
        df["probability"] = self.p
        return df


def generator(n: ReactionNetwork, theta, space: TruncatedStateSpace):
    """Sparse CME generator A with dp/dt = A p; moves leaving the space are suppressed."""
    states = space.states
    rates = propensities(n, states, np.asarray(theta, dtype=float))
    zeta = stoichiometry(n)
    source, target, values = [], [], []
    for k in range(n.n_reactions):
        moved = states + zeta[:, k]
        keep = (rates[:, k] > 0) & space.contains(moved)
        origin = np.nonzero(keep)[0]
        dest = space.ordinal(moved[keep])
        source.append(origin)
        target.append(dest)
        values.append(rates[keep, k])
    origin = np.concatenate(source)
    dest = np.concatenate(target)
    flow = np.concatenate(values)
    M = space.size
    inflow = sparse.coo_matrix((flow, (dest, origin)), shape=(M, M))
    outflow = sparse.coo_matrix((-np.bincount(origin, weights=flow, minlength=M), (np.arange(M), np.arange(M))), shape=(M, M))
    return (inflow + outflow).tocsr()


def cme_solve(n: ReactionNetwork, theta, space: TruncatedStateSpace, T, dt=None, x0=None) -> CmeResult:
    """Fixed-step RK4 on the truncated CME from a point mass at the initial state."""
    x0 = n.initial_state() if x0 is None else np.asarray(x0, dtype=float)
    if len(space.bounds) != n.n_species:
        raise ValidationError(f"bounds cover {len(space.bounds)} species, expected {n.n_species}")
    if not space.contains(x0):
        raise ValidationError("initial state lies outside the truncation bounds")
    if T < 0:
        raise ValidationError("T must be nonnegative")
    A = generator(n, theta, space)
    p = np.zeros(space.size)
    p[int(space.ordinal(x0))] = 1.0
    if T > 0:
        dt = T / DEFAULT_CME_STEPS if dt is None else float(dt)
        if not dt > 0:
            raise ValidationError("dt must be positive")
        steps = max(1, int(round(T / dt)))
        dt = T / steps
        for step in range(steps):
            k1 = A @ p
            k2 = A @ (p + 0.5 * dt * k1)
            k3 = A @ (p + 0.5 * dt * k2)
            k4 = A @ (p + dt * k3)
            p = p + dt / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
            if p.min() < -NEGATIVE_PROBABILITY_TOLERANCE:
                raise IntegrationError(f"negative probability {p.min()!r}; reduce dt", time=(step + 1) * dt)
    boundary = float(p[space.on_boundary()].sum())
    if boundary > BOUNDARY_WARNING:
        logger.warning("probability %.3g sits on the truncation boundary; consider wider bounds", boundary)
    return CmeResult(space, p, leakage=0.0, boundary_mass=boundary)


def observable_expectation(n: ReactionNetwork, result: CmeResult, observable, theta):
    values = observable_eval(n, observable, result.space.states, np.asarray(theta, dtype=float))
    return result.expectation(values)


def cme_sensitivity_fd(n: ReactionNetwork, theta, theta_name, space: TruncatedStateSpace, T, dt=None, h=1e-4,
                       observable: Optional[str] = None) -> float:
    """Central difference (E_{theta+h} f - E_{theta-h} f) / 2h; f defaults to the first observable."""
    observable = observable or next(iter(n.observables))
    i = n.param_index(theta_name)
    up, down = np.array(theta, dtype=float), np.array(theta, dtype=float)
    up[i] += h
    down[i] -= h
    plus = observable_expectation(n, cme_solve(n, up, space, T, dt), observable, up)
    minus = observable_expectation(n, cme_solve(n, down, space, T, dt), observable, down)
    return (plus - minus) / (2 * h)


def birth_death_reference(theta_birth, rate_death, t):
    """Mean and d(mean)/d(theta_birth) of immigration-death started at zero."""
    if not rate_death > 0:
        raise ValidationError("rate_death must be positive")
    if math.isinf(t):
        factor = 1.0
    else:
        factor = -math.expm1(-rate_death * t)
    sensitivity = factor / rate_death
    return theta_birth * sensitivity, sensitivity
