# simulate.py
"""Path generation: exact CTMC (direct method and next reaction method), the
scaled process, and the hybrid PDMP with fixed-step Euler flow.

Every engine works on a batch of paths at once. Row ``r`` of a batch draws
only from its own stream, so a path does not depend on batch size or on the
worker that ran it. The single-path operations are the batch engines run with
one stream.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from errors import IntegrationError, TruncatedPathError, UnknownIdentifierError, ValidationError
from model import ReactionNetwork, propensities, propensity_gradients, stoichiometry
from scaling import ReducedPDMP, ScalingSpec, natural_timescales, species_timescales_and_r
from utils import RngStream, StreamBank, stream_bank

logger = logging.getLogger(__name__)

DEFAULT_STEPS = 50_000
DEFAULT_MAX_EVENTS = 10_000_000
DEFAULT_EVENT_BUDGET = 1e8


# --- Configuration and path types ---

@dataclass(frozen=True)
class StepConfig:
    """Euler step, output grid and event cap. ``dt=None`` means T/50000."""

    dt: Optional[float] = None
    record_grid: Optional[tuple] = None
    max_events: Optional[int] = DEFAULT_MAX_EVENTS

    def resolve(self, T):
        """Returns (dt, n_steps, grid) with dt adjusted so n_steps * dt == T."""
        if T <= 0:
            raise ValidationError(f"horizon T must be positive, got {T!r}")
        dt = T / DEFAULT_STEPS if self.dt is None else float(self.dt)
        if not dt > 0:
            raise ValidationError(f"dt must be positive, got {self.dt!r}")
        n_steps = max(1, int(round(T / dt)))
        if abs(n_steps * dt - T) > 1e-9 * T:
            n_steps = math.ceil(T / dt)
        return T / n_steps, n_steps, self.grid(T)

    def grid(self, T):
        grid = np.array([T] if self.record_grid is None else self.record_grid, dtype=float)
        if grid.ndim != 1 or np.any(grid < 0) or np.any(grid > T * (1 + 1e-12)) or np.any(np.diff(grid) < 0):
            raise ValidationError("record grid must be sorted and lie within [0, T]")
        return np.minimum(grid, T)


@dataclass(frozen=True)
class CtmcPath:
    initial: np.ndarray
    times: np.ndarray
    reactions: np.ndarray
    states: np.ndarray  # state after each event
    T: float

    @property
    def final(self):
        return self.states[-1] if len(self.times) else self.initial

    def state_at(self, t):
        idx = int(np.searchsorted(self.times, t, side="right"))
        return self.initial if idx == 0 else self.states[idx - 1]

    def sample(self, grid):
        return np.array([self.state_at(t) for t in grid])


@dataclass(frozen=True)
class ScaledPath:
    grid: np.ndarray     # observation times t
    states: np.ndarray   # N^-alpha X(N^gamma t), shape (G, S)
    path: CtmcPath


@dataclass
class PdmpPathState:
    t: float
    x: np.ndarray
    U: np.ndarray
    T_k: np.ndarray
    P_k: np.ndarray
    y: Optional[np.ndarray] = None
    phi: Optional[np.ndarray] = None


@dataclass(frozen=True)
class HybridPath:
    grid: np.ndarray
    states: np.ndarray          # full species vector per grid point, (G, S)
    final: PdmpPathState
    y: Optional[np.ndarray] = None    # (G, |S_c|)
    phi: Optional[np.ndarray] = None  # (G, |S_c|, |S_c|)


@dataclass
class PdmpRun:
    """Raw output of one batch through the PDMP engine."""

    final: np.ndarray                       # (n, C, S)
    records: Optional[np.ndarray] = None    # (n, G, C, S)
    T_k: Optional[np.ndarray] = None
    P_k: Optional[np.ndarray] = None
    y: Optional[np.ndarray] = None          # (n, |S_c|)
    phi: Optional[np.ndarray] = None        # (n, |S_c|, |S_c|)
    y_records: Optional[np.ndarray] = None
    phi_records: Optional[np.ndarray] = None
    capture_states: Optional[np.ndarray] = None  # (n, J, S)
    capture_y: Optional[np.ndarray] = None       # (n, J, |S_c|)
    tau: Optional[np.ndarray] = None             # first discrete divergence per coupled pair
    events: Optional[np.ndarray] = None
    residual_product_max: float = 0.0
    increment_sum: float = 0.0
    increment_count: int = 0
    trace: Optional[dict] = None


def _single_bank(rng):
    return rng if isinstance(rng, StreamBank) else StreamBank([rng])


# --- Grid recording ---

def _record_until(out, grid, nxt, rows, X, limit):
    """Copies X into every grid slot of ``rows`` strictly before ``limit[row]``."""
    G = grid.shape[1]
    while rows.size:
        idx = nxt[rows]
        valid = idx < G
        rows, idx = rows[valid], idx[valid]
        if not rows.size:
            return
        due = grid[rows, idx] < limit[rows]
        rows, idx = rows[due], idx[due]
        out[rows, idx] = X[rows]
        nxt[rows] += 1


def _row_grid(grid, n):
    grid = np.asarray(grid, dtype=float)
    return np.broadcast_to(grid, (n, grid.shape[-1])) if grid.ndim == 1 else grid


def _last_positive(a):
    return a.shape[1] - 1 - np.argmax(a[:, ::-1] > 0, axis=1)


# --- CTMC: direct method ---

def ssa_batch(network: ReactionNetwork, params, X0, horizon, bank: StreamBank, grid, max_events=DEFAULT_MAX_EVENTS, log=False):
    """Gillespie direct method over a batch.

    Per event and row: one exponential for the waiting time, then (if the
    event happens before the horizon) one uniform to pick the reaction.
    Returns ``(records (n, G, S), final (n, S), events (n,), log)``.
    """
    X = np.array(X0, dtype=float)
    n, S = X.shape
    params = np.asarray(params, dtype=float)
    zeta = stoichiometry(network).T.astype(float)
    grid = _row_grid(grid, n)
    out = np.empty((n, grid.shape[1], S))
    nxt = np.zeros(n, dtype=np.int64)
    limit = np.zeros(n)
    t = np.zeros(n)
    events = np.zeros(n, dtype=np.int64)
    active = np.ones(n, dtype=bool)
    trail = ([], [], [])

    while True:
        rows = np.nonzero(active)[0]
        if not rows.size:
            break
        a = propensities(network, X[rows], params if params.ndim == 1 else params[rows])
        cum = np.cumsum(a, axis=1)
        a0 = cum[:, -1]
        e = bank.exponential(rows)
        tau = np.full(rows.size, np.inf)
        positive = a0 > 0
        tau[positive] = e[positive] / a0[positive]
        t_next = t[rows] + tau
        limit[rows] = t_next
        _record_until(out, grid, nxt, rows, X, limit)

        fire = t_next <= horizon
        done = rows[~fire]
        if done.size:
            limit[done] = np.inf
            _record_until(out, grid, nxt, done, X, limit)
            t[done] = horizon
            active[done] = False
        hit = rows[fire]
        if not hit.size:
            continue
        u = bank.uniform(hit)
        c = cum[fire]
        mask = c > (u * c[:, -1])[:, None]
        k = np.argmax(mask, axis=1)
        unmatched = ~mask.any(axis=1)
        if unmatched.any():
            k[unmatched] = _last_positive(a[fire][unmatched])
        X[hit] += zeta[k]
        t[hit] = t_next[fire]
        events[hit] += 1
        if log:
            trail[0].append(float(t_next[fire][0]))
            trail[1].append(int(k[0]))
            trail[2].append(X[hit[0]].copy())
        if max_events and events[hit].max() > max_events:
            partial = _ctmc_path(X0[0], trail, horizon) if log else out
            raise TruncatedPathError(f"path exceeded max_events={max_events}", partial)
    return out, X, events, trail


def _ctmc_path(x0, trail, T):
    times, reactions, states = trail
    S = len(x0)
    return CtmcPath(
        initial=np.array(x0, dtype=float),
        times=np.array(times, dtype=float),
        reactions=np.array(reactions, dtype=np.int64),
        states=np.array(states, dtype=float).reshape(len(times), S),
        T=float(T),
    )


def _check_ctmc_start(network, x0):
    x0 = np.asarray(x0, dtype=float)
    if x0.shape != (network.n_species,):
        raise ValidationError(f"initial state has {x0.size} entries, expected {network.n_species}")
    if np.any(x0 < 0) or np.any(x0 != np.round(x0)):
        raise ValidationError("initial copy numbers must be nonnegative integers")
    return x0


def ssa_direct(n: ReactionNetwork, theta, x0, T, rng, cfg: Optional[StepConfig] = None) -> CtmcPath:
    cfg = cfg or StepConfig()
    x0 = _check_ctmc_start(n, x0)
    _, _, _, trail = ssa_batch(n, theta, x0[None, :], T, _single_bank(rng), np.array([T]), cfg.max_events, log=True)
    return _ctmc_path(x0, trail, T)


# --- CTMC: next reaction method on generic clocks ---

def nrm_batch(rate_fn, Z, X0, horizon, bank: StreamBank, t0=None, grid=None, max_events=DEFAULT_MAX_EVENTS,
              on_fire=None, log=False):
    """Random time change with one unit-rate clock per column of ``Z``.

    ``rate_fn(X_rows, rows)`` returns clock rates (m, C). Each clock keeps an
    internal time and its next unit-exponential threshold; the clock whose
    threshold is reached first fires and moves the state by its column of Z.
    """
    X = np.array(X0, dtype=float)
    n, D = X.shape
    Zt = np.asarray(Z, dtype=float).T
    C = Zt.shape[0]
    t = np.zeros(n) if t0 is None else np.array(t0, dtype=float)
    internal = np.zeros((n, C))
    thresholds = np.empty((n, C))
    everyone = np.arange(n)
    for c in range(C):
        thresholds[:, c] = bank.exponential(everyone)
    record = grid is not None
    if record:
        grid = _row_grid(grid, n)
        out = np.empty((n, grid.shape[1], D))
        nxt = np.zeros(n, dtype=np.int64)
        limit = np.zeros(n)
    events = np.zeros(n, dtype=np.int64)
    active = t < horizon
    trail = ([], [], [])

    while True:
        rows = np.nonzero(active)[0]
        if not rows.size:
            break
        a = rate_fn(X[rows], rows)
        wait = np.full(a.shape, np.inf)
        moving = a > 0
        wait[moving] = (thresholds[rows][moving] - internal[rows][moving]) / a[moving]
        j = np.argmin(wait, axis=1)
        delta = wait[np.arange(rows.size), j]
        t_next = t[rows] + delta
        if record:
            limit[rows] = t_next
            _record_until(out, grid, nxt, rows, X, limit)

        fire = t_next <= horizon
        done = rows[~fire]
        if done.size:
            if record:
                limit[done] = np.inf
                _record_until(out, grid, nxt, done, X, limit)
            t[done] = horizon
            active[done] = False
        hit = rows[fire]
        if not hit.size:
            continue
        jf = j[fire]
        internal[hit] += a[fire] * delta[fire][:, None]
        internal[hit, jf] = thresholds[hit, jf]
        thresholds[hit, jf] += bank.exponential(hit)
        X[hit] += Zt[jf]
        t[hit] = t_next[fire]
        events[hit] += 1
        if on_fire is not None:
            on_fire(hit, t[hit], X)
        if log:
            trail[0].append(float(t_next[fire][0]))
            trail[1].append(int(jf[0]))
            trail[2].append(X[hit[0]].copy())
        if max_events and events[hit].max() > max_events:
            partial = _ctmc_path(X0[0], trail, horizon) if log else X
            raise TruncatedPathError(f"path exceeded max_events={max_events}", partial)
    return (out if record else None), X, events, trail


def nrm_time_change(n: ReactionNetwork, theta, x0, T, rng, cfg: Optional[StepConfig] = None) -> CtmcPath:
    cfg = cfg or StepConfig()
    x0 = _check_ctmc_start(n, x0)
    theta = np.asarray(theta, dtype=float)

    def rates(X, rows):
        return propensities(n, X, theta)

    _, _, _, trail = nrm_batch(rates, stoichiometry(n), x0[None, :], T, _single_bank(rng),
                               max_events=cfg.max_events, log=True)
    return _ctmc_path(x0, trail, T)


def ctmc_ensemble(network: ReactionNetwork, theta, x0, T, grid, seed, start, stop, method="ssa",
                  max_events=DEFAULT_MAX_EVENTS):
    """Records (paths, G, S) for paths start..stop-1, stream key (path,)."""
    x0 = _check_ctmc_start(network, x0)
    bank = stream_bank(seed, [(p,) for p in range(start, stop)])
    X0 = np.repeat(x0[None, :], stop - start, axis=0)
    theta = np.asarray(theta, dtype=float)
    if method == "ssa":
        records, final, events, _ = ssa_batch(network, theta, X0, T, bank, grid, max_events)
    elif method == "nrm":
        records, final, events, _ = nrm_batch(
            lambda X, rows: propensities(network, X, theta), stoichiometry(network), X0, T, bank,
            grid=np.asarray(grid, dtype=float), max_events=max_events,
        )
    else:
        raise ValidationError(f"unknown CTMC method {method!r}")
    return records, events


# --- CTMC: split-coupled pairs ---

def split_clock_matrix(zeta):
    """(2S, 3K) clock matrix: per reaction a shared clock then one residual per copy."""
    S, K = zeta.shape
    Z = np.zeros((2 * S, 3 * K))
    for k in range(K):
        Z[:S, 3 * k] = zeta[:, k]
        Z[S:, 3 * k] = zeta[:, k]
        Z[:S, 3 * k + 1] = zeta[:, k]
        Z[S:, 3 * k + 2] = zeta[:, k]
    return Z


def split_rates(a1, a2):
    """Interleaved (common, residual 1, residual 2) rates per reaction."""
    common = np.minimum(a1, a2)
    out = np.empty(a1.shape[:-1] + (3 * a1.shape[-1],))
    out[..., 0::3] = common
    out[..., 1::3] = a1 - common
    out[..., 2::3] = a2 - common
    return out


def coupled_ctmc_batch(network: ReactionNetwork, params1, params2, X1, X2, horizon, bank, t0=None,
                       max_events=DEFAULT_MAX_EVENTS):
    """Split-coupled pair of exact CTMCs; returns final (n, S) states of both copies."""
    S = network.n_species
    p1, p2 = np.asarray(params1, dtype=float), np.asarray(params2, dtype=float)

    def rates(X, rows):
        return split_rates(propensities(network, X[:, :S], p1), propensities(network, X[:, S:], p2))

    Z = split_clock_matrix(stoichiometry(network))
    _, final, events, _ = nrm_batch(rates, Z, np.hstack([X1, X2]), horizon, bank, t0=t0, max_events=max_events)
    return final[:, :S], final[:, S:], events


# --- Scaled process ---

def scaled_initial(network: ReactionNetwork, s: ScalingSpec, N):
    """Copy numbers at scale N with the same scaled initial levels as at N0."""
    alpha = np.array([float(a) for a in s.alpha])
    z0 = network.initial_state() * s.N0 ** -alpha
    return np.round(z0 * float(N) ** alpha)


def scaled_parameters(network: ReactionNetwork, N, theta=None):
    theta = network.param_vector() if theta is None else np.array(theta, dtype=float)
    if "N0" in network.parameters:
        theta[network.param_index("N0")] = float(N)
    return theta


def observation_gamma(network, s, gamma):
    if gamma is not None:
        return float(gamma)
    if s.gamma is not None:
        return float(s.gamma)
    rho = natural_timescales(network, s)
    return float(species_timescales_and_r(network, s, rho)[1])


def simulate_scaled(n: ReactionNetwork, s: ScalingSpec, N, gamma, theta, T, rng, cfg: Optional[StepConfig] = None,
                    budget=DEFAULT_EVENT_BUDGET) -> ScaledPath:
    """Exact CTMC at scale N reported as N^-alpha X(N^gamma t) on the record grid."""
    cfg = cfg or StepConfig()
    gamma = observation_gamma(n, s, gamma)
    horizon = float(N) ** gamma * T
    rho = natural_timescales(n, s)
    expected = float(N) ** (gamma + float(max(rho))) * T
    if expected > budget:
        logger.warning("expected event count %.3g exceeds the budget %.3g", expected, budget)
    theta = scaled_parameters(n, N, theta)
    x0 = scaled_initial(n, s, N)
    path = ssa_direct(n, theta, x0, horizon, rng, cfg)
    grid = cfg.grid(T)
    alpha = np.array([float(a) for a in s.alpha])
    states = path.sample(grid * float(N) ** gamma) * float(N) ** -alpha
    return ScaledPath(grid, states, path)


# --- PDMP engine ---

def _copy_rates(network, X, params, rows):
    """Propensities per copy: X (m, C, S), params (C, P) or (n, C, P) -> (m, C, K)."""
    out = []
    for c in range(X.shape[1]):
        p = params[c] if params.ndim == 2 else params[rows, c]
        out.append(propensities(network, X[:, c], p))
    return np.stack(out, axis=1)


def sensitivity_terms(m: ReducedPDMP, X, params, theta_name):
    """Gradients of the continuous-reaction rates at X (m, S).

    Returns ``(grad, dtheta)`` with shapes (|R_c|, |S_c|, m) and (|R_c|, m).
    """
    wrt = tuple(m.continuous_species) + (theta_name,)
    _, tangents = propensity_gradients(m.network, m.rc_index, X, params, wrt)
    return tangents[:, :-1], tangents[:, -1]


def total_derivative(m: ReducedPDMP, reactions, X, y, params, theta_name):
    """d_theta lambda_k + <grad_x lambda_k, y> for the given reactions, shape (len, m)."""
    wrt = tuple(m.continuous_species) + (theta_name,)
    _, tangents = propensity_gradients(m.network, reactions, X, params, wrt)
    return tangents[:, -1] + np.einsum("kin,ni->kn", tangents[:, :-1], y)


def _check_theta(m, theta_name):
    if theta_name not in m.network.parameters:
        raise UnknownIdentifierError(theta_name)


def run_pdmp(m: ReducedPDMP, params, X0, n_steps, dt, bank: StreamBank, *, coupled=False, record_steps=None,
             start_step=None, theta_name=None, with_phi=False, capture_steps=None, trace=False,
             max_events=DEFAULT_MAX_EVENTS) -> PdmpRun:
    """Algorithm loop shared by plain, augmented and split-coupled PDMP runs.

    ``X0`` is (n, C, S) with C = 1, or C = 2 when ``coupled``. Per step and
    row, rates are taken at the pre-step state; the continuous coordinates,
    the internal times (and y, Phi when augmenting) advance by explicit Euler;
    then every clock whose internal time passed its threshold fires once, in
    ascending clock order, and draws its next unit exponential.
    """
    net = m.network
    X = np.array(X0, dtype=float)
    n, C, S = X.shape
    params = np.asarray(params, dtype=float)
    rd = m.rd_index
    zeta = m.zeta
    zeta_rc_t = zeta[:, m.rc_index].T
    zeta_rd_t = zeta[:, rd].T
    n_clocks = 3 * len(rd) if coupled else len(rd)
    everyone = np.arange(n)

    internal = np.zeros((n, n_clocks))
    thresholds = np.empty((n, n_clocks))
    for c in range(n_clocks):
        thresholds[:, c] = bank.exponential(everyone)
    events = np.zeros(n, dtype=np.int64)
    run = PdmpRun(final=X, events=events)

    record_at = {}
    if record_steps is not None:
        for g, step in enumerate(record_steps):
            record_at.setdefault(int(step), []).append(g)
        run.records = np.empty((n, len(record_steps), C, S))

    augment = theta_name is not None
    if augment:
        _check_theta(m, theta_name)
        Sc = len(m.continuous_species)
        zeta_c = m.zeta_c
        y = np.zeros((n, Sc))
        run.y = y
        if record_steps is not None:
            run.y_records = np.empty((n, len(record_steps), Sc))
        if with_phi:
            phi = np.repeat(np.eye(Sc)[None], n, axis=0)
            run.phi = phi
            if record_steps is not None:
                run.phi_records = np.empty((n, len(record_steps), Sc, Sc))
        if trace:
            run.trace = {"phi": [phi.copy()] if with_phi else [], "source": []}

    if capture_steps is not None:
        capture_steps = np.asarray(capture_steps, dtype=np.int64)
        run.capture_states = np.zeros(capture_steps.shape + (S,))
        if augment:
            run.capture_y = np.zeros(capture_steps.shape + (len(m.continuous_species),))

    if coupled:
        run.tau = np.full(n, np.inf)
        disc = m.discrete_index

    def record(step):
        for g in record_at.get(step, ()):
            run.records[:, g] = X
            if augment and run.y_records is not None:
                run.y_records[:, g] = y
            if augment and with_phi and run.phi_records is not None:
                run.phi_records[:, g] = phi

    record(0)
    first = 0 if start_step is None else int(np.min(start_step, initial=n_steps))
    for s in range(first, n_steps):
        rows = everyone if start_step is None else np.nonzero(start_step <= s)[0]
        if capture_steps is not None:
            hit_r, hit_j = np.nonzero(capture_steps[rows] == s)
            if hit_r.size:
                run.capture_states[rows[hit_r], hit_j] = X[rows[hit_r], 0]
                if augment:
                    run.capture_y[rows[hit_r], hit_j] = y[rows[hit_r]]
        Xr = X[rows]
        rates = _copy_rates(net, Xr, params, rows)

        if augment:
            p0 = params[0] if params.ndim == 2 else params[rows, 0]
            grad, dtheta = sensitivity_terms(m, Xr[:, 0], p0, theta_name)
            source = np.einsum("kn,ck->nc", dtheta, zeta_c)
            D = dtheta + np.einsum("kin,ni->kn", grad, y[rows])
            y_dot = np.einsum("kn,ck->nc", D, zeta_c)
            if with_phi:
                M = np.einsum("ck,kjn->ncj", zeta_c, grad)
                phi[rows] += dt * (M @ phi[rows])
                if trace:
                    run.trace["phi"].append(phi.copy())
            if trace:
                run.trace["source"].append(source)
            y[rows] += dt * y_dot

        X[rows] += dt * (rates[..., m.rc_index] @ zeta_rc_t)

        if n_clocks:
            a = rates[..., rd]
            if coupled:
                clock_rates = split_rates(a[:, 0], a[:, 1])
                product = np.abs(clock_rates[:, 1::3] * clock_rates[:, 2::3])
                if product.size:
                    run.residual_product_max = max(run.residual_product_max, float(product.max()))
            else:
                clock_rates = a[:, 0]
            internal[rows] += dt * clock_rates
            crossing = internal[rows] > thresholds[rows]
            if crossing.any():
                for c in np.nonzero(crossing.any(axis=0))[0]:
                    hit = rows[crossing[:, c]]
                    if coupled:
                        k, kind = divmod(int(c), 3)
                        if kind == 0:
                            X[hit] += zeta_rd_t[k]
                        else:
                            X[hit, kind - 1] += zeta_rd_t[k]
                    else:
                        X[hit, 0] += zeta_rd_t[c]
                    step = bank.exponential(hit)
                    thresholds[hit, c] += step
                    run.increment_sum += float(step.sum())
                    run.increment_count += step.size
                    events[hit] += 1
                if max_events and events[rows].max() > max_events:
                    raise TruncatedPathError(f"path exceeded max_events={max_events}", X)
                if coupled:
                    fresh = rows[np.isinf(run.tau[rows])]
                    split = np.any(X[fresh, 0][:, disc] != X[fresh, 1][:, disc], axis=1)
                    run.tau[fresh[split]] = (s + 1) * dt

        if not np.all(np.isfinite(X[rows])):
            raise IntegrationError("non-finite state", time=(s + 1) * dt)
        record(s + 1)

    run.T_k, run.P_k = internal, thresholds
    return run


def _record_steps(grid, dt):
    return np.rint(np.asarray(grid) / dt).astype(np.int64)


def _hybrid_state(m, run, row, T):
    X = run.final[row, 0]
    return PdmpPathState(
        t=T,
        x=X[m.continuous_index].copy(),
        U=X[m.discrete_index].copy(),
        T_k=run.T_k[row].copy(),
        P_k=run.P_k[row].copy(),
        y=None if run.y is None else run.y[row].copy(),
        phi=None if run.phi is None else run.phi[row].copy(),
    )


def pdmp_simulate(m: ReducedPDMP, theta, T, cfg: StepConfig, rng) -> HybridPath:
    dt, n_steps, grid = cfg.resolve(T)
    X0 = m.initial_state()[None, None, :]
    run = run_pdmp(m, np.asarray(theta, dtype=float)[None, :], X0, n_steps, dt, _single_bank(rng),
                   record_steps=_record_steps(grid, dt), max_events=cfg.max_events)
    return HybridPath(grid, run.records[0, :, 0], _hybrid_state(m, run, 0, T))


def pdmp_simulate_augmented(m: ReducedPDMP, theta, theta_name, T, cfg: StepConfig, rng, with_phi=False) -> HybridPath:
    dt, n_steps, grid = cfg.resolve(T)
    X0 = m.initial_state()[None, None, :]
    run = run_pdmp(m, np.asarray(theta, dtype=float)[None, :], X0, n_steps, dt, _single_bank(rng),
                   record_steps=_record_steps(grid, dt), theta_name=theta_name, with_phi=with_phi,
                   max_events=cfg.max_events)
    return HybridPath(
        grid, run.records[0, :, 0], _hybrid_state(m, run, 0, T),
        y=run.y_records[0], phi=None if run.phi_records is None else run.phi_records[0],
    )


def pdmp_ensemble(m: ReducedPDMP, theta, T, cfg: StepConfig, seed, start, stop, theta_name=None, with_phi=False,
                  capture_steps=None, trace=False, tag=None) -> PdmpRun:
    """Paths start..stop-1 of a campaign, stream key (path,) or (path, tag)."""
    dt, n_steps, grid = cfg.resolve(T)
    n = stop - start
    X0 = np.repeat(m.initial_state()[None, None, :], n, axis=0)
    bank = stream_bank(seed, [(p,) if tag is None else (p, tag) for p in range(start, stop)])
    return run_pdmp(m, np.asarray(theta, dtype=float)[None, :], X0, n_steps, dt, bank,
                    record_steps=_record_steps(grid, dt), theta_name=theta_name, with_phi=with_phi,
                    capture_steps=capture_steps, trace=trace, max_events=cfg.max_events)


def split_coupling_pdmp(m: ReducedPDMP, theta, h, T, cfg: StepConfig, rng, theta_name=None, theta2=None):
    """Split-coupled pair (Z_theta, Z_theta+h); returns (z1, z2, tau_h, run).

    ``rng`` is one RngStream (single pair) or a StreamBank (one row per pair).
    The second copy uses ``theta2`` if given, else ``theta`` with ``h`` added
    to ``theta_name``.
    """
    if h < 0:
        raise ValidationError("h must be nonnegative")
    theta = np.asarray(theta, dtype=float)
    if theta2 is None:
        theta2 = theta.copy()
        if theta_name is not None:
            theta2[m.network.param_index(theta_name)] += h
    dt, n_steps, grid = cfg.resolve(T)
    bank = _single_bank(rng)
    n = len(bank)
    X0 = np.repeat(m.initial_state()[None, None, :], n, axis=0).repeat(2, axis=1)
    run = run_pdmp(m, np.stack([theta, np.asarray(theta2, dtype=float)]), X0, n_steps, dt, bank, coupled=True,
                   record_steps=_record_steps(grid, dt), max_events=cfg.max_events)
    z1, z2 = run.final[:, 0], run.final[:, 1]
    if n == 1:
        return z1[0], z2[0], float(run.tau[0]), run
    return z1, z2, run.tau, run


def y_from_phi(phi_trace, source_trace, dt):
    """y(T) rebuilt as sum_n dt * Phi(T) Phi(t_{n+1})^-1 b_n from an augmented trace.

    ``phi_trace`` holds Phi at every step boundary (steps + 1, n, Sc, Sc) and
    ``source_trace`` the parameter source term b_n of every step (steps, n, Sc).
    """
    phi_T = phi_trace[-1]
    y = np.zeros(source_trace[0].shape)
    for step, b in enumerate(source_trace):
        carried = np.linalg.solve(phi_trace[step + 1], b[..., None])[..., 0]
        y += dt * np.einsum("nij,nj->ni", phi_T, carried)
    return y


# --- Tilted discrete process ---

class SharedJumpTimes:
    """Jump times of unit-rate Poisson processes, one per (row, clock), shared by several readers.

    The jump times of row ``r`` and clock ``k`` come from
    ``RngStream(seed, path_r, k + 1)`` as cumulative unit exponentials.
    """

    def __init__(self, seed, paths, n_clocks, block=64):
        self.streams = [[RngStream(seed, p, k + 1) for k in range(n_clocks)] for p in paths]
        self.block = block
        self.times = np.zeros((len(self.streams), n_clocks, 0))

    def jump(self, rows, k, index):
        """The ``index``-th (0-based) jump time of clock k for each row."""
        need = int(np.max(index, initial=-1)) + 1
        if need > self.times.shape[2]:
            self._extend(max(need, self.times.shape[2] + self.block))
        return self.times[rows, k, index]

    def _extend(self, size):
        n, C, have = self.times.shape
        grown = np.zeros((n, C, size))
        grown[:, :, :have] = self.times
        for r in range(n):
            for k in range(C):
                start = grown[r, k, have - 1] if have else 0.0
                grown[r, k, have:] = start + np.cumsum(self.streams[r][k].exponentials(size - have))
        self.times = grown


@dataclass(frozen=True)
class TiltedPDMP:
    """Discrete dynamics with tilted rates along a nominal continuous path.

    For k in R_d: lambda_k(x, u, theta0) + (theta0 - theta) <grad_x lambda_k(x, u, theta), y>,
    floored at zero.
    """

    model: ReducedPDMP
    theta: np.ndarray
    theta_name: str
    theta0: float

    @property
    def params0(self):
        p = np.array(self.theta, dtype=float)
        p[self.model.network.param_index(self.theta_name)] = self.theta0
        return p

    @property
    def shift(self):
        return self.theta0 - float(self.theta[self.model.network.param_index(self.theta_name)])

    def discrete_rates(self, X, y):
        """Tilted rates of the discrete reactions at states X (m, S) with sensitivities y (m, |S_c|)."""
        m = self.model
        base = propensities(m.network, X, self.params0)[:, m.rd_index]
        if not len(m.continuous_species) or self.shift == 0:
            return np.maximum(base, 0.0)
        _, tangents = propensity_gradients(m.network, m.rd_index, X, self.theta, tuple(m.continuous_species))
        correction = np.einsum("kin,ni->nk", tangents, y)
        return np.maximum(base + self.shift * correction, 0.0)


def tilted_ensemble(tilted: TiltedPDMP, T, cfg: StepConfig, seed, start, stop):
    """Nominal augmented PDMP and the tilted discrete process on shared jump times.

    Returns ``(nominal_final, tilted_final)``, both (n, S); the tilted state
    carries the nominal continuous coordinates.
    """
    m = tilted.model
    dt, n_steps, _ = cfg.resolve(T)
    n = stop - start
    theta = np.asarray(tilted.theta, dtype=float)
    rd, cont = m.rd_index, m.continuous_index
    zeta_rc_t = m.zeta[:, m.rc_index].T
    zeta_rd_t = m.zeta[:, rd].T
    zeta_c = m.zeta_c
    X = np.repeat(m.initial_state()[None, :], n, axis=0)
    Xt = X.copy()
    y = np.zeros((n, len(m.continuous_species)))
    jumps = SharedJumpTimes(seed, range(start, stop), len(rd))
    internal, internal_t = np.zeros((n, len(rd))), np.zeros((n, len(rd)))
    fired, fired_t = np.zeros((n, len(rd)), dtype=np.int64), np.zeros((n, len(rd)), dtype=np.int64)
    rows = np.arange(n)

    for s in range(n_steps):
        rates = propensities(m.network, X, theta)
        tilted_rates = tilted.discrete_rates(Xt, y)
        grad, dtheta = sensitivity_terms(m, X, theta, tilted.theta_name)
        D = dtheta + np.einsum("kin,ni->kn", grad, y)
        y += dt * np.einsum("kn,ck->nc", D, zeta_c)
        X += dt * (rates[:, m.rc_index] @ zeta_rc_t)
        Xt[:, cont] = X[:, cont]
        internal += dt * rates[:, rd]
        internal_t += dt * tilted_rates
        for k in range(len(rd)):
            hit = rows[internal[:, k] > jumps.jump(rows, k, fired[:, k])]
            X[hit] += zeta_rd_t[k]
            fired[hit, k] += 1
            hit_t = rows[internal_t[:, k] > jumps.jump(rows, k, fired_t[:, k])]
            Xt[hit_t] += zeta_rd_t[k]
            fired_t[hit_t, k] += 1
        if not np.all(np.isfinite(X)):
            raise IntegrationError("non-finite state", time=(s + 1) * dt)
    return X, Xt
