# sensitivity.py
"""Parameter sensitivity estimators for CTMC and PDMP models.

* ``pdmp-decomposition``: continuous part from the sensitivity ODE plus a
  discrete part estimated with auxiliary coupled pairs at uniformly sampled
  times (both from the same main paths).
* ``cfd-pdmp`` / ``cfd-ctmc``: finite differences over split-coupled pairs.
* ``ipa-ctmc``: the discrete-part estimator on the exact CTMC.

Streams: main path p uses key (p,); evaluation time j of discrete reaction k
uses (p, k+1, j+1); its a-th auxiliary pair uses (p, k+1, j+1, a+1).
"""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from errors import BudgetError, NumericError, UnknownIdentifierError, ValidationError
from model import ReactionNetwork, observable_eval, observable_gradient, propensity_gradients, stoichiometry
from scaling import ReducedPDMP, ScalingSpec
from simulate import (
    StepConfig, TiltedPDMP, coupled_ctmc_batch, pdmp_ensemble, run_pdmp, scaled_initial, scaled_parameters,
    split_coupling_pdmp, ssa_batch, tilted_ensemble, total_derivative, observation_gamma,
)
from utils import DEFAULT_SEED, RngStream, run_batches, stream_bank, summarize

logger = logging.getLogger(__name__)

PDMP_DECOMPOSITION = "pdmp-decomposition"
CFD_PDMP = "cfd-pdmp"
CFD_CTMC = "cfd-ctmc"
IPA_CTMC = "ipa-ctmc"
METHODS = (PDMP_DECOMPOSITION, CFD_PDMP, CFD_CTMC, IPA_CTMC)

TAU_BINS = 20


# --- Requests and estimates ---

@dataclass(frozen=True)
class SensitivityRequest:
    observable: str
    theta_name: str
    T: float
    method: str = PDMP_DECOMPOSITION
    paths: int = 1000
    h: float = 1e-2
    aux_times: int = 10
    aux_pairs: int = 1
    cfg: StepConfig = field(default_factory=StepConfig)
    seed: int = DEFAULT_SEED
    central: bool = False
    max_aux: int = 100_000_000
    overrides: dict = field(default_factory=dict)
    workers: Optional[int] = None
    batch: Optional[int] = None
    progress: bool = False

    def validate(self):
        if self.method not in METHODS:
            raise ValidationError(f"unknown method {self.method!r}; expected one of {', '.join(METHODS)}")
        if self.paths < 2:
            raise ValidationError("paths must be at least 2")
        if self.method in (CFD_PDMP, CFD_CTMC) and not self.h > 0:
            raise ValidationError("h must be positive for finite differences")
        if self.aux_times < 1 or self.aux_pairs < 1:
            raise ValidationError("aux_times and aux_pairs must be at least 1")
        if not self.T > 0:
            raise ValidationError("T must be positive")
        return self


@dataclass(frozen=True)
class EstimatePart:
    value: float
    stderr: float


@dataclass(frozen=True)
class SensitivityEstimate:
    parameter: str
    method: str
    value: float
    stderr: float
    n: int
    parts: Optional[dict] = None        # {"continuous": EstimatePart, "discrete": EstimatePart}
    wall_time: float = 0.0
    diagnostics: dict = field(default_factory=dict)

    def to_row(self):
        cont = self.parts["continuous"] if self.parts else None
        disc = self.parts["discrete"] if self.parts else None
        return {
            "parameter": self.parameter,
            "method": self.method,
            "estimate": self.value,
            "stderr": self.stderr,
            "n": self.n,
            "part_continuous": cont.value if cont else None,
            "part_continuous_stderr": cont.stderr if cont else None,
            "part_discrete": disc.value if disc else None,
            "part_discrete_stderr": disc.stderr if disc else None,
            "wall_time_s": self.wall_time,
        }


def _part(samples):
    stats = summarize(samples)
    return EstimatePart(float(stats.mean), float(stats.stderr))


def _estimate(req, method, samples, started, parts=None, diagnostics=None):
    stats = summarize(samples)
    value = float(stats.mean)
    if parts is not None:
        value = parts["continuous"].value + parts["discrete"].value
    return SensitivityEstimate(
        parameter=req.theta_name,
        method=method,
        value=value,
        stderr=float(stats.stderr),
        n=int(stats.count),
        parts=parts,
        wall_time=time.perf_counter() - started,
        diagnostics=diagnostics or {},
    )


def _theta(network, req):
    if req.theta_name not in network.parameters:
        raise UnknownIdentifierError(req.theta_name)
    if req.observable not in network.observables:
        raise UnknownIdentifierError(req.observable)
    return network.param_vector(req.overrides)


def _campaign(req, fn, desc):
    return run_batches(req.paths, fn, size=req.batch, workers=req.workers, progress=req.progress, desc=desc)


def _tau_histogram(tau):
    finite = tau[np.isfinite(tau)]
    counts, edges = np.histogram(finite, bins=TAU_BINS) if finite.size else (np.zeros(0, int), np.zeros(0))
    return {
        "decoupled_fraction": float(finite.size / tau.size) if tau.size else 0.0,
        "tau_edges": edges.tolist(),
        "tau_counts": counts.tolist(),
    }


# --- PDMP decomposition ---

def _evaluation_steps(seed, paths, n_reactions, m, T, dt, n_steps):
    """Uniform evaluation times per (path, discrete reaction), snapped to the step grid."""
    steps = np.empty((len(paths), n_reactions * m), dtype=np.int64)
    for row, p in enumerate(paths):
        for k in range(n_reactions):
            for j in range(m):
                t = T * RngStream(seed, p, k + 1, j + 1).uniform()
                steps[row, k * m + j] = min(int(np.floor(t / dt)), n_steps - 1)
    return steps


def _auxiliary_differences(m: ReducedPDMP, theta, req, paths, steps, states, D, dt, n_steps):
    """Mean f(perturbed) - f(nominal) over the auxiliary pairs of every evaluation point.

    ``states`` (n, J, S) and ``D`` (n, J); evaluation points with D == 0 are skipped.
    """
    mm = req.aux_times
    zeta_rd = m.zeta[:, m.rd_index].T
    rows, cols = np.nonzero(D != 0)
    means = np.zeros(D.shape)
    if not rows.size:
        return means, 0
    ks, js = cols // mm, cols % mm
    perturbed = states[rows, cols] + zeta_rd[ks]
    if np.any(perturbed[:, m.discrete_index] < 0):
        raise NumericError("perturbed discrete state is negative where the rate derivative is nonzero")
    pairs = req.aux_pairs
    keys = [(paths[r], k + 1, j + 1, a + 1) for r, k, j in zip(rows, ks, js) for a in range(pairs)]
    X0 = np.stack([np.repeat(perturbed, pairs, axis=0), np.repeat(states[rows, cols], pairs, axis=0)], axis=1)
    bank = stream_bank(req.seed, keys)
    run = run_pdmp(m, np.stack([theta, theta]), X0, n_steps, dt, bank, coupled=True,
                   start_step=np.repeat(steps[rows, cols], pairs), max_events=req.cfg.max_events)
    net = m.network
    diff = observable_eval(net, req.observable, run.final[:, 0], theta) - observable_eval(net, req.observable, run.final[:, 1], theta)
    means[rows, cols] = np.asarray(diff).reshape(-1, pairs).mean(axis=1)
    return means, len(keys)


def _decomposition_batch(m: ReducedPDMP, theta, req, start, stop, want_discrete=True):
    net = m.network
    dt, n_steps, _ = req.cfg.resolve(req.T)
    paths = list(range(start, stop))
    n_rd = len(m.rd_index) if want_discrete else 0
    steps = _evaluation_steps(req.seed, paths, n_rd, req.aux_times, req.T, dt, n_steps) if n_rd else None
    run = pdmp_ensemble(m, theta, req.T, req.cfg, req.seed, start, stop, theta_name=req.theta_name,
                        capture_steps=steps)
    final = run.final[:, 0]
    grad = observable_gradient(net, req.observable, final, theta, m.continuous_species)
    continuous = np.einsum("in,ni->n", grad, run.y)
    discrete = np.zeros(len(paths))
    aux = 0
    if n_rd:
        n, J = steps.shape
        flat_states = run.capture_states.reshape(n * J, -1)
        flat_y = run.capture_y.reshape(n * J, -1)
        all_D = total_derivative(m, m.rd_index, flat_states, flat_y, theta, req.theta_name)
        k_of = np.repeat(np.arange(n_rd), req.aux_times)
        D = all_D[np.tile(k_of, n), np.arange(n * J)].reshape(n, J)
        means, aux = _auxiliary_differences(m, theta, req, paths, steps, run.capture_states, D, dt, n_steps)
        discrete = (req.T / req.aux_times) * np.sum(D * means, axis=1)
    return continuous, discrete, aux


def _check_budget(m: ReducedPDMP, req):
    planned = req.paths * len(m.rd_index) * req.aux_times * req.aux_pairs
    if planned > req.max_aux:
        raise BudgetError(f"{planned} auxiliary simulations exceed the cap of {req.max_aux}")


def _decomposition(m: ReducedPDMP, req, want_discrete=True):
    theta = _theta(m.network, req)
    if want_discrete:
        _check_budget(m, req)
    results = _campaign(req, lambda a, b: _decomposition_batch(m, theta, req, a, b, want_discrete), "pdmp paths")
    continuous = np.concatenate([r[0] for r in results])
    discrete = np.concatenate([r[1] for r in results])
    aux = sum(r[2] for r in results)
    logger.info("decomposition campaign: %d paths, %d auxiliary pairs", continuous.size, aux)
    return continuous, discrete, {"auxiliary_pairs": aux}


def sens_continuous(m: ReducedPDMP, request: SensitivityRequest) -> SensitivityEstimate:
    """Mean of <grad f(Z(T)), y(T)> over augmented paths."""
    started = time.perf_counter()
    continuous, _, diagnostics = _decomposition(m, request.validate(), want_discrete=False)
    return _estimate(request, "pdmp-continuous", continuous, started, diagnostics=diagnostics)


def sens_discrete_ipa(m: ReducedPDMP, request: SensitivityRequest) -> SensitivityEstimate:
    started = time.perf_counter()
    _, discrete, diagnostics = _decomposition(m, request.validate())
    return _estimate(request, "pdmp-discrete", discrete, started, diagnostics=diagnostics)


def sens_pdmp_total(m: ReducedPDMP, request: SensitivityRequest) -> SensitivityEstimate:
    """Both parts from one campaign; the value is their sum."""
    started = time.perf_counter()
    continuous, discrete, diagnostics = _decomposition(m, request.validate())
    parts = {"continuous": _part(continuous), "discrete": _part(discrete)}
    return _estimate(request, PDMP_DECOMPOSITION, continuous + discrete, started, parts, diagnostics)


# --- Coupled finite differences ---

def _shifted(network, theta, req):
    i = network.param_index(req.theta_name)
    low, high = theta.copy(), theta.copy()
    high[i] += req.h
    if req.central:
        low[i] -= req.h
    return low, high, (2 * req.h if req.central else req.h)


def cfd_pdmp(m: ReducedPDMP, request: SensitivityRequest) -> SensitivityEstimate:
    started = time.perf_counter()
    req = request.validate()
    theta = _theta(m.network, req)
    low, high, span = _shifted(m.network, theta, req)

    def batch(start, stop):
        bank = stream_bank(req.seed, [(p,) for p in range(start, stop)])
        z1, z2, tau, run = split_coupling_pdmp(m, low, 0.0, req.T, req.cfg, bank, theta2=high)
        z1, z2 = np.atleast_2d(z1), np.atleast_2d(z2)
        f1 = observable_eval(m.network, req.observable, z1, low)
        f2 = observable_eval(m.network, req.observable, z2, high)
        return (np.asarray(f2) - np.asarray(f1)) / span, np.atleast_1d(tau), run.residual_product_max

    results = _campaign(req, batch, "coupled pairs")
    samples = np.concatenate([r[0] for r in results])
    tau = np.concatenate([r[1] for r in results])
    diagnostics = _tau_histogram(tau)
    diagnostics["residual_product_max"] = max(r[2] for r in results)
    return _estimate(req, CFD_PDMP, samples, started, diagnostics=diagnostics)


def fd_independent_pdmp(m: ReducedPDMP, request: SensitivityRequest) -> SensitivityEstimate:
    """Forward difference over independent (uncoupled) paths."""
    started = time.perf_counter()
    req = request.validate()
    theta = _theta(m.network, req)
    low, high, span = _shifted(m.network, theta, req)

    def batch(start, stop):
        a = pdmp_ensemble(m, low, req.T, req.cfg, req.seed, start, stop).final[:, 0]
        b = pdmp_ensemble(m, high, req.T, req.cfg, req.seed, start, stop, tag=0).final[:, 0]
        f1 = observable_eval(m.network, req.observable, a, low)
        f2 = observable_eval(m.network, req.observable, b, high)
        return (np.asarray(f2) - np.asarray(f1)) / span

    samples = np.concatenate(_campaign(req, batch, "independent pairs"))
    return _estimate(req, "fd-independent-pdmp", samples, started)


def _ctmc_frame(network, scaling, N):
    """Parameter vector, initial copy numbers, horizon factor and unit scale at N."""
    if scaling is None:
        x0 = network.initial_state()
        return network.param_vector(), x0, 1.0, np.ones(network.n_species)
    N = scaling.N0 if N is None else float(N)
    alpha = np.array([float(a) for a in scaling.alpha])
    gamma = observation_gamma(network, scaling, None)
    return scaled_parameters(network, N), scaled_initial(network, scaling, N), N ** gamma, N ** -alpha


def _ctmc_theta(network, req, base):
    theta = base.copy()
    for name, value in req.overrides.items():
        theta[network.param_index(name)] = float(value)
    _theta(network, req)
    return theta


def cfd_ctmc(n: ReactionNetwork, request: SensitivityRequest, scaling: Optional[ScalingSpec] = None,
             N=None) -> SensitivityEstimate:
    """Split-coupled CTMC finite difference, f applied to N^-alpha X(N^gamma T)."""
    started = time.perf_counter()
    req = request.validate()
    base, x0, time_factor, units = _ctmc_frame(n, scaling, N)
    theta = _ctmc_theta(n, req, base)
    low, high, span = _shifted(n, theta, req)
    horizon = time_factor * req.T

    def batch(start, stop):
        bank = stream_bank(req.seed, [(p,) for p in range(start, stop)])
        X = np.repeat(x0[None, :], stop - start, axis=0)
        z1, z2, _ = coupled_ctmc_batch(n, low, high, X, X, horizon, bank, max_events=req.cfg.max_events)
        f1 = observable_eval(n, req.observable, z1 * units, low)
        f2 = observable_eval(n, req.observable, z2 * units, high)
        return (np.asarray(f2) - np.asarray(f1)) / span

    samples = np.concatenate(_campaign(req, batch, "coupled CTMC pairs"))
    return _estimate(req, CFD_CTMC, samples, started)


def ipa_ctmc(n: ReactionNetwork, request: SensitivityRequest, scaling: Optional[ScalingSpec] = None,
             N=None) -> SensitivityEstimate:
    """Discrete-part estimator on the exact CTMC (every reaction discrete)."""
    started = time.perf_counter()
    req = request.validate()
    base, x0, time_factor, units = _ctmc_frame(n, scaling, N)
    theta = _ctmc_theta(n, req, base)
    horizon = time_factor * req.T
    K, mm, pairs = n.n_reactions, req.aux_times, req.aux_pairs
    planned = req.paths * K * mm * pairs
    if planned > req.max_aux:
        raise BudgetError(f"{planned} auxiliary simulations exceed the cap of {req.max_aux}")
    zeta = stoichiometry(n).T.astype(float)

    def batch(start, stop):
        paths = list(range(start, stop))
        count = len(paths)
        times = np.array([[horizon * RngStream(req.seed, p, k + 1, j + 1).uniform()
                           for k in range(K) for j in range(mm)] for p in paths])
        order = np.argsort(times, axis=1, kind="stable")
        grid = np.take_along_axis(times, order, axis=1)
        bank = stream_bank(req.seed, [(p,) for p in paths])
        X = np.repeat(x0[None, :], count, axis=0)
        records, _, _, _ = ssa_batch(n, theta, X, horizon, bank, grid, req.cfg.max_events)
        states = np.empty_like(records)
        np.put_along_axis(states, order[..., None], records, axis=1)

        J = K * mm
        flat = states.reshape(count * J, -1)
        _, tangents = propensity_gradients(n, range(K), flat, theta, (req.theta_name,))
        k_of = np.tile(np.repeat(np.arange(K), mm), count)
        D = tangents[k_of, 0, np.arange(count * J)].reshape(count, J)

        rows, cols = np.nonzero(D != 0)
        means = np.zeros(D.shape)
        if rows.size:
            ks, js = cols // mm, cols % mm
            start_states = states[rows, cols]
            perturbed = start_states + zeta[ks]
            if np.any(perturbed < 0):
                raise NumericError("perturbed state is negative where the rate derivative is nonzero")
            keys = [(paths[r], k + 1, j + 1, a + 1) for r, k, j in zip(rows, ks, js) for a in range(pairs)]
            aux_bank = stream_bank(req.seed, keys)
            z1, z2, _ = coupled_ctmc_batch(
                n, theta, theta, np.repeat(perturbed, pairs, axis=0), np.repeat(start_states, pairs, axis=0),
                horizon, aux_bank, t0=np.repeat(times[rows, cols], pairs), max_events=req.cfg.max_events,
            )
            diff = observable_eval(n, req.observable, z1 * units, theta) - observable_eval(n, req.observable, z2 * units, theta)
            means[rows, cols] = np.asarray(diff).reshape(-1, pairs).mean(axis=1)
        return (horizon / mm) * np.sum(D * means, axis=1)

    samples = np.concatenate(_campaign(req, batch, "ipa paths"))
    return _estimate(req, IPA_CTMC, samples, started)


# --- Tilted model ---

def build_tilted_model(m: ReducedPDMP, theta, theta0, theta_name) -> TiltedPDMP:
    """Discrete rates tilted around theta so their theta0-derivative at theta is the total derivative."""
    if theta_name not in m.network.parameters:
        raise UnknownIdentifierError(theta_name)
    return TiltedPDMP(m, np.asarray(theta, dtype=float), theta_name, float(theta0))


def tilted_difference(m: ReducedPDMP, request: SensitivityRequest) -> SensitivityEstimate:
    """Forward difference over theta0 of E f(x_theta(T), U_hat_theta0(T)) on shared jump times."""
    started = time.perf_counter()
    req = request.validate()
    theta = _theta(m.network, req)
    theta0 = theta[m.network.param_index(req.theta_name)] + req.h
    tilted = build_tilted_model(m, theta, theta0, req.theta_name)

    def batch(start, stop):
        nominal, shifted = tilted_ensemble(tilted, req.T, req.cfg, req.seed, start, stop)
        f0 = observable_eval(m.network, req.observable, nominal, theta)
        f1 = observable_eval(m.network, req.observable, shifted, theta)
        return (np.asarray(f1) - np.asarray(f0)) / req.h

    samples = np.concatenate(_campaign(req, batch, "tilted paths"))
    return _estimate(req, "tilted-difference", samples, started)


# --- Dispatch ---

def estimate(request: SensitivityRequest, network: ReactionNetwork = None, reduced: ReducedPDMP = None,
             scaling: Optional[ScalingSpec] = None, N=None) -> SensitivityEstimate:
    """Runs the request's method on whichever model form it needs."""
    request.validate()
    if request.method in (PDMP_DECOMPOSITION, CFD_PDMP):
        if reduced is None:
            raise ValidationError(f"method {request.method} needs a reduced (PDMP) model")
        return (sens_pdmp_total if request.method == PDMP_DECOMPOSITION else cfd_pdmp)(reduced, request)
    if network is None:
        raise ValidationError(f"method {request.method} needs a CTMC model")
    return (cfd_ctmc if request.method == CFD_CTMC else ipa_ctmc)(network, request, scaling, N)
