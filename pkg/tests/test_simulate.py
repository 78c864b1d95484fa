# tests/test_simulate.py

import math
from unittest import mock

import numpy as np
import pytest

from tests.conftest import model_path
from data_handler import read_document
from errors import TruncatedPathError, UnknownIdentifierError, ValidationError
from model import load_model, propensities, stoichiometry
from scaling import derive_reduced_model, identity_scaling, load_reduced_model, load_scaling
from simulate import (
    StepConfig, TiltedPDMP, coupled_ctmc_batch, ctmc_ensemble, nrm_time_change, pdmp_ensemble, pdmp_simulate,
    pdmp_simulate_augmented, simulate_scaled, split_clock_matrix, split_coupling_pdmp, split_rates, ssa_direct,
    tilted_ensemble, y_from_phi,
)
from utils import RngStream, StreamBank

approx = pytest.approx

BIRTH_DEATH_MEAN = 10 * (1 - math.exp(-1))


def pdmp_document(species, reactions, parameters, continuous_species, continuous_reactions):
    names = [s["name"] for s in species]
    return {
        "kind": "pdmp",
        "species": species,
        "reactions": reactions,
        "parameters": parameters,
        "observables": {"first": names[0]},
        "continuous_species": continuous_species,
        "discrete_species": [n for n in names if n not in continuous_species],
        "continuous_reactions": continuous_reactions,
        "discrete_reactions": [r["name"] for r in reactions if r["name"] not in continuous_reactions],
    }


def decay_model():
    return load_reduced_model(pdmp_document(
        [{"name": "P", "initial": 1}],
        [{"name": "decay", "reactants": {"P": 1}, "products": {}, "rate": {"type": "expr", "formula": "theta4*P"}}],
        {"theta4": 0.1}, ["P"], ["decay"],
    ))


def arrival_model():
    return load_reduced_model(pdmp_document(
        [{"name": "U", "initial": 0}],
        [{"name": "arrive", "reactants": {}, "products": {"U": 1}, "rate": {"type": "expr", "formula": "c"}}],
        {"c": 1.0}, [], [],
    ))


def linear_ode_model():
    """x' = theta - mu x as the large-volume limit of immigration-death."""
    network = load_model(read_document(model_path("birth_death_scaled.json")))
    scaling = load_scaling(read_document(model_path("birth_death_scaled_scaling.json")), network)
    return derive_reduced_model(network, scaling)


def gene_pdmp():
    return load_reduced_model(read_document(model_path("gene_pdmp.json")))


# --- Test Scenarios ---

def test_step_config_resolves_to_whole_steps():
    dt, steps, grid = StepConfig(dt=0.3).resolve(1.0)
    assert steps == 4
    assert dt == approx(0.25)
    assert grid.tolist() == [1.0]


def test_step_config_default_step():
    dt, steps, _ = StepConfig().resolve(5.0)
    assert steps == 50_000
    assert dt == approx(1e-4)


@pytest.mark.parametrize("cfg, T", [
    (StepConfig(dt=0.0), 1.0),
    (StepConfig(record_grid=(0.5, 0.2)), 1.0),
    (StepConfig(record_grid=(0.5, 2.0)), 1.0),
    (StepConfig(), 0.0),
])
def test_step_config_rejects(cfg, T):
    with pytest.raises(ValidationError):
        cfg.resolve(T)


# --- Exact CTMC ---

def test_ssa_direct_path_structure(shipped):
    n = shipped("pure_birth.json")
    path = ssa_direct(n, n.param_vector(), n.initial_state(), 20.0, RngStream(3))
    assert len(path.times) > 0
    assert np.all(np.diff(path.times) > 0)
    assert path.times[-1] <= 20.0
    assert path.states[:, 0].tolist() == list(range(1, len(path.times) + 1))
    assert path.final[0] == len(path.times)
    assert path.state_at(0.0)[0] == 0


def test_ssa_direct_is_reproducible(shipped):
    n = shipped("birth_death.json")
    a = ssa_direct(n, n.param_vector(), n.initial_state(), 2.0, RngStream(99, 4))
    b = ssa_direct(n, n.param_vector(), n.initial_state(), 2.0, RngStream(99, 4))
    assert np.array_equal(a.times, b.times)
    assert np.array_equal(a.states, b.states)


def test_absorbing_state_has_no_events():
    n = load_model({
        "species": [{"name": "X", "initial": 0}],
        "reactions": [{"name": "death", "reactants": {"X": 1}, "products": {},
                       "rate": {"type": "mass_action", "kappa": "mu"}}],
        "parameters": {"mu": 1.0},
    })
    path = ssa_direct(n, n.param_vector(), n.initial_state(), 5.0, RngStream(1))
    assert len(path.times) == 0
    assert path.final.tolist() == [0.0]
    nrm = nrm_time_change(n, n.param_vector(), n.initial_state(), 5.0, RngStream(1))
    assert len(nrm.times) == 0


def test_mm_enzyme_total_is_conserved_along_paths(shipped):
    n = shipped("mm_full.json")
    E, ES = n.species_index("E"), n.species_index("ES")
    path = ssa_direct(n, n.param_vector(), n.initial_state(), 0.2, RngStream(14))
    assert len(path.times) > 100
    assert np.all(path.states[:, E] + path.states[:, ES] == 20)
    assert path.final[E] + path.final[ES] == 20


def test_ctmc_start_must_be_integral(shipped):
    n = shipped("birth_death.json")
    with pytest.raises(ValidationError):
        ssa_direct(n, n.param_vector(), [0.5], 1.0, RngStream(1))


def test_max_events_truncates(shipped):
    n = shipped("pure_birth.json")
    with pytest.raises(TruncatedPathError) as info:
        ssa_direct(n, n.param_vector(), n.initial_state(), 100.0, RngStream(1), StepConfig(max_events=5))
    assert info.value.partial is not None


def test_ensemble_rows_do_not_depend_on_batching(shipped):
    n = shipped("birth_death.json")
    grid = np.array([0.5, 1.0])
    whole, _ = ctmc_ensemble(n, n.param_vector(), n.initial_state(), 1.0, grid, 17, 0, 6)
    tail, _ = ctmc_ensemble(n, n.param_vector(), n.initial_state(), 1.0, grid, 17, 3, 6)
    assert np.array_equal(whole[3:], tail)


def test_ensemble_records_grid_states(shipped):
    n = shipped("pure_birth.json")
    records, events = ctmc_ensemble(n, n.param_vector(), n.initial_state(), 3.0, np.array([0.0, 1.5, 3.0]), 5, 0, 50)
    assert records.shape == (50, 3, 1)
    assert np.all(records[:, 0] == 0)
    assert np.all(np.diff(records[:, :, 0], axis=1) >= 0)
    assert records[:, -1, 0].tolist() == events.tolist()


@pytest.mark.parametrize("method", ["ssa", "nrm"])
def test_birth_death_mean(shipped, method):
    """E X(1) = 10 (1 - e^-1) for immigration at 10 and unit death."""
    n = shipped("birth_death.json")
    records, _ = ctmc_ensemble(n, n.param_vector(), n.initial_state(), 1.0, np.array([1.0]), 2024, 0, 4000,
                               method=method)
    x = records[:, 0, 0]
    stderr = x.std(ddof=1) / np.sqrt(x.size)
    assert abs(x.mean() - BIRTH_DEATH_MEAN) < 4 * stderr


def test_ssa_and_nrm_agree(shipped):
    n = shipped("birth_death.json")
    grid = np.array([1.0])
    a, _ = ctmc_ensemble(n, n.param_vector(), n.initial_state(), 1.0, grid, 1, 0, 3000, method="ssa")
    b, _ = ctmc_ensemble(n, n.param_vector(), n.initial_state(), 1.0, grid, 2, 0, 3000, method="nrm")
    a, b = a[:, 0, 0], b[:, 0, 0]
    combined = np.sqrt(a.var(ddof=1) / a.size + b.var(ddof=1) / b.size)
    assert abs(a.mean() - b.mean()) < 4 * combined


def test_unknown_ctmc_method(shipped):
    n = shipped("birth_death.json")
    with pytest.raises(ValidationError):
        ctmc_ensemble(n, n.param_vector(), n.initial_state(), 1.0, np.array([1.0]), 1, 0, 2, method="tau-leap")


def test_scaled_birth_death_tracks_the_limit_ode():
    network = load_model(read_document(model_path("birth_death_scaled.json")))
    scaling = load_scaling(read_document(model_path("birth_death_scaled_scaling.json")), network)
    path = simulate_scaled(network, scaling, 100, None, None, 1.0, RngStream(8))
    assert path.grid.tolist() == [1.0]
    assert path.states[0, 0] == approx(BIRTH_DEATH_MEAN, abs=1.0)


# --- Split coupling of CTMCs ---

def test_split_rates_leave_one_residual_empty():
    rates = split_rates(np.array([[3.0, 1.0]]), np.array([[2.0, 4.0]]))
    assert rates.tolist() == [[2.0, 1.0, 0.0, 1.0, 0.0, 3.0]]
    assert np.all(rates[:, 1::3] * rates[:, 2::3] == 0)


def test_split_clock_matrix_moves_the_right_copy():
    Z = split_clock_matrix(np.array([[1, -1]]))
    assert Z.tolist() == [
        [1, 1, 0, -1, -1, 0],
        [1, 0, 1, -1, 0, -1],
    ]


def test_equal_parameters_give_identical_copies(shipped):
    n = shipped("birth_death.json")
    theta = n.param_vector()
    X = np.zeros((20, 1))
    bank = StreamBank([RngStream(4, p) for p in range(20)])
    z1, z2, _ = coupled_ctmc_batch(n, theta, theta, X, X, 2.0, bank)
    assert np.array_equal(z1, z2)


def test_coupled_copies_keep_their_marginals(shipped):
    n = shipped("birth_death.json")
    low = n.param_vector()
    high = n.param_vector({"theta": 12.0})
    X = np.zeros((3000, 1))
    bank = StreamBank([RngStream(6, p) for p in range(3000)])
    _, z2, _ = coupled_ctmc_batch(n, low, high, X, X, 1.0, bank)
    x = z2[:, 0]
    assert abs(x.mean() - 12 * (1 - math.exp(-1))) < 4 * x.std(ddof=1) / np.sqrt(x.size)


# --- PDMP ---

def test_pure_decay_converges_linearly_in_dt():
    """z' = -theta4 z from 1: Euler error shrinks about tenfold per tenfold step reduction."""
    m = decay_model()
    exact = math.exp(-5.0)
    errors = []
    for dt in (0.1, 0.01, 0.001):
        path = pdmp_simulate(m, m.network.param_vector(), 50.0, StepConfig(dt=dt), RngStream(1))
        errors.append(abs(path.final.x[0] - exact))
    assert errors[2] < 1e-4
    assert 5 < errors[0] / errors[1] < 20
    assert 5 < errors[1] / errors[2] < 20


def test_discrete_jump_fires_after_threshold():
    """Unit-rate clock with threshold 2 fires at the first step past t = 2."""
    m = arrival_model()
    stream = mock.Mock()
    stream.uniforms.side_effect = lambda size: np.full(size, math.exp(-2.0))
    grid = tuple(np.round(np.arange(0, 301) * 0.01, 10))
    path = pdmp_simulate(m, m.network.param_vector(), 3.0, StepConfig(dt=0.01, record_grid=grid), stream)
    first = int(np.argmax(path.states[:, 0] >= 1))
    assert path.grid[first] == approx(2.0, abs=0.01 + 1e-9)
    assert path.states[-1, 0] == 1.0
    assert path.final.P_k[0] == approx(4.0)


def test_pdmp_ensemble_rows_do_not_depend_on_batching():
    m = gene_pdmp()
    cfg = StepConfig(dt=0.01, record_grid=(1.0, 2.0))
    theta = m.network.param_vector()
    whole = pdmp_ensemble(m, theta, 2.0, cfg, 12, 0, 8)
    part = pdmp_ensemble(m, theta, 2.0, cfg, 12, 5, 8)
    assert np.array_equal(whole.records[5:], part.records)


def test_pdmp_keeps_discrete_counts_integral():
    m = gene_pdmp()
    run = pdmp_ensemble(m, m.network.param_vector(), 5.0, StepConfig(dt=0.01), 3, 0, 40)
    counts = run.final[:, 0, m.discrete_index]
    assert np.array_equal(counts, np.round(counts))
    assert np.all(counts >= 0)
    assert np.all(run.final[:, 0, m.continuous_index] >= 0)


def test_threshold_increments_are_unit_exponential():
    m = arrival_model()
    run = pdmp_ensemble(m, m.network.param_vector(), 100.0, StepConfig(dt=0.01), 19, 0, 200)
    assert run.increment_count >= 10_000
    assert run.increment_count == int(run.events.sum())
    assert 0.97 <= run.increment_sum / run.increment_count <= 1.03


def test_without_discrete_reactions_the_run_is_plain_euler():
    m = load_reduced_model(read_document(model_path("mm_ode.json")))
    assert m.discrete_reactions == ()
    theta = m.network.param_vector()
    dt, steps = 1e-3, 1000
    zeta_t = m.zeta[:, m.rc_index].T
    x = m.initial_state()[None, :]
    for _ in range(steps):
        rates = propensities(m.network, x, theta)
        x = x + dt * (rates[..., m.rc_index] @ zeta_t)
    path = pdmp_simulate(m, theta, 1.0, StepConfig(dt=dt), RngStream(1))
    assert np.array_equal(path.states[-1], x[0])


def test_sensitivity_ode_of_linear_model():
    """For x' = theta - x, y(T) = 1 - e^-T and Phi(T) = e^-T."""
    m = linear_ode_model()
    path = pdmp_simulate_augmented(m, m.network.param_vector(), "theta", 1.0, StepConfig(dt=1e-3), RngStream(1),
                                   with_phi=True)
    assert path.final.x[0] == approx(BIRTH_DEATH_MEAN, abs=0.01)
    assert path.final.y[0] == approx(1 - math.exp(-1), abs=2e-3)
    assert path.final.phi[0, 0] == approx(math.exp(-1), abs=2e-3)
    assert path.y.shape == (1, 1)


def test_y_rebuilt_from_phi_matches_direct_integration():
    """theta2 drives translation, so y is nonzero on every path that made mRNA."""
    m = gene_pdmp()
    dt = 0.01
    run = pdmp_ensemble(m, m.network.param_vector(), 2.0, StepConfig(dt=dt), 21, 0, 100, theta_name="theta2",
                        with_phi=True, trace=True)
    rebuilt = y_from_phi(np.array(run.trace["phi"]), np.array(run.trace["source"]), dt)
    assert np.any(run.y != 0)
    assert np.all(np.abs(rebuilt - run.y) <= 5 * dt * np.abs(run.y) + 1e-12)
    assert rebuilt == approx(run.y, rel=1e-8, abs=1e-12)


def test_augmented_run_rejects_unknown_parameter():
    m = gene_pdmp()
    with pytest.raises(UnknownIdentifierError) as info:
        pdmp_simulate_augmented(m, m.network.param_vector(), "theta9", 1.0, StepConfig(dt=0.1), RngStream(1))
    assert info.value.symbol == "theta9"


def test_split_coupling_with_zero_h_is_bit_identical():
    m = gene_pdmp()
    theta = m.network.param_vector()
    bank = StreamBank([RngStream(31, p) for p in range(10)])
    z1, z2, tau, run = split_coupling_pdmp(m, theta, 0.0, 3.0, StepConfig(dt=0.01), bank, theta_name="theta1")
    assert np.array_equal(z1, z2)
    assert np.all(np.isinf(tau))
    assert run.residual_product_max == 0.0


def test_split_coupling_residual_product_vanishes():
    m = gene_pdmp()
    theta = m.network.param_vector()
    bank = StreamBank([RngStream(32, p) for p in range(20)])
    z1, z2, tau, run = split_coupling_pdmp(m, theta, 0.5, 5.0, StepConfig(dt=0.01), bank, theta_name="theta1")
    assert run.residual_product_max == 0.0
    assert z1.shape == z2.shape == (20, 2)


def test_split_coupled_pdmp_copies_keep_their_marginals():
    m = gene_pdmp()
    cfg = StepConfig(dt=0.01)
    theta = m.network.param_vector()
    shifted = theta.copy()
    shifted[m.network.param_index("theta1")] += 0.5
    paths = 2000
    bank = StreamBank([RngStream(33, p) for p in range(paths)])
    z1, z2, _, _ = split_coupling_pdmp(m, theta, 0.5, 5.0, cfg, bank, theta_name="theta1")
    for coupled, params, seed in ((z1, theta, 34), (z2, shifted, 35)):
        alone = pdmp_ensemble(m, params, 5.0, cfg, seed, 0, paths).final[:, 0]
        combined = np.sqrt(coupled.var(axis=0, ddof=1) / paths + alone.var(axis=0, ddof=1) / paths)
        assert np.all(np.abs(coupled.mean(axis=0) - alone.mean(axis=0)) < 4 * combined)


def test_split_coupling_single_pair():
    m = gene_pdmp()
    z1, z2, tau, _ = split_coupling_pdmp(m, m.network.param_vector(), 0.0, 1.0, StepConfig(dt=0.01),
                                         RngStream(5), theta_name="theta1")
    assert z1.shape == (2,)
    assert math.isinf(tau)


def test_split_coupling_rejects_negative_h():
    m = gene_pdmp()
    with pytest.raises(ValidationError):
        split_coupling_pdmp(m, m.network.param_vector(), -0.1, 1.0, StepConfig(dt=0.1), RngStream(1), "theta1")


def test_untilted_process_follows_the_nominal_one():
    """With theta0 equal to theta the tilted discrete path equals the nominal one."""
    m = gene_pdmp()
    theta = m.network.param_vector()
    tilted = TiltedPDMP(m, theta, "theta1", float(theta[m.network.param_index("theta1")]))
    assert tilted.shift == 0.0
    nominal, shifted = tilted_ensemble(tilted, 3.0, StepConfig(dt=0.01), 44, 0, 10)
    assert np.array_equal(nominal, shifted)


def test_tilted_rates_are_floored_at_zero():
    m = gene_pdmp()
    theta = m.network.param_vector()
    tilted = TiltedPDMP(m, theta, "theta1", 50.0)
    X = np.array([[3.0, 2.0]])
    y = np.array([[40.0]])
    assert np.all(tilted.discrete_rates(X, y) >= 0)


def test_identity_reduction_simulates_like_the_ctmc(shipped):
    """Every reaction discrete: the PDMP engine is a time-stepped CTMC."""
    n = shipped("birth_death.json")
    m = derive_reduced_model(n, identity_scaling(n))
    run = pdmp_ensemble(m, n.param_vector(), 1.0, StepConfig(dt=1e-3), 9, 0, 3000)
    x = run.final[:, 0, 0]
    assert abs(x.mean() - BIRTH_DEATH_MEAN) < 4 * x.std(ddof=1) / np.sqrt(x.size) + 0.05
    assert stoichiometry(m.network).tolist() == [[1, -1]]
