# tests/test_sensitivity.py

import math

import pytest

from tests.conftest import model_path
from data_handler import read_document
from errors import BudgetError, UnknownIdentifierError, ValidationError
from model import load_model
from scaling import derive_reduced_model, identity_scaling, load_reduced_model, load_scaling
from sensitivity import (
    CFD_CTMC, CFD_PDMP, IPA_CTMC, PDMP_DECOMPOSITION, SensitivityEstimate, SensitivityRequest, build_tilted_model,
    cfd_ctmc, cfd_pdmp, estimate, fd_independent_pdmp, ipa_ctmc, sens_continuous, sens_discrete_ipa,
    sens_pdmp_total, tilted_difference,
)
from simulate import StepConfig, pdmp_simulate
from utils import RngStream

approx = pytest.approx

ONE_MINUS_INV_E = 1 - math.exp(-1)


def linear_ode_model():
    network = load_model(read_document(model_path("birth_death_scaled.json")))
    scaling = load_scaling(read_document(model_path("birth_death_scaled_scaling.json")), network)
    return derive_reduced_model(network, scaling)


def pure_birth_model():
    network = load_model(read_document(model_path("pure_birth.json")))
    return network, derive_reduced_model(network, identity_scaling(network))


def gene_pdmp():
    return load_reduced_model(read_document(model_path("gene_pdmp.json")))


def request(**kwargs):
    defaults = dict(observable="count", theta_name="theta", T=2.0, paths=50, cfg=StepConfig(dt=0.01), seed=7,
                    workers=1)
    defaults.update(kwargs)
    return SensitivityRequest(**defaults)


# --- Test Scenarios ---

@pytest.mark.parametrize("changes", [
    {"method": "malliavin"},
    {"paths": 1},
    {"method": CFD_PDMP, "h": 0.0},
    {"aux_times": 0},
    {"aux_pairs": 0},
    {"T": 0.0},
])
def test_request_validation(changes):
    with pytest.raises(ValidationError):
        request(**changes).validate()


def test_pure_birth_discrete_part_is_exact():
    """Every evaluation point has D = 1 and a coupled pair differing by exactly one."""
    _, m = pure_birth_model()
    result = sens_pdmp_total(m, request(paths=40, aux_times=10))
    assert result.method == PDMP_DECOMPOSITION
    assert result.value == approx(2.0)
    assert result.stderr == approx(0.0, abs=1e-12)
    assert result.parts["continuous"].value == 0.0
    assert result.parts["discrete"].value == approx(2.0)
    assert result.diagnostics["auxiliary_pairs"] == 40 * 10


def test_parts_sum_to_the_total():
    m = gene_pdmp()
    req = request(observable="protein", theta_name="theta1", paths=12, aux_times=2, T=2.0)
    result = sens_pdmp_total(m, req)
    assert result.value == result.parts["continuous"].value + result.parts["discrete"].value
    assert result.n == 12


def test_split_estimators_match_the_combined_campaign():
    """Continuous and discrete parts run alone reproduce the parts of the total."""
    m = gene_pdmp()
    req = request(observable="protein", theta_name="theta1", paths=10, aux_times=2, T=2.0)
    total = sens_pdmp_total(m, req)
    assert sens_continuous(m, req).value == approx(total.parts["continuous"].value)
    assert sens_discrete_ipa(m, req).value == approx(total.parts["discrete"].value)


def test_campaign_does_not_depend_on_batch_size():
    m = gene_pdmp()
    a = sens_pdmp_total(m, request(observable="protein", theta_name="theta1", paths=9, aux_times=2, batch=9))
    b = sens_pdmp_total(m, request(observable="protein", theta_name="theta1", paths=9, aux_times=2, batch=4))
    assert a.value == approx(b.value, rel=1e-12, abs=1e-15)


def test_linear_ode_sensitivity():
    """x' = theta - x: dx(1)/dtheta = 1 - e^-1 with no Monte Carlo noise."""
    m = linear_ode_model()
    req = request(observable="concentration", T=1.0, paths=3, cfg=StepConfig(dt=1e-3))
    result = sens_pdmp_total(m, req)
    assert result.value == approx(ONE_MINUS_INV_E, abs=2e-3)
    assert result.stderr == 0.0
    assert result.parts["discrete"].value == 0.0


@pytest.mark.parametrize("h", [1e-3, 0.5, 4.0])
def test_coupled_difference_is_exact_for_linear_models(h):
    m = linear_ode_model()
    req = request(observable="concentration", T=1.0, paths=3, h=h, method=CFD_PDMP, cfg=StepConfig(dt=1e-3))
    result = cfd_pdmp(m, req)
    assert result.value == approx(ONE_MINUS_INV_E, abs=2e-3)
    assert result.stderr == approx(0.0, abs=1e-9)
    assert result.diagnostics["residual_product_max"] == 0.0


@pytest.mark.parametrize("theta_name", ["theta1", "theta2", "theta3"])
def test_ode_sensitivity_matches_central_difference_of_the_solve(theta_name):
    """Michaelis-Menten ODE: sensitivity ODE against differencing the Euler solve."""
    m = load_reduced_model(read_document(model_path("mm_ode.json")))
    cfg = StepConfig(dt=1e-3)
    theta = m.network.param_vector()
    i = m.network.param_index(theta_name)
    h = 1e-4
    up, down = theta.copy(), theta.copy()
    up[i] += h
    down[i] -= h
    product = m.network.species_index("P")
    fd = (pdmp_simulate(m, up, 1.0, cfg, RngStream(1)).states[-1, product]
          - pdmp_simulate(m, down, 1.0, cfg, RngStream(1)).states[-1, product]) / (2 * h)
    result = sens_pdmp_total(m, request(observable="product", theta_name=theta_name, T=1.0, paths=2, cfg=cfg))
    assert result.value == approx(fd, rel=1e-4)


def test_central_difference_option():
    m = linear_ode_model()
    req = request(observable="concentration", T=1.0, paths=2, h=0.5, method=CFD_PDMP, central=True,
                  cfg=StepConfig(dt=1e-3))
    assert cfd_pdmp(m, req).value == approx(ONE_MINUS_INV_E, abs=2e-3)


def test_cfd_pdmp_records_decoupling_times():
    m = gene_pdmp()
    req = request(observable="protein", theta_name="theta1", paths=30, h=0.5, method=CFD_PDMP)
    result = cfd_pdmp(m, req)
    diagnostics = result.diagnostics
    assert 0.0 <= diagnostics["decoupled_fraction"] <= 1.0
    assert sum(diagnostics["tau_counts"]) == round(diagnostics["decoupled_fraction"] * 30)
    assert diagnostics["residual_product_max"] == 0.0


def test_independent_differences_are_noisier_than_coupled_ones():
    m = gene_pdmp()
    req = request(observable="protein", theta_name="theta1", paths=60, h=0.1, method=CFD_PDMP, T=3.0)
    coupled = cfd_pdmp(m, req)
    independent = fd_independent_pdmp(m, req)
    assert independent.stderr > coupled.stderr


def test_cfd_ctmc_birth_death():
    """E X(1) is linear in theta, so the coupled difference is unbiased for any h."""
    n = load_model(read_document(model_path("birth_death.json")))
    req = request(T=1.0, paths=2000, h=1.0, method=CFD_CTMC)
    result = cfd_ctmc(n, req)
    assert result.method == CFD_CTMC
    assert abs(result.value - ONE_MINUS_INV_E) < 4 * result.stderr


def test_ipa_ctmc_pure_birth_is_exact():
    n, _ = pure_birth_model()
    result = ipa_ctmc(n, request(paths=25, aux_times=4, method=IPA_CTMC))
    assert result.value == approx(2.0)
    assert result.stderr == approx(0.0, abs=1e-12)


def test_tilted_difference_on_pure_birth():
    """Shared jump times: the count gained by raising theta is Poisson(hT)."""
    _, m = pure_birth_model()
    result = tilted_difference(m, request(paths=600, h=1.0))
    assert abs(result.value - 2.0) < 4 * result.stderr


def test_build_tilted_model():
    m = gene_pdmp()
    theta = m.network.param_vector()
    tilted = build_tilted_model(m, theta, 1.5, "theta1")
    assert tilted.shift == approx(0.5)
    assert tilted.params0[m.network.param_index("theta1")] == 1.5
    with pytest.raises(UnknownIdentifierError):
        build_tilted_model(m, theta, 1.5, "theta9")


def test_auxiliary_budget_is_enforced():
    _, m = pure_birth_model()
    with pytest.raises(BudgetError):
        sens_pdmp_total(m, request(paths=100, aux_times=10, aux_pairs=2, max_aux=1000))


def test_unknown_parameter_or_observable():
    _, m = pure_birth_model()
    with pytest.raises(UnknownIdentifierError):
        sens_pdmp_total(m, request(theta_name="kappa"))
    with pytest.raises(UnknownIdentifierError):
        sens_pdmp_total(m, request(observable="mass"))


def test_parameter_overrides_are_applied():
    _, m = pure_birth_model()
    result = sens_pdmp_total(m, request(paths=10, aux_times=3, overrides={"theta": 5.0}))
    assert result.value == approx(2.0)


def test_estimate_dispatch():
    n, m = pure_birth_model()
    assert estimate(request(paths=5, aux_times=2), reduced=m).method == PDMP_DECOMPOSITION
    assert estimate(request(paths=5, aux_times=2, method=IPA_CTMC), network=n).method == IPA_CTMC
    with pytest.raises(ValidationError):
        estimate(request(paths=5), network=n)
    with pytest.raises(ValidationError):
        estimate(request(paths=5, method=CFD_CTMC), reduced=m)


def test_estimate_row_layout():
    row = SensitivityEstimate("theta1", CFD_PDMP, 0.5, 0.1, 100).to_row()
    assert row["parameter"] == "theta1"
    assert row["part_continuous"] is None
    assert row["n"] == 100
