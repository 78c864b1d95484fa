# scaling.py
"""Multiscale scaling: timescales, reaction classification, truncated
stoichiometry and the reduced hybrid (PDMP) model.

Exponents are kept as ``fractions.Fraction`` throughout so the discrete /
continuous split never depends on floating-point rounding.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from fractions import Fraction
from functools import cached_property
from math import factorial
from typing import Mapping, Optional, Sequence

import numpy as np

from errors import DerivationError, QsaRequiredError, SchemaError, UnknownIdentifierError, ValidationError
from expr import BinOp, Num, Pow, Var, from_tree, parse
from model import (
    CustomRate, Reaction, ReactionNetwork, Species, load_model, network_document, stoichiometry,
)

logger = logging.getLogger(__name__)

CONTINUOUS = "continuous"
DISCRETE = "discrete"
DROPPED = "dropped"

PDMP_KIND = "pdmp"


# --- Types ---

@dataclass(frozen=True)
class ScalingSpec:
    """Abundance factors per species, rate exponents per reaction, reference scale.

    ``gamma`` of ``None`` means "auto": observe on the fastest species timescale.
    """

    alpha: tuple
    beta: tuple
    N0: float
    gamma: Optional[Fraction] = None
    reduced_formulas: Mapping[str, str] = field(default_factory=dict)


@dataclass(frozen=True)
class TimescaleReport:
    rho: tuple
    gamma_i: tuple          # None for species no reaction changes
    r: Fraction
    observation: Fraction   # the gamma used for classification
    classification: tuple
    zeta_hat: np.ndarray
    dropped: tuple = ()
    inert: tuple = ()       # retained by timescale but with no effect after truncation
    qsa_needed: tuple = ()

    def reactions_tagged(self, tag, names):
        return tuple(name for name, t in zip(names, self.classification) if t == tag)


@dataclass(frozen=True, eq=False)
class ReducedPDMP:
    """Hybrid model: continuous species follow an ODE, discrete ones jump.

    ``network`` holds every species (continuous levels and discrete counts side
    by side) and the retained reactions, each carrying its limit rate and its
    truncated stoichiometry.
    """

    network: ReactionNetwork
    continuous_species: tuple
    discrete_species: tuple
    continuous_reactions: tuple
    discrete_reactions: tuple
    report: Optional[TimescaleReport] = None
    N0: Optional[float] = None

    @cached_property
    def continuous_index(self):
        return np.array([self.network.species_index(s) for s in self.continuous_species], dtype=np.int64)

    @cached_property
    def discrete_index(self):
        return np.array([self.network.species_index(s) for s in self.discrete_species], dtype=np.int64)

    @cached_property
    def rc_index(self):
        return np.array([self.network.reaction_index(r) for r in self.continuous_reactions], dtype=np.int64)

    @cached_property
    def rd_index(self):
        return np.array([self.network.reaction_index(r) for r in self.discrete_reactions], dtype=np.int64)

    @cached_property
    def zeta(self):
        return stoichiometry(self.network).astype(float)

    @property
    def zeta_c(self):
        """Continuous-species block of the continuous reactions, |S_c| x |R_c|."""
        return self.zeta[np.ix_(self.continuous_index, self.rc_index)]

    @property
    def zeta_d(self):
        """Discrete-species block of the discrete reactions, |S_d| x |R_d|."""
        return self.zeta[np.ix_(self.discrete_index, self.rd_index)]

    def initial_state(self):
        return self.network.initial_state()


# --- Loading ---

def parse_rational(value, where="value"):
    """Exact rational from an int, a "p/q" string or a decimal string/float."""
    if isinstance(value, bool):
        raise SchemaError(f"{where} must be a rational, got {value!r}")
    try:
        if isinstance(value, int):
            return Fraction(value)
        if isinstance(value, float):
            return Fraction(repr(value))
        if isinstance(value, str):
            return Fraction(value.strip())
    except (ValueError, ZeroDivisionError):
        pass
    raise SchemaError(f"{where} must be a rational such as \"2/3\", got {value!r}")


def _per_name(raw, names, what, violations):
    if isinstance(raw, list):
        if len(raw) != len(names):
            violations.append(f"{what} has {len(raw)} entries, expected {len(names)}")
            return None
        return [parse_rational(v, f"{what}[{i}]") for i, v in enumerate(raw)]
    if isinstance(raw, dict):
        extra = sorted(set(raw) - set(names))
        missing = [n for n in names if n not in raw]
        if extra:
            violations.append(f"{what} names unknown entries: {', '.join(extra)}")
        if missing:
            violations.append(f"{what} is missing entries for: {', '.join(missing)}")
        if extra or missing:
            return None
        return [parse_rational(raw[n], f"{what}['{n}']") for n in names]
    violations.append(f"{what} must be an object or a list")
    return None


def load_scaling(document, network: ReactionNetwork) -> ScalingSpec:
    if not isinstance(document, dict):
        raise SchemaError("scaling document must be an object")
    violations = []
    alpha = _per_name(document.get("alpha"), network.species_names, "alpha", violations)
    beta = _per_name(document.get("beta"), network.reaction_names, "beta", violations)
    if alpha is not None and any(a < 0 for a in alpha):
        violations.append("alpha entries must be nonnegative")

    N0 = document.get("N0")
    if not (isinstance(N0, (int, float)) and not isinstance(N0, bool) and N0 > 1):
        violations.append("N0 must be a number greater than 1")

    raw_gamma = document.get("gamma", "auto")
    gamma = None if raw_gamma == "auto" else parse_rational(raw_gamma, "gamma")

    formulas = document.get("reduced_formulas", {}) or {}
    if not isinstance(formulas, dict):
        violations.append("reduced_formulas must be an object")
        formulas = {}
    for name, text in formulas.items():
        if name not in network.reaction_names:
            violations.append(f"reduced_formulas names unknown reaction '{name}'")
        elif not isinstance(text, str):
            violations.append(f"reduced formula for '{name}' must be a string")
    if violations:
        raise SchemaError(violations[0], violations)
    return ScalingSpec(tuple(alpha), tuple(beta), float(N0), gamma, dict(formulas))


def identity_scaling(network: ReactionNetwork) -> ScalingSpec:
    """All exponents zero: the reduction is the CTMC itself."""
    return ScalingSpec(
        tuple(Fraction(0) for _ in network.species),
        tuple(Fraction(0) for _ in network.reactions),
        2.0,
    )


def scaling_document(s: ScalingSpec, network: ReactionNetwork) -> dict:
    return {
        "alpha": {name: str(a) for name, a in zip(network.species_names, s.alpha)},
        "beta": {name: str(b) for name, b in zip(network.reaction_names, s.beta)},
        "N0": s.N0,
        "gamma": "auto" if s.gamma is None else str(s.gamma),
        "reduced_formulas": dict(s.reduced_formulas),
    }


# --- Timescales ---

def natural_timescales(n: ReactionNetwork, s: ScalingSpec) -> tuple:
    """rho_k = beta_k + <alpha, nu_k>, exactly."""
    nu = n.reactant_matrix
    return tuple(
        s.beta[k] + sum((s.alpha[i] * int(nu[i, k]) for i in range(n.n_species)), Fraction(0))
        for k in range(n.n_reactions)
    )


def species_timescales_and_r(n: ReactionNetwork, s: ScalingSpec, rho):
    """gamma_i = alpha_i - max{rho_k : zeta_ik != 0}; r is their minimum.

    Species no reaction changes get ``None`` and are left out of the minimum.
    """
    zeta = stoichiometry(n)
    gamma_i = []
    for i in range(n.n_species):
        touching = [rho[k] for k in range(n.n_reactions) if zeta[i, k] != 0]
        gamma_i.append(s.alpha[i] - max(touching) if touching else None)
    defined = [g for g in gamma_i if g is not None]
    if not defined:
        raise DerivationError("no species is changed by any reaction")
    return tuple(gamma_i), min(defined)


def classify_and_truncate(n: ReactionNetwork, s: ScalingSpec, rho, r) -> TimescaleReport:
    observation = r if s.gamma is None else s.gamma
    zeta = stoichiometry(n)
    zeta_hat = np.zeros_like(zeta)
    classification, dropped, inert, qsa = [], [], [], []
    gamma_i, _ = species_timescales_and_r(n, s, rho)
    for k, reaction in enumerate(n.reactions):
        speed = observation + rho[k]
        if speed < 0:
            classification.append(DROPPED)
            dropped.append(reaction.name)
            logger.warning("reaction '%s' is slower than the observation timescale and is dropped", reaction.name)
            continue
        classification.append(DISCRETE if speed == 0 else CONTINUOUS)
        for i in range(n.n_species):
            if s.alpha[i] == speed:
                zeta_hat[i, k] = zeta[i, k]
        if speed > 0 and any(zeta[i, k] != 0 and s.alpha[i] == 0 for i in range(n.n_species)):
            qsa.append(reaction.name)
        if not zeta_hat[:, k].any():
            inert.append(reaction.name)
    return TimescaleReport(
        rho=tuple(rho),
        gamma_i=gamma_i,
        r=r,
        observation=observation,
        classification=tuple(classification),
        zeta_hat=zeta_hat,
        dropped=tuple(dropped),
        inert=tuple(inert),
        qsa_needed=tuple(qsa),
    )


def timescale_report(n: ReactionNetwork, s: ScalingSpec) -> TimescaleReport:
    rho = natural_timescales(n, s)
    _, r = species_timescales_and_r(n, s, rho)
    return classify_and_truncate(n, s, rho, r)


# --- Propensities ---

def _rate_constant(n, s, k, theta):
    reaction = n.reactions[k]
    if not reaction.is_mass_action:
        raise ValidationError(
            f"reaction '{reaction.name}' has a custom rate law; its scaled form must be supplied as a formula"
        )
    kappa = float(reaction.rate.kappa.value(np.zeros(0), np.asarray(theta, dtype=float)))
    return kappa * s.N0 ** -float(s.beta[k])


def scaled_propensity(n: ReactionNetwork, s: ScalingSpec, k: int, z, N: float, theta) -> float:
    """lambda^N_k(z): falling factorials in steps of N^-alpha_i."""
    value = _rate_constant(n, s, k, theta)
    z = np.asarray(z, dtype=float)
    nu = n.reactant_matrix[:, k]
    for i in range(n.n_species):
        step = N ** -float(s.alpha[i])
        for j in range(int(nu[i])):
            value *= z[i] - j * step
        value /= factorial(int(nu[i]))
    return value


def _limit_tree(n, s, k):
    reaction = n.reactions[k]
    if not reaction.is_mass_action:
        text = s.reduced_formulas.get(reaction.name)
        unscaled = s.beta[k] == 0 and all(
            s.alpha[i] == 0 for i, name in enumerate(n.species_names) if reaction.rate.formula.depends_on(name)
        )
        if text is None and unscaled:
            return reaction.rate.formula.root
        if text is None:
            raise DerivationError(
                f"reaction '{reaction.name}' has a custom rate law and no reduced formula in the scaling"
            )
        return parse(text, n.species_names, n.param_names).root
    node = reaction.rate.kappa.root
    if s.beta[k] != 0:
        node = BinOp("*", node, Num(s.N0 ** -float(s.beta[k])))
    denominator = 1
    for i, name in enumerate(n.species_names):
        nu = int(reaction.reactants.get(name, 0))
        if nu == 0:
            continue
        if s.alpha[i] == 0:
            for j in range(nu):
                node = BinOp("*", node, Var(name) if j == 0 else BinOp("-", Var(name), Num(float(j))))
        else:
            node = BinOp("*", node, Var(name) if nu == 1 else Pow(Var(name), nu))
        denominator *= factorial(nu)
    if denominator != 1:
        node = BinOp("/", node, Num(float(denominator)))
    return node


def limit_propensity(n: ReactionNetwork, s: ScalingSpec, k: int):
    """The N -> infinity rate of reaction k as an Expression over the hybrid state."""
    return from_tree(_limit_tree(n, s, k), n.species_names, n.param_names)


# --- Reduction ---

def derive_reduced_model(n: ReactionNetwork, s: ScalingSpec, formulas: Optional[Mapping[str, str]] = None) -> ReducedPDMP:
    if formulas:
        s = ScalingSpec(s.alpha, s.beta, s.N0, s.gamma, {**s.reduced_formulas, **formulas})
    report = timescale_report(n, s)
    if report.qsa_needed:
        raise QsaRequiredError(report.qsa_needed)
    for name in report.inert:
        logger.warning("reaction '%s' changes nothing after truncation and is dropped", name)

    species = []
    for i, sp in enumerate(n.species):
        level = sp.initial * s.N0 ** -float(s.alpha[i]) if s.alpha[i] > 0 else sp.initial
        species.append(Species(sp.name, level))

    reactions, continuous, discrete = [], [], []
    for k, reaction in enumerate(n.reactions):
        tag = report.classification[k]
        if tag == DROPPED or reaction.name in report.inert:
            continue
        products = {}
        for i, name in enumerate(n.species_names):
            count = int(reaction.reactants.get(name, 0)) + int(report.zeta_hat[i, k])
            if count:
                products[name] = count
        rate = CustomRate(limit_propensity(n, s, k))
        reactions.append(Reaction(reaction.name, dict(reaction.reactants), products, rate))
        (continuous if tag == CONTINUOUS else discrete).append(reaction.name)

    if not reactions:
        raise DerivationError("every reaction was dropped by the scaling")
    network = ReactionNetwork(tuple(species), tuple(reactions), dict(n.parameters), dict(n.observables))
    reduced = ReducedPDMP(
        network=network,
        continuous_species=tuple(name for i, name in enumerate(n.species_names) if s.alpha[i] > 0),
        discrete_species=tuple(name for i, name in enumerate(n.species_names) if s.alpha[i] == 0),
        continuous_reactions=tuple(continuous),
        discrete_reactions=tuple(discrete),
        report=report,
        N0=s.N0,
    )
    _check_structure(reduced)
    logger.info(
        "reduced model: %d continuous / %d discrete species, R_c=%s, R_d=%s",
        len(reduced.continuous_species), len(reduced.discrete_species),
        list(reduced.continuous_reactions), list(reduced.discrete_reactions),
    )
    return reduced


def _check_structure(m: ReducedPDMP):
    """Continuous reactions move only continuous species, discrete ones only discrete."""
    zeta = m.zeta
    for k in m.rc_index:
        if np.any(zeta[m.discrete_index, k] != 0):
            raise QsaRequiredError([m.network.reactions[k].name])
    for k in m.rd_index:
        if np.any(zeta[m.continuous_index, k] != 0):
            raise DerivationError(
                f"discrete reaction '{m.network.reactions[k].name}' changes a continuous species"
            )


def reduced_model_document(m: ReducedPDMP) -> dict:
    document = network_document(m.network)
    document.update({
        "kind": PDMP_KIND,
        "continuous_species": list(m.continuous_species),
        "discrete_species": list(m.discrete_species),
        "continuous_reactions": list(m.continuous_reactions),
        "discrete_reactions": list(m.discrete_reactions),
    })
    if m.N0 is not None:
        document["scaling"] = {"N0": m.N0}
    return document


def load_reduced_model(document) -> ReducedPDMP:
    """Reload a reduced model; a plain network document is taken as all-discrete."""
    network = load_model(document)
    if document.get("kind") != PDMP_KIND:
        return derive_reduced_model(network, identity_scaling(network))
    violations = []
    lists = {}
    for key, universe in (
        ("continuous_species", network.species_names),
        ("discrete_species", network.species_names),
        ("continuous_reactions", network.reaction_names),
        ("discrete_reactions", network.reaction_names),
    ):
        value = document.get(key, [])
        if not (isinstance(value, list) and all(isinstance(v, str) for v in value)):
            violations.append(f"{key} must be a list of names")
            value = []
        for name in value:
            if name not in universe:
                raise UnknownIdentifierError(name)
        lists[key] = tuple(value)
    for a, b, universe in (
        ("continuous_species", "discrete_species", network.species_names),
        ("continuous_reactions", "discrete_reactions", network.reaction_names),
    ):
        if sorted(lists[a] + lists[b]) != sorted(universe):
            violations.append(f"{a} and {b} must partition {', '.join(universe)}")
    if violations:
        raise SchemaError(violations[0], violations)
    N0 = (document.get("scaling") or {}).get("N0")
    reduced = ReducedPDMP(network, N0=N0, **lists)
    _check_structure(reduced)
    return reduced


def scaling_report_document(report: TimescaleReport, network: ReactionNetwork) -> dict:
    def text(value):
        return None if value is None else str(value)

    return {
        "rho": {name: text(v) for name, v in zip(network.reaction_names, report.rho)},
        "gamma_i": {name: text(v) for name, v in zip(network.species_names, report.gamma_i)},
        "r": text(report.r),
        "observation": text(report.observation),
        "classification": dict(zip(network.reaction_names, report.classification)),
        "zeta_hat": {
            name: {s: int(report.zeta_hat[i, k]) for i, s in enumerate(network.species_names) if report.zeta_hat[i, k]}
            for k, name in enumerate(network.reaction_names)
        },
        "dropped": list(report.dropped),
        "inert": list(report.inert),
    }
