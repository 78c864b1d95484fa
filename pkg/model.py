# model.py
"""Reaction networks: species, reactions with their rate laws, parameters, observables.

A network document (JSON or YAML, see ``data_handler.read_document``) looks like::

    {"species": [{"name": "S", "initial": 10}],
     "reactions": [{"name": "decay", "reactants": {"S": 1}, "products": {},
                    "rate": {"type": "mass_action", "kappa": "theta1"}}],
     "parameters": {"theta1": 0.1},
     "observables": {"count": "S"}}
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from functools import cached_property
from math import factorial
from typing import Mapping, Sequence

import numpy as np

from errors import NumericDomainError, NumericError, SchemaError, UnknownIdentifierError, ValidationError
from expr import BinOp, Expression, Num, Var, from_tree, parse

logger = logging.getLogger(__name__)

MASS_ACTION = "mass_action"
CUSTOM = "expr"

# Relative tolerance for Euler undershoot below zero before a custom rate is refused.
NEGATIVE_STATE_TOLERANCE = 1e-9

_TOP_LEVEL_KEYS = {
    "name", "description", "species", "reactions", "parameters", "observables",
    # reduced-model extras, see scaling.reduced_model_document
    "kind", "continuous_species", "discrete_species", "continuous_reactions",
    "discrete_reactions", "scaling",
}


# --- Types ---

@dataclass(frozen=True)
class Species:
    name: str
    initial: float


@dataclass(frozen=True)
class MassAction:
    """Mass-action law; ``kappa`` is an expression over parameters only."""

    kappa: Expression
    type: str = MASS_ACTION


@dataclass(frozen=True)
class CustomRate:
    formula: Expression
    type: str = CUSTOM


@dataclass(frozen=True)
class Reaction:
    name: str
    reactants: Mapping[str, int]
    products: Mapping[str, int]
    rate: object

    @property
    def is_mass_action(self):
        return isinstance(self.rate, MassAction)


@dataclass(frozen=True, eq=False)
class ReactionNetwork:
    species: tuple
    reactions: tuple
    parameters: Mapping[str, float]
    observables: Mapping[str, Expression] = field(default_factory=dict)

    @property
    def species_names(self):
        return tuple(s.name for s in self.species)

    @property
    def reaction_names(self):
        return tuple(r.name for r in self.reactions)

    @property
    def param_names(self):
        return tuple(self.parameters)

    @property
    def n_species(self):
        return len(self.species)

    @property
    def n_reactions(self):
        return len(self.reactions)

    def species_index(self, name):
        try:
            return self.species_names.index(name)
        except ValueError:
            raise UnknownIdentifierError(name) from None

    def reaction_index(self, name):
        try:
            return self.reaction_names.index(name)
        except ValueError:
            raise UnknownIdentifierError(name) from None

    def param_index(self, name):
        try:
            return self.param_names.index(name)
        except ValueError:
            raise UnknownIdentifierError(name) from None

    def param_vector(self, overrides=None):
        """Parameter values in declaration order, with optional overrides by name."""
        theta = np.array([float(v) for v in self.parameters.values()])
        for name, value in (overrides or {}).items():
            theta[self.param_index(name)] = float(value)
        return theta

    def initial_state(self):
        return np.array([s.initial for s in self.species], dtype=float)

    @cached_property
    def reactant_matrix(self):
        nu = np.zeros((self.n_species, self.n_reactions), dtype=np.int64)
        for k, r in enumerate(self.reactions):
            for name, count in r.reactants.items():
                nu[self.species_index(name), k] = count
        return nu

    @cached_property
    def product_matrix(self):
        nu = np.zeros((self.n_species, self.n_reactions), dtype=np.int64)
        for k, r in enumerate(self.reactions):
            for name, count in r.products.items():
                nu[self.species_index(name), k] = count
        return nu

    @cached_property
    def rate_expressions(self):
        """One expression per reaction over species and parameters."""
        out = []
        for r in self.reactions:
            if r.is_mass_action:
                tree = mass_action_tree(r.rate.kappa.root, r.reactants, self.species_names)
                out.append(from_tree(tree, self.species_names, self.param_names))
            else:
                out.append(r.rate.formula)
        return tuple(out)

    @cached_property
    def custom_mask(self):
        return np.array([not r.is_mass_action for r in self.reactions])


def mass_action_tree(kappa_root, reactants, species_names):
    """kappa * prod_i x_i (x_i - 1) ... (x_i - nu_i + 1) / nu_i!  as an unbound tree."""
    node = kappa_root
    denominator = 1
    for name in species_names:
        nu = int(reactants.get(name, 0))
        for j in range(nu):
            factor = Var(name) if j == 0 else BinOp("-", Var(name), Num(float(j)))
            node = BinOp("*", node, factor)
        denominator *= factorial(nu)
    if denominator != 1:
        node = BinOp("/", node, Num(float(denominator)))
    return node


# --- Loading and validation ---

def _require(cond, message, violations):
    if not cond:
        violations.append(message)
    return cond


def _is_number(value):
    return isinstance(value, (int, float)) and not isinstance(value, bool)


def _parse_counts(mapping, where, species_names, violations):
    counts = {}
    if not _require(isinstance(mapping, dict), f"{where} must be an object", violations):
        return counts
    for name, count in mapping.items():
        if name not in species_names:
            raise UnknownIdentifierError(name)
        if not (isinstance(count, int) and not isinstance(count, bool) and count >= 0):
            violations.append(f"{where}['{name}'] must be a nonnegative integer")
            continue
        if count:
            counts[name] = count
    return counts


def load_model(document) -> ReactionNetwork:
    """Build a bound, validated ReactionNetwork from a parsed document."""
    if not isinstance(document, dict):
        raise SchemaError("model document must be an object")
    violations = []
    unknown = sorted(set(document) - _TOP_LEVEL_KEYS)
    _require(not unknown, f"unknown top-level keys: {', '.join(unknown)}", violations)

    raw_species = document.get("species")
    raw_reactions = document.get("reactions")
    raw_params = document.get("parameters", {})
    raw_observables = document.get("observables", {})
    _require(isinstance(raw_species, list) and raw_species, "at least one species is required", violations)
    _require(isinstance(raw_reactions, list) and raw_reactions, "at least one reaction is required", violations)
    _require(isinstance(raw_params, dict), "parameters must be an object", violations)
    _require(isinstance(raw_observables, dict), "observables must be an object", violations)
    if violations:
        raise SchemaError(violations[0], violations)

    species = []
    for i, entry in enumerate(raw_species):
        if not (isinstance(entry, dict) and isinstance(entry.get("name"), str)):
            violations.append(f"species[{i}] needs a string 'name'")
            continue
        initial = entry.get("initial", 0)
        if not (_is_number(initial) and initial >= 0):
            violations.append(f"species '{entry['name']}' needs a nonnegative 'initial'")
            continue
        species.append(Species(entry["name"], float(initial)))
    species_names = [s.name for s in species]
    _check_unique(species_names, "species", violations)

    params = {}
    for name, value in raw_params.items():
        if _require(_is_number(value), f"parameter '{name}' must be a number", violations):
            params[name] = float(value)
    param_names = list(params)
    clash = sorted(set(species_names) & set(param_names))
    _require(not clash, f"names used for both species and parameters: {', '.join(clash)}", violations)
    if violations:
        raise SchemaError(violations[0], violations)

    reactions = []
    theta = np.array(list(params.values()), dtype=float)
    for i, entry in enumerate(raw_reactions):
        if not (isinstance(entry, dict) and isinstance(entry.get("name"), str)):
            violations.append(f"reactions[{i}] needs a string 'name'")
            continue
        name = entry["name"]
        reactants = _parse_counts(entry.get("reactants", {}), f"reaction '{name}' reactants", species_names, violations)
        products = _parse_counts(entry.get("products", {}), f"reaction '{name}' products", species_names, violations)
        rate = _parse_rate(entry.get("rate"), name, species_names, param_names, theta, violations)
        if rate is None:
            continue
        if all(reactants.get(s, 0) == products.get(s, 0) for s in species_names):
            violations.append(f"reaction '{name}' has zero stoichiometry (products equal reactants)")
            continue
        reactions.append(Reaction(name, reactants, products, rate))
    _check_unique([r.name for r in reactions], "reaction", violations)

    observables = {}
    for name, text in raw_observables.items():
        if _require(isinstance(text, str), f"observable '{name}' must be an expression string", violations):
            observables[name] = parse(text, species_names, param_names)
    if violations:
        raise ValidationError(violations[0], violations)

    network = ReactionNetwork(tuple(species), tuple(reactions), params, observables)
    logger.debug("loaded network: %d species, %d reactions", network.n_species, network.n_reactions)
    return network


def _check_unique(names, what, violations):
    seen = set()
    for name in names:
        if name in seen:
            violations.append(f"duplicate {what} name '{name}'")
        seen.add(name)


def _parse_rate(rate, reaction_name, species_names, param_names, theta, violations):
    if not isinstance(rate, dict):
        violations.append(f"reaction '{reaction_name}' needs a 'rate' object")
        return None
    kind = rate.get("type")
    if kind == MASS_ACTION:
        if not isinstance(rate.get("kappa"), (str, int, float)):
            violations.append(f"reaction '{reaction_name}' mass_action rate needs 'kappa'")
            return None
        kappa = parse(str(rate["kappa"]), (), param_names)
        try:
            value = kappa.value(np.zeros(0), theta)
        except NumericDomainError as exc:
            violations.append(f"reaction '{reaction_name}' kappa cannot be evaluated: {exc}")
            return None
        if value < 0:
            violations.append(f"reaction '{reaction_name}' kappa is negative ({float(value)!r})")
            return None
        return MassAction(kappa)
    if kind == CUSTOM:
        if not isinstance(rate.get("formula"), str):
            violations.append(f"reaction '{reaction_name}' expr rate needs a 'formula' string")
            return None
        return CustomRate(parse(rate["formula"], species_names, param_names))
    violations.append(f"reaction '{reaction_name}' has unknown rate type {kind!r}")
    return None


def network_document(network: ReactionNetwork) -> dict:
    """Inverse of load_model."""
    def counts(mapping):
        return {name: int(c) for name, c in mapping.items()}

    reactions = []
    for r in network.reactions:
        if r.is_mass_action:
            rate = {"type": MASS_ACTION, "kappa": r.rate.kappa.text}
        else:
            rate = {"type": CUSTOM, "formula": r.rate.formula.text}
        reactions.append({"name": r.name, "reactants": counts(r.reactants), "products": counts(r.products), "rate": rate})
    return {
        "species": [{"name": s.name, "initial": _plain_number(s.initial)} for s in network.species],
        "reactions": reactions,
        "parameters": {k: _plain_number(v) for k, v in network.parameters.items()},
        "observables": {k: e.text for k, e in network.observables.items()},
    }


def _plain_number(value):
    value = float(value)
    return int(value) if value.is_integer() and abs(value) < 2**53 else value


# --- Operations ---

def stoichiometry(n: ReactionNetwork) -> np.ndarray:
    """Integer matrix whose column k is products minus reactants of reaction k."""
    return n.product_matrix - n.reactant_matrix


def guard_state(states):
    """Clamp tiny negative coordinates to zero; refuse anything below tolerance."""
    states = np.asarray(states, dtype=float)
    if not np.any(states < 0):
        return states
    scale = np.maximum(1.0, np.max(np.abs(states), axis=-1, keepdims=True))
    if np.any(states < -NEGATIVE_STATE_TOLERANCE * scale):
        worst = float(np.min(states))
        raise NumericError(f"state coordinate {worst!r} is negative beyond tolerance")
    return np.maximum(states, 0.0)


def propensities(n: ReactionNetwork, states, params) -> np.ndarray:
    """All propensities for a batch: states (..., S), params (P,) or (..., P) -> (..., K)."""
    states = np.asarray(states, dtype=float)
    params = np.asarray(params, dtype=float)
    guarded = guard_state(states) if n.custom_mask.any() else states
    columns = []
    for k, e in enumerate(n.rate_expressions):
        columns.append(e.value(guarded if n.custom_mask[k] else states, params))
    rates = np.stack(columns, axis=-1)
    if np.any(rates < 0):
        k = int(np.argwhere(rates < 0)[0][-1])
        raise NumericDomainError(f"reaction '{n.reactions[k].name}' has a negative propensity")
    return rates


def propensity(n: ReactionNetwork, k: int, state, theta) -> float:
    return float(propensities(n, np.asarray(state, dtype=float)[None, :], theta)[0, k])


def propensity_gradients(n: ReactionNetwork, reactions: Sequence[int], states, params, wrt: Sequence[str]):
    """Values and tangents of selected propensities.

    Returns ``(values, tangents)`` with shapes ``(len(reactions), ...)`` and
    ``(len(reactions), len(wrt), ...)``.
    """
    states = guard_state(states) if n.custom_mask.any() else np.asarray(states, dtype=float)
    values, tangents = [], []
    for k in reactions:
        v, t = n.rate_expressions[k].dual(states, params, wrt)
        values.append(v)
        tangents.append(t)
    batch = np.broadcast_shapes(np.shape(states)[:-1], np.shape(params)[:-1])
    if not values:
        return np.zeros((0,) + batch), np.zeros((0, len(wrt)) + batch)
    return np.stack(values), np.stack(tangents)


def propensity_derivative(n: ReactionNetwork, k: int, state, theta, wrt: str) -> float:
    _, t = propensity_gradients(n, [k], np.asarray(state, dtype=float), np.asarray(theta, dtype=float), [wrt])
    return float(t[0, 0])


def _observable(n, name):
    try:
        return n.observables[name]
    except KeyError:
        raise UnknownIdentifierError(name) from None


def observable_eval(n: ReactionNetwork, name: str, state, theta):
    e = _observable(n, name)
    v = e.value(np.asarray(state, dtype=float), np.asarray(theta, dtype=float))
    return float(v) if np.ndim(v) == 0 else v


def observable_gradient(n: ReactionNetwork, name: str, state, theta, continuous: Sequence[str]):
    """Gradient over the named continuous coordinates, shape ``(len(continuous), ...)``."""
    e = _observable(n, name)
    for s in continuous:
        if s not in n.species_names:
            raise UnknownIdentifierError(s)
    _, t = e.dual(np.asarray(state, dtype=float), np.asarray(theta, dtype=float), tuple(continuous))
    return t


def with_parameters(n: ReactionNetwork, overrides: Mapping[str, float]) -> ReactionNetwork:
    params = dict(n.parameters)
    for name, value in overrides.items():
        if name not in params:
            raise UnknownIdentifierError(name)
        params[name] = float(value)
    return replace(n, parameters=params)
