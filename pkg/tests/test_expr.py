# tests/test_expr.py

import numpy as np
import pytest

from errors import ExpressionSyntaxError, NumericDomainError, UnknownIdentifierError, ValidationError
from expr import EvalContext, derivative_eval, evaluate, gradient_eval, parse

approx = pytest.approx

SPECIES = ["z1", "z2"]
PARAMS = ["theta1", "theta2", "theta3", "theta4"]
THETA = [1.0, 0.01, 1.0, 0.1]

SHIPPED_FORMULAS = [
    "20*0.5/(1+theta1*z2)",
    "theta2*z1",
    "theta3*z1",
    "theta4*z2",
    "exp(2/3*log(theta4))*(1-z1)",
    "z1*z2^2/(theta3+z1)",
    "theta1*z1*(theta4-z2)^3 - z2^-1",
]


def at(z1, z2, theta=THETA):
    return EvalContext.of([z1, z2], theta)


def central_difference(e, ctx, wrt, h):
    state, params = ctx.state.copy(), ctx.params.copy()
    if wrt in SPECIES:
        i = SPECIES.index(wrt)
        up, down = state.copy(), state.copy()
        up[i] += h
        down[i] -= h
        return (evaluate(e, EvalContext.of(up, params)) - evaluate(e, EvalContext.of(down, params))) / (2 * h)
    j = PARAMS.index(wrt)
    up, down = params.copy(), params.copy()
    up[j] += h
    down[j] -= h
    return (evaluate(e, EvalContext.of(state, up)) - evaluate(e, EvalContext.of(state, down))) / (2 * h)


# --- Test Scenarios ---

def test_parse_binds_declared_symbols():
    """A product of a parameter and a species parses to a two-level tree."""
    e = parse("theta2*z1", SPECIES, PARAMS)
    assert e.depth == 2
    assert e.symbols == {"theta2", "z1"}
    assert e.depends_on("z1") and not e.depends_on("z2")


def test_parse_hill_term():
    e = parse("20*0.5/(1+theta1*z2)", SPECIES, PARAMS)
    assert e.depends_on("theta1")
    assert e.depends_on("z2")


def test_parse_unknown_identifier():
    """Undeclared names are refused at bind time and named in the error."""
    with pytest.raises(UnknownIdentifierError) as info:
        parse("theta5*z1", SPECIES, PARAMS)
    assert info.value.symbol == "theta5"
    assert info.value.offset == 0
    assert "theta5" in str(info.value)


def test_parse_unknown_function():
    with pytest.raises(UnknownIdentifierError) as info:
        parse("sqrt(z1)", SPECIES, PARAMS)
    assert info.value.symbol == "sqrt"


@pytest.mark.parametrize("text", ["", "   ", "theta1 * (z1 +", "2^1.5", "z1 ** 2", "exp(z1, z2)", "min(z1)"])
def test_parse_syntax_errors(text):
    """Malformed text raises with a byte offset into the source."""
    with pytest.raises(ExpressionSyntaxError) as info:
        parse(text, SPECIES, PARAMS)
    assert info.value.offset >= 0
    assert "byte" in str(info.value)


def test_species_and_parameter_names_must_not_clash():
    with pytest.raises(ValidationError):
        parse("x", ["x"], ["x"])


def test_names_are_case_sensitive():
    with pytest.raises(UnknownIdentifierError):
        parse("Z1", SPECIES, PARAMS)


def test_evaluate_examples():
    assert evaluate(parse("theta2*z1", SPECIES, PARAMS), at(5, 0)) == approx(0.05)
    assert evaluate(parse("20*0.5/(1+theta1*z2)", SPECIES, PARAMS), at(0, 0)) == approx(10.0)
    assert evaluate(parse("z1 - z1", SPECIES, PARAMS), at(3.7, 1.2)) == 0.0


@pytest.mark.parametrize("text, expected", [
    ("2+3*4^2", 50.0),
    ("-2^2", -4.0),
    ("8/4/2", 1.0),
    ("2-3-4", -5.0),
    ("2^-1", 0.5),
    ("--3", 3.0),
    ("(1+2)*3", 9.0),
    ("min(z1, z2, 3)", 2.0),
    ("max(z1, z2)", 4.0),
    ("exp(log(7))", 7.0),
    ("1.5e1", 15.0),
])
def test_evaluate_precedence_and_functions(text, expected):
    assert evaluate(parse(text, SPECIES, PARAMS), at(4, 2)) == approx(expected)


def test_division_by_zero_carries_position():
    e = parse("1/(z1-z1)", SPECIES, PARAMS)
    with pytest.raises(NumericDomainError) as info:
        evaluate(e, at(1, 1))
    assert info.value.position == 1


def test_log_of_non_positive_value():
    e = parse("log(z1)", SPECIES, PARAMS)
    with pytest.raises(NumericDomainError) as info:
        evaluate(e, at(0, 1))
    assert info.value.position == 0
    with pytest.raises(NumericDomainError):
        derivative_eval(e, at(-1, 1), "z1")


def test_context_length_is_checked():
    e = parse("theta2*z1", SPECIES, PARAMS)
    with pytest.raises(ValueError):
        evaluate(e, EvalContext.of([1.0], THETA))


def test_evaluate_is_referentially_transparent():
    e = parse("exp(2/3*log(theta4))*(1-z1) + z2^3", SPECIES, PARAMS)
    ctx = at(0.3, 1.7)
    assert evaluate(e, ctx) == evaluate(e, ctx)


def test_batch_evaluation_matches_single_points():
    """States of shape (n, S) give one value per row."""
    e = parse("20*0.5/(1+theta1*z2) + theta2*z1", SPECIES, PARAMS)
    states = np.array([[0, 0], [1, 2], [5, 0.5], [2, 9]], dtype=float)
    values = e.value(states, np.array(THETA))
    assert values.shape == (4,)
    for row, value in zip(states, values):
        assert value == approx(evaluate(e, EvalContext.of(row, THETA)))


def test_constant_broadcasts_to_batch_shape():
    e = parse("3.5", SPECIES, PARAMS)
    assert e.value(np.zeros((3, 2)), np.array(THETA)).shape == (3,)


def test_derivative_examples():
    assert derivative_eval(parse("theta2*z1", SPECIES, PARAMS), at(5, 0), "theta2") == approx(5.0)
    assert derivative_eval(parse("3.5", SPECIES, PARAMS), at(5, 0), "z2") == 0.0
    hill = parse("20*0.5/(1+theta1*z2)", SPECIES, PARAMS)
    assert derivative_eval(hill, at(0, 2), "theta1") == approx(-20 / 9)
    assert derivative_eval(hill, at(0, 2), "theta1") == approx(central_difference(hill, at(0, 2), "theta1", 1e-6), rel=1e-6)


def test_derivative_of_unknown_name():
    with pytest.raises(UnknownIdentifierError):
        derivative_eval(parse("theta2*z1", SPECIES, PARAMS), at(1, 1), "theta9")


def test_gradient_eval_returns_value_and_tangents():
    e = parse("theta1*z1*z2", SPECIES, PARAMS)
    value, tangents = gradient_eval(e, at(2, 3), ["z1", "z2", "theta1"])
    assert value == approx(6.0)
    assert tangents.tolist() == approx([3.0, 2.0, 6.0])


def test_min_derivative_follows_first_argument_on_ties():
    e = parse("min(z1, z2)", SPECIES, PARAMS)
    assert derivative_eval(e, at(1, 1), "z1") == 1.0
    assert derivative_eval(e, at(1, 1), "z2") == 0.0
    assert derivative_eval(e, at(2, 1), "z2") == 1.0


@pytest.mark.parametrize("text", SHIPPED_FORMULAS)
def test_derivatives_agree_with_central_differences(text):
    """Dual-number derivatives match second-order finite differences at random points."""
    e = parse(text, SPECIES, PARAMS)
    rng = np.random.default_rng(20240501)
    for _ in range(100):
        ctx = EvalContext.of(rng.uniform(0.2, 3.0, size=2), rng.uniform(0.5, 2.0, size=4))
        for wrt in SPECIES + PARAMS:
            exact = derivative_eval(e, ctx, wrt)
            scale = max(1.0, abs(exact))
            for h, tol in ((1e-3, 1e-3), (1e-4, 1e-5)):
                assert abs(exact - central_difference(e, ctx, wrt, h)) <= tol * scale


@pytest.mark.parametrize("text", SHIPPED_FORMULAS + [
    "-(z1 - theta1)^2 + max(z1, z2, 1.5) / exp(-theta2)",
    "2^-1 * z1 - (z2 - (theta1 - theta2))",
    "z1 / (z2 / theta3) * theta4",
])
def test_pretty_print_reparses_to_same_tree(text):
    e = parse(text, SPECIES, PARAMS)
    again = parse(str(e), SPECIES, PARAMS)
    assert again.root == e.root
