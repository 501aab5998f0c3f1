import math

import numpy as np
import pytest

from stopdex.expression import (ArityMismatch, BinOp, Compiled, EvaluationError,
                                ExpressionSyntaxError, Name, Neg, Num, UnknownIdentifier,
                                parse_expression, pretty)

import oracles as O


def ev(text, x=0.0, theta=0.0, **consts):
    return Compiled(text, consts)(x, theta)


@pytest.mark.parametrize("text,value", [
    ("1 + 2 * 3", 7.0),
    ("(1 + 2) * 3", 9.0),
    ("8 / 4 / 2", 1.0),
    ("10 - 4 - 3", 3.0),
    ("2 ^ 3 ^ 2", 512.0),
    ("-2 ^ 2", 4.0),
    ("2 ^ -1", 0.5),
    ("2 * -3", -6.0),
    ("1.5e1 + .5", 15.5),
    ("min(3, 1, 2) + max(1, 4)", 5.0),
    ("pow(2, 10)", 1024.0),
    ("abs(-3)", 3.0),
    ("sin(pi / 2)", 1.0),
    ("log(e)", 1.0),
])
def test_precedence_and_functions(text, value):
    assert ev(text) == pytest.approx(value, rel=1e-15)


def test_right_associative_power_tree():
    node = parse_expression("x ^ theta ^ 2")
    assert node == BinOp("^", Name("x"), BinOp("^", Name("theta"), Num(2.0)))
    assert parse_expression("-x ^ 2") == BinOp("^", Neg(Name("x")), Num(2.0))


def test_bessel_root_function_value():
    f = Compiled("coth(x) * (x * cos(x) - sin(x)) + x * sin(x)")
    assert f(2.0) == pytest.approx(O.BESSEL_ROOT_FN_AT_2, abs=1e-12)
    for r in O.BESSEL_ROOTS:
        assert abs(f(r)) <= 1e-12


def test_vectorised_over_x_and_theta():
    f = Compiled("theta * abs(sinh(x * sin(x)))")
    x = np.linspace(0.1, 6, 7)
    assert f(x, 2.0) == pytest.approx(2 * np.abs(np.sinh(x * np.sin(x))))
    assert Compiled("1")(x, 0.0).shape == x.shape
    assert f(np.ones((3, 1)), np.ones((1, 4))).shape == (3, 4)


def test_user_constants():
    f = Compiled("rho * x + d", {"rho": 0.5, "d": 1.0})
    assert f(4.0) == 3.0
    assert f.uses("x") and not f.uses("theta")
    with pytest.raises(UnknownIdentifier):
        Compiled("rho * x")


@pytest.mark.parametrize("text,pos", [
    ("1 +", 3),
    ("(1 + 2", 6),
    ("1 + * 2", 4),
    ("x $ 2", 2),
    ("2 3", 2),
    ("sin", 0),
    ("--x", 1),
])
def test_syntax_errors_report_byte_offset(text, pos):
    with pytest.raises(ExpressionSyntaxError) as ei:
        parse_expression(text)
    assert ei.value.position == pos
    assert f"at byte {pos}" in str(ei.value)


def test_byte_offset_counts_utf8():
    # a no-break space is whitespace but two bytes long
    with pytest.raises(ExpressionSyntaxError) as ei:
        parse_expression("x\u00a0+ $")
    assert ei.value.position == 5
    with pytest.raises(ExpressionSyntaxError) as ei:
        parse_expression("1+\u00e9")
    assert ei.value.position == 2


def test_expected_tokens_listed():
    with pytest.raises(ExpressionSyntaxError) as ei:
        parse_expression("(x")
    assert ei.value.expected == ("')'",)


def test_unknown_names_and_arity():
    with pytest.raises(UnknownIdentifier) as ei:
        parse_expression("x + y")
    assert ei.value.position == 4
    with pytest.raises(UnknownIdentifier):
        parse_expression("gamma(x)")
    with pytest.raises(ArityMismatch):
        parse_expression("sin(x, theta)")
    with pytest.raises(ArityMismatch):
        parse_expression("max(x)")
    with pytest.raises(ArityMismatch):
        parse_expression("pow(x)")


@pytest.mark.parametrize("text", ["1 / x", "log(x - 1)", "sqrt(x - 2)", "coth(x)", "x ^ -1",
                                  "(x - 2) ^ 0.5"])
def test_domain_errors(text):
    with pytest.raises(EvaluationError):
        ev(text, x=np.array([1.0, 0.0, 1.0]))


def test_negative_base_integer_power():
    assert ev("x ^ 3", x=-2.0) == -8.0


def test_pretty_round_trip():
    for text in ("theta * abs(sinh(x * sin(x)))", "-x ^ 2 ^ 3 / (1 - theta)", "max(x, 1, -theta)",
                 "coth(x) * (x * cos(x) - sin(x)) + x * sin(x)", "1e-3 * x - 2.5"):
        tree = parse_expression(text)
        assert parse_expression(pretty(tree)) == tree
        assert Compiled(pretty(tree))(1.3, 0.7) == pytest.approx(Compiled(text)(1.3, 0.7), rel=1e-15)


def test_constants_pi_and_e():
    assert ev("pi") == math.pi and ev("e") == math.e
