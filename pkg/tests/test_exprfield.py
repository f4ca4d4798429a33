import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pmcspheres import exprfield
from pmcspheres.exprfield import DomainError, ParseError, VariableRangeError, eval_jet, parse
from pmcspheres.taylor import Jet, monomials

from oracles import mp_derivative_tensor


def test_polynomial_value():
    e = parse("x1^2 + x2^2", 2)
    assert float(e(np.array([1.0, 2.0]))) == 5.0


def test_syntax_error_offset():
    with pytest.raises(ParseError) as info:
        parse("x1 +", 2)
    assert info.value.offset == 4


def test_offset_counts_bytes():
    # the non-ASCII character occupies two bytes in UTF-8
    with pytest.raises(ParseError) as info:
        parse("x1 + é", 2)
    assert info.value.offset == 5


def test_out_of_range_variable():
    with pytest.raises(VariableRangeError):
        parse("x3", 2)
    with pytest.raises(exprfield.ExprError):
        parse("x0 + 1", 3)


@pytest.mark.parametrize("text", ["1 +* 2", "sin x1", "x1^1.5", "(x1", "foo(x1)", "", "2..0"])
def test_malformed(text):
    with pytest.raises(exprfield.ExprError):
        parse(text, 2)


def test_quadratic_jet():
    j = eval_jet(parse("1 + x1^2 + x2^2", 2), np.zeros(2), 2)
    assert j.value == 1.0
    np.testing.assert_array_equal(j.grad, [0.0, 0.0])
    np.testing.assert_array_equal(j.hess, 2 * np.eye(2))
    assert not j.has(3) and not np.any(j.third)


def test_sine_jet():
    j = eval_jet(parse("sin(x1)", 2), np.zeros(2), 3)
    assert j.value == 0.0
    np.testing.assert_allclose(j.grad, [1.0, 0.0], atol=1e-15)
    expected = np.zeros((2, 2, 2))
    expected[0, 0, 0] = -1.0
    np.testing.assert_allclose(j.third, expected, atol=1e-15)


def test_cubic_one_variable():
    j = eval_jet(parse("x1^3", 1), np.array([1.0]), 3)
    assert (j.value, j.grad[0], j.hess[0, 0], j.third[0, 0, 0]) == (1.0, 3.0, 6.0, 6.0)


@pytest.mark.parametrize("text", ["log(x1)", "sqrt(x1 - 1)", "1 / x1", "x1^(-2)"])
def test_domain_error_names_subexpression(text):
    with pytest.raises(DomainError) as info:
        eval_jet(parse(text, 2), np.zeros(2), 1)
    assert info.value.subexpr is not None
    assert "x1" in str(info.value)


def test_precedence_and_unary_minus():
    e = parse("-x1^2 + 2*3^2 - 8/4/2", 2)
    assert float(e(np.array([3.0, 0.0]))) == -9 + 18 - 1
    assert float(parse("1e-2 * x2", 2)(np.array([0.0, 5.0]))) == 0.05
    assert float(parse("(2^3)^2", 2)(np.zeros(2))) == 64.0
    # associativity of chained powers is ambiguous, so it is refused
    with pytest.raises(ParseError):
        parse("2^3^2", 2)


def test_symmetric_tensors_exact():
    e = parse("exp(x1*x2) * sin(x3 + x1^2) + x2^3*x3", 3)
    j = eval_jet(e, np.array([0.3, -0.2, 0.5]), 3)
    assert np.array_equal(j.hess, j.hess.T)
    for perm in [(1, 0, 2), (0, 2, 1), (2, 1, 0), (1, 2, 0), (2, 0, 1)]:
        assert np.array_equal(j.third, j.third.transpose(perm))


_ATOMS = ["x1", "x2", "x3", "0.7", "1.3"]


@st.composite
def expressions(draw, depth=3):
    if depth == 0 or draw(st.booleans()):
        return draw(st.sampled_from(_ATOMS))
    kind = draw(st.sampled_from(["+", "-", "*", "pow", "sin", "cos", "exp", "div"]))
    a = draw(expressions(depth=depth - 1))
    if kind in ("sin", "cos", "exp"):
        return f"{kind}({a})"
    if kind == "pow":
        return f"({a})^{draw(st.integers(0, 3))}"
    b = draw(expressions(depth=depth - 1))
    if kind == "div":
        return f"({a})/(2 + ({b})^2)"
    return f"({a}) {kind} ({b})"


points = st.lists(st.floats(-0.8, 0.8), min_size=3, max_size=3)


@settings(max_examples=40, deadline=None)
@given(expressions(), points)
def test_derivatives_match_high_precision(text, point):
    e = parse(text, 3)
    j = eval_jet(e, np.array(point), 3)
    for k, got in ((1, j.grad), (2, j.hess), (3, j.third)):
        ref = mp_derivative_tensor(e, point, k)
        scale = 1.0 + np.max(np.abs(ref))
        assert np.max(np.abs(got - ref)) <= 1e-10 * scale


@settings(max_examples=40, deadline=None)
@given(expressions(), points)
def test_round_trip(text, point):
    e = parse(text, 3)
    again = parse(e.to_text(), 3)
    p = np.array(point)
    assert float(again(p)) == float(e(p))


@settings(max_examples=30, deadline=None)
@given(expressions(), expressions(), st.floats(-3, 3), st.floats(-3, 3), points)
def test_linearity(t1, t2, a, b, point):
    e1, e2 = parse(t1, 3), parse(t2, 3)
    combo = parse(f"({a!r})*({t1}) + ({b!r})*({t2})", 3)
    p = np.array(point)
    j, j1, j2 = eval_jet(combo, p, 3), eval_jet(e1, p, 3), eval_jet(e2, p, 3)
    for name in ("grad", "hess", "third"):
        lhs, rhs = getattr(j, name), a * getattr(j1, name) + b * getattr(j2, name)
        assert np.max(np.abs(lhs - rhs)) <= 1e-13 * (1 + np.max(np.abs(rhs)))


def test_batched_evaluation_matches_pointwise():
    e = parse("cos(x1) * x2^2 + exp(-x2)", 2)
    rng = np.random.default_rng(3)
    pts = rng.uniform(-1, 1, size=(2, 7))
    batch = exprfield.jet(e, pts, 2)
    for k in range(7):
        single = exprfield.jet(e, pts[:, k], 2)
        np.testing.assert_array_equal(batch.derivative_tensor(2)[..., k], single.derivative_tensor(2))


def test_deterministic():
    e = parse("sin(x1)*cos(x2) + x1^5/(1 + x2^2)", 2)
    p = np.array([0.123, 0.456])
    assert eval_jet(e, p, 3).third.tobytes() == eval_jet(parse(e.text, 2), p, 3).third.tobytes()


# --------------------------------------------------------------------------
# truncated Taylor arithmetic


def test_monomial_table_size():
    assert monomials(3, 3).size == 20
    assert monomials(2, 2).size == 6


def test_jet_product_and_reciprocal():
    x = Jet.variable(0, 0.5, 1, 4)
    one = (x * x.reciprocal()).c
    np.testing.assert_allclose(one, [1, 0, 0, 0, 0], atol=1e-15)
    sq = (x * x).derivative_tensor(2)
    assert float(sq[0, 0]) == 2.0


def test_jet_power_matches_repeated_product():
    x = Jet.variable(0, 0.3, 2, 3) + Jet.variable(1, -0.1, 2, 3) * 2.0
    np.testing.assert_allclose((x ** 3).c, (x * x * x).c, rtol=1e-15, atol=1e-16)
