import math

import numpy as np
import pytest

from app.services.polycore import (
    AffineMap,
    Polynomial,
    PolynomialError,
    glex_key,
    monomial_basis,
    poly_arith,
    sum_polynomials,
)

XY = ("x", "y")


def x():
    return Polynomial.variable(XY, "x")


def y():
    return Polynomial.variable(XY, "y")


class TestConstruction:
    def test_tiny_coefficients_are_purged(self):
        p = Polynomial(XY, {(1, 0): 1e-15, (0, 1): 2.0})
        assert dict(p.terms) == {(0, 1): 2.0}

    def test_rejects_wrong_length_multi_index(self):
        with pytest.raises(PolynomialError):
            Polynomial(XY, {(1,): 1.0})

    def test_rejects_duplicate_names(self):
        with pytest.raises(PolynomialError):
            Polynomial(("x", "x"))

    def test_rejects_non_finite(self):
        with pytest.raises(PolynomialError):
            Polynomial(XY, {(0, 0): math.inf})

    def test_zero_degree(self):
        assert Polynomial.zero(XY).degree == -math.inf
        assert Polynomial.zero(XY).is_zero


class TestArithmetic:
    def test_square_of_sum(self):
        p = (x() + y()) ** 2
        assert p == x() * x() + 2 * x() * y() + y() * y()
        assert p.degree == 2

    def test_cancellation_gives_zero(self):
        p = x() * y() - y() * x()
        assert p.is_zero

    def test_variable_mismatch(self):
        other = Polynomial.variable(("x", "z"), "x")
        with pytest.raises(PolynomialError):
            x() + other
        with pytest.raises(PolynomialError):
            poly_arith(x(), other, "mul")

    def test_scalar_ops(self):
        p = 3 - x() / 2
        assert p.coefficient((0, 0)) == 3.0
        assert p.coefficient((1, 0)) == -0.5

    def test_division_by_zero(self):
        with pytest.raises(PolynomialError):
            x() / 0

    def test_negative_power(self):
        with pytest.raises(PolynomialError):
            x() ** -1

    def test_sum_polynomials(self):
        total = sum_polynomials(XY, [x(), y(), x()])
        assert total == 2 * x() + y()


class TestCalculus:
    def test_diff(self):
        p = x() ** 3 * y() + 5 * y()
        assert p.diff("x") == 3 * x() ** 2 * y()
        assert p.diff("y") == x() ** 3 + 5

    def test_diff_unknown_variable(self):
        with pytest.raises(PolynomialError):
            x().diff("z")

    def test_evaluate_matches_evaluate_many(self):
        p = x() ** 4 - 2 * x() * y() ** 3 + 0.5 * y() - 7
        rng = np.random.default_rng(0)
        points = rng.uniform(-2, 2, size=(50, 2))
        many = p.evaluate_many(points)
        single = [p.evaluate(pt) for pt in points]
        np.testing.assert_allclose(many, single, rtol=1e-12, atol=1e-12)

    def test_evaluate_wrong_arity(self):
        with pytest.raises(PolynomialError):
            x().evaluate([1.0])


class TestSubstitution:
    def test_with_vars_reorders(self):
        p = x() + 2 * y()
        q = p.with_vars(("y", "x", "z"))
        assert q.vars == ("y", "x", "z")
        assert q.evaluate([1.0, 3.0, 5.0]) == pytest.approx(5.0)

    def test_with_vars_missing_variable(self):
        with pytest.raises(PolynomialError):
            (x() * y()).with_vars(("x",))

    def test_with_vars_drops_unused(self):
        assert x().with_vars(("x",)).vars == ("x",)

    def test_substitute(self):
        p = x() ** 2 + y()
        q = p.substitute({"x": y() + 1}, XY)
        assert q == y() ** 2 + 3 * y() + 1

    def test_compose_affine(self):
        p = x() ** 2 + y()
        amap = AffineMap(XY, (2.0, 1.0), (1.0, 0.0))
        q = p.compose_affine(amap)
        # p(2x + 1, y)
        assert q.almost_equal(4 * x() ** 2 + 4 * x() + 1 + y())

    def test_affine_inverse_round_trip(self):
        amap = AffineMap.to_canonical(XY, [(-1.0, 3.0), (0.0, 2.0)])
        point = np.array([2.0, 0.5])
        back = amap.inverse().apply(amap.apply(point))
        np.testing.assert_allclose(back, point)
        np.testing.assert_allclose(amap.apply([-1.0, 0.0]), [-0.5, -0.5])
        np.testing.assert_allclose(amap.apply([3.0, 2.0]), [0.5, 0.5])

    def test_affine_zero_scale(self):
        with pytest.raises(PolynomialError):
            AffineMap(XY, (0.0, 1.0), (0.0, 0.0))


class TestOrdering:
    def test_monomial_basis_count(self):
        # C(n + d, d)
        assert len(monomial_basis(XY, 3)) == 10
        assert len(monomial_basis(("a", "b", "c"), 2)) == 10
        assert monomial_basis(XY, -1) == []

    def test_graded_lex(self):
        basis = monomial_basis(XY, 2)
        assert basis == [(0, 0), (1, 0), (0, 1), (2, 0), (1, 1), (0, 2)]
        assert glex_key((1, 0)) < glex_key((0, 1)) < glex_key((2, 0))

    def test_to_string(self):
        p = x() ** 2 - 2 * y() + 1
        assert p.to_string() == "1.000000*x^2 - 2.000000*y + 1.000000"
        assert Polynomial.zero(XY).to_string() == "0"
