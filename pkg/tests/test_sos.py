import numpy as np
import pytest

from app.services.approx import build_bernstein, build_taylor, detect_polynomial
from app.services.polycore import Polynomial
from app.services.sdp import asymmetry, solve_sdp
from app.services.sos import (
    INDEX_KEY,
    AffinePoly,
    DecisionPoly,
    SosError,
    SosConstraint,
    SosOptions,
    SosProblem,
    build_dissipativity_taylor,
    build_stability_bernstein,
    build_stability_taylor,
    compile_to_sdp,
    decision_values,
    format_key,
    gram_basis,
    make_supply,
)
from app.services.system import parse_system

SINE = "states x1; inputs ; x1' = -sin(x1); region x1 in [-1, 1];"


class TestAffinePoly:
    def test_product_with_constant(self):
        x = Polynomial.variable(("x",), "x")
        a = AffinePoly.term(("V", 0), x * x)
        b = AffinePoly.constant(x + 1.0)
        c = a * b
        assert c.keys() == [("V", 0)]
        assert c.part(("V", 0)) == x ** 3 + x * x

    def test_product_of_decisions_is_rejected(self):
        x = Polynomial.variable(("x",), "x")
        a = AffinePoly.term(("V", 0), x)
        with pytest.raises(SosError):
            a * a

    def test_evaluate_decisions(self):
        x = Polynomial.variable(("x",), "x")
        a = AffinePoly.term(("V", 0), x * x) + AffinePoly.constant(x)
        assert a.evaluate_decisions({("V", 0): 3.0}) == x * x * 3.0 + x
        with pytest.raises(SosError):
            a.evaluate_decisions({})

    def test_format_key(self):
        assert format_key(("V", 3)) == "V[3]"


class TestDecisionPoly:
    def test_sos_keys_and_degree(self):
        d = DecisionPoly("s", ("x",), ((0,), (1,)), sos=True)
        assert d.keys() == [("s", 0, 0), ("s", 0, 1), ("s", 1, 1)]
        assert d.degree == 2
        x = Polynomial.variable(("x",), "x")
        values = {("s", 0, 0): 1.0, ("s", 0, 1): 1.0, ("s", 1, 1): 1.0}
        assert d.evaluate(values) == x * x + x * 2.0 + 1.0
        np.testing.assert_allclose(d.gram(values), np.ones((2, 2)))

    def test_free_keys(self):
        d = DecisionPoly("V", ("x",), ((2,), (3,)), sos=False)
        assert d.keys() == [("V", 0), ("V", 1)]
        assert d.degree == 3


class TestSupplyRates:
    def test_affine_matches_evaluate(self):
        supply = make_supply("qsr", 1, 1, Q=[[-1.0]], S=[[0.5]], R=[[2.0]])
        w = supply.affine(("u1",), ("y1",)).constant_part()
        rng = np.random.default_rng(2)
        u = rng.uniform(-1, 1, size=(20, 1))
        y = rng.uniform(-1, 1, size=(20, 1))
        expected = w.evaluate_many(np.hstack([u, y]))
        np.testing.assert_allclose(supply.evaluate(u, y), expected, atol=1e-12)

    def test_index_becomes_decision(self):
        supply = make_supply("ofp", 1, 1)
        assert supply.index == "rho"
        w = supply.affine(("u1",), ("y1",))
        y = Polynomial.variable(("u1", "y1"), "y1")
        assert w.part(INDEX_KEY) == -(y * y)
        with pytest.raises(SosError):
            supply.evaluate(np.ones((1, 1)), np.ones((1, 1)))
        np.testing.assert_allclose(supply.evaluate(np.ones((1, 1)), np.ones((1, 1)), index_value=0.25), [0.75])

    def test_l2gain_minimizes(self):
        supply = make_supply("l2gain", 1, 1)
        assert supply.index == "gamma2"
        assert supply.index_sign == -1.0
        fixed = make_supply("l2gain", 1, 1, gamma=2.0)
        assert fixed.gamma2 == pytest.approx(4.0)
        assert fixed.index is None

    def test_with_index(self):
        supply = make_supply("ifp", 2, 2).with_index(0.3)
        assert supply.nu == 0.3
        assert supply.index is None

    @pytest.mark.parametrize(
        "kind,m,p,params",
        [
            ("passivity", 1, 2, {}),
            ("ofp", 0, 0, {}),
            ("if-ofp", 1, 1, {"rho": 0.1}),
            ("qsr", 2, 2, {"Q": [[0.0, 1.0], [0.0, 0.0]]}),
            ("qsr", 1, 1, {"S": [[1.0, 2.0]]}),
            ("custom", 1, 1, {}),
            ("bogus", 1, 1, {}),
        ],
    )
    def test_invalid(self, kind, m, p, params):
        with pytest.raises(SosError):
            make_supply(kind, m, p, **params)


class TestGramBasis:
    def test_single_square(self):
        assert gram_basis([(2,)], ("x",), ()) == [(1,)]

    def test_full_quadratic(self):
        assert gram_basis([(2,), (1,), (0,)], ("x",), ()) == [(0,), (1,)]

    def test_error_layers(self):
        # x^2 + x*r + r^2: the odd layer adds nothing, each even layer its own half
        support = [(2, 0), (1, 1), (0, 2)]
        assert gram_basis(support, ("x", "r"), ("r",)) == [(1, 0), (0, 1)]


class TestTaylorPrograms:
    def test_linear_stability(self, stable_1d):
        approx = detect_polynomial(stable_1d)
        prob = build_stability_taylor(approx.surrogate, stable_1d.region, SosOptions(vdeg=2))
        assert prob.theorem == "taylor-stability"
        assert prob.error_symbols == ()
        assert prob.storage.basis == ((2,),)
        assert prob.multiplier_counts() == {}
        assert [c.name for c in prob.constraints] == ["storage", "dissipation"]
        assert "constraint dissipation" in prob.dump()

        sdp = compile_to_sdp(prob)
        assert sdp.m == 2
        assert [b.size for b in sdp.blocks] == [1, 1]
        assert sdp.n_free == 1
        assert asymmetry(sdp) == 0.0

        solution = solve_sdp(sdp)
        assert solution.optimal
        values = decision_values(prob, sdp, solution.X, solution.y)
        assert values[("V", 0)] > 0.0

    def test_unstable_is_infeasible(self):
        model = parse_system("states x1; inputs ; x1' = x1; region x1 in [-1, 1];")
        approx = detect_polynomial(model)
        prob = build_stability_taylor(approx.surrogate, model.region, SosOptions(vdeg=2))
        assert not solve_sdp(compile_to_sdp(prob)).optimal

    def test_storage_degree(self, stable_1d):
        approx = detect_polynomial(stable_1d)
        with pytest.raises(SosError):
            build_stability_taylor(approx.surrogate, stable_1d.region, SosOptions(vdeg=1))

    def test_stability_needs_no_inputs(self, load):
        model = load("motivational")
        approx = detect_polynomial(model)
        with pytest.raises(SosError):
            build_stability_taylor(approx.surrogate, model.region)

    def test_supply_dimension_mismatch(self, load):
        model = load("motivational")
        approx = detect_polynomial(model)
        with pytest.raises(SosError):
            build_dissipativity_taylor(approx.surrogate, model.region, make_supply("passivity", 2, 2))

    def test_error_multipliers(self, load):
        model = load("ex1")
        approx = build_taylor(model, 7)
        ball = build_stability_taylor(approx.surrogate, model.region, variant="ellipsoid")
        box = build_stability_taylor(approx.surrogate, model.region, variant="box")
        # only f2 carries remainder terms: one symbol per x1^i x2^(7-i)
        assert len(ball.error_symbols) == 8
        assert all(s.startswith("r2_") for s in ball.error_symbols)
        assert ball.multiplier_counts()["dissipation.error"] == 1
        assert box.multiplier_counts()["dissipation.error"] == 16
        assert box.decision("s_dissipation_r2_0_7_up").sos

    def test_index_objective(self, load):
        model = load("motivational")
        approx = detect_polynomial(model)
        prob = build_dissipativity_taylor(approx.surrogate, model.region, make_supply("ofp", 1, 1))
        assert prob.objective == (INDEX_KEY, 1.0)
        sdp = compile_to_sdp(prob)
        assert INDEX_KEY in sdp.free_labels
        assert sdp.c[sdp.free_labels.index(INDEX_KEY)] == 1.0


class TestBernsteinPrograms:
    def test_box_error_model(self):
        model = parse_system(SINE, "sine")
        approx = build_bernstein(model, 2)
        prob = build_stability_bernstein(approx.surrogate, SosOptions(), error_model="box")
        assert prob.error_symbols == ("eps1",)
        assert prob.multiplier_counts() == {
            "storage.region": 2,
            "dissipation.error": 2,
            "dissipation.region": 2,
        }
        assert prob.error_bounds["eps1"] == approx.surrogate.f_bounds[0]

    def test_anchored_error_model(self):
        model = parse_system(SINE, "sine")
        approx = build_bernstein(model, 2)
        prob = build_stability_bernstein(approx.surrogate, SosOptions(), error_model="anchored")
        assert prob.multiplier_counts()["dissipation.error"] == 1
        assert prob.decision("s_dissipation_eps1_cone").basis[0] == (0,)

    def test_affine_dynamics_have_no_error_symbols(self, stable_1d):
        approx = build_bernstein(stable_1d, 2)
        prob = build_stability_bernstein(approx.surrogate)
        assert prob.error_symbols == ()
        assert prob.theorem == "bernstein-stability"

    def test_unknown_error_model(self, stable_1d):
        approx = build_bernstein(stable_1d, 2)
        with pytest.raises(SosError):
            build_stability_bernstein(approx.surrogate, error_model="wedge")


def bare_problem(poly: Polynomial) -> SosProblem:
    return SosProblem(
        indeterminates=poly.vars,
        states=poly.vars,
        inputs=(),
        error_symbols=(),
        decisions=[],
        constraints=[SosConstraint("target", AffinePoly.constant(poly), "storage")],
        storage=None,
        storage_poly=None,
        supply=None,
        objective=None,
        theorem="check",
        variant="none",
    )


class TestConstraintSemantics:
    def test_constraints_are_affine_in_decisions(self, load):
        model = load("ex1")
        approx = build_taylor(model, 3)
        prob = build_stability_taylor(approx.surrogate, model.region, SosOptions(vdeg=2))
        rng = np.random.default_rng(17)
        for constraint in prob.constraints:
            keys = constraint.poly.keys()
            assert keys
            first = {key: rng.normal() for key in keys}
            second = {key: rng.normal() for key in keys}
            for t in (0.3, 2.5):
                mixed = {key: t * first[key] + (1 - t) * second[key] for key in keys}
                lhs = constraint.poly.evaluate_decisions(mixed)
                rhs = constraint.poly.evaluate_decisions(first) * t + constraint.poly.evaluate_decisions(second) * (1 - t)
                assert lhs.almost_equal(rhs, tol=1e-9)

    @pytest.mark.parametrize("source, order", [
        ("states x1; inputs ; x1' = -x1; region x1 in [-1, 1];", None),
        ("states x1; inputs ; x1' = -x1 - x1^3; region x1 in [-1, 1];", None),
        (SINE, 3),
    ])
    def test_solved_constraints_are_nonnegative(self, source, order):
        model = parse_system(source, "scalar")
        approx = detect_polynomial(model) if order is None else build_taylor(model, order)
        prob = build_stability_taylor(approx.surrogate, model.region, SosOptions(vdeg=4), variant="box")
        if order is not None:
            assert prob.error_symbols
        sdp = compile_to_sdp(prob)
        solution = solve_sdp(sdp)
        assert solution.optimal
        values = decision_values(prob, sdp, solution.X, solution.y)
        rng = np.random.default_rng(19)
        bounds = [prob.error_bounds.get(v, 1.0) for v in prob.indeterminates]
        points = rng.uniform(-1.0, 1.0, size=(1000, len(bounds))) * np.asarray(bounds)
        for constraint in prob.constraints:
            poly = constraint.poly.evaluate_decisions(values)
            assert poly.vars == prob.indeterminates
            assert poly.evaluate_many(points).min() >= -1e-6

    @pytest.mark.parametrize("exponent", [1, 3])
    def test_odd_polynomial_is_not_sos(self, exponent):
        x = Polynomial.variable(("x",), "x")
        sdp = compile_to_sdp(bare_problem(x ** exponent))
        assert sdp.infeasible_rows
        solution = solve_sdp(sdp)
        assert solution.status == "infeasible"
        assert not solution.optimal

    def test_even_square_is_sos(self):
        x = Polynomial.variable(("x",), "x")
        sdp = compile_to_sdp(bare_problem(x * x))
        assert not sdp.infeasible_rows
        assert solve_sdp(sdp).optimal
