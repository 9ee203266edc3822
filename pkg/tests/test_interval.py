import math

import numpy as np
import pytest

from app.services.exprlang import ModelError, evaluate, parse_expr
from app.services.interval import (
    Interval,
    IntervalError,
    bound_sup_abs,
    check_differentiable,
    enclose,
    eval_interval,
    grid_sup_bound,
    icos,
    isin,
    lipschitz_bound,
)

UNIT = {"x1": Interval(-1.0, 1.0), "x2": Interval(-1.0, 1.0)}


def _sampled_range(source, box, count=4000, seed=0):
    rng = np.random.default_rng(seed)
    env = {name: rng.uniform(iv.lo, iv.hi, count) for name, iv in box.items()}
    values = np.broadcast_to(evaluate(parse_expr(source), env), (count,))
    return values.min(), values.max()


class TestInterval:
    def test_arithmetic(self):
        a = Interval(-1.0, 2.0)
        b = Interval(3.0, 4.0)
        s = a + b
        assert s.lo <= 2.0 and s.hi >= 6.0
        p = a * b
        assert p.lo <= -4.0 and p.hi >= 8.0
        assert (-a).lo == -2.0

    def test_even_power_contains_zero(self):
        sq = Interval(-2.0, 1.0) ** 2
        assert sq.lo == 0.0
        assert sq.hi >= 4.0

    def test_division_by_zero_interval(self):
        with pytest.raises(IntervalError):
            Interval(1.0, 2.0) / Interval(-1.0, 1.0)

    def test_empty_interval(self):
        with pytest.raises(IntervalError):
            Interval(1.0, 0.0)

    def test_split(self):
        pieces = Interval(0.0, 1.0).split(4)
        assert len(pieces) == 4
        assert pieces[-1].hi == 1.0

    def test_sin_cos_extrema(self):
        lo, hi = isin((np.asarray(0.0), np.asarray(math.pi)))
        assert hi == 1.0 and lo <= 0.0
        lo, hi = icos((np.asarray(-0.5), np.asarray(0.5)))
        assert hi == 1.0
        assert lo <= math.cos(0.5)


class TestEnclosures:
    @pytest.mark.parametrize(
        "source",
        ["x1*cos(x1 + x2)", "-2*x2 - x1*cos(x1 + x2)", "sin(x1)^2 - x2^3", "exp(x1)*tanh(x2)"],
    )
    def test_enclosure_contains_samples(self, source):
        lo, hi = _sampled_range(source, UNIT)
        iv = enclose(parse_expr(source), UNIT)
        assert iv.lo <= lo and hi <= iv.hi

    def test_subdivision_tightens(self):
        e = parse_expr("x1 - x1")
        coarse = enclose(e, UNIT, subdivisions=1)
        fine = enclose(e, UNIT, subdivisions=16)
        assert fine.width < coarse.width

    def test_eval_interval_whole_box(self):
        iv = eval_interval(parse_expr("x1^2"), UNIT)
        assert iv.lo == 0.0 and iv.hi >= 1.0

    def test_unbounded_variable(self):
        with pytest.raises(IntervalError):
            enclose(parse_expr("x1 + u1"), UNIT)

    def test_sup_bound_of_remainder_derivative(self):
        # |-3cos(s) + x1 sin(s)| on the unit box is bounded by 4
        e = parse_expr("-3*cos(x1 + x2) + x1*sin(x1 + x2)")
        bound = bound_sup_abs(e, UNIT, subdivisions=1)
        assert 3.0 <= bound <= 4.0 + 1e-9


class TestLipschitz:
    def test_linear(self):
        e = parse_expr("3*x1 - 4*x2")
        assert lipschitz_bound(e, UNIT) == pytest.approx(5.0, rel=1e-9)

    def test_grid_bound_is_rigorous(self):
        e = parse_expr("x1*cos(x1 + x2)")
        bound = grid_sup_bound(e, UNIT, points_per_axis=16)
        lo, hi = _sampled_range("x1*cos(x1 + x2)", UNIT)
        assert bound >= max(abs(lo), abs(hi))

    def test_check_differentiable(self):
        check_differentiable(parse_expr("sqrt(1 + x1^2)"), UNIT)
        with pytest.raises(ModelError):
            check_differentiable(parse_expr("sqrt(x1)"), UNIT)


SOUNDNESS_SOURCES = [
    "x1*cos(x1 + x2)",
    "sin(x1)^2 - x2^3",
    "exp(x1)*tanh(x2)",
    "x1/(2 + x2^2)",
    "sqrt(1 + x1^2) - x2",
]


class TestSoundness:
    @pytest.mark.parametrize("source", SOUNDNESS_SOURCES)
    def test_random_boxes_contain_their_points(self, source):
        # 500 boxes x 200 points per expression
        e = parse_expr(source)
        rng = np.random.default_rng(2024)
        for _ in range(500):
            centers = rng.uniform(-2.0, 2.0, 2)
            widths = rng.uniform(0.0, 1.0, 2)
            box = {
                name: Interval(c - 0.5 * w, c + 0.5 * w)
                for name, c, w in zip(("x1", "x2"), centers, widths)
            }
            iv = eval_interval(e, box)
            env = {name: rng.uniform(box[name].lo, box[name].hi, 200) for name in box}
            values = np.broadcast_to(evaluate(e, env), (200,))
            assert np.all(values >= iv.lo)
            assert np.all(values <= iv.hi)

    def test_sup_of_sine_over_full_period(self):
        box = {"x1": Interval(-math.pi, math.pi)}
        assert bound_sup_abs(parse_expr("sin(x1)"), box) == pytest.approx(1.0, abs=1e-12)

    @pytest.mark.parametrize("source", SOUNDNESS_SOURCES)
    def test_refinement_never_loosens(self, source):
        e = parse_expr(source)
        bounds = [bound_sup_abs(e, UNIT, subdivisions=k) for k in (1, 2, 4, 8, 16)]
        for coarse, fine in zip(bounds, bounds[1:]):
            assert fine <= coarse + 1e-12
        lo, hi = _sampled_range(source, UNIT)
        assert bounds[-1] >= max(abs(lo), abs(hi))

    @pytest.mark.parametrize("source", SOUNDNESS_SOURCES)
    def test_lipschitz_bound_on_random_pairs(self, source):
        e = parse_expr(source)
        L = lipschitz_bound(e, UNIT)
        rng = np.random.default_rng(7)
        p = rng.uniform(-1.0, 1.0, (10000, 2))
        q = rng.uniform(-1.0, 1.0, (10000, 2))
        fp = np.broadcast_to(evaluate(e, {"x1": p[:, 0], "x2": p[:, 1]}), (10000,))
        fq = np.broadcast_to(evaluate(e, {"x1": q[:, 0], "x2": q[:, 1]}), (10000,))
        assert np.all(np.abs(fp - fq) <= L * np.linalg.norm(p - q, axis=1) + 1e-12)
