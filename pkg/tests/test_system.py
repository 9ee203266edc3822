import math

import numpy as np
import pytest

from app.services.exprlang import ModelError, ParseError
from app.services.interval import Interval
from app.services.polycore import Polynomial
from app.services.system import Region, SystemModel, load_system, parse_system

EX1 = """
states x1, x2;
inputs ;
x1' = x2;
x2' = -2*x2 - x1*cos(x1 + x2);
region x1 in [-1, 1];
region x2 in [-1, 1];
"""


class TestParseSystem:
    def test_example_dimensions(self):
        model = parse_system(EX1, "ex1")
        assert (model.n, model.m, model.p) == (2, 0, 0)
        assert model.states == ("x1", "x2")
        assert model.region.is_box()

    def test_linear(self):
        model = parse_system("states x1; inputs ; x1' = -x1;")
        assert model.n == 1
        assert model.polynomial_parts() is not None
        assert model.region.unbounded() == ["x1"]

    def test_outputs_and_options(self):
        model = parse_system(
            "states x1; inputs u1; x1' = -x1 + u1; y1 = x1; option mode = passivity;"
        )
        assert model.outputs == ("y1",)
        assert model.options_dict == {"mode": "passivity"}

    def test_static_system(self):
        model = parse_system("states ; inputs u1; y1 = 2*u1; region u1 in [-1, 1];")
        assert (model.n, model.m, model.p) == (0, 1, 1)

    def test_missing_equation(self):
        with pytest.raises(ModelError, match="Dimension mismatch"):
            parse_system("states x1, x2; inputs ; x1' = x2;")

    def test_undeclared_variable(self):
        with pytest.raises(ModelError):
            parse_system("states x1; inputs ; x1' = -x1 + z;")

    def test_origin_not_equilibrium(self):
        with pytest.raises(ModelError, match="equilibrium"):
            parse_system("states x1; inputs ; x1' = 1 - x1;")

    def test_output_gap(self):
        with pytest.raises(ModelError):
            parse_system("states x1; inputs ; x1' = -x1; y2 = x1;")

    def test_interval_must_contain_origin(self):
        with pytest.raises(ModelError):
            parse_system("states x1; inputs ; x1' = -x1; region x1 in [0.5, 1];")

    def test_non_polynomial_region(self):
        with pytest.raises(ModelError):
            parse_system("states x1; inputs ; x1' = -x1; region ineq sin(x1) - 1 <= 0;")

    def test_syntax_error(self):
        with pytest.raises(ParseError):
            parse_system("states x1; inputs ; x1' = -x1 +;")

    def test_load_missing_file(self, tmp_path):
        with pytest.raises(ModelError):
            load_system(tmp_path / "nope.sys")

    @pytest.mark.parametrize(
        "name", ["ex1", "ex2", "ex4", "pendulum", "motivational", "stable", "unstable", "static_unity", "static_double"]
    )
    def test_shipped_systems_parse(self, load, name):
        model = load(name)
        assert model.name == name


class TestRegion:
    def test_implied_bounds_from_ball(self, load):
        region = load("motivational").region
        assert not region.is_box()
        assert region.bounding_box()["x1"] == Interval(-1.0, 1.0)
        assert region.radius(["x1"]) == pytest.approx(1.0)

    def test_constraint_polys(self):
        region = Region(("x", "u"), {"x": Interval(-1.0, 2.0)})
        (name, g), = region.constraint_polys()
        x = Polynomial.variable(("x", "u"), "x")
        assert name == "box_x"
        assert g == (x + 1) * (x - 2)
        assert region.constraint_polys(["u"]) == []

    def test_contains(self):
        model = parse_system(EX1)
        points = np.array([[0.0, 0.0], [1.0, -1.0], [1.5, 0.0]])
        assert model.region.contains(points).tolist() == [True, True, False]

    def test_with_radius_keeps_inputs(self, load):
        model = load("ex2").with_radius(0.5)
        region = model.region
        assert set(region.box) == {"u1"}
        assert len(region.extra_ineqs) == 1
        assert region.radius(model.states) == pytest.approx(0.5)
        with pytest.raises(ModelError):
            region.with_radius(model.states, 0.0)

    def test_unbounded_radius(self):
        region = Region(("x",), {})
        assert math.isinf(region.radius())

    def test_canonical_map_requires_box(self, load):
        with pytest.raises(ModelError):
            load("motivational").region.canonical_map()
        amap = load("pendulum").region.canonical_map()
        np.testing.assert_allclose(amap.apply([0.5, -0.5]), [0.5, -0.5])


class TestSystemModel:
    def test_without_inputs(self, load):
        model = load("ex2").without_inputs()
        assert model.inputs == ()
        assert model.region.variables == ("x1", "x2")
        f, h = model.evaluate(np.array([[0.0, 0.3]]))
        assert f[0, 0] == pytest.approx(0.3)
        assert h[0, 0] == pytest.approx(0.3)

    def test_evaluate(self, load):
        model = load("ex2")
        f, h = model.evaluate(np.array([[0.5, 0.2, 0.1]]))
        expected = -2 * 0.2 - 0.5 * math.cos(0.7) + 0.1
        assert f.shape == (1, 2) and h.shape == (1, 1)
        assert f[0, 1] == pytest.approx(expected)

    def test_describe(self, load):
        info = load("motivational").describe()
        assert info["inputs"] == ["u1"]
        assert info["region"]["box"] == {"u1": [-1.0, 1.0]}

    def test_is_frozen(self, load):
        model = load("stable")
        assert isinstance(model, SystemModel)
        with pytest.raises(Exception):
            model.name = "other"
