import dataclasses
from types import SimpleNamespace

import numpy as np
import pytest

from app.models import CertificateDoc
from app.services.approx import build_taylor
from app.services.cert import (
    Certificate,
    CertificateError,
    GramRecord,
    bisect_index,
    build_certificate,
    certificate_from_document,
    certificate_to_document,
    extract_index,
    gram_polynomial,
    validate,
)
from app.services.polycore import Polynomial
from app.services.sdp import SdpSolution, solve_sdp
from app.services.sos import INDEX_KEY, SosOptions, build_stability_taylor, compile_to_sdp, make_supply
from app.services.system import parse_system

LINEAR_IO = """
states x1;
inputs u1;
x1' = -x1 + u1;
y1 = x1;
region x1 in [-1, 1];
region u1 in [-1, 1];
"""


def quadratic(coeff: float) -> Polynomial:
    x = Polynomial.variable(("x1",), "x1")
    return x * x * coeff


def stability_cert(model, V, grams=()) -> Certificate:
    return Certificate(
        kind="stability",
        states=model.states,
        inputs=(),
        V=V,
        region=model.region,
        grams=list(grams),
        system=model.name,
    )


def solution(status: str, labels, y) -> SdpSolution:
    return SdpSolution(
        status=status,
        X=[],
        Z=[],
        y=np.asarray(y, dtype=float),
        dual=np.zeros(0),
        primal_objective=0.0,
        dual_objective=0.0,
        iterations=1,
        residuals={},
        free_labels=list(labels),
    )


class TestGramPolynomial:
    def test_square_of_binomial(self):
        G = np.ones((2, 2))
        poly = gram_polynomial(("x",), [(0,), (1,)], G)
        x = Polynomial.variable(("x",), "x")
        assert poly == x * x + x * 2.0 + 1.0

    def test_record_eigenvalue(self):
        record = GramRecord("s", "multiplier", ("x",), ((1,),), np.array([[-2.0]]))
        assert record.min_eig() == -2.0
        empty = GramRecord("c", "constraint", ("x",), (), np.zeros((0, 0)))
        assert empty.min_eig() == 0.0


class TestValidate:
    def test_lyapunov_function(self, stable_1d):
        report = validate(stability_cert(stable_1d, quadratic(1.0)), stable_1d, samples=200)
        assert report.valid
        assert report.storage_margin == pytest.approx(0.0, abs=1e-12)
        assert report.samples > 1

    def test_negative_storage(self, stable_1d):
        report = validate(stability_cert(stable_1d, quadratic(-1.0)), stable_1d, samples=200)
        assert report.verdict == "invalid"
        assert any("V < 0" in message for message in report.messages)

    def test_growing_system(self):
        model = parse_system("states x1; inputs ; x1' = x1; region x1 in [-1, 1];")
        report = validate(stability_cert(model, quadratic(1.0)), model, samples=200)
        assert report.verdict == "invalid"
        assert report.dissipation_margin < 0

    def test_corrupted_gram(self, stable_1d):
        x = Polynomial.variable(("x1",), "x1")
        # claims x^2 + 1 but the Gram matrix only reproduces x^2
        record = GramRecord("storage", "constraint", ("x1",), ((1,),), np.array([[1.0]]), x * x + 1.0)
        report = validate(stability_cert(stable_1d, quadratic(1.0), [record]), stable_1d, samples=50)
        assert report.residual == pytest.approx(1.0)
        assert report.verdict == "invalid"

    def test_indefinite_gram(self, stable_1d):
        record = GramRecord("s_storage_box_x1", "multiplier", ("x1",), ((1,),), np.array([[-1e-3]]))
        report = validate(stability_cert(stable_1d, quadratic(1.0), [record]), stable_1d, samples=50)
        assert report.verdict == "invalid"
        assert report.gram_min_eigs["s_storage_box_x1"] == pytest.approx(-1e-3)

    def test_nonzero_at_origin(self, stable_1d):
        report = validate(stability_cert(stable_1d, quadratic(1.0) + 0.1), stable_1d, samples=50)
        assert report.verdict == "invalid"
        assert report.v0 == pytest.approx(0.1)

    def test_passive_storage(self):
        model = parse_system(LINEAR_IO, "lowpass")
        supply = make_supply("passivity", 1, 1)
        cert = Certificate("passivity", model.states, model.inputs, quadratic(0.5), model.region, supply)
        assert validate(cert, model, samples=500).valid
        too_steep = Certificate("passivity", model.states, model.inputs, quadratic(1.0), model.region, supply)
        assert validate(too_steep, model, samples=500).verdict == "invalid"

    def test_state_mismatch(self, stable_1d):
        V = Polynomial.variable(("x9",), "x9") ** 2
        cert = Certificate("stability", ("x9",), (), V, stable_1d.region)
        with pytest.raises(CertificateError):
            validate(cert, stable_1d)

    def test_understated_remainder_is_flagged(self):
        model = parse_system("states x1; inputs ; x1' = -x1 + 2*x1^3; region x1 in [-1, 1];", "cubic")
        honest = build_taylor(model, 2).surrogate
        assert honest.f_remainders[0][(2,)] >= 2.0
        assert not solve_sdp(compile_to_sdp(build_stability_taylor(honest, model.region))).optimal

        # dropping the remainder leaves x1' = -x1, which the program certifies
        understated = dataclasses.replace(honest, f_remainders=({(2,): 0.0},))
        prob = build_stability_taylor(understated, model.region, SosOptions(vdeg=2))
        assert prob.error_symbols == ()
        sdp = compile_to_sdp(prob)
        result = solve_sdp(sdp)
        assert result.optimal
        cert = build_certificate(prob, sdp, result, "stability", model.region, model.name)
        report = validate(cert, model, samples=200)
        assert report.verdict != "valid"
        assert report.dissipation_margin < 0
        assert any("Dissipation inequality violated" in message for message in report.messages)


class TestIndex:
    def test_bisection_maximize(self):
        result = bisect_index(lambda v: v <= 0.3, low=-1.0, high=1.0, tol=1e-4)
        assert result.value == pytest.approx(0.3, abs=1e-4)
        assert result.width <= 1e-4

    def test_bisection_minimize(self):
        result = bisect_index(lambda v: v >= 2.0, low=0.0, high=10.0, tol=1e-4, maximize=False)
        assert result.value == pytest.approx(2.0, abs=1e-4)

    def test_bisection_whole_bracket(self):
        result = bisect_index(lambda v: True, low=-1.0, high=1.0)
        assert (result.value, result.width) == (1.0, 0.0)

    def test_bisection_never_feasible(self):
        with pytest.raises(CertificateError):
            bisect_index(lambda v: False, low=-1.0, high=1.0)

    def test_extract_index(self):
        prob = SimpleNamespace(objective=(INDEX_KEY, 1.0))
        result = extract_index(solution("optimal", [("V", 0), INDEX_KEY], [0.2, 0.7]), prob)
        assert result.value == pytest.approx(0.7)
        with pytest.raises(CertificateError):
            extract_index(solution("infeasible", [INDEX_KEY], [0.7]), prob)
        with pytest.raises(CertificateError):
            extract_index(solution("optimal", [INDEX_KEY], [0.7]), SimpleNamespace(objective=None))

    def test_with_index(self):
        model = parse_system(LINEAR_IO, "lowpass")
        supply = make_supply("ofp", 1, 1, rho=0.5)
        cert = Certificate("ofp", model.states, model.inputs, quadratic(0.5), model.region, supply,
                           index=0.5, index_name="rho")
        lowered = cert.with_index(0.2)
        assert lowered.supply.rho == 0.2
        assert lowered.index == 0.2
        with pytest.raises(CertificateError):
            stability_cert(model, quadratic(1.0)).with_index(0.1)


class TestDocuments:
    def test_round_trip(self):
        model = parse_system(LINEAR_IO, "lowpass")
        supply = make_supply("ofp", 1, 1, rho=0.5)
        record = GramRecord("s_dissipation_box_u1", "multiplier", ("x1", "u1"), ((1, 0), (0, 1)), np.eye(2))
        cert = Certificate("ofp", model.states, model.inputs, quadratic(0.5), model.region, supply,
                           index=0.5, index_name="rho", grams=[record], system="lowpass",
                           approx={"approx": "exact-polynomial", "order": None})
        cert.report = validate(cert, model, samples=100)

        doc = certificate_to_document(cert)
        restored = certificate_from_document(CertificateDoc.model_validate_json(doc.model_dump_json()))
        assert restored.V == cert.V
        assert restored.supply == cert.supply
        assert restored.region.box["u1"].hi == 1.0
        assert restored.grams[0].basis == record.basis
        np.testing.assert_allclose(restored.grams[0].gram, record.gram)
        assert restored.report.verdict == cert.report.verdict
        assert validate(restored, model, samples=100).verdict == cert.report.verdict

    def test_schema_version(self):
        model = parse_system(LINEAR_IO, "lowpass")
        doc = certificate_to_document(
            Certificate("passivity", model.states, model.inputs, quadratic(0.5), model.region,
                        make_supply("passivity", 1, 1))
        )
        doc.schema_version = 99
        with pytest.raises(CertificateError):
            certificate_from_document(doc)


class TestPublishedCertificates:
    def test_quartic_storage_for_motivational_system(self, load):
        model = load("motivational")
        x = Polynomial.variable(("x1",), "x1")
        V = x ** 4 * -0.4581 + x * x * 1.416
        cert = Certificate("passivity", model.states, model.inputs, V, model.region, make_supply("passivity", 1, 1))
        report = validate(cert, model, samples=10000)
        assert report.valid
        assert report.margin >= -1e-6

    def test_lower_index_keeps_margin(self):
        model = parse_system(LINEAR_IO, "lowpass")
        cert = Certificate("ofp", model.states, model.inputs, quadratic(0.5), model.region,
                           make_supply("ofp", 1, 1, rho=0.5), index=0.5, index_name="rho")
        margins = [validate(cert.with_index(rho), model, samples=300).dissipation_margin for rho in (0.5, 0.3, 0.0)]
        assert margins == sorted(margins)
