"""End-to-end runs on the shipped example systems."""
import pytest

from app.models import RunConfig
from app.services.pipeline import apply_system_options, run_index, run_verify

pytestmark = pytest.mark.slow


def certify(model, **overrides):
    config = apply_system_options(model, RunConfig(**overrides))
    return run_verify(model, config)


def test_taylor_stability(load):
    outcome = certify(load("ex1"), vdeg=4)
    assert outcome.certified
    assert outcome.certificate.approx["theorem"] == "taylor-stability"
    assert outcome.certificate.approx["variant"] == "ellipsoid"


def test_taylor_passivity(load):
    outcome = certify(load("ex2"), vdeg=4)
    assert outcome.certified
    assert outcome.certificate.supply.kind == "passivity"
    assert outcome.certificate.V.degree <= 4


def test_bernstein_pendulum_stability(load):
    outcome = certify(load("pendulum"), vdeg=6)
    assert outcome.certified
    assert outcome.certificate.approx["theorem"] == "bernstein-stability"


def test_bernstein_stability_half_box(load):
    outcome = certify(load("ex4"), mode="stability", vdeg=4)
    assert outcome.certified


def test_index_vanishes_once_unstable_equilibrium_is_inside(load):
    # x1 = -1, u1 = 0 is an equilibrium with y1 = -2, so any valid rho is <= 0 there
    outcome = run_index(load("motivational"), RunConfig(mode="ofp", radius=2.47))
    assert outcome.index is None or outcome.index.value <= 1e-3
