import pytest
from fastapi.testclient import TestClient

from app.main import app


@pytest.fixture
def client():
    with TestClient(app) as test_client:
        yield test_client


@pytest.fixture
def text(systems_dir):
    def _text(name: str) -> str:
        return (systems_dir / f"{name}.sys").read_text()

    return _text


class TestHealth:
    def test_health(self, client):
        response = client.get("/health")
        assert response.status_code == 200
        assert response.json()["status"] == "healthy"


class TestSystems:
    def test_parse(self, client, text):
        response = client.post("/api/systems/parse", json={"text": text("ex2"), "name": "ex2"})
        assert response.status_code == 200
        info = response.json()
        assert info["states"] == ["x1", "x2"]
        assert info["outputs"] == ["y1"]
        assert info["polynomial"] is False
        assert info["region"]["box"]["u1"] == [-1.0, 1.0]

    def test_parse_error(self, client):
        response = client.post("/api/systems/parse", json={"text": "states x1; x1' = ;"})
        assert response.status_code == 422
        assert "detail" in response.json()


class TestCertification:
    def test_verify_stable(self, client, text):
        response = client.post("/api/verify", json={"system": text("stable"), "name": "stable"})
        assert response.status_code == 200
        body = response.json()
        assert body["certified"] is True
        assert body["certificate"]["kind"] == "stability"
        assert body["surrogate"]["kind"] == "exact-polynomial"
        assert body["diagnostic"] is None

    def test_verify_unstable(self, client, text):
        response = client.post("/api/verify", json={"system": text("unstable"), "name": "unstable"})
        body = response.json()
        assert body["certified"] is False
        assert body["certificate"] is None
        assert body["diagnostic"]["system"] == "unstable"

    def test_index(self, client, text):
        response = client.post(
            "/api/index", json={"system": text("static_double"), "config": {"mode": "ifp"}}
        )
        body = response.json()
        assert body["certified"] is True
        assert body["index"] == pytest.approx(2.0, abs=1e-4)
        assert body["certificate"]["index_name"] == "nu"

    def test_index_defaults_to_ofp(self, client, text):
        response = client.post("/api/index", json={"system": text("static_unity")})
        assert response.json()["certificate"]["index_name"] == "rho"

    def test_export(self, client, text):
        response = client.post(
            "/api/export", json={"system": text("static_unity"), "config": {"mode": "ofp"}}
        )
        body = response.json()
        assert body["sdpa"].splitlines()[0] == str(body["dimensions"]["constraints"])
        assert body["dimensions"]["free_variables"] == 1

    def test_invalid_config(self, client, text):
        response = client.post("/api/verify", json={"system": text("stable"), "config": {"mode": "gain"}})
        assert response.status_code == 422

    def test_model_error(self, client, text):
        response = client.post("/api/index", json={"system": text("stable"), "config": {"mode": "ofp"}})
        assert response.status_code == 422
