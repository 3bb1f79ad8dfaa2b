import pytest
from fastapi.testclient import TestClient

from app.main import app
from app.services import harness


@pytest.fixture
def client(db):
    return TestClient(app)


def test_root(client):
    response = client.get("/")
    assert response.status_code == 200
    assert response.json()["docs"] == "/api/docs"


def test_api_index(client):
    endpoints = client.get("/api").json()["endpoints"]
    assert endpoints["runs"] == "/api/v1/runs"


def test_list_presets(client):
    response = client.get("/api/v1/presets")
    assert response.status_code == 200
    by_name = {p["name"]: p for p in response.json()}
    assert set(by_name) == set(harness.list_presets())
    assert by_name["nccs"]["kind"] == "nccs"
    assert by_name["nccs"]["config_hash"] == harness.load_preset("nccs").config_hash


def test_enqueue_and_lookup(client):
    response = client.post("/api/v1/runs", json={"preset": "cost-floor", "hbar": [0.5]})
    assert response.status_code == 201
    record = response.json()
    assert record["status"] == "queued"
    assert record["kind"] == "cost-floor"
    expected = harness.load_preset("cost-floor").with_overrides("physics", hbar=[0.5]).config_hash
    assert record["config_hash"] == expected

    found = client.get(f"/api/v1/runs/{expected[:12]}")
    assert found.status_code == 200
    assert [r["id"] for r in found.json()] == [record["id"]]

    queued = client.get("/api/v1/runs", params={"status": "queued"})
    assert [r["id"] for r in queued.json()] == [record["id"]]
    assert client.get("/api/v1/runs", params={"status": "passed"}).json() == []


def test_unknown_preset_is_404(client):
    response = client.post("/api/v1/runs", json={"preset": "no-such-preset"})
    assert response.status_code == 404


def test_invalid_hbar_is_400(client):
    response = client.post("/api/v1/runs", json={"preset": "cost-floor", "hbar": [-0.5]})
    assert response.status_code == 400


def test_hash_lookup_errors(client):
    assert client.get("/api/v1/runs/abc").status_code == 400
    assert client.get("/api/v1/runs/0123456789ab").status_code == 404


def test_unknown_status_filter(client):
    assert client.get("/api/v1/runs", params={"status": "exploded"}).status_code == 422
