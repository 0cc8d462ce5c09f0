# tests/test_routes.py
import pytest
from fastapi.testclient import TestClient

from app.main import app
from app.routes.powerflow import get_solver
from app.services.assets import ieee33_base_loads
from app.services.connection import get_db_context
from app.services.run_registry import RunRegistry


def seed_run(db):
    registry = RunRegistry(db)
    run = registry.start_run(
        run_name="route-test", kind="train", screening="guard", seed=1,
        episodes_planned=2, output_dir="runs/route-test", config={"seed": 1},
    )
    for episode in range(2):
        registry.record_episode(run.id, {"episode": episode, "cum_reward": -1.0, "mean_q_loss": float("nan")})
    registry.record_evaluation(run.id, "sa2co", {"days": 1, "average_daily_cost": 10.0})
    registry.finish_run(run.id, "finished", training_minutes=0.5)
    return run.id


@pytest.fixture
def client(monkeypatch):
    monkeypatch.delenv("SA2CO_CONFIG", raising=False)
    get_solver.cache_clear()
    yield TestClient(app)
    get_solver.cache_clear()


def test_health(client):
    response = client.get("/health")
    assert response.status_code == 200
    assert response.json()["status"] == "healthy"


def test_flat_profile_without_load(client):
    response = client.post("/api/powerflow", json={"p_kw": [0.0] * 33, "q_kvar": [0.0] * 33})
    assert response.status_code == 200
    body = response.json()
    assert body["success"] and body["converged"]
    assert all(abs(v - 1.0) < 1e-9 for v in body["voltages"])
    assert body["violations"] == []


def test_base_case_reports_low_voltages(client, ieee33):
    p_kw, q_kvar = ieee33_base_loads(ieee33)
    response = client.post("/api/powerflow", json={"p_kw": p_kw.tolist(), "q_kvar": q_kvar.tolist()})
    assert response.status_code == 200
    body = response.json()
    assert min(range(33), key=lambda i: body["voltages"][i]) + 1 == 18
    assert body["slack_p_kw"] > p_kw.sum()
    assert {v["limit"] for v in body["violations"]} == {"lower"}
    assert 18 in [v["bus"] for v in body["violations"]]


def test_wrong_length_rejected(client):
    response = client.post("/api/powerflow", json={"p_kw": [0.0] * 5, "q_kvar": [0.0] * 5})
    assert response.status_code == 400


def test_overload_is_unprocessable(client):
    p_kw = [0.0] * 33
    p_kw[17] = 1e6
    response = client.post("/api/powerflow", json={"p_kw": p_kw, "q_kvar": [0.0] * 33})
    assert response.status_code == 422


def test_runs_listing_and_detail(client):
    assert client.get("/api/runs").json()["runs"] == []

    with get_db_context() as db:
        run_id = seed_run(db)

    listing = client.get("/api/runs").json()
    assert listing["total"] == 1
    assert listing["runs"][0]["episodes_logged"] == 2

    detail = client.get(f"/api/runs/{run_id}").json()
    assert detail["run"]["status"] == "finished"
    assert [e["episode"] for e in detail["episodes"]] == [0, 1]
    assert detail["evaluations"][0]["method"] == "sa2co"

    assert client.get("/api/runs/9999").status_code == 404
    assert client.get("/api/runs?limit=0").status_code == 422


