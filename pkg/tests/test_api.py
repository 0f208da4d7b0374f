import json

import pytest
from fastapi.testclient import TestClient

from app.api.experiments import to_http
from app.core.errors import DataError, DivergenceError, NumericError, UsageError
from app.services.experiment_service import ExperimentService
from main import app

client = TestClient(app)


def test_health_check():
    """Test the health check endpoint."""
    response = client.get("/api/v1/health")
    assert response.status_code == 200
    data = response.json()
    assert data["status"] == "healthy"
    assert "version" in data
    assert data["precision"] == "float64"
    assert "pf-m-lrn" in data["filters"]
    assert data["workers"] >= 1


def test_list_runs():
    response = client.get("/api/v1/runs")
    assert response.status_code == 200
    assert isinstance(response.json()["runs"], list)


def test_oracle_check_ekf():
    """The EKF matches the closed-form Kalman filter on a linear system."""
    response = client.post("/api/v1/oracle-check", json={"filter": "ekf", "steps": 5})
    assert response.status_code == 200
    data = response.json()
    assert data["passed"]
    assert data["reports"]["ekf"]["max_mean_dev"] < 1e-8


def test_oracle_check_rejects_unknown_filter():
    response = client.post("/api/v1/oracle-check", json={"filter": "enkf"})
    assert response.status_code == 422


def test_gradcheck_ops_only():
    response = client.post("/api/v1/gradcheck", json={"filters": False})
    assert response.status_code == 200
    data = response.json()
    assert data["passed"]
    assert "op.cholesky" in data["checks"]


def test_evaluate_missing_checkpoint(tmp_path):
    """Test evaluating with a checkpoint that does not exist."""
    response = client.post("/api/v1/evaluate", json={"dataset": str(tmp_path),
                                                     "checkpoint": str(tmp_path / "missing.dfck")})
    assert response.status_code == 400
    assert response.json()["detail"].startswith("dfkit-error[USAGE]")


def test_error_status_mapping():
    assert to_http(DataError("x")).status_code == 400
    assert to_http(NumericError("x")).status_code == 422
    assert to_http(DivergenceError("x")).status_code == 500


@pytest.mark.asyncio
async def test_service_lists_run_manifests(tmp_path):
    run = tmp_path / "a"
    run.mkdir()
    (run / "run.json").write_text(json.dumps({"command": "train", "outputs": {"checkpoint": "c.dfck"}}))
    (tmp_path / "broken").mkdir()
    (tmp_path / "broken" / "run.json").write_text("{not json")
    service = ExperimentService(workers=1)
    try:
        runs = service.list_runs(str(tmp_path))
        assert runs == [{"path": str(run), "command": "train", "outputs": {"checkpoint": "c.dfck"}}]
        result = await service.oracle_check("ukf", seed=1, steps=5, samples=None)
        assert result["passed"]
    finally:
        service.close()


@pytest.mark.asyncio
async def test_service_evaluate_reports_missing_split(tmp_path):
    service = ExperimentService(workers=1)
    checkpoint = tmp_path / "c.dfck"
    checkpoint.write_bytes(b"")
    try:
        with pytest.raises(DataError):
            await service.evaluate(str(tmp_path), "test", str(checkpoint), {}, [1])
    finally:
        service.close()


def test_usage_error_line():
    assert UsageError("bad flag").line() == "dfkit-error[USAGE]: bad flag"


@pytest.mark.asyncio
async def test_service_reports_io_failures_as_data_errors(tmp_path):
    (tmp_path / "test.dfds").mkdir()
    checkpoint = tmp_path / "run.dfck"
    checkpoint.mkdir()
    service = ExperimentService(workers=1)
    try:
        with pytest.raises(DataError):
            await service.evaluate(str(tmp_path), "test", str(checkpoint), {}, [1])
    finally:
        service.close()
