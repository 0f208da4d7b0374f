from typing import List, Literal, Optional

from fastapi import APIRouter, HTTPException, status
from pydantic import BaseModel, Field

from app.core.errors import (ConfigurationError, ContractError, DataError, DfkitError, NumericError, ShapeError,
                             UsageError)
from app.services.experiment_service import experiment_service

router = APIRouter()


class OracleCheckRequest(BaseModel):
    filter: Literal["ekf", "ukf", "mcukf", "pf", "all"] = "all"
    seed: int = 0
    steps: int = Field(default=50, ge=1)
    particles: Optional[int] = Field(default=None, ge=2)


class GradCheckRequest(BaseModel):
    tol: float = Field(default=1e-4, gt=0)
    seed: int = 0
    filters: bool = True


class EvaluateRequest(BaseModel):
    dataset: str
    checkpoint: str
    split: Literal["train", "val", "test"] = "test"
    particles: Optional[int] = Field(default=None, ge=1)
    gmm_sigma: Optional[float] = Field(default=None, gt=0)
    eval_seeds: List[int] = Field(default_factory=lambda: [1, 2])
    max_sequences: Optional[int] = Field(default=None, ge=1)


def to_http(error: DfkitError) -> HTTPException:
    """Library error -> HTTP status."""
    if isinstance(error, (UsageError, ConfigurationError, DataError)):
        code = status.HTTP_400_BAD_REQUEST
    elif isinstance(error, (NumericError, ShapeError, ContractError)):
        code = status.HTTP_422_UNPROCESSABLE_ENTITY
    else:
        code = status.HTTP_500_INTERNAL_SERVER_ERROR
    return HTTPException(status_code=code, detail=error.line())


@router.post("/oracle-check")
async def oracle_check(request: OracleCheckRequest):
    """Deviation of the filters from a closed-form Kalman filter on a random linear system."""
    try:
        return await experiment_service.oracle_check(request.filter, request.seed, request.steps, request.particles)
    except DfkitError as e:
        print(f"❌ oracle check failed: {e}")
        raise to_http(e)


@router.post("/gradcheck")
async def gradcheck(request: GradCheckRequest):
    try:
        return await experiment_service.gradcheck(request.tol, request.seed, request.filters)
    except DfkitError as e:
        print(f"❌ gradient check failed: {e}")
        raise to_http(e)


@router.post("/evaluate")
async def evaluate(request: EvaluateRequest):
    """Evaluate a trained checkpoint on a dataset split."""
    overrides = {}
    if request.particles is not None:
        overrides["sample_count_eval"] = request.particles
    if request.gmm_sigma is not None:
        overrides["gmm_sigma"] = request.gmm_sigma
    try:
        return await experiment_service.evaluate(request.dataset, request.split, request.checkpoint, overrides,
                                                 request.eval_seeds, request.max_sequences)
    except DfkitError as e:
        print(f"❌ evaluation failed: {e}")
        raise to_http(e)


@router.get("/runs")
async def list_runs():
    return {"runs": experiment_service.list_runs()}
