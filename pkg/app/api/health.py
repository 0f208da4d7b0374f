from fastapi import APIRouter, status
from fastapi.responses import JSONResponse

from app import __version__
from app.core import autodiff as ad
from app.services.experiment_service import experiment_service
from app.utils.validators import FILTER_CHOICES

router = APIRouter()

@router.get("/health")
async def health_check():
    """Service status plus the numeric settings jobs will run with."""
    return JSONResponse(
        status_code=status.HTTP_200_OK,
        content={
            "status": "healthy",
            "message": "dfkit service is running",
            "version": __version__,
            "precision": ad.default_dtype().name,
            "filters": list(FILTER_CHOICES),
            "workers": experiment_service.workers,
        }
    )
