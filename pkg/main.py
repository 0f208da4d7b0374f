from contextlib import asynccontextmanager
import logging
import os

from fastapi import FastAPI
from fastapi.middleware.cors import CORSMiddleware
import uvicorn

from app import __version__
from app.core import autodiff as ad
from app.core.config import settings
from app.api import experiments, health

@asynccontextmanager
async def lifespan(app: FastAPI):
    """Application lifespan handler."""
    # Startup
    logging.basicConfig(level=logging.DEBUG if settings.debug else logging.INFO)
    os.makedirs(settings.out_dir, exist_ok=True)
    print(f"✅ Run directory ready: {settings.out_dir}")
    ad.set_precision(settings.precision)
    print(f"✅ Numeric precision: {settings.precision}, {settings.threads} worker threads")

    yield
    # Shutdown
    from app.services.experiment_service import experiment_service
    experiment_service.close()

app = FastAPI(
    title="dfkit",
    description="Differentiable Bayesian filtering: verification suites and evaluation",
    version=__version__,
    docs_url="/docs",
    redoc_url="/redoc",
    lifespan=lifespan
)

# Add CORS middleware
app.add_middleware(
    CORSMiddleware,
    allow_origins=["*"],
    allow_credentials=True,
    allow_methods=["*"],
    allow_headers=["*"],
)

# Include routers
app.include_router(health.router, prefix="/api/v1", tags=["health"])
app.include_router(experiments.router, prefix="/api/v1", tags=["experiments"])

if __name__ == "__main__":
    uvicorn.run(
        "main:app",
        host=settings.app_host,
        port=settings.app_port,
        reload=settings.debug
    )
