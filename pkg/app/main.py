"""Main FastAPI application for Passicert."""
import logging
from contextlib import asynccontextmanager
from datetime import datetime, timezone

from fastapi import FastAPI

from app.config import settings
from app.routers import api

logging.basicConfig(level=logging.DEBUG if settings.debug else logging.INFO)
logger = logging.getLogger(__name__)


@asynccontextmanager
async def lifespan(app: FastAPI):
    """Application lifespan - startup and shutdown."""
    logger.info(f"Starting Passicert (systems in {settings.systems_dir})...")
    yield
    logger.info("Shutting down Passicert...")


app = FastAPI(
    title="Passicert",
    description="Local stability, dissipativity and passivity certificates via sum-of-squares programs",
    version="1.0.0",
    lifespan=lifespan,
)

app.include_router(api.router)


@app.get("/health")
async def health_check():
    """Health check endpoint."""
    return {"status": "healthy", "timestamp": datetime.now(timezone.utc).isoformat()}
