"""Configuration settings for Passicert."""
from pathlib import Path
from typing import Optional

from pydantic_settings import BaseSettings


class Settings(BaseSettings):
    """Application settings loaded from environment variables."""

    debug: bool = False

    # Paths
    systems_dir: Path = Path(__file__).parent.parent / "systems"

    # Interior point solver
    solver_tol: float = 1e-7
    solver_max_iter: int = 100
    max_gram_dim: int = 1000
    max_constraints: int = 20000
    infeasible_threshold: float = 1e8
    stagnation_window: int = 20

    # SOS programs
    margin_lambda: float = 1e-6
    default_vdeg: int = 4
    multiplier_degree: Optional[int] = None
    bisection_low: float = -10.0
    bisection_high: float = 10.0
    bisection_tol: float = 1e-3

    # Interval enclosures
    interval_subdivisions: int = 8
    remainder_subdivisions: int = 1
    max_cells: int = 1_000_000
    interval_inflation: float = 1e-15

    # Polynomial surrogates
    default_taylor_order: int = 5
    default_bernstein_degree: int = 6
    bernstein_error_mode: str = "lipschitz"
    bernstein_error_model: str = "anchored"
    empirical_grid: int = 64
    empirical_safety: float = 1.1

    # Certificate validation
    validation_samples: int = 10000
    seed: int = 42
    unbounded_sample_width: float = 1.0

    # Runtime
    workers: int = 0

    class Config:
        env_file = ".env"
        env_prefix = "PASSICERT_"
        extra = "ignore"


settings = Settings()
