"""Runtime settings read from the environment (.env supported)"""

import os
from functools import lru_cache

from dotenv import load_dotenv
from pydantic import BaseModel, Field

load_dotenv()


class Settings(BaseModel):
    log_level: str = "INFO"
    max_workers: int = Field(default=1, ge=1)
    bootstrap_resamples: int = Field(default=1000, ge=1)
    harness_bootstrap_resamples: int = Field(default=200, ge=1)
    calibration_samples: int = Field(default=200_000, ge=1000)


@lru_cache(maxsize=1)
def get_settings() -> Settings:
    """Get settings from environment variables"""
    return Settings(
        log_level=os.getenv("LOG_LEVEL", "INFO").upper(),
        max_workers=int(os.getenv("MAX_WORKERS", 1)),
        bootstrap_resamples=int(os.getenv("BOOTSTRAP_RESAMPLES", 1000)),
        harness_bootstrap_resamples=int(os.getenv("HARNESS_BOOTSTRAP_RESAMPLES", 200)),
        calibration_samples=int(os.getenv("CALIBRATION_SAMPLES", 200_000)),
    )
