"""Provenance block attached to every report"""

import hashlib
import platform
from pathlib import Path
from typing import Any, Dict, Optional, Union

import numpy as np
import pandas as pd
import pydantic
import scipy
from pydantic import BaseModel

from src import __version__
from src.utils.io import config_hash


class Provenance(BaseModel):
    seed: int
    config_hash: str
    versions: Dict[str, str]
    inputs: Dict[str, str] = {}


def package_versions() -> Dict[str, str]:
    return {
        "python": platform.python_version(),
        "numpy": np.__version__,
        "scipy": scipy.__version__,
        "pandas": pd.__version__,
        "pydantic": pydantic.VERSION,
        "truncsurv": __version__,
    }


def file_digest(path: Union[str, Path]) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def build_provenance(seed: int, config: Any, inputs: Optional[Dict[str, Union[str, Path]]] = None) -> Provenance:
    """`inputs` maps a role (e.g. "truncated") to a file whose SHA-256 is recorded"""
    return Provenance(
        seed=seed,
        config_hash=config_hash(config),
        versions=package_versions(),
        inputs={role: file_digest(path) for role, path in (inputs or {}).items()},
    )
