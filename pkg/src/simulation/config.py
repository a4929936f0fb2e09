"""
Simulation study configuration (JSON, schema_version 1).

Effect sizes in the grid are given on the ratio scale; scenarios store
their logarithms.
"""

import itertools
import json
import logging
import math
from pathlib import Path
from typing import Annotated, List, Literal, Optional, Union

import pydantic
from pydantic import BaseModel, ConfigDict, Field

from src.estimators.cox import Ties
from src.simulation.generator import SimScenario
from src.simulation.harness import REFERENCE_SAMPLE_FACTOR, CoverageTruth
from src.utils.errors import ConfigError
from src.utils.io import config_hash

logger = logging.getLogger(__name__)

Probability = Annotated[float, Field(gt=0, lt=1)]
Ratio = Annotated[float, Field(gt=0)]


class BaseScenarioConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    p_entry_at_baseline: float = Field(default=0.2, ge=0, lt=1)
    beta_trt_ratio: float = Field(default=0.8, gt=0)
    lambda_bh: float = Field(default=1 / 12, gt=0)
    n_rw_expected: int = Field(default=250, ge=1)
    n_trial: int = Field(default=250, ge=1)
    z2_sd: float = Field(default=0.5, gt=0)


class GridConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    truncation: List[Probability] = Field(default=[0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7], min_length=1)
    beta_entry_ratios: List[Ratio] = Field(default=[0.5, 0.8, 1.0], min_length=1)
    beta_z_ratios: List[Ratio] = Field(default=[1.0, 1.5, 2.0], min_length=1)


class SimulationConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    schema_version: Literal[1] = 1
    master_seed: int = 2024
    n_iterations: int = Field(default=1000, ge=1)
    bootstrap_resamples: Optional[int] = Field(default=None, ge=1)
    calibration_samples: Optional[int] = Field(default=None, ge=1000)
    ties: Ties = Ties.BRESLOW
    plots: bool = False
    coverage_truth: CoverageTruth = CoverageTruth.REFERENCE
    reference_sample_factor: int = Field(default=REFERENCE_SAMPLE_FACTOR, ge=1)
    base: BaseScenarioConfig = BaseScenarioConfig()
    grid: GridConfig = GridConfig()

    @property
    def hash(self) -> str:
        return config_hash(self.model_dump(mode="json"))


def _field_path(loc) -> str:
    return ".".join(str(part) for part in loc)


def parse_simulation_config(payload: dict) -> SimulationConfig:
    try:
        return SimulationConfig.model_validate(payload)
    except pydantic.ValidationError as e:
        first = e.errors()[0]
        raise ConfigError(_field_path(first["loc"]), first["msg"]) from None


def load_simulation_config(path: Union[str, Path]) -> SimulationConfig:
    path = Path(path)
    try:
        payload = json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ConfigError("", f"config file not found: {path}") from None
    except json.JSONDecodeError as e:
        raise ConfigError("", f"{path}: invalid JSON at line {e.lineno}: {e.msg}") from None
    config = parse_simulation_config(payload)
    logger.info(f"Loaded simulation config {path} ({len(scenario_grid(config))} scenarios)")
    return config


def scenario_grid(config: SimulationConfig) -> List[SimScenario]:
    """Cross product truncation x beta_entry x beta_z, in that nesting order"""
    base = config.base
    scenarios = []
    for target, entry_ratio, z_ratio in itertools.product(
        config.grid.truncation, config.grid.beta_entry_ratios, config.grid.beta_z_ratios
    ):
        scenarios.append(
            SimScenario(
                p_entry_at_baseline=base.p_entry_at_baseline,
                beta_entry=math.log(entry_ratio),
                beta_trt=math.log(base.beta_trt_ratio),
                beta_z=math.log(z_ratio),
                lambda_bh=base.lambda_bh,
                target_truncation=target,
                n_rw_expected=base.n_rw_expected,
                n_trial=base.n_trial,
                z2_sd=base.z2_sd,
            )
        )
    return scenarios
