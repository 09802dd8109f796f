import os
from pathlib import Path
from typing import Any, Dict, List, Literal, Mapping, Optional, Union

from dotenv import dotenv_values
from loguru import logger
from pydantic import BaseModel, Field, ValidationError, field_validator, model_validator

from data_lqr_synth.certificates import WGN_SIGMA_MARGIN, NoiseBound
from data_lqr_synth.data_gen import NoiseSpec
from data_lqr_synth.synthesis.programs import VariantKind

ENV_PREFIX = "SYNTH_"

DEFAULT_ETA1_GRID = [1.0, 1.05, 1.1, 1.25, 1.5, 2.0, 3.0, 5.0, 10.0]

# Fixed dimensions of the non-random plants
PLANT_DIMENSIONS = {"laplacian": (3, 3), "pendulum": (2, 1)}


class ConfigError(Exception):
    pass


class ExperimentConfig(BaseModel):
    master_seed: int = Field(default=0, ge=0, lt=2 ** 64)
    num_systems: int = Field(default=100, ge=1)
    n: int = Field(default=3, ge=1)
    m: int = Field(default=1, ge=1)
    T: int = Field(default=20, ge=1)
    noise: NoiseSpec = Field(default_factory=NoiseSpec)
    variant: VariantKind = VariantKind.SOFT
    alpha: float = Field(default=1.0, ge=1.0)
    ensemble_N: int = Field(default=1, ge=1)
    delta_rule: Literal["auto", "wgn_rule", "bias_rule", "user"] = "auto"
    delta: Optional[float] = Field(default=None, ge=0.0)
    eta1_grid: List[float] = Field(default_factory=lambda: list(DEFAULT_ETA1_GRID))
    output_path: Path = Path("output")
    jobs: int = Field(default=1, ge=1)
    solver: str = "CLARABEL"
    solver_accuracy: float = Field(default=1e-8, gt=0.0)
    fallback_solvers: List[str] = Field(default_factory=lambda: ["SCS"])
    plant: Literal["random", "laplacian", "pendulum"] = "random"
    horizon: int = Field(default=10000, ge=1)
    x0_std: Optional[float] = Field(default=None, ge=0.0)

    @field_validator("noise", mode="before")
    @classmethod
    def _parse_noise(cls, value):
        if isinstance(value, str):
            return NoiseSpec.parse(value)
        return value

    @field_validator("variant", mode="before")
    @classmethod
    def _parse_variant(cls, value):
        if isinstance(value, str):
            return value.strip().lower().replace("-", "_")
        return value

    @field_validator("solver", mode="before")
    @classmethod
    def _parse_solver(cls, value):
        return str(value).strip().upper()

    @field_validator("fallback_solvers", mode="before")
    @classmethod
    def _parse_fallbacks(cls, value):
        if isinstance(value, str):
            value = value.split(",")
        return [str(v).strip().upper() for v in value if str(v).strip()]

    @field_validator("eta1_grid", mode="before")
    @classmethod
    def _parse_grid(cls, value):
        if isinstance(value, str):
            return [float(v) for v in value.split(",") if v.strip()]
        return value

    @field_validator("eta1_grid")
    @classmethod
    def _check_grid(cls, value: List[float]):
        if not value:
            raise ValueError("eta1_grid must not be empty")
        if any(v < 1.0 for v in value):
            raise ValueError("eta1_grid values must be >= 1")
        if any(b <= a for a, b in zip(value, value[1:])):
            raise ValueError("eta1_grid must be ascending")
        return value

    @model_validator(mode="after")
    def _check_dimensions(self):
        if self.plant in PLANT_DIMENSIONS:
            n, m = PLANT_DIMENSIONS[self.plant]
            if (self.n, self.m) != (n, m):
                logger.debug(f"plant {self.plant} fixes n={n}, m={m}")
                self.n, self.m = n, m
        if self.T < self.n + self.m:
            raise ValueError(f"T={self.T} must be at least n + m = {self.n + self.m}")
        if self.delta_rule == "user" and self.delta is None:
            raise ValueError("delta_rule=user needs delta")
        return self

    @property
    def x0_scale(self) -> float:
        if self.x0_std is not None:
            return self.x0_std
        # about +-10 degrees around the upright position
        return 0.1 if self.plant == "pendulum" else 1.0

    def noise_bound(self) -> NoiseBound:
        if self.delta_rule == "user":
            return NoiseBound(delta=self.delta, rule="user")
        if self.delta_rule == "wgn_rule":
            return NoiseBound(delta=(self.T ** 0.5) * WGN_SIGMA_MARGIN * self.noise.level, rule="wgn_rule")
        if self.delta_rule == "bias_rule":
            return NoiseBound(delta=(self.T * self.n) ** 0.5 * self.noise.level, rule="bias_rule")
        return NoiseBound.from_noise(self.noise, self.T, self.n)

    @property
    def label(self) -> str:
        label = self.noise.label
        if self.ensemble_N > 1:
            label += f" (N={self.ensemble_N})"
        return label


FIELD_NAMES = {name.lower(): name for name in ExperimentConfig.model_fields}


def _canonical(key: str, source: str) -> str:
    name = FIELD_NAMES.get(key.strip().lower().replace("-", "_"))
    if name is None:
        raise ConfigError(f"unknown configuration key '{key}' in {source}")
    return name


def read_config_file(path: Union[str, Path]) -> Dict[str, str]:
    """key=value file, '#' comments allowed."""
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        raw = dotenv_values(path, encoding="utf-8")
    except (OSError, UnicodeDecodeError) as e:
        raise ConfigError(f"cannot read config file {path}: {e}") from e
    values = {}
    for key, value in raw.items():
        if value is None:
            raise ConfigError(f"key '{key}' in {path} has no value")
        values[_canonical(key, str(path))] = value
    return values


def read_environment(environ: Optional[Mapping[str, str]] = None) -> Dict[str, str]:
    environ = os.environ if environ is None else environ
    values = {}
    for key, value in environ.items():
        if key.startswith(ENV_PREFIX):
            name = FIELD_NAMES.get(key[len(ENV_PREFIX):].lower())
            if name is not None:
                values[name] = value
    return values


def load_config(path: Optional[Union[str, Path]] = None, overrides: Optional[Mapping[str, Any]] = None,
                environ: Optional[Mapping[str, str]] = None) -> ExperimentConfig:
    """
    Merge defaults < SYNTH_* environment < config file < overrides.

    Raises:
        ConfigError: unreadable file, unknown key or a value failing validation.
    """
    values: Dict[str, Any] = read_environment(environ)
    if path is not None:
        values.update(read_config_file(path))
    for key, value in (overrides or {}).items():
        if value is not None:
            values[_canonical(key, "overrides")] = value
    try:
        cfg = ExperimentConfig(**values)
    except ValidationError as e:
        raise ConfigError(str(e)) from e
    logger.debug(f"Configuration: {cfg.model_dump_json()}")
    return cfg
