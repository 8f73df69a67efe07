from __future__ import annotations

import logging
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping

from dotenv import dotenv_values, load_dotenv

from condopt.core import CondOptPrior
from condopt.dataset import BINARY, ColumnSpec
from condopt.errors import ConfigError
from condopt.inference import DIRECTIONS, Y_GIVEN_X
from condopt.opt import DEFAULT_ALPHA, DEFAULT_MAX_DEPTH, DEFAULT_RHO, OptPrior

load_dotenv()

ENV_PREFIX = "CONDOPT_"
DEFAULT_PROFILE = "default"
FLOW_PROFILE = "flow"
FLOW_MAX_DEPTH = 10
BINARY_MAX_DEPTH_X = 4

KEYS = (
    "predictors",
    "responses",
    "rho",
    "rho_y",
    "alpha",
    "max_depth_x",
    "max_depth_y",
    "min_points",
    "profile",
    "seed",
    "threads",
    "grid_resolution",
    "draws",
    "permutations",
    "direction",
    "log_level",
)


@dataclass(frozen=True)
class RunConfig:
    predictors: tuple[ColumnSpec, ...] = ()
    responses: tuple[ColumnSpec, ...] = ()
    rho: float = DEFAULT_RHO
    rho_y: float = DEFAULT_RHO
    alpha: float = DEFAULT_ALPHA
    max_depth_x: int = DEFAULT_MAX_DEPTH
    max_depth_y: int = DEFAULT_MAX_DEPTH
    min_points: int = 0
    profile: str = DEFAULT_PROFILE
    seed: int = 0
    threads: int = 1
    grid_resolution: int = 256
    draws: int = 1000
    permutations: int = 1000
    direction: str = Y_GIVEN_X
    log_level: str = "WARNING"

    def prior(self) -> CondOptPrior:
        try:
            return CondOptPrior(
                rho=self.rho,
                local=OptPrior(rho_y=self.rho_y, alpha=(self.alpha, self.alpha), max_depth_y=self.max_depth_y),
                max_depth_x=self.max_depth_x,
                min_points=self.min_points,
            )
        except ValueError as error:
            raise ConfigError(str(error)) from error

    def require_columns(self) -> None:
        if not self.predictors:
            raise ConfigError("Missing predictors configuration")
        if not self.responses:
            raise ConfigError("Missing responses configuration")


def _get_number(
    values: Mapping[str, str], name: str, default: float, cast_type: type[int] | type[float]
) -> int | float:
    raw = values.get(name)
    if raw in (None, ""):
        return cast_type(default)
    try:
        return cast_type(raw)
    except ValueError as error:
        raise ConfigError(f"Invalid value for {name}: {raw}") from error


def _parse_columns(values: Mapping[str, str], name: str) -> tuple[ColumnSpec, ...]:
    raw = values.get(name) or ""
    try:
        return tuple(ColumnSpec.parse(item) for item in raw.split(",") if item.strip())
    except ValueError as error:
        raise ConfigError(f"Invalid value for {name}: {error}") from error


def _layers(path: str | Path | None, overrides: Mapping[str, str] | None) -> dict[str, str]:
    merged: dict[str, str] = {}
    if path is not None:
        if not Path(path).is_file():
            raise ConfigError(f"Config file not found: {path}")
        for key, value in dotenv_values(path).items():
            if key not in KEYS:
                raise ConfigError(f"Unknown config key {key!r} in {path}")
            if value is not None:
                merged[key] = value
    for key in KEYS:
        value = os.getenv(ENV_PREFIX + key.upper())
        if value not in (None, ""):
            merged[key] = value
    for key, value in (overrides or {}).items():
        if key not in KEYS:
            raise ConfigError(f"Unknown config key {key!r}")
        merged[key] = value
    return merged


def parse_overrides(items: list[str] | None) -> dict[str, str]:
    """``key=value`` pairs from the command line."""
    out = {}
    for item in items or []:
        key, sep, value = item.partition("=")
        if not sep or not key.strip():
            raise ConfigError(f"Expected key=value, got {item!r}")
        out[key.strip()] = value.strip()
    return out


def load_config(path: str | Path | None = None, overrides: Mapping[str, str] | None = None) -> RunConfig:
    values = _layers(path, overrides)
    predictors = _parse_columns(values, "predictors")
    responses = _parse_columns(values, "responses")
    profile = values.get("profile", DEFAULT_PROFILE)
    if profile not in (DEFAULT_PROFILE, FLOW_PROFILE):
        raise ConfigError(f"Invalid value for profile: {profile}")

    if profile == FLOW_PROFILE:
        depth_x = depth_y = FLOW_MAX_DEPTH
    else:
        depth_y = DEFAULT_MAX_DEPTH
        all_binary = bool(predictors) and all(c.kind == BINARY for c in predictors)
        depth_x = BINARY_MAX_DEPTH_X if all_binary else DEFAULT_MAX_DEPTH

    config = RunConfig(
        predictors=predictors,
        responses=responses,
        rho=float(_get_number(values, "rho", DEFAULT_RHO, float)),
        rho_y=float(_get_number(values, "rho_y", DEFAULT_RHO, float)),
        alpha=float(_get_number(values, "alpha", DEFAULT_ALPHA, float)),
        max_depth_x=int(_get_number(values, "max_depth_x", depth_x, int)),
        max_depth_y=int(_get_number(values, "max_depth_y", depth_y, int)),
        min_points=int(_get_number(values, "min_points", 0, int)),
        profile=profile,
        seed=int(_get_number(values, "seed", 0, int)),
        threads=int(_get_number(values, "threads", 1, int)),
        grid_resolution=int(_get_number(values, "grid_resolution", 256, int)),
        draws=int(_get_number(values, "draws", 1000, int)),
        permutations=int(_get_number(values, "permutations", 1000, int)),
        direction=values.get("direction", Y_GIVEN_X),
        log_level=values.get("log_level", "WARNING").upper(),
    )

    names = [c.name for c in config.predictors] + [c.name for c in config.responses]
    if len(set(names)) != len(names):
        raise ConfigError("Predictor and response columns must be distinct")
    if not 0.0 < config.rho < 1.0 or not 0.0 < config.rho_y < 1.0:
        raise ConfigError("rho and rho_y must lie in (0, 1)")
    if config.alpha <= 0:
        raise ConfigError("alpha must be positive")
    if config.max_depth_x < 0 or config.max_depth_y < 0:
        raise ConfigError("max_depth_x and max_depth_y must be >= 0")
    if config.min_points < 0:
        raise ConfigError("min_points must be >= 0")
    if config.seed < 0:
        raise ConfigError("seed must be >= 0")
    if config.threads < 1:
        raise ConfigError("threads must be >= 1")
    if config.grid_resolution < 1 or config.draws < 1 or config.permutations < 1:
        raise ConfigError("grid_resolution, draws and permutations must be positive")
    if config.direction not in DIRECTIONS:
        raise ConfigError(f"Invalid value for direction: {config.direction}")
    if not isinstance(logging.getLevelName(config.log_level), int):
        raise ConfigError(f"Invalid value for log_level: {config.log_level}")
    return config

