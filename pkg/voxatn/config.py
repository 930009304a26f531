from __future__ import annotations

import json
import os
try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib
from functools import lru_cache
from pathlib import Path
from typing import Any, Optional

from pydantic import AliasChoices, Field, ValidationError, field_validator
from pydantic_settings import BaseSettings, SettingsConfigDict

from .errors import ConfigError
from .schemas import ModelConfig, RunConfig


def _default_threads() -> int:
    return max(1, os.cpu_count() or 1)


class Settings(BaseSettings):
    """Process-level settings from the environment (and .env when present)."""

    model_config = SettingsConfigDict(env_file=".env", extra="ignore")

    log_level: str = Field(
        "INFO", validation_alias=AliasChoices("VOXATN_LOG_LEVEL", "LOG_LEVEL")
    )
    threads: int = Field(
        default_factory=_default_threads, validation_alias=AliasChoices("VOXATN_THREADS")
    )
    artifacts_dir: str = Field(
        "artifacts", validation_alias=AliasChoices("VOXATN_ARTIFACTS_DIR", "ARTIFACTS_DIR")
    )

    @field_validator("log_level")
    @classmethod
    def _upper(cls, v: str) -> str:
        return v.strip().upper()

    @field_validator("threads")
    @classmethod
    def _at_least_one(cls, v: int) -> int:
        return max(1, v)


@lru_cache(maxsize=1)
def get_settings() -> Settings:
    return Settings()


# --- run configuration files ---


def _describe(err: dict) -> str:
    key = ".".join(str(p) for p in err.get("loc", ()))
    if err.get("type") == "extra_forbidden":
        return f"unknown key '{key}'"
    return f"invalid value for '{key}': {err.get('msg')}"


def parse_run_config(raw: dict[str, Any]) -> RunConfig:
    try:
        return RunConfig.model_validate(raw)
    except ValidationError as e:
        raise ConfigError("; ".join(_describe(err) for err in e.errors())) from e


def override_model(model: ModelConfig, **changes: Any) -> ModelConfig:
    """Copy of model with changes applied, validated like a config file."""
    try:
        return ModelConfig.model_validate({**model.model_dump(), **changes})
    except ValidationError as e:
        raise ConfigError("; ".join(_describe(err) for err in e.errors())) from e


def load_run_config(path: Optional[str | Path]) -> RunConfig:
    """Read a TOML run config; a missing path means all defaults."""
    if path is None:
        return RunConfig()
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"config file not found: {p}")
    try:
        raw = tomllib.loads(p.read_text(encoding="utf-8"))
    except tomllib.TOMLDecodeError as e:
        raise ConfigError(f"config file {p} is not valid TOML: {e}") from e
    return parse_run_config(raw)


def apply_overrides(
    cfg: RunConfig,
    *,
    seed: Optional[int] = None,
    resolution: Optional[int] = None,
    deterministic: bool = False,
) -> RunConfig:
    raw = cfg.model_dump(mode="json")
    if seed is not None:
        raw["data"]["master_seed"] = seed
        raw["model"]["init_seed"] = seed
        raw["train"]["rng_seed"] = seed
        raw["train"]["augment"]["rng_seed"] = seed
        raw["protocol"]["seed"] = seed
    if resolution is not None:
        raw["model"]["input_resolution"] = resolution
    if deterministic:
        raw["train"]["deterministic"] = True
    return parse_run_config(raw)


def resolved_config_json(cfg: RunConfig) -> str:
    return json.dumps(cfg.model_dump(mode="json"), indent=2, sort_keys=True) + "\n"
