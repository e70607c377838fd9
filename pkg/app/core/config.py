"""
Configuration settings for the test-time customization toolkit
"""
try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib
from pathlib import Path
from typing import Any, Dict, Optional

from pydantic import ValidationError, field_validator
from pydantic_settings import BaseSettings, SettingsConfigDict

from app.core.exceptions import ConfigurationError


class Settings(BaseSettings):
    # Project info
    PROJECT_NAME: str = "Protein Test-Time Customization"
    VERSION: str = "1.0.0"

    # Logging
    LOG_LEVEL: str = "INFO"
    LOG_FORMAT: str = "json"

    @field_validator("LOG_FORMAT")
    @classmethod
    def check_log_format(cls, v: str) -> str:
        if v not in ("json", "console"):
            raise ValueError(f"LOG_FORMAT must be 'json' or 'console', got {v!r}")
        return v

    # Numerics
    NUM_THREADS: int = 1
    DETERMINISTIC: bool = True
    PERPLEXITY_BATCH_SIZE: int = 32

    # Runs
    DEFAULT_SEED: int = 0
    OUTPUT_DIR: str = "runs"
    SLOW_STEP_SECONDS: float = 5.0

    # Feature Flags
    ENABLE_METRICS: bool = True

    model_config = SettingsConfigDict(
        env_prefix="TTT_",
        case_sensitive=True,
        env_file=".env",
        env_file_encoding="utf-8",
        extra="ignore",
    )


settings = Settings()


def deep_merge(base: Dict[str, Any], overrides: Dict[str, Any]) -> Dict[str, Any]:
    """Merge nested dicts; values in ``overrides`` win, ``None`` values are skipped."""
    merged = dict(base)
    for key, value in overrides.items():
        if value is None:
            continue
        if isinstance(value, dict):
            base_value = merged.get(key)
            merged[key] = deep_merge(base_value if isinstance(base_value, dict) else {}, value)
        else:
            merged[key] = value
    return merged


def load_run_config(path: Optional[Path] = None, overrides: Optional[Dict[str, Any]] = None):
    """
    Resolve a RunConfig with precedence flags > file > defaults

    The file is TOML with one table per section (``[model]``, ``[ttt]``, ...).
    """
    from app.schemas.run import RunConfig

    data: Dict[str, Any] = {}
    if path is not None:
        try:
            with open(path, "rb") as fh:
                data = tomllib.load(fh)
        except FileNotFoundError:
            raise ConfigurationError(f"Config file not found: {path}", details={"flag": "--config"})
        except tomllib.TOMLDecodeError as e:
            raise ConfigurationError(f"Config file is not valid TOML: {e}", details={"flag": "--config"})

    data = deep_merge(data, overrides or {})
    try:
        return RunConfig.model_validate(data)
    except ValidationError as e:
        raise ConfigurationError("Invalid run configuration", errors=e.errors(include_url=False))
