"""
Base schemas for common data structures
"""
from pydantic import BaseModel, ConfigDict


class DomainModel(BaseModel):
    """Immutable domain record"""

    model_config = ConfigDict(frozen=True, extra="forbid")


class ConfigSection(BaseModel):
    """Mutable-free config section; unknown keys are rejected so typos surface"""

    model_config = ConfigDict(frozen=True, extra="forbid", use_enum_values=False)
