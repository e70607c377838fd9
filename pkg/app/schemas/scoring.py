"""
Fitness scoring schemas
"""
from enum import Enum
from typing import List

from pydantic import BaseModel, field_validator

from app.schemas.base import ConfigSection


class ScoringMode(str, Enum):
    """Conditioning used for the log-odds ratio"""
    MASKED_MARGINAL_INDEPENDENT = "masked_marginal_independent"  # condition on x with position i masked
    MASKED_MARGINAL_JOINT = "masked_marginal_joint"  # condition on x with every mutated position masked
    WILDTYPE_MARGINAL = "wildtype_marginal"  # one unmasked forward over x

    @classmethod
    def from_alias(cls, value: str) -> "ScoringMode":
        aliases = {
            "independent": cls.MASKED_MARGINAL_INDEPENDENT,
            "joint": cls.MASKED_MARGINAL_JOINT,
            "wildtype": cls.WILDTYPE_MARGINAL,
        }
        if value in aliases:
            return aliases[value]
        return cls(value)


class ScoringConfig(ConfigSection):
    """Scoring options"""

    mode: ScoringMode = ScoringMode.MASKED_MARGINAL_INDEPENDENT
    # softmax over the 20 residue logits instead of the full vocabulary
    renormalize_residues: bool = False

    @field_validator("mode", mode="before")
    @classmethod
    def resolve_alias(cls, v):
        return ScoringMode.from_alias(v) if isinstance(v, str) else v


class RecordScore(BaseModel):
    """Predicted score for one assay record"""

    id: str
    mutant: str
    pred_score: float
    fitness: float


class AssayEvaluation(BaseModel):
    """Spearman of predicted scores against measured fitness"""

    spearman: float
    n: int
    mode: ScoringMode
    scores: List[RecordScore]
