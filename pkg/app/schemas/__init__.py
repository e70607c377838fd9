"""
Pydantic schemas for sequences, models and customization runs
"""
from app.schemas.base import ConfigSection, DomainModel
from app.schemas.sequence import (
    ALPHABET,
    CANONICAL_RESIDUES,
    GAP,
    UNKNOWN_RESIDUE,
    Alphabet,
    TokenSequence,
    Msa,
    Mutation,
    MutationSet,
    MutationRecord,
)
from app.schemas.model import LoraConfig, ModelConfig, TrainableSelection
from app.schemas.masking import (
    BERT_CORRUPTION,
    MASK_ONLY_CORRUPTION,
    CorruptionAction,
    MaskingKind,
    MaskingStrategy,
)
from app.schemas.heads import ConfidenceKind
from app.schemas.ttt import (
    LossKind,
    LossReduction,
    OptimConfig,
    StepRecord,
    TTTConfig,
    TTTTrace,
)
from app.schemas.scoring import AssayEvaluation, RecordScore, ScoringConfig, ScoringMode
from app.schemas.run import (
    GridSpec,
    PathsConfig,
    PretrainConfig,
    RunConfig,
    SyntheticFamilySpec,
)
from app.schemas.grid import GridCell, GridCellResult, GridReport

__all__ = [
    # Base schemas
    "ConfigSection",
    "DomainModel",
    # Sequence schemas
    "ALPHABET",
    "CANONICAL_RESIDUES",
    "GAP",
    "UNKNOWN_RESIDUE",
    "Alphabet",
    "TokenSequence",
    "Msa",
    "Mutation",
    "MutationSet",
    "MutationRecord",
    # Model schemas
    "LoraConfig",
    "ModelConfig",
    "TrainableSelection",
    # Masking schemas
    "BERT_CORRUPTION",
    "MASK_ONLY_CORRUPTION",
    "CorruptionAction",
    "MaskingKind",
    "MaskingStrategy",
    # Customization schemas
    "ConfidenceKind",
    "LossKind",
    "LossReduction",
    "OptimConfig",
    "StepRecord",
    "TTTConfig",
    "TTTTrace",
    # Scoring schemas
    "AssayEvaluation",
    "RecordScore",
    "ScoringConfig",
    "ScoringMode",
    # Run schemas
    "GridSpec",
    "PathsConfig",
    "PretrainConfig",
    "RunConfig",
    "SyntheticFamilySpec",
    "GridCell",
    "GridCellResult",
    "GridReport",
]
