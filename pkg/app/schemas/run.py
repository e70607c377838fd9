"""
Run configuration schemas: one section per command family
"""
from pathlib import Path
from typing import Annotated, Any, Dict, List, Literal, Optional

from pydantic import Field, model_validator

from app.schemas.base import ConfigSection
from app.schemas.masking import MaskingStrategy
from app.schemas.model import ModelConfig
from app.schemas.scoring import ScoringConfig
from app.schemas.ttt import LossKind, TTTConfig


class PretrainConfig(ConfigSection):
    """Masked-LM training that produces the toy base checkpoint"""

    epochs: int = Field(default=20, ge=0)
    learning_rate: float = Field(default=1e-3, ge=0)
    batch_size: int = Field(default=16, ge=1)
    optimizer: Literal["adam", "sgd"] = "adam"
    masking: MaskingStrategy = MaskingStrategy()
    seed: int = 0


class SyntheticFamilySpec(ConfigSection):
    """
    Generator for protein families with position-specific substitution tables

    Every family has a consensus; members resample each position from the
    family table, which puts ``1 - substitution_rate`` on the consensus residue.
    """

    num_families: int = Field(default=3, ge=2)
    length: int = Field(default=64, ge=4)
    members_per_family: int = Field(default=64, ge=1)
    substitution_rate: float = Field(default=0.2, ge=0, lt=1)
    held_out_family: int = Field(default=2, ge=0)
    num_targets: int = Field(default=20, ge=1)
    homologs_per_target: int = Field(default=8, ge=0)
    mutants_per_assay: int = Field(default=120, ge=1)
    double_mutant_fraction: float = Field(default=0.25, ge=0, le=1)
    min_family_distance: float = Field(default=0.3, ge=0, le=1)
    # Dirichlet concentration of the non-consensus mass
    concentration: float = Field(default=0.5, gt=0)
    seed: int = 1

    @model_validator(mode="after")
    def check_held_out(self) -> "SyntheticFamilySpec":
        if self.held_out_family >= self.num_families:
            raise ValueError("held_out_family must index one of the families")
        return self


class GridSpec(ConfigSection):
    """Cartesian grid over customization hyperparameters with a fixed step count"""

    learning_rates: List[Annotated[float, Field(ge=0, allow_inf_nan=False)]] = Field(
        default_factory=lambda: [4e-5, 4e-4, 4e-3]
    )
    micro_batch_sizes: List[Annotated[int, Field(ge=1)]] = Field(default_factory=lambda: [4])
    grad_accum_steps: List[Annotated[int, Field(ge=1)]] = Field(default_factory=lambda: [4, 16, 32])
    maskings: List[MaskingStrategy] = Field(default_factory=lambda: [MaskingStrategy(name="fixed15")])
    loss_kinds: List[LossKind] = Field(default_factory=lambda: [LossKind.NORMALIZED_CROSS_ENTROPY])

    @model_validator(mode="after")
    def check_axes(self) -> "GridSpec":
        for name in ("learning_rates", "micro_batch_sizes", "grad_accum_steps", "maskings", "loss_kinds"):
            if not getattr(self, name):
                raise ValueError(f"grid axis {name} is empty")
        return self

    @property
    def size(self) -> int:
        return (
            len(self.learning_rates)
            * len(self.micro_batch_sizes)
            * len(self.grad_accum_steps)
            * len(self.maskings)
            * len(self.loss_kinds)
        )


class PathsConfig(ConfigSection):
    """Input and output locations"""

    checkpoint: Optional[Path] = None
    corpus: Optional[Path] = None
    targets: Optional[Path] = None
    labels: Optional[Path] = None
    msa: Optional[Path] = None
    assays: List[Path] = Field(default_factory=list)
    output_dir: Optional[Path] = None


class RunConfig(ConfigSection):
    """Fully resolved configuration of one command invocation"""

    model: ModelConfig = ModelConfig()
    ttt: TTTConfig = TTTConfig()
    pretrain: PretrainConfig = PretrainConfig()
    scoring: ScoringConfig = ScoringConfig()
    synthetic: SyntheticFamilySpec = SyntheticFamilySpec()
    grid: GridSpec = GridSpec()
    paths: PathsConfig = PathsConfig()
    seed: int = 0
    jobs: int = Field(default=1, ge=1)

    def provenance(self, checkpoint_hash: Optional[str] = None) -> Dict[str, Any]:
        return {"run_config": self.model_dump(mode="json"), "checkpoint_hash": checkpoint_hash}
