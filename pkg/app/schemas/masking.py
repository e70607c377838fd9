"""
Masking schemas
"""
from enum import Enum, IntEnum
from typing import Optional, Tuple

from pydantic import Field, model_validator

from app.schemas.base import ConfigSection


class MaskingKind(str, Enum):
    """How the masked fraction is drawn"""
    FIXED_RATIO = "fixed_ratio"
    UNIFORM_RATIO_RANGE = "uniform_ratio_range"
    BETA_RATIO = "beta_ratio"


class CorruptionAction(IntEnum):
    """What happens to a masked position"""
    TO_MASK_TOKEN = 0
    TO_RANDOM_TOKEN = 1
    KEEP_ORIGINAL = 2


BERT_CORRUPTION: Tuple[float, float, float] = (0.8, 0.1, 0.1)
MASK_ONLY_CORRUPTION: Tuple[float, float, float] = (1.0, 0.0, 0.0)


class MaskingStrategy(ConfigSection):
    """
    Mask-position distribution plus corruption and cropping conventions

    ``p`` parameterizes fixed_ratio, ``lo``/``hi`` uniform_ratio_range and
    ``a``/``b`` beta_ratio. The (3, 9) beta default has mean 0.25.
    """

    kind: MaskingKind = MaskingKind.FIXED_RATIO
    p: float = Field(default=0.15, gt=0, le=1)
    lo: float = Field(default=0.05, gt=0, le=1)
    hi: float = Field(default=0.5, gt=0, le=1)
    a: float = Field(default=3.0, gt=0)
    b: float = Field(default=9.0, gt=0)
    corruption: Tuple[float, float, float] = BERT_CORRUPTION
    crop: Optional[int] = Field(default=1024, ge=1)
    name: Optional[str] = None

    @model_validator(mode="after")
    def check_strategy(self) -> "MaskingStrategy":
        if any(c < 0 for c in self.corruption) or abs(sum(self.corruption) - 1.0) > 1e-9:
            raise ValueError("corruption probabilities must be non-negative and sum to 1")
        if self.kind == MaskingKind.UNIFORM_RATIO_RANGE and self.lo > self.hi:
            raise ValueError("uniform_ratio_range needs lo <= hi")
        return self

    @property
    def label(self) -> str:
        if self.name:
            return self.name
        if self.kind == MaskingKind.FIXED_RATIO:
            return f"fixed{self.p:g}"
        if self.kind == MaskingKind.UNIFORM_RATIO_RANGE:
            return f"uniform{self.lo:g}-{self.hi:g}"
        return f"beta{self.a:g}-{self.b:g}"

