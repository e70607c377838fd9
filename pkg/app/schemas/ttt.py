"""
Customization (test-time training) schemas
"""
import json
from enum import Enum
from typing import Any, Dict, List, Optional

from pydantic import BaseModel, Field, model_validator

from app.schemas.base import ConfigSection
from app.schemas.heads import ConfidenceKind
from app.schemas.masking import MaskingStrategy
from app.schemas.model import LoraConfig, TrainableSelection


class LossKind(str, Enum):
    """Cross-entropy variants"""
    NORMALIZED_CROSS_ENTROPY = "normalized_cross_entropy"
    UNNORMALIZED_CROSS_ENTROPY = "unnormalized_cross_entropy"


class LossReduction(str, Enum):
    """Averaging order for the normalized loss"""
    SEQUENCE = "sequence"  # mean over each sequence's masked tokens, then over sequences
    TOKEN = "token"  # one mean over every masked token in the batch


class OptimConfig(ConfigSection):
    """Plain SGD; momentum and weight decay are fixed at zero"""

    learning_rate: float = Field(default=4e-4, ge=0)
    grad_accum_steps: int = Field(default=16, ge=1)
    micro_batch_size: int = Field(default=4, ge=1)

    @property
    def momentum(self) -> float:
        return 0.0

    @property
    def weight_decay(self) -> float:
        return 0.0


class TTTConfig(ConfigSection):
    """Customization hyperparameters; defaults are the fitness-prediction setting"""

    learning_rate: float = Field(default=4e-4, ge=0)
    micro_batch_size: int = Field(default=4, ge=1)
    grad_accum_steps: int = Field(default=16, ge=1)
    steps: int = Field(default=30, ge=1)
    masking: MaskingStrategy = MaskingStrategy()
    loss_kind: LossKind = LossKind.NORMALIZED_CROSS_ENTROPY
    loss_reduction: LossReduction = LossReduction.SEQUENCE
    trainable: TrainableSelection = TrainableSelection.FULL_EXCEPT_EMBEDDINGS
    lora: Optional[LoraConfig] = None
    seed: int = 0
    confidence: Optional[ConfidenceKind] = None
    emit_perplexity: bool = False

    @model_validator(mode="before")
    @classmethod
    def default_lora_selection(cls, data: Any) -> Any:
        # attaching adapters implies adapter-only training unless stated otherwise
        if isinstance(data, dict) and data.get("lora") is not None and "trainable" not in data:
            data = {**data, "trainable": TrainableSelection.LORA_ONLY}
        return data

    @model_validator(mode="after")
    def check_lora(self) -> "TTTConfig":
        if self.lora is not None and self.trainable != TrainableSelection.LORA_ONLY:
            raise ValueError("lora requires trainable = lora_only")
        if self.lora is None and self.trainable == TrainableSelection.LORA_ONLY:
            raise ValueError("trainable = lora_only requires a lora section")
        return self

    @property
    def optim(self) -> OptimConfig:
        return OptimConfig(
            learning_rate=self.learning_rate,
            grad_accum_steps=self.grad_accum_steps,
            micro_batch_size=self.micro_batch_size,
        )


class StepRecord(BaseModel):
    """One row of a customization trace; step 0 is the untouched model"""

    step: int
    loss: Optional[float] = None
    perplexity: Optional[float] = None
    confidence: Optional[float] = None
    wall_ms: float = 0.0
    metrics: Dict[str, float] = Field(default_factory=dict)

    def to_json_line(self) -> str:
        payload: Dict[str, Any] = {"step": self.step}
        for key in ("loss", "perplexity", "confidence"):
            value = getattr(self, key)
            if value is not None:
                payload[key] = value
        payload.update(self.metrics)
        payload["wall_ms"] = self.wall_ms
        return json.dumps(payload)


class TTTTrace(BaseModel):
    """Per-step history of one customization run"""

    steps: List[StepRecord] = Field(default_factory=list)
    selected_step: int = 0

    @property
    def losses(self) -> List[float]:
        return [s.loss for s in self.steps if s.loss is not None]

    @property
    def perplexities(self) -> List[Optional[float]]:
        return [s.perplexity for s in self.steps]

    def without_timing(self) -> List[Dict[str, Any]]:
        """Step records minus wall time, for determinism comparisons"""
        return [s.model_dump(exclude={"wall_ms"}) for s in self.steps]

    def to_jsonl(self) -> str:
        return "".join(s.to_json_line() + "\n" for s in self.steps)
