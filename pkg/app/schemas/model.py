"""
Backbone model schemas
"""
from enum import Enum

from pydantic import Field

from app.schemas.base import ConfigSection


class ModelConfig(ConfigSection):
    """Encoder geometry; the defaults are the laptop-sized toy backbone"""

    num_layers: int = Field(default=4, ge=1)
    model_dim: int = Field(default=128, ge=1)
    num_heads: int = Field(default=4, ge=1)
    ffn_dim: int = Field(default=256, ge=1)
    max_positions: int = Field(default=1026, ge=3)
    vocab_size: int = Field(default=25, ge=6)
    seed: int = 0


class TrainableSelection(str, Enum):
    """Which parameters receive updates during customization"""
    FULL_EXCEPT_EMBEDDINGS = "full_except_embeddings"
    LORA_ONLY = "lora_only"
    FULL = "full"


class LoraConfig(ConfigSection):
    """Low-rank adapters on the query/key/value/output projections"""

    rank: int = Field(default=8, ge=1)
    alpha: float = Field(default=32.0, gt=0)
    # layer norms and the MLM head stay frozen unless this is set
    train_norms_and_head: bool = False
