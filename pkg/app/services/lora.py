"""
Low-rank adapters on the attention projections
"""
import math
from collections import OrderedDict
from typing import Dict, List, Optional

import structlog
import torch
import torch.nn as nn
import torch.nn.functional as F

from app.schemas.model import LoraConfig

logger = structlog.get_logger()

TARGET_PROJECTIONS = ("q_proj", "k_proj", "v_proj", "out_proj")


class LoraLinear(nn.Module):
    """
    Linear layer with an additive low-rank update ``(alpha / r) * B @ A``

    ``weight`` and ``bias`` are the wrapped layer's own parameters, so the
    parameter names match those of a plain ``nn.Linear``. B starts at zero.
    """

    def __init__(self, base: nn.Linear, rank: int, alpha: float, generator: Optional[torch.Generator] = None):
        super().__init__()
        self.in_features = base.in_features
        self.out_features = base.out_features
        self.rank = rank
        self.alpha = alpha
        self.scaling = alpha / rank
        self.weight = base.weight
        self.bias = base.bias

        dtype = base.weight.dtype
        a = torch.randn(rank, self.in_features, generator=generator, dtype=torch.float64) / math.sqrt(rank)
        self.lora_A = nn.Parameter(a.to(dtype))
        self.lora_B = nn.Parameter(torch.zeros(self.out_features, rank, dtype=dtype))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return F.linear(x, self.weight, self.bias) + (x @ self.lora_A.T @ self.lora_B.T) * self.scaling

    def delta_weight(self) -> torch.Tensor:
        return self.scaling * (self.lora_B @ self.lora_A)

    def merged_weight(self) -> torch.Tensor:
        return self.weight + self.delta_weight()

    def to_linear(self, merge: bool) -> nn.Linear:
        linear = torch.nn.utils.skip_init(
            nn.Linear, self.in_features, self.out_features, bias=self.bias is not None, dtype=self.weight.dtype
        )
        linear.weight = nn.Parameter(self.merged_weight().detach().clone()) if merge else self.weight
        linear.bias = self.bias
        return linear

    def extra_repr(self) -> str:
        return f"in_features={self.in_features}, out_features={self.out_features}, rank={self.rank}, alpha={self.alpha}"


def _attention_modules(model: nn.Module):
    for layer in model.layers:
        yield layer.attention


def lora_layers(model: nn.Module) -> Dict[str, LoraLinear]:
    return OrderedDict((name, m) for name, m in model.named_modules() if isinstance(m, LoraLinear))


def has_lora(model: nn.Module) -> bool:
    return any(isinstance(m, LoraLinear) for m in model.modules())


def apply_lora(model: nn.Module, config: LoraConfig, seed: int = 0) -> List[LoraLinear]:
    """Wrap every attention projection of ``model`` with a fresh adapter"""
    remove_lora(model)
    generator = torch.Generator().manual_seed(seed)
    adapters = []
    for attention in _attention_modules(model):
        for proj in TARGET_PROJECTIONS:
            adapter = LoraLinear(getattr(attention, proj), config.rank, config.alpha, generator=generator)
            setattr(attention, proj, adapter)
            adapters.append(adapter)
    logger.debug("Attached LoRA adapters", count=len(adapters), rank=config.rank, alpha=config.alpha)
    return adapters


def _unwrap(model: nn.Module, merge: bool) -> int:
    count = 0
    for attention in _attention_modules(model):
        for proj in TARGET_PROJECTIONS:
            module = getattr(attention, proj)
            if isinstance(module, LoraLinear):
                setattr(attention, proj, module.to_linear(merge=merge))
                count += 1
    return count


def remove_lora(model: nn.Module) -> None:
    """Drop adapters, leaving the base weights untouched"""
    if _unwrap(model, merge=False):
        logger.debug("Removed LoRA adapters")


def merge_lora(model: nn.Module) -> None:
    """Fold ``W + (alpha / r) B A`` into plain linear layers"""
    if _unwrap(model, merge=True):
        logger.debug("Merged LoRA adapters into base weights")


def merged_state_dict(model: nn.Module) -> "OrderedDict[str, torch.Tensor]":
    """State dict in the adapter-free layout, with adapters folded into weights"""
    merged = {f"{name}.weight": layer.merged_weight().detach() for name, layer in lora_layers(model).items()}
    state = OrderedDict()
    for name, tensor in model.state_dict().items():
        if ".lora_" in name:
            continue
        state[name] = merged.get(name, tensor)
    return state
