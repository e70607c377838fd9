"""
Masked language model backbone: transformer encoder f plus the MLM head g
"""
import math
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Dict, List, Sequence, Tuple, Union

import structlog
import torch
import torch.nn as nn
import torch.nn.functional as F

from app.core.config import settings
from app.core.exceptions import ModelConfigError, SequenceTooLongError, ShapeMismatchError
from app.schemas.model import ModelConfig, TrainableSelection
from app.schemas.sequence import ALPHABET
from app.services.lora import merged_state_dict, remove_lora

logger = structlog.get_logger()

FORMAT_VERSION = 1
INIT_STD = 0.02


def configure_torch() -> None:
    """Apply thread and determinism settings to the torch runtime"""
    torch.set_num_threads(settings.NUM_THREADS)
    if settings.DETERMINISTIC:
        torch.use_deterministic_algorithms(True)


def validate_config(config: ModelConfig) -> None:
    if config.model_dim % config.num_heads != 0:
        raise ModelConfigError(
            f"model_dim={config.model_dim} is not divisible by num_heads={config.num_heads}",
            details={"model_dim": config.model_dim, "num_heads": config.num_heads},
        )
    if config.vocab_size < ALPHABET.vocab_size:
        raise ModelConfigError(
            f"vocab_size={config.vocab_size} is smaller than the alphabet ({ALPHABET.vocab_size})",
            details={"vocab_size": config.vocab_size},
        )


class SelfAttention(nn.Module):
    """Multi-head self-attention with separate query/key/value/output projections"""

    def __init__(self, model_dim: int, num_heads: int):
        super().__init__()
        self.num_heads = num_heads
        self.head_dim = model_dim // num_heads
        self.q_proj = nn.Linear(model_dim, model_dim)
        self.k_proj = nn.Linear(model_dim, model_dim)
        self.v_proj = nn.Linear(model_dim, model_dim)
        self.out_proj = nn.Linear(model_dim, model_dim)

    def _split(self, x: torch.Tensor) -> torch.Tensor:
        batch, length, _ = x.shape
        return x.view(batch, length, self.num_heads, self.head_dim).transpose(1, 2)

    def forward(self, x: torch.Tensor, pad_mask: torch.Tensor) -> torch.Tensor:
        batch, length, dim = x.shape
        q = self._split(self.q_proj(x))
        k = self._split(self.k_proj(x))
        v = self._split(self.v_proj(x))

        scores = q @ k.transpose(-2, -1) / math.sqrt(self.head_dim)
        # pad keys get exactly zero weight
        scores = scores.masked_fill(pad_mask[:, None, None, :], float("-inf"))
        weights = torch.softmax(scores, dim=-1)

        out = (weights @ v).transpose(1, 2).reshape(batch, length, dim)
        return self.out_proj(out)


class EncoderBlock(nn.Module):
    """Pre-norm transformer block"""

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.attn_norm = nn.LayerNorm(config.model_dim)
        self.attention = SelfAttention(config.model_dim, config.num_heads)
        self.ffn_norm = nn.LayerNorm(config.model_dim)
        self.ffn_in = nn.Linear(config.model_dim, config.ffn_dim)
        self.ffn_out = nn.Linear(config.ffn_dim, config.model_dim)

    def forward(self, x: torch.Tensor, pad_mask: torch.Tensor) -> torch.Tensor:
        x = x + self.attention(self.attn_norm(x), pad_mask)
        x = x + self.ffn_out(F.gelu(self.ffn_in(self.ffn_norm(x))))
        return x


class MaskedLanguageModel(nn.Module):
    """
    Bidirectional encoder with learned absolute positions and a linear MLM head

    ``encode`` returns final-layer hidden states (after the last layer norm);
    ``forward`` maps them to vocabulary logits.
    """

    def __init__(self, config: ModelConfig):
        super().__init__()
        validate_config(config)
        self.config = config
        self.token_embedding = nn.Embedding(config.vocab_size, config.model_dim)
        self.position_embedding = nn.Embedding(config.max_positions, config.model_dim)
        self.layers = nn.ModuleList(EncoderBlock(config) for _ in range(config.num_layers))
        self.final_norm = nn.LayerNorm(config.model_dim)
        self.lm_head = nn.Linear(config.model_dim, config.vocab_size)

    def reset_parameters(self) -> None:
        for module in self.modules():
            if isinstance(module, (nn.Linear, nn.Embedding)):
                nn.init.normal_(module.weight, mean=0.0, std=INIT_STD)
                if getattr(module, "bias", None) is not None:
                    nn.init.zeros_(module.bias)
            elif isinstance(module, nn.LayerNorm):
                nn.init.ones_(module.weight)
                nn.init.zeros_(module.bias)

    def encode(self, input_ids: torch.Tensor, pad_mask: torch.Tensor) -> torch.Tensor:
        length = input_ids.shape[1]
        if length > self.config.max_positions:
            raise SequenceTooLongError(length, self.config.max_positions)
        positions = torch.arange(length, device=input_ids.device)
        x = self.token_embedding(input_ids) + self.position_embedding(positions)[None]
        for layer in self.layers:
            x = layer(x, pad_mask)
        return self.final_norm(x)

    def forward(self, input_ids: torch.Tensor, pad_mask: torch.Tensor) -> torch.Tensor:
        return self.lm_head(self.encode(input_ids, pad_mask))


@dataclass
class BackboneSnapshot:
    """Complete parameter state of a backbone, detached from any module"""

    config: ModelConfig
    tensors: Dict[str, torch.Tensor] = field(default_factory=OrderedDict)
    format_version: int = FORMAT_VERSION

    def is_finite(self) -> bool:
        return all(bool(torch.isfinite(t).all()) for t in self.tensors.values())

    def equals(self, other: "BackboneSnapshot") -> bool:
        """Bit-exact comparison of config and every tensor"""
        if self.config != other.config or list(self.tensors) != list(other.tensors):
            return False
        return all(torch.equal(self.tensors[k], other.tensors[k]) for k in self.tensors)

    def num_parameters(self) -> int:
        return sum(t.numel() for t in self.tensors.values())


def init_model(config: ModelConfig) -> BackboneSnapshot:
    """Deterministically initialize a backbone from ``config.seed``"""
    validate_config(config)
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(config.seed)
        model = MaskedLanguageModel(config)
        model.reset_parameters()
    logger.debug("Initialized backbone", seed=config.seed, layers=config.num_layers, dim=config.model_dim)
    return snapshot(model)


def build_model(state: BackboneSnapshot) -> MaskedLanguageModel:
    """Instantiate a fresh module holding a copy of ``state``"""
    model = MaskedLanguageModel(state.config)
    restore(model, state)
    return model


def snapshot(model: MaskedLanguageModel) -> BackboneSnapshot:
    """
    Copy the model's parameters into a plain snapshot

    Attached LoRA adapters are folded into their base weights, so the snapshot
    always has the adapter-free layout.
    """
    tensors = OrderedDict((k, v.detach().clone()) for k, v in merged_state_dict(model).items())
    return BackboneSnapshot(config=model.config, tensors=tensors)


def restore(model: MaskedLanguageModel, state: BackboneSnapshot) -> None:
    """Load ``state`` into ``model`` bit-exactly, dropping any attached adapters"""
    remove_lora(model)
    current = model.state_dict()
    if list(current) != list(state.tensors):
        missing = sorted(set(current) - set(state.tensors))
        unexpected = sorted(set(state.tensors) - set(current))
        raise ShapeMismatchError(
            "Snapshot parameter names do not match the model",
            details={"missing": missing, "unexpected": unexpected},
        )
    for name, tensor in state.tensors.items():
        if current[name].shape != tensor.shape:
            raise ShapeMismatchError(
                f"Parameter {name} has shape {tuple(tensor.shape)}, model expects {tuple(current[name].shape)}",
                details={"parameter": name, "found": list(tensor.shape), "expected": list(current[name].shape)},
            )
    with torch.no_grad():
        for name, param in model.state_dict(keep_vars=True).items():
            param.copy_(state.tensors[name].to(param.dtype))


def _token_ids(item) -> Sequence[int]:
    # TokenSequence carries ``ids``, MaskedSequence carries ``input_ids``
    for attr in ("input_ids", "ids"):
        if hasattr(item, attr):
            return getattr(item, attr)
    return item


def collate(batch: Sequence, pad_id: int = ALPHABET.pad_id) -> Tuple[torch.Tensor, torch.Tensor]:
    """
    Right-pad a batch of token id sequences

    Returns ``(input_ids, pad_mask)`` where ``pad_mask`` is True at padding.
    """
    rows = [list(_token_ids(item)) for item in batch]
    width = max(len(r) for r in rows)
    input_ids = torch.full((len(rows), width), pad_id, dtype=torch.long)
    pad_mask = torch.ones((len(rows), width), dtype=torch.bool)
    for i, row in enumerate(rows):
        input_ids[i, : len(row)] = torch.tensor(row, dtype=torch.long)
        pad_mask[i, : len(row)] = False
    return input_ids, pad_mask


def forward_logits(
    model: Union[MaskedLanguageModel, BackboneSnapshot], batch: Sequence
) -> Tuple[torch.Tensor, torch.Tensor]:
    """
    Logits of shape (batch, positions, vocab) for possibly masked sequences

    Pad positions still receive logits; the returned mask flags them as excluded.
    """
    if isinstance(model, BackboneSnapshot):
        model = build_model(model)
    input_ids, pad_mask = collate(batch)
    if input_ids.shape[1] > model.config.max_positions:
        raise SequenceTooLongError(input_ids.shape[1], model.config.max_positions)
    with torch.no_grad():
        logits = model(input_ids, pad_mask)
    return logits, pad_mask


def parameter_groups(model: MaskedLanguageModel) -> Dict[str, List[str]]:
    """Parameter names grouped as embeddings, norms, head, lora and other"""
    groups: Dict[str, List[str]] = {"embeddings": [], "norms": [], "head": [], "lora": [], "other": []}
    for name, _ in model.named_parameters():
        if name.startswith(("token_embedding.", "position_embedding.")):
            groups["embeddings"].append(name)
        elif "norm" in name:
            groups["norms"].append(name)
        elif name.startswith("lm_head."):
            groups["head"].append(name)
        elif ".lora_" in name:
            groups["lora"].append(name)
        else:
            groups["other"].append(name)
    return groups


def select_trainable(
    model: MaskedLanguageModel, selection: TrainableSelection, train_norms_and_head: bool = False
) -> List[Tuple[str, nn.Parameter]]:
    """
    Set ``requires_grad`` per the selection mode and return the trainable parameters

    The returned list is in module registration order and is shared by the
    gradient buffer and the optimizer.
    """
    groups = parameter_groups(model)
    if selection == TrainableSelection.FULL:
        names = {n for group in groups.values() for n in group}
    elif selection == TrainableSelection.FULL_EXCEPT_EMBEDDINGS:
        names = set(groups["norms"] + groups["head"] + groups["other"] + groups["lora"])
    else:
        names = set(groups["lora"])
        if train_norms_and_head:
            names |= set(groups["norms"] + groups["head"])

    trainable = []
    for name, param in model.named_parameters():
        param.requires_grad_(name in names)
        if name in names:
            trainable.append((name, param))
    return trainable
