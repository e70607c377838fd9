"""
Masked-LM loss, gradient accumulation and the plain SGD update
"""
from typing import List, Optional, Sequence, Tuple

import structlog
import torch
import torch.nn as nn
import torch.nn.functional as F

from app.core.exceptions import EmptySupervisionError, IncompleteAccumulationError
from app.schemas.ttt import LossKind, LossReduction, OptimConfig
from app.services.masking import MaskedBatch

logger = structlog.get_logger()

NamedParameters = Sequence[Tuple[str, nn.Parameter]]


def token_nll(logits: torch.Tensor, targets: torch.Tensor) -> torch.Tensor:
    """Per-position negative log-likelihood over the full vocabulary, shape (batch, length)"""
    return F.cross_entropy(logits.transpose(1, 2), targets, reduction="none")


def masked_lm_loss(
    logits: torch.Tensor,
    batch: MaskedBatch,
    loss_kind: LossKind = LossKind.NORMALIZED_CROSS_ENTROPY,
    reduction: LossReduction = LossReduction.SEQUENCE,
) -> torch.Tensor:
    """
    Cross-entropy of ``logits`` against the uncorrupted tokens

    normalized: masked positions only, averaged per sequence then over the
    batch (or over all masked tokens at once with ``reduction=token``).
    unnormalized: every non-pad position including bos/eos, one global mean.
    """
    nll = token_nll(logits, batch.original_ids)

    if loss_kind == LossKind.UNNORMALIZED_CROSS_ENTROPY:
        weight = (~batch.pad_mask).to(nll.dtype)
        return (nll * weight).sum() / weight.sum()

    weight = batch.supervised.to(nll.dtype)
    counts = weight.sum(dim=1)
    if not bool((counts > 0).any()):
        raise EmptySupervisionError()
    if reduction == LossReduction.TOKEN:
        return (nll * weight).sum() / counts.sum()

    present = counts > 0
    per_sequence = (nll * weight).sum(dim=1)[present] / counts[present]
    return per_sequence.mean()


class GradientBuffer:
    """Running sum of micro-batch gradients for a fixed list of parameters"""

    def __init__(self, parameters: NamedParameters, accum_steps: int):
        self.parameters: List[Tuple[str, nn.Parameter]] = list(parameters)
        self.accum_steps = accum_steps
        self.accumulators = [torch.zeros_like(p) for _, p in self.parameters]
        self.micro_steps_seen = 0

    @property
    def names(self) -> List[str]:
        return [n for n, _ in self.parameters]

    def add(self, grads: Sequence[Optional[torch.Tensor]]) -> None:
        # fixed parameter order keeps the reduction deterministic
        for acc, grad in zip(self.accumulators, grads):
            if grad is not None:
                acc.add_(grad)
        self.micro_steps_seen += 1

    def averaged(self) -> List[torch.Tensor]:
        return [acc / self.accum_steps for acc in self.accumulators]

    def zero(self) -> None:
        for acc in self.accumulators:
            acc.zero_()
        self.micro_steps_seen = 0

    @property
    def complete(self) -> bool:
        return self.micro_steps_seen == self.accum_steps


def loss_and_grad(
    model: nn.Module,
    batch: MaskedBatch,
    buffer: GradientBuffer,
    loss_kind: LossKind = LossKind.NORMALIZED_CROSS_ENTROPY,
    reduction: LossReduction = LossReduction.SEQUENCE,
) -> float:
    """Forward one micro-batch, add its gradients to ``buffer`` and return the loss"""
    logits = model(batch.input_ids, batch.pad_mask)
    loss = masked_lm_loss(logits, batch, loss_kind, reduction)
    params = [p for _, p in buffer.parameters]
    grads = torch.autograd.grad(loss, params, allow_unused=True) if params else []
    buffer.add(grads)
    return float(loss.detach())


def sgd_step(buffer: GradientBuffer, config: OptimConfig) -> None:
    """theta <- theta - lr * (accumulated gradient / grad_accum_steps), then clear the buffer"""
    if buffer.micro_steps_seen != config.grad_accum_steps:
        raise IncompleteAccumulationError(buffer.micro_steps_seen, config.grad_accum_steps)

    params = [p for _, p in buffer.parameters]
    if params:
        optimizer = torch.optim.SGD(
            params, lr=config.learning_rate, momentum=config.momentum, weight_decay=config.weight_decay
        )
        for param, grad in zip(params, buffer.averaged()):
            param.grad = grad
        optimizer.step()
        for param in params:
            param.grad = None
    buffer.zero()
