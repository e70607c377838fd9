"""
Mask plan sampling and application

A plan is drawn from a numpy ``Generator`` in a fixed order (crop start,
ratio, positions, corruption actions, replacement residues) so identical
(sequence, strategy, seed) triples always give identical plans.
"""
import json
import math
from dataclasses import dataclass
from typing import Dict, Optional, Sequence, Tuple

import numpy as np
import torch

from app.core.exceptions import MaskPlanMismatchError
from app.schemas.masking import CorruptionAction, MaskingKind, MaskingStrategy
from app.schemas.sequence import ALPHABET, TokenSequence
from app.services.backbone import collate


@dataclass(frozen=True)
class SeedTrace:
    """
    Where a plan's random draws came from

    ``entropy`` is the seed material of the generator (``[seed, step]`` in a
    customization session) and ``state`` the JSON-encoded bit generator state
    just before the plan was drawn, so ``replay_generator`` can redraw it.
    """

    entropy: Tuple[int, ...]
    state: str

    @classmethod
    def capture(cls, rng: np.random.Generator) -> "SeedTrace":
        bit_generator = rng.bit_generator
        entropy = getattr(bit_generator.seed_seq, "entropy", None)
        if entropy is None:
            entropy = ()
        elif isinstance(entropy, (int, np.integer)):
            entropy = (int(entropy),)
        else:
            entropy = tuple(int(e) for e in entropy)
        return cls(entropy=entropy, state=json.dumps(bit_generator.state, sort_keys=True))


def replay_generator(trace: SeedTrace) -> np.random.Generator:
    """A generator positioned exactly where the traced plan started drawing"""
    state = json.loads(trace.state)
    bit_generator = getattr(np.random, state["bit_generator"])()
    bit_generator.state = state
    return np.random.Generator(bit_generator)


@dataclass(frozen=True)
class MaskPlan:
    """
    Sampled masking for one view of a sequence

    ``positions`` are 0-based residue indices relative to the crop.
    ``replacements`` holds the random residue id for to_random_token actions
    and ``None`` elsewhere. ``seed_trace`` is set for sampled plans.
    """

    sequence_length: int
    crop_start: int
    crop_length: int
    ratio: float
    positions: Tuple[int, ...]
    actions: Tuple[CorruptionAction, ...]
    replacements: Tuple[Optional[int], ...]
    seed_trace: Optional[SeedTrace] = None

    def __post_init__(self):
        if not (len(self.positions) == len(self.actions) == len(self.replacements)):
            raise MaskPlanMismatchError("positions, actions and replacements differ in length")


@dataclass(frozen=True)
class MaskedSequence:
    """
    A bos/eos framed (possibly cropped) view with corruption applied

    ``original_ids`` is the uncorrupted framed crop; ``masked_positions``
    index into it (bos is index 0).
    """

    input_ids: Tuple[int, ...]
    original_ids: Tuple[int, ...]
    masked_positions: Tuple[int, ...]

    @property
    def targets(self) -> Dict[int, int]:
        return {i: self.original_ids[i] for i in self.masked_positions}

    def __len__(self) -> int:
        return len(self.input_ids)


@dataclass
class MaskedBatch:
    """Padded tensors for a list of masked views"""

    input_ids: torch.Tensor
    original_ids: torch.Tensor
    pad_mask: torch.Tensor
    supervised: torch.Tensor

    @property
    def size(self) -> int:
        return self.input_ids.shape[0]


def num_masked(ratio: float, length: int) -> int:
    """Round half up, never fewer than one position"""
    return max(1, min(length, math.floor(ratio * length + 0.5)))


def sample_crop(seq: TokenSequence, window: Optional[int], rng: np.random.Generator) -> int:
    if window is None or seq.raw_length <= window:
        return 0
    return int(rng.integers(0, seq.raw_length - window + 1))


def sample_ratio(strategy: MaskingStrategy, rng: np.random.Generator) -> float:
    if strategy.kind == MaskingKind.FIXED_RATIO:
        return strategy.p
    if strategy.kind == MaskingKind.UNIFORM_RATIO_RANGE:
        return float(rng.uniform(strategy.lo, strategy.hi))
    return float(rng.beta(strategy.a, strategy.b))


def sample_mask_plan(seq: TokenSequence, strategy: MaskingStrategy, rng: np.random.Generator) -> MaskPlan:
    """Draw crop, masked positions and per-position corruption for one view"""
    seed_trace = SeedTrace.capture(rng)
    crop_start = sample_crop(seq, strategy.crop, rng)
    crop_length = seq.raw_length if strategy.crop is None else min(seq.raw_length, strategy.crop)
    ratio = sample_ratio(strategy, rng)
    k = num_masked(ratio, crop_length)

    positions = np.sort(rng.choice(crop_length, size=k, replace=False))
    actions = rng.choice(len(CorruptionAction), size=k, p=np.asarray(strategy.corruption))
    random_residues = rng.integers(0, len(ALPHABET.residue_ids), size=k)

    replacements = tuple(
        ALPHABET.residue_ids[int(r)] if a == CorruptionAction.TO_RANDOM_TOKEN else None
        for a, r in zip(actions, random_residues)
    )
    return MaskPlan(
        sequence_length=seq.raw_length,
        crop_start=crop_start,
        crop_length=crop_length,
        ratio=ratio,
        positions=tuple(int(p) for p in positions),
        actions=tuple(CorruptionAction(int(a)) for a in actions),
        replacements=replacements,
        seed_trace=seed_trace,
    )


def apply_mask_plan(seq: TokenSequence, plan: MaskPlan) -> MaskedSequence:
    """Crop, re-frame with bos/eos and corrupt the planned positions"""
    if plan.sequence_length != seq.raw_length:
        raise MaskPlanMismatchError(
            f"Plan was sampled for length {plan.sequence_length}, sequence has {seq.raw_length}",
            details={"plan_length": plan.sequence_length, "sequence_length": seq.raw_length},
        )
    if plan.crop_start < 0 or plan.crop_start + plan.crop_length > seq.raw_length or plan.crop_length < 1:
        raise MaskPlanMismatchError("Crop window falls outside the sequence")

    crop = seq.residue_ids[plan.crop_start:plan.crop_start + plan.crop_length]
    original = (ALPHABET.bos_id,) + tuple(crop) + (ALPHABET.eos_id,)
    corrupted = list(original)
    for position, action, replacement in zip(plan.positions, plan.actions, plan.replacements):
        if not 0 <= position < plan.crop_length:
            raise MaskPlanMismatchError(f"Masked position {position} lies outside the crop")
        index = position + 1
        if action == CorruptionAction.TO_MASK_TOKEN:
            corrupted[index] = ALPHABET.mask_id
        elif action == CorruptionAction.TO_RANDOM_TOKEN:
            corrupted[index] = replacement

    return MaskedSequence(
        input_ids=tuple(corrupted),
        original_ids=original,
        masked_positions=tuple(p + 1 for p in plan.positions),
    )


def single_position_views(seq: TokenSequence) -> Tuple[MaskedSequence, ...]:
    """One mask-token view per residue, covering every position exactly once"""
    views = []
    for position in range(seq.raw_length):
        plan = MaskPlan(
            sequence_length=seq.raw_length,
            crop_start=0,
            crop_length=seq.raw_length,
            ratio=1.0 / seq.raw_length,
            positions=(position,),
            actions=(CorruptionAction.TO_MASK_TOKEN,),
            replacements=(None,),
        )
        views.append(apply_mask_plan(seq, plan))
    return tuple(views)


def collate_masked(views: Sequence[MaskedSequence]) -> MaskedBatch:
    input_ids, pad_mask = collate([v.input_ids for v in views])
    original_ids, _ = collate([v.original_ids for v in views])
    supervised = torch.zeros_like(pad_mask)
    for row, view in enumerate(views):
        supervised[row, list(view.masked_positions)] = True
    return MaskedBatch(input_ids=input_ids, original_ids=original_ids, pad_mask=pad_mask, supervised=supervised)
