"""Tests for mask plan sampling and application."""
import dataclasses

import numpy as np
import pytest
from scipy import stats

from app.core.exceptions import MaskPlanMismatchError
from app.schemas.masking import (
    BERT_CORRUPTION,
    MASK_ONLY_CORRUPTION,
    CorruptionAction,
    MaskingKind,
    MaskingStrategy,
)
from app.schemas.sequence import ALPHABET, CANONICAL_RESIDUES, UNKNOWN_RESIDUE
from app.services.masking import (
    apply_mask_plan,
    collate_masked,
    num_masked,
    replay_generator,
    sample_crop,
    sample_mask_plan,
    single_position_views,
)
from app.services.seqio import tokenize


@pytest.fixture
def long_target():
    """A 200-residue sequence."""
    return tokenize("ACDEFGHIKLMNPQRSTVWY" * 10)


@pytest.mark.parametrize("length,expected", [(1, 1), (3, 1), (10, 2), (20, 3), (100, 15), (200, 30)])
def test_fixed_ratio_count(length, expected):
    """Test |M| = round(0.15 n), at least one."""
    seq = tokenize(("ACDEFGHIKLMNPQRSTVWY" * 10)[:length])
    plan = sample_mask_plan(seq, MaskingStrategy(p=0.15), np.random.default_rng(0))

    assert len(plan.positions) == expected == num_masked(0.15, length)
    assert len(set(plan.positions)) == expected


def test_plan_is_deterministic(long_target):
    """Test identical seeds give identical plans."""
    strategy = MaskingStrategy(kind=MaskingKind.BETA_RATIO)

    first = sample_mask_plan(long_target, strategy, np.random.default_rng(42))
    second = sample_mask_plan(long_target, strategy, np.random.default_rng(42))

    assert first == second


def test_corruption_frequencies(long_target):
    """Test 80/10/10 action frequencies fall in their 99% binomial bands over 10,000 draws."""
    rng = np.random.default_rng(1)
    strategy = MaskingStrategy(p=0.25, crop=None)
    counts = np.zeros(3)
    total = 0
    while total < 10_000:
        plan = sample_mask_plan(long_target, strategy, rng)
        for action in plan.actions:
            counts[int(action)] += 1
        total += len(plan.actions)

    for action, p in zip(CorruptionAction, (0.8, 0.1, 0.1)):
        band = 2.576 * np.sqrt(p * (1 - p) / total)
        assert abs(counts[int(action)] / total - p) < band


def test_apply_plan_corrupts_only_planned_positions(long_target):
    """Test unplanned positions keep their tokens and random replacements are residues."""
    plan = sample_mask_plan(long_target, MaskingStrategy(p=0.5, crop=None), np.random.default_rng(5))
    view = apply_mask_plan(long_target, plan)

    assert view.original_ids == long_target.ids
    planned = set(view.masked_positions)
    for i, (token, original) in enumerate(zip(view.input_ids, view.original_ids)):
        if i not in planned:
            assert token == original
    for position, action in zip(plan.positions, plan.actions):
        token = view.input_ids[position + 1]
        if action == CorruptionAction.TO_MASK_TOKEN:
            assert token == ALPHABET.mask_id
        elif action == CorruptionAction.TO_RANDOM_TOKEN:
            assert ALPHABET.is_residue_id(token)
        else:
            assert token == view.original_ids[position + 1]


def test_crop_reframes_window(long_target):
    """Test long sequences are cropped to the window and framed with bos/eos."""
    strategy = MaskingStrategy(crop=50, corruption=MASK_ONLY_CORRUPTION)
    plan = sample_mask_plan(long_target, strategy, np.random.default_rng(2))
    view = apply_mask_plan(long_target, plan)

    assert plan.crop_length == 50
    assert len(view) == 52
    assert view.original_ids[0] == ALPHABET.bos_id and view.original_ids[-1] == ALPHABET.eos_id
    assert view.original_ids[1:-1] == long_target.residue_ids[plan.crop_start:plan.crop_start + 50]
    assert len(plan.positions) == num_masked(0.15, 50)


def test_plan_for_other_sequence(long_target):
    """Test a plan only applies to sequences of the length it was drawn for."""
    plan = sample_mask_plan(long_target, MaskingStrategy(), np.random.default_rng(0))

    with pytest.raises(MaskPlanMismatchError):
        apply_mask_plan(tokenize("ACDE"), plan)


def test_uniform_ratio_range_bounds(long_target):
    """Test sampled ratios stay within [lo, hi]."""
    strategy = MaskingStrategy(kind=MaskingKind.UNIFORM_RATIO_RANGE, lo=0.1, hi=0.3, crop=None)
    rng = np.random.default_rng(0)

    ratios = [sample_mask_plan(long_target, strategy, rng).ratio for _ in range(200)]

    assert min(ratios) >= 0.1 and max(ratios) <= 0.3


def test_beta_ratio_mean(long_target):
    """Test the beta ratio has the expected mean a / (a + b)."""
    strategy = MaskingStrategy(kind=MaskingKind.BETA_RATIO, a=3.0, b=9.0)
    rng = np.random.default_rng(0)

    ratios = [sample_mask_plan(long_target, strategy, rng).ratio for _ in range(4000)]

    assert abs(np.mean(ratios) - 0.25) < 0.01


def test_single_position_views():
    """Test every residue is masked exactly once."""
    seq = tokenize("ACDEF")

    views = single_position_views(seq)

    assert [v.masked_positions for v in views] == [(1,), (2,), (3,), (4,), (5,)]
    assert all(v.input_ids[p] == ALPHABET.mask_id for v in views for p in v.masked_positions)


def test_collate_masked_supervision():
    """Test the supervised mask flags exactly the planned positions."""
    views = single_position_views(tokenize("ACD"))[:2]

    batch = collate_masked(views)

    assert batch.supervised.sum().item() == 2
    assert batch.supervised[0, 1] and batch.supervised[1, 2]


def test_plan_records_seed_trace(long_target):
    """Test sampled plans carry their seed material and replay from the recorded state."""
    rng = np.random.default_rng([7, 3])
    strategy = MaskingStrategy(kind=MaskingKind.BETA_RATIO, crop=60)
    sample_mask_plan(long_target, strategy, rng)

    plan = sample_mask_plan(long_target, strategy, rng)
    replayed = sample_mask_plan(long_target, strategy, replay_generator(plan.seed_trace))

    assert plan.seed_trace.entropy == (7, 3)
    assert dataclasses.replace(replayed, seed_trace=None) == dataclasses.replace(plan, seed_trace=None)
    assert replayed.seed_trace.state == plan.seed_trace.state


def test_crop_start_is_uniform():
    """Test crop starts cover [0, n - window] uniformly (chi-square over 10,000 draws)."""
    seq = tokenize(("ACDEFGHIKLMNPQRSTVWY" * 100)[:2000])
    rng = np.random.default_rng(11)

    starts = np.array([sample_crop(seq, 1024, rng) for _ in range(10_000)])

    assert starts.min() >= 0 and starts.max() <= 976
    counts = np.bincount(starts, minlength=977)
    assert stats.chisquare(counts).pvalue > 0.01
    assert sample_crop(seq, 2000, rng) == 0
    assert sample_crop(tokenize("ACDE"), 1024, rng) == 0


@pytest.mark.parametrize("corruption", [BERT_CORRUPTION, MASK_ONLY_CORRUPTION, (0.0, 1.0, 0.0), (0.0, 0.0, 1.0)])
def test_masking_never_touches_framing_and_keeps_targets(corruption):
    """Test fuzzed plans mask only residues and always supervise with the uncorrupted token."""
    rng = np.random.default_rng(23)
    strategies = [
        MaskingStrategy(p=0.5, corruption=corruption, crop=None),
        MaskingStrategy(kind=MaskingKind.BETA_RATIO, corruption=corruption, crop=7),
        MaskingStrategy(kind=MaskingKind.UNIFORM_RATIO_RANGE, lo=0.05, hi=1.0, corruption=corruption, crop=1),
    ]
    framing = {ALPHABET.bos_id, ALPHABET.eos_id, ALPHABET.pad_id}
    for _ in range(300):
        length = int(rng.integers(1, 40))
        symbols = list(CANONICAL_RESIDUES + UNKNOWN_RESIDUE)
        seq = tokenize("".join(rng.choice(symbols, size=length)))
        strategy = strategies[int(rng.integers(0, len(strategies)))]
        plan = sample_mask_plan(seq, strategy, rng)
        view = apply_mask_plan(seq, plan)

        assert 1 <= len(plan.positions) <= plan.crop_length
        assert all(0 < i < len(view) - 1 for i in view.masked_positions)
        assert view.input_ids[0] == ALPHABET.bos_id and view.input_ids[-1] == ALPHABET.eos_id
        crop = seq.residue_ids[plan.crop_start:plan.crop_start + plan.crop_length]
        for position, i in zip(plan.positions, view.masked_positions):
            assert view.targets[i] == crop[position]
            assert view.targets[i] not in framing

        batch = collate_masked([view])
        supervised = batch.supervised[0].nonzero().flatten().tolist()
        assert supervised == list(view.masked_positions)
        assert batch.original_ids[0, supervised].tolist() == [crop[p] for p in plan.positions]
