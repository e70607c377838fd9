"""Tests for the masked language model backbone."""
import pytest
import torch

from app.core.exceptions import ModelConfigError, SequenceTooLongError, ShapeMismatchError
from app.schemas.model import LoraConfig, ModelConfig, TrainableSelection
from app.schemas.sequence import ALPHABET
from app.services.backbone import (
    build_model,
    collate,
    forward_logits,
    init_model,
    parameter_groups,
    restore,
    select_trainable,
    snapshot,
)
from app.services.lora import apply_lora
from app.services.seqio import tokenize


def test_init_model_is_deterministic(tiny_config):
    """Test the same seed gives bit-identical parameters."""
    assert init_model(tiny_config).equals(init_model(tiny_config))


def test_init_model_seed_changes_parameters(tiny_config):
    """Test a different seed gives different parameters."""
    other = tiny_config.model_copy(update={"seed": 1})

    assert not init_model(tiny_config).equals(init_model(other))


def test_invalid_head_split():
    """Test model_dim must divide into heads."""
    with pytest.raises(ModelConfigError):
        init_model(ModelConfig(model_dim=10, num_heads=3))


def test_forward_logits_shape(tiny_snapshot, target):
    """Test logits cover every framed position and the vocabulary."""
    logits, pad_mask = forward_logits(tiny_snapshot, [target])

    assert logits.shape == (1, len(target), ALPHABET.vocab_size)
    assert not pad_mask.any()


def test_padding_does_not_change_logits(tiny_model, target):
    """Test a shorter sequence's logits are unaffected by batching with a longer one."""
    short = tokenize("MKTAY")
    alone, _ = forward_logits(tiny_model, [short])
    batched, pad_mask = forward_logits(tiny_model, [short, target])

    assert pad_mask[0, len(short):].all()
    torch.testing.assert_close(batched[0, : len(short)], alone[0], rtol=1e-5, atol=1e-6)


def test_batch_order_does_not_change_logits(tiny_model):
    """Test each sequence gets the same logits wherever it sits in the batch."""
    batch = [tokenize("MKTAYIAKQR"), tokenize("ACDXFG"), tokenize("WYVTSRQPNMLKIHG")]
    order = [2, 0, 1]

    logits, pad_mask = forward_logits(tiny_model, batch)
    permuted, permuted_mask = forward_logits(tiny_model, [batch[i] for i in order])

    for row, i in enumerate(order):
        n = len(batch[i])
        assert torch.equal(permuted_mask[row], pad_mask[i])
        torch.testing.assert_close(permuted[row, :n], logits[i, :n], rtol=1e-5, atol=1e-6)


def test_sequence_too_long(tiny_model):
    """Test sequences beyond max_positions are refused."""
    long = tokenize("A" * 100)

    with pytest.raises(SequenceTooLongError):
        forward_logits(tiny_model, [long])


def test_collate_pads_right():
    """Test right padding with the pad id."""
    input_ids, pad_mask = collate([(1, 5, 2), (1, 5, 6, 7, 2)])

    assert input_ids.tolist()[0] == [1, 5, 2, ALPHABET.pad_id, ALPHABET.pad_id]
    assert pad_mask.tolist()[0] == [False, False, False, True, True]


def test_snapshot_restore_bit_exact(tiny_model, tiny_snapshot):
    """Test restore returns every parameter bit-exactly after an update."""
    with torch.no_grad():
        for p in tiny_model.parameters():
            p.add_(0.1)
    assert not snapshot(tiny_model).equals(tiny_snapshot)

    restore(tiny_model, tiny_snapshot)

    assert snapshot(tiny_model).equals(tiny_snapshot)


def test_restore_drops_adapters(tiny_model, tiny_snapshot):
    """Test restoring a model with adapters attached yields the plain layout."""
    apply_lora(tiny_model, LoraConfig(rank=2))

    restore(tiny_model, tiny_snapshot)

    assert not any(".lora_" in name for name in tiny_model.state_dict())
    assert snapshot(tiny_model).equals(tiny_snapshot)


def test_restore_shape_mismatch(tiny_model, tiny_config):
    """Test a snapshot of another geometry is refused."""
    other = init_model(tiny_config.model_copy(update={"model_dim": 8}))

    with pytest.raises(ShapeMismatchError):
        restore(tiny_model, other)


def test_parameter_groups_partition(tiny_model):
    """Test every parameter falls into exactly one group."""
    groups = parameter_groups(tiny_model)
    names = [n for group in groups.values() for n in group]

    assert sorted(names) == sorted(n for n, _ in tiny_model.named_parameters())
    assert groups["embeddings"] == ["token_embedding.weight", "position_embedding.weight"]
    assert "lm_head.weight" in groups["head"]


@pytest.mark.parametrize(
    "selection,frozen_prefixes",
    [
        (TrainableSelection.FULL, ()),
        (TrainableSelection.FULL_EXCEPT_EMBEDDINGS, ("token_embedding.", "position_embedding.")),
    ],
)
def test_select_trainable(tiny_model, selection, frozen_prefixes):
    """Test requires_grad follows the selection."""
    trainable = dict(select_trainable(tiny_model, selection))

    for name, param in tiny_model.named_parameters():
        expected = not name.startswith(frozen_prefixes) if frozen_prefixes else True
        assert param.requires_grad == expected
        assert (name in trainable) == expected


@pytest.mark.parametrize("train_norms_and_head", [False, True])
def test_select_trainable_lora_only(tiny_model, train_norms_and_head):
    """Test adapter-only training, optionally with norms and the MLM head."""
    apply_lora(tiny_model, LoraConfig(rank=2, train_norms_and_head=train_norms_and_head))

    names = [n for n, _ in select_trainable(tiny_model, TrainableSelection.LORA_ONLY, train_norms_and_head)]

    assert any(".lora_A" in n for n in names)
    assert not any(n.endswith("q_proj.weight") for n in names)
    assert ("lm_head.weight" in names) == train_norms_and_head
    assert ("final_norm.weight" in names) == train_norms_and_head


def test_build_model_copies_snapshot(tiny_snapshot):
    """Test changing a built model leaves the snapshot intact."""
    model = build_model(tiny_snapshot)
    before = tiny_snapshot.tensors["lm_head.weight"].clone()

    with torch.no_grad():
        model.lm_head.weight.add_(1.0)

    assert torch.equal(tiny_snapshot.tensors["lm_head.weight"], before)
