"""Tests for low-rank adapters."""
import torch

from app.schemas.model import LoraConfig
from app.services.backbone import MaskedLanguageModel, forward_logits, restore, snapshot
from app.services.lora import apply_lora, has_lora, lora_layers, merge_lora, remove_lora


def test_fresh_adapter_is_identity(tiny_model, target):
    """Test attaching adapters with B = 0 leaves logits bit-identical."""
    before, _ = forward_logits(tiny_model, [target])

    apply_lora(tiny_model, LoraConfig(rank=4, alpha=8.0), seed=3)
    after, _ = forward_logits(tiny_model, [target])

    assert has_lora(tiny_model)
    assert torch.equal(before, after)


def test_adapter_targets_every_projection(tiny_model, tiny_config):
    """Test q/k/v/out projections of every layer are wrapped."""
    adapters = apply_lora(tiny_model, LoraConfig(rank=2))

    assert len(adapters) == 4 * tiny_config.num_layers
    assert all(layer.scaling == 32.0 / 2 for layer in lora_layers(tiny_model).values())


def test_merged_weights_match_adapter_path(double_model, target):
    """Test W + (alpha / r) B A reproduces the adapter forward."""
    apply_lora(double_model, LoraConfig(rank=3, alpha=6.0), seed=1)
    generator = torch.Generator().manual_seed(0)
    with torch.no_grad():
        for layer in lora_layers(double_model).values():
            layer.lora_B.copy_(torch.randn(layer.lora_B.shape, generator=generator, dtype=torch.float64) * 0.1)
    adapter_logits, _ = forward_logits(double_model, [target])

    merge_lora(double_model)
    merged_logits, _ = forward_logits(double_model, [target])

    assert not has_lora(double_model)
    torch.testing.assert_close(merged_logits, adapter_logits, rtol=1e-6, atol=1e-9)


def test_snapshot_folds_adapters(double_model, target):
    """Test a snapshot taken with adapters attached has the plain layout and the merged function."""
    apply_lora(double_model, LoraConfig(rank=2, alpha=4.0))
    with torch.no_grad():
        for layer in lora_layers(double_model).values():
            layer.lora_B.fill_(0.01)
    expected, _ = forward_logits(double_model, [target])

    state = snapshot(double_model)
    fresh = MaskedLanguageModel(state.config).double()
    restore(fresh, state)
    logits, _ = forward_logits(fresh, [target])

    assert not any(".lora_" in name for name in state.tensors)
    torch.testing.assert_close(logits, expected, rtol=1e-6, atol=1e-9)


def test_remove_lora_keeps_base_weights(tiny_model, tiny_snapshot):
    """Test removing adapters discards their contribution."""
    apply_lora(tiny_model, LoraConfig(rank=2))
    with torch.no_grad():
        for layer in lora_layers(tiny_model).values():
            layer.lora_B.fill_(1.0)

    remove_lora(tiny_model)

    assert snapshot(tiny_model).equals(tiny_snapshot)


def test_adapter_init_is_seeded(tiny_model):
    """Test the same seed draws the same A matrices."""
    first = [a.lora_A.detach().clone() for a in apply_lora(tiny_model, LoraConfig(rank=2), seed=5)]
    second = [a.lora_A.detach().clone() for a in apply_lora(tiny_model, LoraConfig(rank=2), seed=5)]

    assert all(torch.equal(a, b) for a, b in zip(first, second))
