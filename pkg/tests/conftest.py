"""Shared fixtures: a tiny backbone, short targets and fast customization settings."""
import pytest
import torch

from app.schemas.masking import MaskingStrategy
from app.schemas.model import ModelConfig
from app.schemas.ttt import TTTConfig
from app.services.backbone import build_model, init_model
from app.services.seqio import tokenize

TINY_CONFIG = ModelConfig(num_layers=2, model_dim=16, num_heads=2, ffn_dim=32, max_positions=80, seed=0)
TARGET_SEQUENCE = "MKTAYIAKQRQISFVKSHFSRQ"


def pytest_addoption(parser):
    parser.addoption(
        "--record-pilot",
        action="store_true",
        default=False,
        help="Write desk-scale measurements into tests/integration/desk_scale_pilot.json",
    )


@pytest.fixture
def tiny_config():
    """Model geometry small enough for exhaustive checks."""
    return TINY_CONFIG


@pytest.fixture
def tiny_snapshot(tiny_config):
    """Deterministic initial parameters."""
    return init_model(tiny_config)


@pytest.fixture
def tiny_model(tiny_snapshot):
    """Fresh module holding the initial parameters."""
    model = build_model(tiny_snapshot)
    model.eval()
    return model


@pytest.fixture
def double_model(tiny_snapshot):
    """The tiny model in 64-bit precision."""
    model = build_model(tiny_snapshot).double()
    model.eval()
    return model


@pytest.fixture
def target():
    """A short tokenized target."""
    return tokenize(TARGET_SEQUENCE, source_id="target")


@pytest.fixture
def fast_ttt_config():
    """A few cheap steps with a large learning rate so updates are visible."""
    return TTTConfig(
        learning_rate=5e-2,
        micro_batch_size=2,
        grad_accum_steps=2,
        steps=3,
        masking=MaskingStrategy(),
        emit_perplexity=True,
        seed=7,
    )


@pytest.fixture(autouse=True)
def _torch_seed():
    """Keep any incidental global torch randomness fixed."""
    torch.manual_seed(0)
