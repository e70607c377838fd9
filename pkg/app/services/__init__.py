"""
Service layer: sequence IO, the backbone and the customization engine
"""
from app.services.backbone import (
    BackboneSnapshot,
    MaskedLanguageModel,
    build_model,
    forward_logits,
    init_model,
    restore,
    snapshot,
)
from app.services.checkpoint import checkpoint_hash, load_checkpoint, read_checkpoint, save_checkpoint
from app.services.heads import ClassifierHead, classify, confidence, embed
from app.services.masking import MaskPlan, apply_mask_plan, sample_crop, sample_mask_plan
from app.services.optim import GradientBuffer, loss_and_grad, sgd_step
from app.services.scoring import evaluate_assay, log_odds_score, pseudo_perplexity, spearman
from app.services.seqio import detokenize, parse_a3m, parse_fasta, parse_mutations, tokenize, write_fasta
from app.services.ttt import TTTSession, pretrain, ttt_msa, ttt_reset, ttt_single
from app.services.grid import run_grid

__all__ = [
    "BackboneSnapshot",
    "MaskedLanguageModel",
    "build_model",
    "forward_logits",
    "init_model",
    "restore",
    "snapshot",
    "checkpoint_hash",
    "load_checkpoint",
    "read_checkpoint",
    "save_checkpoint",
    "ClassifierHead",
    "classify",
    "confidence",
    "embed",
    "MaskPlan",
    "apply_mask_plan",
    "sample_crop",
    "sample_mask_plan",
    "GradientBuffer",
    "loss_and_grad",
    "sgd_step",
    "evaluate_assay",
    "log_odds_score",
    "pseudo_perplexity",
    "spearman",
    "detokenize",
    "parse_a3m",
    "parse_fasta",
    "parse_mutations",
    "tokenize",
    "write_fasta",
    "TTTSession",
    "pretrain",
    "ttt_msa",
    "ttt_reset",
    "ttt_single",
    "run_grid",
]
