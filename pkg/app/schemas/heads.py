"""
Downstream head schemas
"""
from enum import Enum


class ConfidenceKind(str, Enum):
    """Confidence functions used to pick the customized step; higher is more confident"""
    NEG_PSEUDO_PERPLEXITY = "neg_pseudo_perplexity"
    HEAD_MAX_PROB = "head_max_prob"
