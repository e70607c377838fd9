"""
Frozen downstream heads over pooled backbone embeddings, and confidence functions
"""
import hashlib
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Callable, Dict, Optional, Sequence, Tuple

import numpy as np
import structlog
import torch
from sklearn.linear_model import LogisticRegression

from app.core.exceptions import MissingHeadError, ShapeMismatchError
from app.schemas.heads import ConfidenceKind
from app.schemas.sequence import TokenSequence
from app.services.backbone import MaskedLanguageModel, collate
from app.services.scoring import pseudo_perplexity

logger = structlog.get_logger()

ConfidenceFn = Callable[[MaskedLanguageModel], float]


@dataclass(frozen=True)
class ClassifierHead:
    """Linear softmax classifier; never updated by customization"""

    weight: torch.Tensor
    bias: torch.Tensor
    classes: Tuple[str, ...] = field(default=())

    def __post_init__(self):
        if self.weight.dim() != 2 or self.bias.shape != (self.weight.shape[0],):
            raise ShapeMismatchError(
                "Head weight must be (classes, dim) with a matching bias",
                details={"weight": list(self.weight.shape), "bias": list(self.bias.shape)},
            )
        if self.classes and len(self.classes) != self.weight.shape[0]:
            raise ShapeMismatchError("Head class labels do not match its weight rows")

    @property
    def num_classes(self) -> int:
        return self.weight.shape[0]

    @property
    def input_dim(self) -> int:
        return self.weight.shape[1]

    def tensors(self) -> Dict[str, torch.Tensor]:
        return OrderedDict(weight=self.weight, bias=self.bias)


def embed(model: MaskedLanguageModel, x: TokenSequence) -> torch.Tensor:
    """Mean of final-layer hidden states over residue positions"""
    input_ids, pad_mask = collate([x])
    with torch.no_grad():
        hidden = model.encode(input_ids, pad_mask)[0]
    return hidden[1:x.raw_length + 1].mean(dim=0)


def classify(head: ClassifierHead, embedding: torch.Tensor) -> torch.Tensor:
    if embedding.shape != (head.input_dim,):
        raise ShapeMismatchError(
            f"Embedding of shape {tuple(embedding.shape)} does not fit a head over {head.input_dim} dims",
            details={"embedding": list(embedding.shape), "expected": head.input_dim},
        )
    logits = head.weight.to(embedding.dtype) @ embedding + head.bias.to(embedding.dtype)
    return torch.softmax(logits, dim=-1)


def head_hash(head: ClassifierHead) -> str:
    """SHA-256 over the head's raw parameter bytes"""
    digest = hashlib.sha256()
    for name, tensor in head.tensors().items():
        digest.update(name.encode("utf-8"))
        digest.update(tensor.detach().cpu().contiguous().numpy().tobytes())
    return digest.hexdigest()


def fit_head(embeddings: np.ndarray, labels: Sequence[str], seed: int = 0) -> ClassifierHead:
    """
    Fit a multinomial logistic regression on frozen embeddings

    Two-class fits are expanded to two softmax rows ``[0, w]`` so the head
    reproduces the fitted sigmoid.
    """
    clf = LogisticRegression(max_iter=2000, random_state=seed)
    clf.fit(embeddings, list(labels))
    coef = np.asarray(clf.coef_, dtype=np.float32)
    intercept = np.asarray(clf.intercept_, dtype=np.float32)
    if len(clf.classes_) == 2:
        coef = np.vstack([np.zeros_like(coef), coef])
        intercept = np.concatenate([np.zeros_like(intercept), intercept])

    head = ClassifierHead(
        weight=torch.from_numpy(coef),
        bias=torch.from_numpy(intercept),
        classes=tuple(str(c) for c in clf.classes_),
    )
    logger.info(
        "Fitted classifier head",
        classes=list(head.classes),
        samples=len(labels),
        train_accuracy=float(clf.score(embeddings, list(labels))),
    )
    return head


def confidence(
    kind: ConfidenceKind,
    model: MaskedLanguageModel,
    x: TokenSequence,
    head: Optional[ClassifierHead] = None,
    renormalize_residues: bool = False,
) -> float:
    """Higher is more confident; never touches model parameters"""
    if kind == ConfidenceKind.NEG_PSEUDO_PERPLEXITY:
        return -pseudo_perplexity(model, x, renormalize_residues)
    if head is None:
        raise MissingHeadError()
    return float(classify(head, embed(model, x)).max())


def make_confidence_fn(
    kind: ConfidenceKind, x: TokenSequence, head: Optional[ClassifierHead] = None
) -> ConfidenceFn:
    if kind == ConfidenceKind.HEAD_MAX_PROB and head is None:
        raise MissingHeadError()

    def evaluate(model: MaskedLanguageModel) -> float:
        return confidence(kind, model, x, head)

    return evaluate
