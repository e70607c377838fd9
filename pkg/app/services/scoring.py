"""
Pseudo-perplexity, log-odds fitness scoring and rank evaluation
"""
import math
from typing import Dict, List, Optional, Sequence

import numpy as np
import structlog
import torch
from scipy.stats import rankdata

from app.core.config import settings
from app.core.exceptions import LengthMismatchError, UndefinedCorrelationError, UnknownResidueError
from app.core.metrics import SCORED_RECORDS
from app.schemas.scoring import AssayEvaluation, RecordScore, ScoringMode
from app.schemas.sequence import ALPHABET, MutationRecord, MutationSet, TokenSequence
from app.services.backbone import MaskedLanguageModel

logger = structlog.get_logger()

_RESIDUE_INDEX = torch.tensor(ALPHABET.residue_ids)


def log_probabilities(logits: torch.Tensor, renormalize_residues: bool = False) -> torch.Tensor:
    """
    Log-softmax over the vocabulary axis

    With ``renormalize_residues`` the softmax runs over the 20 residue logits
    only and every other token gets ``-inf``, the unknown residue X included.
    Callers that read the probability of an observed X must exclude it.
    """
    if not renormalize_residues:
        return torch.log_softmax(logits, dim=-1)
    out = torch.full_like(logits, float("-inf"))
    out[..., _RESIDUE_INDEX] = torch.log_softmax(logits[..., _RESIDUE_INDEX], dim=-1)
    return out


def _forward(model: MaskedLanguageModel, input_ids: torch.Tensor) -> torch.Tensor:
    pad_mask = torch.zeros_like(input_ids, dtype=torch.bool)
    with torch.no_grad():
        return model(input_ids, pad_mask)


def position_nll(
    model: MaskedLanguageModel,
    x: TokenSequence,
    renormalize_residues: bool = False,
    batch_size: Optional[int] = None,
) -> np.ndarray:
    """-log p(x_i | x with only i masked) for every residue position i"""
    batch_size = batch_size or settings.PERPLEXITY_BATCH_SIZE
    ids = torch.tensor(x.ids, dtype=torch.long)
    positions = torch.arange(1, x.raw_length + 1)

    chunks = []
    for start in range(0, len(positions), batch_size):
        chunk = positions[start:start + batch_size]
        rows = torch.arange(len(chunk))
        batch = ids.repeat(len(chunk), 1)
        batch[rows, chunk] = ALPHABET.mask_id
        logp = log_probabilities(_forward(model, batch)[rows, chunk], renormalize_residues)
        chunks.append(-logp[rows, ids[chunk]])
    return torch.cat(chunks).double().numpy()


def pseudo_perplexity(
    model: MaskedLanguageModel,
    x: TokenSequence,
    renormalize_residues: bool = False,
    batch_size: Optional[int] = None,
) -> float:
    """
    exp of the mean leave-one-out NLL over residue positions (bos/eos excluded)

    With ``renormalize_residues`` positions holding the unknown residue X are
    left out of the mean since X has no probability over the 20 residues.
    """
    nll = position_nll(model, x, renormalize_residues, batch_size)
    if renormalize_residues:
        known = np.array([ALPHABET.is_residue_id(t) for t in x.residue_ids], dtype=bool)
        if not known.any():
            raise UnknownResidueError(
                "Sequence has no canonical residue to score", details={"source_id": x.source_id}
            )
        nll = nll[known]
    return float(math.exp(nll.mean()))


class FitnessScorer:
    """
    Log-odds scorer for mutants of one reference sequence

    Independent-mode conditionals are computed one position per forward and
    cached, so a position's log-probabilities depend only on the reference
    with that position masked. With residue renormalization a substitution
    at an X position raises ``UnknownResidueError``.
    """

    def __init__(self, model: MaskedLanguageModel, reference: TokenSequence, renormalize_residues: bool = False):
        self.model = model
        self.reference = reference
        self.renormalize_residues = renormalize_residues
        self._ids = torch.tensor(reference.ids, dtype=torch.long)
        self._masked_marginals: Dict[int, torch.Tensor] = {}
        self._wildtype: Optional[torch.Tensor] = None

    def _logp(self, input_ids: torch.Tensor) -> torch.Tensor:
        return log_probabilities(_forward(self.model, input_ids[None])[0], self.renormalize_residues)

    def masked_marginal(self, position: int) -> torch.Tensor:
        if position not in self._masked_marginals:
            ids = self._ids.clone()
            ids[position + 1] = ALPHABET.mask_id
            self._masked_marginals[position] = self._logp(ids)[position + 1]
        return self._masked_marginals[position]

    def wildtype_marginals(self) -> torch.Tensor:
        if self._wildtype is None:
            self._wildtype = self._logp(self._ids)
        return self._wildtype

    def score(self, muts: MutationSet, mode: ScoringMode) -> float:
        if len(muts) == 0:
            return 0.0
        muts.validate_against(self.reference)
        if self.renormalize_residues:
            for m in muts.substitutions:
                if not ALPHABET.is_residue_id(m.wild_type):
                    raise UnknownResidueError(details={"position": m.position + 1})

        if mode == ScoringMode.MASKED_MARGINAL_JOINT:
            ids = self._ids.clone()
            for m in muts.substitutions:
                ids[m.position + 1] = ALPHABET.mask_id
            joint = self._logp(ids)
            rows = {m.position: joint[m.position + 1] for m in muts.substitutions}
        elif mode == ScoringMode.WILDTYPE_MARGINAL:
            wt = self.wildtype_marginals()
            rows = {m.position: wt[m.position + 1] for m in muts.substitutions}
        else:
            rows = {m.position: self.masked_marginal(m.position) for m in muts.substitutions}

        total = 0.0
        for m in muts.substitutions:
            row = rows[m.position]
            total += float(row[m.mutant]) - float(row[m.wild_type])
        return total


def log_odds_score(
    model: MaskedLanguageModel,
    reference: TokenSequence,
    muts: MutationSet,
    mode: ScoringMode = ScoringMode.MASKED_MARGINAL_INDEPENDENT,
    renormalize_residues: bool = False,
) -> float:
    return FitnessScorer(model, reference, renormalize_residues).score(muts, mode)


def spearman(pred: Sequence[float], truth: Sequence[float]) -> float:
    """Pearson correlation of average ranks"""
    if len(pred) != len(truth):
        raise LengthMismatchError(
            f"Cannot correlate {len(pred)} predictions with {len(truth)} measurements",
            details={"pred": len(pred), "truth": len(truth)},
        )
    if len(pred) < 2:
        raise UndefinedCorrelationError("Correlation needs at least two points", details={"n": len(pred)})

    rx = rankdata(np.asarray(pred, dtype=np.float64), method="average")
    ry = rankdata(np.asarray(truth, dtype=np.float64), method="average")
    dx, dy = rx - rx.mean(), ry - ry.mean()
    sxx, syy = float(dx @ dx), float(dy @ dy)
    if sxx == 0.0 or syy == 0.0:
        raise UndefinedCorrelationError(details={"n": len(pred)})
    rho = float(dx @ dy) / math.sqrt(sxx * syy)
    return max(-1.0, min(1.0, rho))


def score_records(
    model: MaskedLanguageModel,
    reference: TokenSequence,
    records: Sequence[MutationRecord],
    mode: ScoringMode = ScoringMode.MASKED_MARGINAL_INDEPENDENT,
    renormalize_residues: bool = False,
) -> List[RecordScore]:
    scorer = FitnessScorer(model, reference, renormalize_residues)
    scores = [
        RecordScore(
            id=r.id,
            mutant=r.mutant,
            pred_score=scorer.score(r.mutations, mode),
            fitness=r.measured_fitness,
        )
        for r in records
    ]
    SCORED_RECORDS.labels(mode=mode.value).inc(len(scores))
    return scores


def evaluate_assay(
    model: MaskedLanguageModel,
    reference: TokenSequence,
    records: Sequence[MutationRecord],
    mode: ScoringMode = ScoringMode.MASKED_MARGINAL_INDEPENDENT,
    renormalize_residues: bool = False,
) -> AssayEvaluation:
    """Score every record and correlate the scores with measured fitness"""
    scores = score_records(model, reference, records, mode, renormalize_residues)
    rho = spearman([s.pred_score for s in scores], [s.fitness for s in scores])
    logger.debug("Evaluated assay", reference=reference.source_id, n=len(scores), spearman=rho, mode=mode.value)
    return AssayEvaluation(spearman=rho, n=len(scores), mode=mode, scores=scores)
