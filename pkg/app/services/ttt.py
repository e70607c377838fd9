"""
Test-time customization engine

A session owns one working model and its initial snapshot. Each run starts
from that snapshot, takes ``steps`` SGD updates on masked views of a single
sequence (or of rows drawn from its MSA), and leaves the model at the selected
step. ``reset`` returns the model to the initial snapshot.
"""
import math
import time
from dataclasses import dataclass
from typing import Callable, Dict, List, NamedTuple, Optional, Sequence

import numpy as np
import structlog
import torch

from app.core.config import settings
from app.core.exceptions import EmptySequenceError, NonFiniteLossError
from app.core.metrics import OPTIMIZER_STEPS, SESSIONS, STEP_DURATION
from app.schemas.model import TrainableSelection
from app.schemas.run import PretrainConfig
from app.schemas.sequence import Msa, TokenSequence
from app.schemas.ttt import LossKind, LossReduction, StepRecord, TTTConfig, TTTTrace
from app.services.backbone import BackboneSnapshot, MaskedLanguageModel, restore, select_trainable, snapshot
from app.services.lora import apply_lora, remove_lora
from app.services.masking import apply_mask_plan, collate_masked, sample_mask_plan
from app.services.optim import GradientBuffer, loss_and_grad, masked_lm_loss, sgd_step
from app.services.scoring import pseudo_perplexity
from app.services.seqio import tokenize

logger = structlog.get_logger()

ConfidenceFn = Callable[[MaskedLanguageModel], float]
StepMetric = Callable[[MaskedLanguageModel], float]
# returns a row index of the alignment
MsaSampler = Callable[[Msa, np.random.Generator], int]
ViewSource = Callable[[np.random.Generator], TokenSequence]

SAMPLER_STREAM = 1


def uniform_row_sampler(msa: Msa, rng: np.random.Generator) -> int:
    return int(rng.integers(0, msa.depth))


@dataclass(frozen=True)
class WeightedRowSampler:
    """Draws rows with probability proportional to ``weights``"""

    weights: Sequence[float]

    def __call__(self, msa: Msa, rng: np.random.Generator) -> int:
        w = np.asarray(self.weights, dtype=np.float64)
        if w.shape != (msa.depth,) or (w < 0).any() or w.sum() <= 0:
            raise ValueError("sampler weights must be non-negative, one per MSA row, with positive sum")
        return int(rng.choice(msa.depth, p=w / w.sum()))


def identity_weighted_sampler(msa: Msa, identity_threshold: float = 0.8) -> WeightedRowSampler:
    """
    Down-weight redundant rows: each row gets 1 / (number of rows within the identity threshold)
    """
    rows = np.array([list(r) for r in msa.rows])
    n = len(rows)
    weights = np.zeros(n)
    for i in range(n):
        identity = (rows == rows[i]).mean(axis=1)
        weights[i] = 1.0 / int((identity >= identity_threshold).sum())
    return WeightedRowSampler(weights=tuple(float(w) for w in weights))


class TTTResult(NamedTuple):
    selected: BackboneSnapshot
    trace: TTTTrace
    session: "TTTSession"


class TTTSession:
    """Exclusive owner of a working model during customization"""

    def __init__(
        self,
        model: MaskedLanguageModel,
        config: TTTConfig,
        confidence_fn: Optional[ConfidenceFn] = None,
        metrics: Optional[Dict[str, StepMetric]] = None,
    ):
        self.model = model
        self.config = config
        self.confidence_fn = confidence_fn
        self.metrics = dict(metrics or {})
        self.base = snapshot(model)
        self.trace: Optional[TTTTrace] = None

    def reset(self) -> None:
        """Drop adapters and restore the initial parameters bit-exactly"""
        restore(self.model, self.base)

    def _evaluate(self, step: int, target: TokenSequence, loss: Optional[float], wall_ms: float) -> StepRecord:
        self.model.eval()
        perplexity = pseudo_perplexity(self.model, target) if self.config.emit_perplexity else None
        conf = self.confidence_fn(self.model) if self.confidence_fn is not None else None
        metrics = {name: float(metric(self.model)) for name, metric in self.metrics.items()}
        return StepRecord(
            step=step, loss=loss, perplexity=perplexity, confidence=conf, wall_ms=wall_ms, metrics=metrics
        )

    def _prepare(self) -> List:
        cfg = self.config
        self.reset()
        if cfg.lora is not None:
            apply_lora(self.model, cfg.lora, seed=cfg.seed)
        train_norms_and_head = cfg.lora.train_norms_and_head if cfg.lora is not None else False
        return select_trainable(self.model, cfg.trainable, train_norms_and_head)

    def _step(self, step: int, buffer: GradientBuffer, draw_view: ViewSource) -> float:
        cfg = self.config
        mask_rng = np.random.default_rng([cfg.seed, step])
        view_rng = np.random.default_rng([cfg.seed, step, SAMPLER_STREAM])

        losses = []
        for _ in range(cfg.grad_accum_steps):
            views = []
            for _ in range(cfg.micro_batch_size):
                seq = draw_view(view_rng)
                views.append(apply_mask_plan(seq, sample_mask_plan(seq, cfg.masking, mask_rng)))
            loss = loss_and_grad(self.model, collate_masked(views), buffer, cfg.loss_kind, cfg.loss_reduction)
            if not math.isfinite(loss):
                raise NonFiniteLossError(step, loss)
            losses.append(loss)
        sgd_step(buffer, cfg.optim)
        return float(np.mean(losses))

    def run(self, target: TokenSequence, draw_view: Optional[ViewSource] = None) -> TTTResult:
        """
        Customize on views of ``target`` (or on sequences from ``draw_view``)

        Confidence, metrics and perplexity are always evaluated on the full
        un-cropped target.
        """
        cfg = self.config
        draw_view = draw_view or (lambda rng: target)
        log = logger.bind(target=target.source_id, steps=cfg.steps, lr=cfg.learning_rate)

        params = self._prepare()
        buffer = GradientBuffer(params, cfg.grad_accum_steps)
        records = [self._evaluate(0, target, None, 0.0)]
        best_step, best_conf = 0, records[0].confidence
        best = snapshot(self.model) if self.confidence_fn is not None else None

        try:
            for step in range(1, cfg.steps + 1):
                self.model.train()
                started = time.perf_counter()
                loss = self._step(step, buffer, draw_view)
                elapsed = time.perf_counter() - started
                STEP_DURATION.observe(elapsed)
                OPTIMIZER_STEPS.labels(phase="customization").inc()
                if elapsed > settings.SLOW_STEP_SECONDS:
                    log.warning("Slow customization step", step=step, seconds=round(elapsed, 3))

                record = self._evaluate(step, target, loss, elapsed * 1000.0)
                records.append(record)
                log.debug("Customization step completed", step=step, loss=loss, confidence=record.confidence)

                if record.confidence is not None and record.confidence > best_conf:
                    best_step, best_conf = step, record.confidence
                    best = snapshot(self.model)
        except NonFiniteLossError as e:
            SESSIONS.labels(outcome="diverged").inc()
            log.error("Customization diverged", step=e.step, error=e.message)
            self.reset()
            raise

        if self.confidence_fn is None:
            best_step, best = cfg.steps, snapshot(self.model)
        restore(self.model, best)
        self.model.eval()

        self.trace = TTTTrace(steps=records, selected_step=best_step)
        SESSIONS.labels(outcome="completed").inc()
        log.info("Customization finished", selected_step=best_step, final_loss=records[-1].loss)
        return TTTResult(selected=best, trace=self.trace, session=self)

    def run_msa(self, msa: Msa, sampler: MsaSampler = uniform_row_sampler) -> TTTResult:
        """Customize on degapped MSA rows drawn by ``sampler``; row 0 is the target"""
        rows = []
        for i in range(msa.depth):
            degapped = msa.degapped(i)
            row_id = msa.ids[i] if msa.ids else f"row{i}"
            rows.append(tokenize(degapped, source_id=row_id) if degapped else None)

        def draw_view(rng: np.random.Generator) -> TokenSequence:
            index = sampler(msa, rng)
            # all-gap rows fall back to the target
            return rows[index] if rows[index] is not None else rows[0]

        return self.run(rows[0], draw_view)


def ttt_single(
    model: MaskedLanguageModel,
    x: TokenSequence,
    cfg: TTTConfig,
    confidence_fn: Optional[ConfidenceFn] = None,
    metrics: Optional[Dict[str, StepMetric]] = None,
) -> TTTResult:
    return TTTSession(model, cfg, confidence_fn, metrics).run(x)


def ttt_msa(
    model: MaskedLanguageModel,
    msa: Msa,
    cfg: TTTConfig,
    msa_sampler: MsaSampler = uniform_row_sampler,
    confidence_fn: Optional[ConfidenceFn] = None,
    metrics: Optional[Dict[str, StepMetric]] = None,
) -> TTTResult:
    return TTTSession(model, cfg, confidence_fn, metrics).run_msa(msa, msa_sampler)


def ttt_reset(session: TTTSession) -> None:
    session.reset()


class PretrainResult(NamedTuple):
    snapshot: BackboneSnapshot
    losses: List[float]


def pretrain(
    model: MaskedLanguageModel,
    corpus: Sequence[TokenSequence],
    config: PretrainConfig,
    on_epoch: Optional[Callable[[int, float], None]] = None,
) -> PretrainResult:
    """
    Masked-LM training of every parameter over ``corpus``

    Returns the final snapshot and the mean training loss of each epoch.
    """
    if not corpus:
        raise EmptySequenceError("Pretraining corpus is empty")
    remove_lora(model)
    params = [p for _, p in select_trainable(model, TrainableSelection.FULL)]
    if config.optimizer == "adam":
        optimizer = torch.optim.Adam(params, lr=config.learning_rate)
    else:
        optimizer = torch.optim.SGD(params, lr=config.learning_rate, momentum=0.0, weight_decay=0.0)

    losses: List[float] = []
    global_step = 0
    model.train()
    for epoch in range(1, config.epochs + 1):
        rng = np.random.default_rng([config.seed, epoch])
        order = rng.permutation(len(corpus))
        batch_losses = []
        for start in range(0, len(order), config.batch_size):
            global_step += 1
            views = []
            for index in order[start:start + config.batch_size]:
                seq = corpus[int(index)]
                views.append(apply_mask_plan(seq, sample_mask_plan(seq, config.masking, rng)))
            batch = collate_masked(views)

            optimizer.zero_grad(set_to_none=True)
            loss = masked_lm_loss(
                model(batch.input_ids, batch.pad_mask), batch, LossKind.NORMALIZED_CROSS_ENTROPY, LossReduction.SEQUENCE
            )
            value = float(loss.detach())
            if not math.isfinite(value):
                raise NonFiniteLossError(global_step, value)
            loss.backward()
            optimizer.step()
            OPTIMIZER_STEPS.labels(phase="pretraining").inc()
            batch_losses.append(value)

        epoch_loss = float(np.mean(batch_losses))
        losses.append(epoch_loss)
        logger.info("Pretraining epoch completed", epoch=epoch, loss=epoch_loss)
        if on_epoch is not None:
            on_epoch(epoch, epoch_loss)

    model.eval()
    return PretrainResult(snapshot=snapshot(model), losses=losses)