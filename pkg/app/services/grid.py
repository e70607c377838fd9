"""
Grid sweep over customization hyperparameters
"""
import itertools
import json
import logging
import multiprocessing
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Sequence

import structlog
from pydantic import ValidationError

from app.core.config import settings
from app.core.exceptions import TTTError, UndefinedCorrelationError
from app.core.logging import configure_logging
from app.core.metrics import GRID_CELLS
from app.schemas.grid import GridCell, GridCellResult, GridReport
from app.schemas.run import GridSpec
from app.schemas.scoring import ScoringConfig
from app.schemas.sequence import MutationRecord, TokenSequence
from app.schemas.ttt import TTTConfig
from app.services.backbone import BackboneSnapshot, MaskedLanguageModel, build_model, configure_torch
from app.services.scoring import evaluate_assay
from app.services.ttt import StepMetric, ttt_single

logger = structlog.get_logger()

CONFIG_ERROR_CODE = "CONFIG_ERROR"
UNEXPECTED_ERROR_CODE = "UNEXPECTED_ERROR"


def expand_grid(grid: GridSpec) -> List[GridCell]:
    combos = itertools.product(
        grid.learning_rates, grid.micro_batch_sizes, grid.grad_accum_steps, grid.maskings, grid.loss_kinds
    )
    return [
        GridCell(
            index=i,
            learning_rate=lr,
            micro_batch_size=mb,
            grad_accum_steps=accum,
            masking=masking,
            loss_kind=loss_kind,
        )
        for i, (lr, mb, accum, masking, loss_kind) in enumerate(combos)
    ]


@dataclass
class GridTask:
    """Everything a worker needs to run one cell"""

    cell: GridCell
    base_config: TTTConfig
    snapshot: BackboneSnapshot
    targets: Sequence[TokenSequence]
    assays: Dict[str, List[MutationRecord]] = field(default_factory=dict)
    scoring: ScoringConfig = ScoringConfig()


def spearman_metric(target: TokenSequence, records: List[MutationRecord], scoring: ScoringConfig) -> StepMetric:
    def metric(model: MaskedLanguageModel) -> float:
        try:
            return evaluate_assay(model, target, records, scoring.mode, scoring.renormalize_residues).spearman
        except UndefinedCorrelationError:
            return float("nan")

    return metric


def run_cell(task: GridTask) -> GridCellResult:
    """Customize every target under one cell, resetting between targets"""
    cell = task.cell
    log = logger.bind(cell=cell.slug, lr=cell.learning_rate, accum=cell.grad_accum_steps)
    try:
        config = cell.apply(task.base_config)
        model = build_model(task.snapshot)
        traces = {}
        for target in task.targets:
            records = task.assays.get(target.source_id)
            metrics = {"spearman": spearman_metric(target, records, task.scoring)} if records else {}
            result = ttt_single(model, target, config, metrics=metrics)
            traces[target.source_id] = result.trace
            result.session.reset()
    except TTTError as e:
        log.warning("Grid cell failed", error_code=e.error_code, error=e.message)
        return failed_cell(cell, e.error_code, e.message, e.details)
    except ValidationError as e:
        log.warning("Grid cell failed", error_code=CONFIG_ERROR_CODE, error=str(e))
        errors = json.loads(e.json(include_url=False))
        return failed_cell(cell, CONFIG_ERROR_CODE, "Cell configuration is invalid", {"errors": errors})
    except Exception as e:
        log.error(
            "Grid cell failed",
            error_code=UNEXPECTED_ERROR_CODE,
            error=str(e),
            error_type=type(e).__name__,
            exc_info=True,
        )
        return failed_cell(cell, UNEXPECTED_ERROR_CODE, str(e), {"type": type(e).__name__})

    log.info("Grid cell completed", targets=len(traces))
    return GridCellResult(cell=cell, traces=traces)


def failed_cell(cell: GridCell, error_code: str, message: str, details: Dict[str, Any]) -> GridCellResult:
    return GridCellResult(
        cell=cell,
        status="failed",
        error={"error_code": error_code, "message": message, "details": details},
    )


def _init_worker(log_level: str, log_format: str) -> None:
    configure_logging(log_level, log_format)
    configure_torch()


def run_grid(
    snapshot: BackboneSnapshot,
    targets: Sequence[TokenSequence],
    grid: GridSpec,
    base_config: TTTConfig,
    assays: Optional[Dict[str, List[MutationRecord]]] = None,
    scoring: ScoringConfig = ScoringConfig(),
    jobs: int = 1,
) -> GridReport:
    """
    Run every cell of ``grid`` with ``base_config.steps`` steps

    Cells run in a process pool when ``jobs > 1``; results are returned in
    cell order either way.
    """
    tasks = [
        GridTask(
            cell=cell,
            base_config=base_config,
            snapshot=snapshot,
            targets=list(targets),
            assays=assays or {},
            scoring=scoring,
        )
        for cell in expand_grid(grid)
    ]
    logger.info("Starting grid", cells=len(tasks), targets=len(targets), jobs=jobs, steps=base_config.steps)

    if jobs <= 1:
        results = [run_cell(task) for task in tasks]
    else:
        context = multiprocessing.get_context("spawn")
        with ProcessPoolExecutor(
            max_workers=jobs,
            mp_context=context,
            initializer=_init_worker,
            initargs=(logging.getLevelName(logging.getLogger().level), settings.LOG_FORMAT),
        ) as pool:
            results = list(pool.map(run_cell, tasks))

    report = GridReport(cells=results)
    # worker processes keep their own registries, so count here
    for result in results:
        GRID_CELLS.labels(status=result.status).inc()
    logger.info("Grid finished", succeeded=len(report.succeeded), failed=len(report.failed))
    return report
