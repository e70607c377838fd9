"""
Prometheus metrics for customization runs
"""
from pathlib import Path

from prometheus_client import CollectorRegistry, Counter, Histogram, write_to_textfile

from app.core.config import settings

REGISTRY = CollectorRegistry()

OPTIMIZER_STEPS = Counter(
    "ttt_optimizer_steps_total",
    "Total optimizer steps taken during customization and pretraining",
    ["phase"],
    registry=REGISTRY,
)

STEP_DURATION = Histogram(
    "ttt_step_duration_seconds",
    "Wall time of one customization step in seconds",
    registry=REGISTRY,
)

SESSIONS = Counter(
    "ttt_sessions_total",
    "Customization sessions by outcome",
    ["outcome"],
    registry=REGISTRY,
)

SCORED_RECORDS = Counter(
    "scoring_records_total",
    "Mutation records scored",
    ["mode"],
    registry=REGISTRY,
)

GRID_CELLS = Counter(
    "grid_cells_total",
    "Grid cells by status",
    ["status"],
    registry=REGISTRY,
)


def export_metrics(output_dir: Path) -> None:
    """Write the registry to ``metrics.prom`` in the textfile-collector format"""
    if not settings.ENABLE_METRICS:
        return
    output_dir.mkdir(parents=True, exist_ok=True)
    write_to_textfile(str(output_dir / "metrics.prom"), REGISTRY)
