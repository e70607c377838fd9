"""
Hyperparameter grid schemas
"""
import math
from typing import Any, Dict, List, Literal, Optional

from pydantic import BaseModel, Field

from app.schemas.base import DomainModel
from app.schemas.masking import MaskingStrategy
from app.schemas.ttt import LossKind, TTTConfig, TTTTrace

AGGREGATE_COLUMNS = ("lr", "micro_batch", "accum", "masking", "step", "mean_perplexity", "mean_spearman", "loss_kind")


class GridCell(DomainModel):
    """One combination of customization hyperparameters"""

    index: int
    learning_rate: float
    micro_batch_size: int
    grad_accum_steps: int
    masking: MaskingStrategy
    loss_kind: LossKind

    @property
    def slug(self) -> str:
        return f"cell{self.index:03d}"

    def apply(self, base: TTTConfig) -> TTTConfig:
        data = base.model_dump()
        data.update(
            learning_rate=self.learning_rate,
            micro_batch_size=self.micro_batch_size,
            grad_accum_steps=self.grad_accum_steps,
            masking=self.masking.model_dump(),
            loss_kind=self.loss_kind,
            emit_perplexity=True,
        )
        return TTTConfig.model_validate(data)


class GridCellResult(BaseModel):
    """Outcome of every target in one cell"""

    cell: GridCell
    status: Literal["ok", "failed"] = "ok"
    error: Optional[Dict[str, Any]] = None
    traces: Dict[str, TTTTrace] = Field(default_factory=dict)

    def aggregate_rows(self) -> List[Dict[str, Any]]:
        """Per-step means across targets; empty for failed cells"""
        if self.status != "ok" or not self.traces:
            return []
        traces = list(self.traces.values())
        num_steps = min(len(t.steps) for t in traces)
        rows = []
        for step in range(num_steps):
            records = [t.steps[step] for t in traces]
            perplexities = [r.perplexity for r in records if r.perplexity is not None]
            spearmans = [r.metrics["spearman"] for r in records if not math.isnan(r.metrics.get("spearman", math.nan))]
            rows.append(
                {
                    "lr": self.cell.learning_rate,
                    "micro_batch": self.cell.micro_batch_size,
                    "accum": self.cell.grad_accum_steps,
                    "masking": self.cell.masking.label,
                    "step": step,
                    "mean_perplexity": sum(perplexities) / len(perplexities) if perplexities else None,
                    "mean_spearman": sum(spearmans) / len(spearmans) if spearmans else None,
                    "loss_kind": self.cell.loss_kind.value,
                }
            )
        return rows


class GridReport(BaseModel):
    cells: List[GridCellResult] = Field(default_factory=list)

    @property
    def succeeded(self) -> List[GridCellResult]:
        return [c for c in self.cells if c.status == "ok"]

    @property
    def failed(self) -> List[GridCellResult]:
        return [c for c in self.cells if c.status == "failed"]

    def aggregate_rows(self) -> List[Dict[str, Any]]:
        return [row for cell in self.cells for row in cell.aggregate_rows()]
