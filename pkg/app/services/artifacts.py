"""
Run artifacts: provenance manifests, JSON, JSON-lines and CSV files
"""
import csv
import io
import json
from pathlib import Path
from typing import Any, Dict, Iterable, Mapping, Optional, Sequence

import structlog

from app.schemas.run import RunConfig

logger = structlog.get_logger()

MANIFEST_NAME = "manifest.json"


def _format(value: Any) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return str(value)


def csv_bytes(columns: Sequence[str], rows: Iterable[Mapping[str, Any]]) -> bytes:
    """Render dict rows in column order; floats keep full precision"""
    out = io.StringIO()
    writer = csv.writer(out, lineterminator="\n")
    writer.writerow(columns)
    for row in rows:
        writer.writerow([_format(row.get(c)) for c in columns])
    return out.getvalue().encode("utf-8")


def write_csv(path: Path, columns: Sequence[str], rows: Iterable[Mapping[str, Any]]) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(csv_bytes(columns, rows))
    return path


def write_json(path: Path, payload: Dict[str, Any]) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    return path


def write_jsonl(path: Path, lines: Iterable[str]) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("".join(line if line.endswith("\n") else line + "\n" for line in lines))
    return path


def write_manifest(
    output_dir: Path,
    command: str,
    config: RunConfig,
    checkpoint_hash: Optional[str] = None,
    **extra: Any,
) -> Path:
    """
    Record the resolved config and input checkpoint hash next to a command's outputs

    Every file in ``output_dir`` is listed so the manifest closes over the run.
    """
    files = sorted(
        str(p.relative_to(output_dir)) for p in output_dir.rglob("*") if p.is_file() and p.name != MANIFEST_NAME
    )
    payload = {"command": command, **config.provenance(checkpoint_hash), "files": files, **extra}
    path = write_json(output_dir / MANIFEST_NAME, payload)
    logger.info("Wrote run manifest", command=command, path=str(path), files=len(files))
    return path
