#!/usr/bin/env python3
"""CLI for protein test-time customization."""
import functools
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple

import numpy as np
import structlog
import typer
from rich.console import Console
from rich.table import Table

from app.core.config import deep_merge, load_run_config, settings
from app.core.exceptions import ConfigurationError, MissingInputError, TTTError, UndefinedCorrelationError
from app.core.logging import configure_logging
from app.core.metrics import export_metrics
from app.schemas.grid import AGGREGATE_COLUMNS
from app.schemas.heads import ConfidenceKind
from app.schemas.run import RunConfig
from app.schemas.scoring import ScoringMode
from app.services.artifacts import write_csv, write_json, write_jsonl, write_manifest
from app.services.backbone import build_model, configure_torch, init_model
from app.services.checkpoint import checkpoint_hash, read_checkpoint, save_checkpoint
from app.services.grid import run_grid
from app.services.heads import embed, fit_head, make_confidence_fn
from app.services.scoring import pseudo_perplexity, score_records, spearman
from app.services.seqio import parse_a3m, parse_fasta, parse_labels, parse_mutations, tokenize
from app.services.synthetic import generate_corpus, write_corpus
from app.services.ttt import pretrain as run_pretraining
from app.services.ttt import ttt_msa, ttt_single

app = typer.Typer(help="Protein test-time customization CLI", no_args_is_help=True)
console = Console()
err_console = Console(stderr=True)
logger = structlog.get_logger()


@dataclass
class CliState:
    config_path: Optional[Path] = None
    seed: Optional[int] = None
    jobs: Optional[int] = None
    output_dir: Optional[Path] = None


def handle_errors(func):
    """Turn engine errors into a logged one-line message and the error's exit code"""

    @functools.wraps(func)
    def wrapper(*args, **kwargs):
        try:
            return func(*args, **kwargs)
        except TTTError as e:
            logger.error("Command failed", command=func.__name__, error_code=e.error_code, details=e.details)
            err_console.print(f"[red]Error ({e.error_code}):[/red] {e.message}")
            raise typer.Exit(code=e.exit_code)

    return wrapper


def resolve(ctx: typer.Context, command: str, overrides: Dict[str, Any]) -> Tuple[RunConfig, Path]:
    """Merge global flags and command flags over the config file; create the output directory"""
    state: CliState = ctx.obj or CliState()
    base: Dict[str, Any] = {"seed": state.seed, "jobs": state.jobs, "paths": {"output_dir": state.output_dir}}
    if state.seed is not None:
        for section in ("model", "ttt", "pretrain", "synthetic"):
            base[section] = {"seed": state.seed}
    config = load_run_config(state.config_path, deep_merge(base, overrides))

    output_dir = config.paths.output_dir or Path(settings.OUTPUT_DIR) / command
    output_dir.mkdir(parents=True, exist_ok=True)
    logger.info("Resolved run configuration", command=command, output_dir=str(output_dir), seed=config.seed)
    return config, output_dir


def require_path(value: Optional[Path], flag: str) -> Path:
    if value is None:
        raise typer.BadParameter("is required (pass the flag or set it under [paths] in --config)", param_hint=flag)
    if not value.exists():
        raise typer.BadParameter(f"{value} does not exist", param_hint=flag)
    return value


def finish(output_dir: Path, command: str, config: RunConfig, input_hash: Optional[str] = None, **extra: Any) -> None:
    export_metrics(output_dir)
    write_manifest(output_dir, command, config, input_hash, **extra)


def _fmt(value: Optional[float], digits: int = 4) -> str:
    return "-" if value is None else f"{value:.{digits}f}"


@app.callback()
def main(
    ctx: typer.Context,
    config: Optional[Path] = typer.Option(None, "--config", help="TOML run configuration"),
    seed: Optional[int] = typer.Option(None, "--seed", help="Seed for every random stream"),
    jobs: Optional[int] = typer.Option(None, "--jobs", min=1, help="Worker processes for grid"),
    output_dir: Optional[Path] = typer.Option(None, "--output-dir", help="Directory for command outputs"),
    log_level: Optional[str] = typer.Option(None, "--log-level", help="Overrides TTT_LOG_LEVEL"),
):
    """Customize a masked protein language model to single sequences at test time."""
    configure_logging(log_level)
    configure_torch()
    ctx.obj = CliState(config_path=config, seed=seed, jobs=jobs, output_dir=output_dir)


@app.command("gen-corpus")
@handle_errors
def gen_corpus(
    ctx: typer.Context,
    families: Optional[int] = typer.Option(None, "--families", help="Number of families"),
    length: Optional[int] = typer.Option(None, "--length", help="Consensus length"),
    substitution_rate: Optional[float] = typer.Option(None, "--substitution-rate"),
    held_out: Optional[int] = typer.Option(None, "--held-out", help="Index of the held-out family"),
    targets: Optional[int] = typer.Option(None, "--targets", help="Held-out targets to emit"),
    homologs: Optional[int] = typer.Option(None, "--homologs", help="MSA rows per target besides the target"),
):
    """Generate synthetic families, targets, oracle assays and MSAs."""
    config, output_dir = resolve(
        ctx,
        "gen-corpus",
        {
            "synthetic": {
                "num_families": families,
                "length": length,
                "substitution_rate": substitution_rate,
                "held_out_family": held_out,
                "num_targets": targets,
                "homologs_per_target": homologs,
            }
        },
    )
    corpus = generate_corpus(config.synthetic)
    paths = write_corpus(corpus, output_dir)

    table = Table(title="Synthetic corpus")
    table.add_column("Output")
    table.add_column("Records", justify="right")
    table.add_row(str(paths["train"]), str(len(corpus.train)))
    table.add_row(str(paths["targets"]), str(len(corpus.targets)))
    table.add_row(str(output_dir / "assays"), str(len(corpus.assays)))
    table.add_row(str(output_dir / "msas"), str(len(corpus.msas)))
    console.print(table)
    finish(output_dir, "gen-corpus", config)


@app.command()
@handle_errors
def pretrain(
    ctx: typer.Context,
    corpus: Optional[Path] = typer.Option(None, "--corpus", help="Training FASTA"),
    labels: Optional[Path] = typer.Option(None, "--labels", help="id,family table; fits the frozen head"),
    epochs: Optional[int] = typer.Option(None, "--epochs"),
    lr: Optional[float] = typer.Option(None, "--lr"),
    optimizer: Optional[str] = typer.Option(None, "--optimizer", help="adam or sgd"),
):
    """Train the toy base model with masked language modeling."""
    config, output_dir = resolve(
        ctx,
        "pretrain",
        {
            "pretrain": {"epochs": epochs, "learning_rate": lr, "optimizer": optimizer},
            "paths": {"corpus": corpus, "labels": labels},
        },
    )
    corpus_path = require_path(config.paths.corpus, "--corpus")
    sequences = [tokenize(seq, source_id=rid) for rid, seq in parse_fasta(corpus_path.read_bytes())]

    model = build_model(init_model(config.model))
    result = run_pretraining(model, sequences, config.pretrain)
    write_jsonl(
        output_dir / "losses.jsonl",
        (json.dumps({"epoch": epoch, "loss": loss}) for epoch, loss in enumerate(result.losses, start=1)),
    )

    head = None
    if config.paths.labels is not None:
        label_map = parse_labels(require_path(config.paths.labels, "--labels").read_bytes())
        labelled = [s for s in sequences if s.source_id in label_map]
        if len({label_map[s.source_id] for s in labelled}) < 2:
            raise ConfigurationError(
                "Head fitting needs corpus records from at least two labelled families", details={"flag": "--labels"}
            )
        embeddings = np.stack([embed(model, s).numpy() for s in labelled])
        head = fit_head(embeddings, [label_map[s.source_id] for s in labelled], seed=config.pretrain.seed)

    digest = save_checkpoint(output_dir / "checkpoint.ttck", result.snapshot, head)
    console.print(
        f"Pretrained {result.snapshot.num_parameters} parameters over {len(result.losses)} epochs; "
        f"final loss {_fmt(result.losses[-1] if result.losses else None)}; checkpoint sha256 {digest}"
    )
    finish(output_dir, "pretrain", config, output_checkpoint_hash=digest, losses=result.losses)


@app.command()
@handle_errors
def ttt(
    ctx: typer.Context,
    checkpoint: Optional[Path] = typer.Option(None, "--checkpoint", help="Base checkpoint"),
    target: Optional[Path] = typer.Option(None, "--target", help="FASTA of sequences to customize to"),
    msa: Optional[Path] = typer.Option(None, "--msa", help="A3M alignment; row 0 is the target"),
    steps: Optional[int] = typer.Option(None, "--steps"),
    lr: Optional[float] = typer.Option(None, "--lr"),
    micro_batch: Optional[int] = typer.Option(None, "--micro-batch"),
    accum: Optional[int] = typer.Option(None, "--accum"),
    emit_perplexity: Optional[bool] = typer.Option(None, "--emit-perplexity/--no-emit-perplexity"),
    confidence: Optional[ConfidenceKind] = typer.Option(None, "--confidence", help="Step selection criterion"),
    lora_rank: Optional[int] = typer.Option(None, "--lora-rank", help="Train rank-r adapters only"),
):
    """Customize the checkpoint to each target and keep the selected step."""
    ttt_overrides: Dict[str, Any] = {
        "steps": steps,
        "learning_rate": lr,
        "micro_batch_size": micro_batch,
        "grad_accum_steps": accum,
        "emit_perplexity": emit_perplexity,
        "confidence": confidence.value if confidence is not None else None,
    }
    if lora_rank is not None:
        ttt_overrides["lora"] = {"rank": lora_rank}
    config, output_dir = resolve(
        ctx, "ttt", {"ttt": ttt_overrides, "paths": {"checkpoint": checkpoint, "targets": target, "msa": msa}}
    )
    cfg = config.ttt

    checkpoint_path = require_path(config.paths.checkpoint, "--checkpoint")
    contents = read_checkpoint(checkpoint_path)
    input_hash = checkpoint_hash(checkpoint_path)
    model = build_model(contents.snapshot)

    alignment = None
    if config.paths.msa is not None:
        alignment = parse_a3m(require_path(config.paths.msa, "--msa").read_bytes())
        target_id = alignment.ids[0] if alignment.ids else "target"
        targets = [tokenize(alignment.degapped(0), source_id=target_id)]
    else:
        fasta = require_path(config.paths.targets, "--target")
        targets = [tokenize(seq, source_id=rid) for rid, seq in parse_fasta(fasta.read_bytes())]

    summaries = []
    for x in targets:
        confidence_fn = make_confidence_fn(cfg.confidence, x, contents.head) if cfg.confidence else None
        if alignment is not None:
            result = ttt_msa(model, alignment, cfg, confidence_fn=confidence_fn)
        else:
            result = ttt_single(model, x, cfg, confidence_fn=confidence_fn)

        write_jsonl(output_dir / "traces" / f"{x.source_id}.jsonl", (s.to_json_line() for s in result.trace.steps))
        selected_hash = save_checkpoint(
            output_dir / "checkpoints" / f"{x.source_id}.ttck", result.selected, contents.head
        )
        records = result.trace.steps
        summaries.append(
            {
                "id": x.source_id,
                "selected_step": result.trace.selected_step,
                "final_loss": records[-1].loss,
                "initial_perplexity": records[0].perplexity,
                "selected_perplexity": records[result.trace.selected_step].perplexity,
                "selected_checkpoint_hash": selected_hash,
            }
        )
        result.session.reset()

    table = Table(title=f"Customization ({cfg.steps} steps, lr {cfg.learning_rate:g})")
    for column in ("Target", "Selected step", "Final loss", "PPL step 0", "PPL selected"):
        table.add_column(column)
    for s in summaries:
        table.add_row(
            s["id"],
            str(s["selected_step"]),
            _fmt(s["final_loss"]),
            _fmt(s["initial_perplexity"], 3),
            _fmt(s["selected_perplexity"], 3),
        )
    console.print(table)

    write_json(
        output_dir / "summary.json",
        {"targets": summaries, "model_checkpoint_hash": input_hash, "run_config": config.model_dump(mode="json")},
    )
    finish(output_dir, "ttt", config, input_hash)


@app.command()
@handle_errors
def score(
    ctx: typer.Context,
    checkpoint: Optional[Path] = typer.Option(None, "--checkpoint", help="Base or customized checkpoint"),
    targets: Optional[Path] = typer.Option(None, "--targets", help="FASTA of reference sequences"),
    assay: Optional[List[Path]] = typer.Option(None, "--assay", help="mutant,fitness CSV named after its target"),
    mode: Optional[str] = typer.Option(None, "--mode", help="independent, joint or wildtype"),
    renormalize: Optional[bool] = typer.Option(None, "--renormalize/--no-renormalize"),
):
    """Score assay mutants by log-odds and report Spearman per assay."""
    if mode is not None:
        try:
            mode = ScoringMode.from_alias(mode).value
        except ValueError:
            raise typer.BadParameter(f"unknown mode {mode!r}", param_hint="--mode")
    config, output_dir = resolve(
        ctx,
        "score",
        {
            "scoring": {"mode": mode, "renormalize_residues": renormalize},
            "paths": {
                "checkpoint": checkpoint,
                "targets": targets,
                "assays": [str(p) for p in assay] if assay else None,
            },
        },
    )
    scoring = config.scoring

    checkpoint_path = require_path(config.paths.checkpoint, "--checkpoint")
    input_hash = checkpoint_hash(checkpoint_path)
    model = build_model(read_checkpoint(checkpoint_path).snapshot)
    fasta = require_path(config.paths.targets, "--targets")
    references = {rid: tokenize(seq, source_id=rid) for rid, seq in parse_fasta(fasta.read_bytes())}
    if not config.paths.assays:
        raise typer.BadParameter("at least one assay is required", param_hint="--assay")

    results, failures = [], []
    for path in config.paths.assays:
        name = path.stem
        try:
            if not path.exists():
                raise MissingInputError(str(path), "--assay")
            reference = references.get(name)
            if reference is None and len(references) == 1:
                reference = next(iter(references.values()))
            if reference is None:
                raise ConfigurationError(f"No target named {name!r} in {fasta}", details={"assay": str(path)})
            scores = score_records(model, reference, parse_mutations(path.read_bytes(), reference), scoring.mode,
                                   scoring.renormalize_residues)
        except TTTError as e:
            logger.warning("Assay failed", assay=str(path), error_code=e.error_code, error=e.message)
            failures.append({"assay": str(path), "error_code": e.error_code, "message": e.message})
            continue

        try:
            rho: Optional[float] = spearman([s.pred_score for s in scores], [s.fitness for s in scores])
        except UndefinedCorrelationError:
            rho = None
        write_csv(output_dir / "scores" / f"{name}.csv", ("id", "mutant", "pred_score", "fitness"),
                  (s.model_dump() for s in scores))
        summary = {
            "spearman": rho,
            "n": len(scores),
            "mode": scoring.mode.value,
            "model_checkpoint_hash": input_hash,
            "run_config": config.model_dump(mode="json"),
        }
        write_json(output_dir / "summaries" / f"{name}.json", summary)
        results.append({"assay": name, "spearman": rho, "n": len(scores)})

    write_json(output_dir / "failures.json", {"failures": failures})
    write_json(
        output_dir / "summary.json",
        {
            "assays": results,
            "mode": scoring.mode.value,
            "model_checkpoint_hash": input_hash,
            "run_config": config.model_dump(mode="json"),
        },
    )

    table = Table(title=f"Fitness scoring ({scoring.mode.value})")
    for column in ("Assay", "N", "Spearman"):
        table.add_column(column)
    for r in results:
        table.add_row(r["assay"], str(r["n"]), _fmt(r["spearman"]))
    for f in failures:
        table.add_row(Path(f["assay"]).stem, "-", f"[red]{f['error_code']}[/red]")
    console.print(table)

    finish(output_dir, "score", config, input_hash, failed=len(failures))
    if not results:
        raise typer.Exit(code=1)


@app.command()
@handle_errors
def perplexity(
    ctx: typer.Context,
    checkpoint: Optional[Path] = typer.Option(None, "--checkpoint"),
    fasta: Optional[Path] = typer.Option(None, "--fasta", help="Sequences to evaluate"),
    renormalize: Optional[bool] = typer.Option(None, "--renormalize/--no-renormalize"),
):
    """Pseudo-perplexity of every record under a checkpoint."""
    config, output_dir = resolve(
        ctx,
        "perplexity",
        {"scoring": {"renormalize_residues": renormalize}, "paths": {"checkpoint": checkpoint, "targets": fasta}},
    )
    checkpoint_path = require_path(config.paths.checkpoint, "--checkpoint")
    input_hash = checkpoint_hash(checkpoint_path)
    model = build_model(read_checkpoint(checkpoint_path).snapshot)

    rows = []
    for rid, seq in parse_fasta(require_path(config.paths.targets, "--fasta").read_bytes()):
        x = tokenize(seq, source_id=rid)
        rows.append(
            {
                "id": rid,
                "length": x.raw_length,
                "pseudo_perplexity": pseudo_perplexity(model, x, config.scoring.renormalize_residues),
            }
        )
    write_csv(output_dir / "perplexity.csv", ("id", "length", "pseudo_perplexity"), rows)

    table = Table(title="Pseudo-perplexity")
    for column in ("Id", "Length", "PPL"):
        table.add_column(column)
    for row in rows:
        table.add_row(row["id"], str(row["length"]), _fmt(row["pseudo_perplexity"], 3))
    console.print(table)
    finish(output_dir, "perplexity", config, input_hash)


@app.command()
@handle_errors
def grid(
    ctx: typer.Context,
    checkpoint: Optional[Path] = typer.Option(None, "--checkpoint"),
    targets: Optional[Path] = typer.Option(None, "--targets", help="FASTA of targets"),
    assay: Optional[List[Path]] = typer.Option(None, "--assay", help="Oracle assays named after their targets"),
    steps: Optional[int] = typer.Option(None, "--steps"),
    lr: Optional[List[float]] = typer.Option(None, "--lr", help="Learning-rate axis; repeat the flag"),
    micro_batch: Optional[List[int]] = typer.Option(None, "--micro-batch", help="Micro-batch axis"),
    accum: Optional[List[int]] = typer.Option(None, "--accum", help="Accumulation axis"),
):
    """Sweep customization hyperparameters and aggregate per-step metrics."""
    config, output_dir = resolve(
        ctx,
        "grid",
        {
            "ttt": {"steps": steps},
            "grid": {
                "learning_rates": list(lr) if lr else None,
                "micro_batch_sizes": list(micro_batch) if micro_batch else None,
                "grad_accum_steps": list(accum) if accum else None,
            },
            "paths": {
                "checkpoint": checkpoint,
                "targets": targets,
                "assays": [str(p) for p in assay] if assay else None,
            },
        },
    )
    checkpoint_path = require_path(config.paths.checkpoint, "--checkpoint")
    input_hash = checkpoint_hash(checkpoint_path)
    base = read_checkpoint(checkpoint_path).snapshot
    fasta = require_path(config.paths.targets, "--targets")
    sequences = [tokenize(seq, source_id=rid) for rid, seq in parse_fasta(fasta.read_bytes())]
    by_id = {x.source_id: x for x in sequences}

    assays = {}
    for path in config.paths.assays:
        path = require_path(path, "--assay")
        if path.stem not in by_id:
            raise ConfigurationError(f"No target named {path.stem!r} in {fasta}", details={"assay": str(path)})
        assays[path.stem] = parse_mutations(path.read_bytes(), by_id[path.stem])

    report = run_grid(base, sequences, config.grid, config.ttt, assays, config.scoring, jobs=config.jobs)

    for result in report.cells:
        cell_dir = output_dir / "cells" / result.cell.slug
        write_json(
            cell_dir / "cell.json",
            {"cell": result.cell.model_dump(mode="json"), "status": result.status, "error": result.error},
        )
        for target_id, trace in result.traces.items():
            write_jsonl(cell_dir / f"{target_id}.jsonl", (s.to_json_line() for s in trace.steps))
    write_csv(output_dir / "aggregate.csv", AGGREGATE_COLUMNS, report.aggregate_rows())

    table = Table(title=f"Grid ({len(report.cells)} cells, {config.ttt.steps} steps)")
    for column in ("Cell", "lr", "micro-batch", "accum", "Status", "Final PPL"):
        table.add_column(column)
    for result in report.cells:
        rows = result.aggregate_rows()
        table.add_row(
            result.cell.slug,
            f"{result.cell.learning_rate:g}",
            str(result.cell.micro_batch_size),
            str(result.cell.grad_accum_steps),
            result.status,
            _fmt(rows[-1]["mean_perplexity"], 3) if rows else "-",
        )
    console.print(table)

    finish(output_dir, "grid", config, input_hash, succeeded=len(report.succeeded), failed=len(report.failed))
    if not report.succeeded:
        raise typer.Exit(code=1)


if __name__ == "__main__":
    app()
