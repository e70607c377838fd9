"""Desk-scale experiments on synthetic families.

These pretrain a small model on the held-in families and customize it to
held-out targets. They take minutes on a laptop CPU and are deselected by
default; run them with ``pytest -m acceptance``.

Asserted thresholds live in ``desk_scale_pilot.json`` next to this module.
Every run caches its measurements under ``desk_scale/observed``
(``pytest --cache-show desk_scale/*``); ``--record-pilot`` also writes them
into the pilot file so thresholds can be pinned against a recorded run.
"""
import json
import math
import time
from pathlib import Path

import numpy as np
import pytest

from app.schemas.model import ModelConfig
from app.schemas.run import GridSpec, PretrainConfig, SyntheticFamilySpec
from app.schemas.scoring import ScoringConfig
from app.schemas.sequence import Msa
from app.schemas.ttt import TTTConfig
from app.services.backbone import build_model, init_model
from app.services.grid import run_grid, spearman_metric
from app.services.seqio import parse_mutations, tokenize
from app.services.synthetic import generate_corpus
from app.services.ttt import pretrain, ttt_msa, ttt_single

pytestmark = [pytest.mark.acceptance, pytest.mark.slow]

PILOT_PATH = Path(__file__).with_name("desk_scale_pilot.json")
PILOT = json.loads(PILOT_PATH.read_text())
THRESHOLDS = PILOT["thresholds"]
# thresholds the measurement must stay under rather than reach
CEILINGS = {"max_runtime_seconds"}

DEFAULT_TTT = TTTConfig(learning_rate=4e-4, micro_batch_size=4, grad_accum_steps=16, steps=30, emit_perplexity=True)


@pytest.fixture(scope="module")
def observed(request):
    """Measurements of this run, cached and optionally written into the pilot file."""
    values = {}
    yield values
    cache = getattr(request.config, "cache", None)
    if cache is not None:
        cache.set("desk_scale/observed", values)
    if request.config.getoption("--record-pilot"):
        pilot = json.loads(PILOT_PATH.read_text())
        pilot["observed"] = {**(pilot.get("observed") or {}), **values}
        PILOT_PATH.write_text(json.dumps(pilot, indent=2) + "\n")


@pytest.fixture(scope="module")
def corpus():
    """Three families, one held out, twenty held-out targets with oracle assays."""
    return generate_corpus(SyntheticFamilySpec())


@pytest.fixture(scope="module")
def pretrained(corpus, observed):
    """Toy model pretrained on the held-in families."""
    started = time.perf_counter()
    sequences = [tokenize(seq, source_id=rid) for rid, seq in corpus.train]
    model = build_model(init_model(ModelConfig()))
    snapshot = pretrain(model, sequences, PretrainConfig()).snapshot
    observed["pretrain_seconds"] = time.perf_counter() - started
    return snapshot


@pytest.fixture(scope="module")
def targets(corpus):
    """Tokenized held-out targets."""
    return [tokenize(seq, source_id=rid) for rid, seq in corpus.targets]


def _assay(corpus, target):
    rows = corpus.assays[target.source_id]
    data = "mutant,fitness\n" + "".join(f"{r.mutant},{r.fitness!r}\n" for r in rows)
    return parse_mutations(data.encode(), target)


@pytest.fixture(scope="module")
def single_trials(pretrained, targets, corpus, observed):
    """One default customization per target, tracing perplexity and oracle Spearman at every step."""
    started = time.perf_counter()
    traces = []
    for i, target in enumerate(targets):
        metrics = {"spearman": spearman_metric(target, _assay(corpus, target), ScoringConfig())}
        cfg = DEFAULT_TTT.model_copy(update={"seed": i})
        traces.append(ttt_single(build_model(pretrained), target, cfg, metrics=metrics).trace)
    observed["single_trials_seconds"] = time.perf_counter() - started
    return traces


def test_customization_lowers_target_perplexity(single_trials, observed):
    """Test default customization lowers pseudo-perplexity on nearly every held-out target."""
    reductions = []
    for trace in single_trials:
        before, after = trace.steps[0].perplexity, trace.steps[trace.selected_step].perplexity
        reductions.append((before - after) / before)
    runtime = observed["pretrain_seconds"] + observed["single_trials_seconds"]
    observed.update(
        perplexity_reduced_runs=sum(r > 0 for r in reductions),
        median_perplexity_reduction=float(np.median(reductions)),
        max_runtime_seconds=runtime,
        perplexity_reductions=[float(r) for r in reductions],
    )

    assert observed["perplexity_reduced_runs"] >= THRESHOLDS["perplexity_reduced_runs"]
    assert observed["median_perplexity_reduction"] >= THRESHOLDS["median_perplexity_reduction"]
    assert runtime < THRESHOLDS["max_runtime_seconds"]


def test_customization_improves_fitness_ranking(single_trials, observed):
    """Test Spearman against oracle fitness does not drop in most trials."""
    pairs = [(t.steps[0].metrics["spearman"], t.steps[t.selected_step].metrics["spearman"]) for t in single_trials]
    not_worse = sum(math.isfinite(b) and math.isfinite(a) and a >= b for b, a in pairs)
    observed.update(
        spearman_not_worse_fraction=not_worse / len(pairs),
        spearman_pairs=[[b, a] for b, a in pairs],
    )

    assert observed["spearman_not_worse_fraction"] >= THRESHOLDS["spearman_not_worse_fraction"]


def test_msa_customization_matches_or_beats_single(pretrained, targets, corpus, single_trials, observed):
    """Test homolog rows give at most the single-sequence perplexity in most trials."""
    wins = 0
    for i, (target, single) in enumerate(zip(targets, single_trials)):
        ids, rows = zip(*corpus.msas[target.source_id])
        aligned = ttt_msa(build_model(pretrained), Msa(rows=rows, ids=ids), DEFAULT_TTT.model_copy(update={"seed": i}))
        wins += aligned.trace.steps[-1].perplexity <= single.steps[single.selected_step].perplexity
    observed["msa_not_worse_fraction"] = wins / len(targets)

    assert observed["msa_not_worse_fraction"] >= THRESHOLDS["msa_not_worse_fraction"]


def test_aggressive_cell_overfits(pretrained, targets, observed):
    """Test the largest-lr smallest-accumulation cell shows a non-monotone perplexity curve."""
    grid = GridSpec(learning_rates=[4e-5, 4e-4, 4e-2], micro_batch_sizes=[4], grad_accum_steps=[1, 4, 16])
    non_monotone = 0
    for seed in range(3):
        report = run_grid(pretrained, targets[:2], grid, TTTConfig(steps=30, seed=seed))
        assert not report.failed
        assert len(report.aggregate_rows()) == 9 * 31
        aggressive = next(c for c in report.cells if c.cell.learning_rate == 4e-2 and c.cell.grad_accum_steps == 1)
        curve = [row["mean_perplexity"] for row in aggressive.aggregate_rows()]
        non_monotone += any(b > a for a, b in zip(curve, curve[1:]))
    observed["non_monotone_seeds"] = non_monotone

    assert non_monotone >= THRESHOLDS["non_monotone_seeds"]


@pytest.mark.skipif(PILOT["observed"] is None, reason="no pilot run recorded yet")
def test_thresholds_sit_within_recorded_pilot():
    """Test every asserted threshold is met by the recorded pilot run."""
    recorded = PILOT["observed"]

    for name, threshold in THRESHOLDS.items():
        if name in CEILINGS:
            assert recorded[name] < threshold, name
        else:
            assert recorded[name] >= threshold, name
