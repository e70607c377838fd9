"""End-to-end tests for the command-line workflow."""
import csv
import json

import pytest
from typer.testing import CliRunner

from app.schemas.model import ModelConfig
from app.services.backbone import init_model
from app.services.checkpoint import checkpoint_hash, load_checkpoint, read_checkpoint
from cli import app

pytestmark = pytest.mark.e2e

RUN_CONFIG = """
[model]
num_layers = 2
model_dim = 16
num_heads = 2
ffn_dim = 32
max_positions = 80

[ttt]
steps = 2
micro_batch_size = 2
grad_accum_steps = 1
learning_rate = 0.01

[pretrain]
epochs = 1
batch_size = 8

[synthetic]
length = 20
members_per_family = 8
num_targets = 2
homologs_per_target = 3
mutants_per_assay = 12

[grid]
learning_rates = [0.001, 0.01]
micro_batch_sizes = [1]
grad_accum_steps = [1, 2]
"""


@pytest.fixture(scope="module")
def runner():
    """CLI runner."""
    return CliRunner()


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """Directory holding the shared run configuration."""
    root = tmp_path_factory.mktemp("cli")
    (root / "run.toml").write_text(RUN_CONFIG)
    return root


def invoke(runner, workspace, out, *args):
    """Run one command with the shared config and a fresh output directory."""
    result = runner.invoke(app, ["--config", str(workspace / "run.toml"), "--output-dir", str(out), *args])
    return result


@pytest.fixture(scope="module")
def corpus(runner, workspace):
    """A generated synthetic corpus."""
    out = workspace / "corpus"
    result = invoke(runner, workspace, out, "gen-corpus")
    assert result.exit_code == 0, result.output
    return out


@pytest.fixture(scope="module")
def checkpoint(runner, workspace, corpus):
    """A briefly pretrained checkpoint with a fitted family head."""
    out = workspace / "pretrain"
    result = invoke(
        runner, workspace, out, "pretrain", "--corpus", str(corpus / "train.fasta"),
        "--labels", str(corpus / "families.csv"),
    )
    assert result.exit_code == 0, result.output
    return out / "checkpoint.ttck"


def test_gen_corpus_is_reproducible(runner, workspace, corpus, tmp_path):
    """Test a second generation with the same seed is byte-identical."""
    result = invoke(runner, workspace, tmp_path, "gen-corpus")

    assert result.exit_code == 0, result.output
    for name in ("train.fasta", "targets.fasta", "families.csv", "assays/target_00.csv", "msas/target_01.a3m"):
        assert (tmp_path / name).read_bytes() == (corpus / name).read_bytes()
    manifest = json.loads((tmp_path / "manifest.json").read_text())
    assert manifest["command"] == "gen-corpus"
    assert "train.fasta" in manifest["files"]


def test_pretrain_zero_epochs_is_initialization(runner, workspace, corpus, tmp_path):
    """Test zero epochs writes the seeded initialization and repeats to the same hash."""
    args = ("pretrain", "--corpus", str(corpus / "train.fasta"), "--epochs", "0")

    first = invoke(runner, workspace, tmp_path / "a", *args)
    second = invoke(runner, workspace, tmp_path / "b", *args)

    assert first.exit_code == 0, first.output
    assert second.exit_code == 0, second.output
    a, b = tmp_path / "a" / "checkpoint.ttck", tmp_path / "b" / "checkpoint.ttck"
    assert checkpoint_hash(a) == checkpoint_hash(b)
    tiny = ModelConfig(num_layers=2, model_dim=16, num_heads=2, ffn_dim=32, max_positions=80)
    assert load_checkpoint(a).equals(init_model(tiny))


def test_pretrain_writes_head_and_losses(checkpoint):
    """Test the pretrained checkpoint carries the family head and a loss log."""
    contents = read_checkpoint(checkpoint)

    assert contents.head is not None
    assert contents.head.num_classes == 2
    losses = (checkpoint.parent / "losses.jsonl").read_text().splitlines()
    assert [json.loads(line)["epoch"] for line in losses] == [1]


def test_missing_checkpoint_is_usage_error(runner, workspace, corpus, tmp_path):
    """Test omitting a required path exits 2 and names the flag."""
    result = invoke(runner, workspace, tmp_path, "ttt", "--target", str(corpus / "targets.fasta"))

    assert result.exit_code == 2
    assert "--checkpoint" in result.output


def test_ttt_writes_traces_and_checkpoints(runner, workspace, corpus, checkpoint, tmp_path):
    """Test customization emits a trace and a selected checkpoint per target."""
    result = invoke(runner, workspace, tmp_path, "ttt", "--checkpoint", str(checkpoint),
                    "--target", str(corpus / "targets.fasta"), "--emit-perplexity")

    assert result.exit_code == 0, result.output
    summary = json.loads((tmp_path / "summary.json").read_text())
    assert summary["model_checkpoint_hash"] == checkpoint_hash(checkpoint)
    assert [t["id"] for t in summary["targets"]] == ["target_00", "target_01"]
    for target_id in ("target_00", "target_01"):
        lines = [json.loads(line) for line in (tmp_path / "traces" / f"{target_id}.jsonl").read_text().splitlines()]
        assert [line["step"] for line in lines] == [0, 1, 2]
        assert "loss" not in lines[0] and "perplexity" in lines[0]
        assert (tmp_path / "checkpoints" / f"{target_id}.ttck").exists()


def test_ttt_with_head_confidence_and_msa(runner, workspace, corpus, checkpoint, tmp_path):
    """Test head confidence selection on an alignment run."""
    result = invoke(runner, workspace, tmp_path, "ttt", "--checkpoint", str(checkpoint),
                    "--msa", str(corpus / "msas" / "target_00.a3m"), "--confidence", "head_max_prob")

    assert result.exit_code == 0, result.output
    lines = (tmp_path / "traces" / "target_00.jsonl").read_text().splitlines()
    assert all("confidence" in json.loads(line) for line in lines)


def test_score_wildtype_mode(runner, workspace, corpus, checkpoint, tmp_path):
    """Test wildtype scoring gives the wild type zero and repeats byte-identically."""
    args = ("score", "--checkpoint", str(checkpoint), "--targets", str(corpus / "targets.fasta"),
            "--assay", str(corpus / "assays" / "target_00.csv"), "--mode", "wildtype")

    first = invoke(runner, workspace, tmp_path / "a", *args)
    second = invoke(runner, workspace, tmp_path / "b", *args)

    assert first.exit_code == 0, first.output
    scores = (tmp_path / "a" / "scores" / "target_00.csv").read_bytes()
    assert scores == (tmp_path / "b" / "scores" / "target_00.csv").read_bytes()
    rows = list(csv.DictReader(scores.decode().splitlines()))
    assert list(rows[0]) == ["id", "mutant", "pred_score", "fitness"]
    assert rows[0]["mutant"] == "" and float(rows[0]["pred_score"]) == 0.0
    summary = json.loads((tmp_path / "a" / "summaries" / "target_00.json").read_text())
    assert summary["mode"] == "wildtype_marginal"
    assert summary["n"] == len(rows)


def test_score_records_distinct_checkpoint_hashes(runner, workspace, corpus, checkpoint, tmp_path):
    """Test base and customized checkpoints are recorded under their own hashes."""
    invoke(runner, workspace, tmp_path / "ttt", "ttt", "--checkpoint", str(checkpoint),
           "--target", str(corpus / "targets.fasta"))
    customized = tmp_path / "ttt" / "checkpoints" / "target_00.ttck"
    assay = ("--targets", str(corpus / "targets.fasta"), "--assay", str(corpus / "assays" / "target_00.csv"))

    base = invoke(runner, workspace, tmp_path / "base", "score", "--checkpoint", str(checkpoint), *assay)
    tuned = invoke(runner, workspace, tmp_path / "tuned", "score", "--checkpoint", str(customized), *assay)

    assert base.exit_code == 0 and tuned.exit_code == 0
    base_hash = json.loads((tmp_path / "base" / "summary.json").read_text())["model_checkpoint_hash"]
    tuned_hash = json.loads((tmp_path / "tuned" / "summary.json").read_text())["model_checkpoint_hash"]
    assert base_hash == checkpoint_hash(checkpoint)
    assert tuned_hash == checkpoint_hash(customized)
    assert base_hash != tuned_hash


def test_score_unknown_mode(runner, workspace, corpus, checkpoint, tmp_path):
    """Test an unknown scoring mode is a usage error."""
    result = invoke(runner, workspace, tmp_path, "score", "--checkpoint", str(checkpoint),
                    "--targets", str(corpus / "targets.fasta"), "--assay", str(corpus / "assays" / "target_00.csv"),
                    "--mode", "sideways")

    assert result.exit_code == 2


def test_score_records_missing_assay_as_failure(runner, workspace, corpus, checkpoint, tmp_path):
    """Test a missing assay file lands in failures.json while the other assays still score."""
    missing = corpus / "assays" / "target_99.csv"

    result = invoke(runner, workspace, tmp_path, "score", "--checkpoint", str(checkpoint),
                    "--targets", str(corpus / "targets.fasta"), "--assay", str(corpus / "assays" / "target_00.csv"),
                    "--assay", str(missing))

    assert result.exit_code == 0, result.output
    failures = json.loads((tmp_path / "failures.json").read_text())["failures"]
    assert [(f["assay"], f["error_code"]) for f in failures] == [(str(missing), "MISSING_INPUT")]
    summary = json.loads((tmp_path / "summary.json").read_text())
    assert [a["assay"] for a in summary["assays"]] == ["target_00"]
    assert (tmp_path / "scores" / "target_00.csv").exists()


def test_score_fails_when_every_assay_is_missing(runner, workspace, corpus, checkpoint, tmp_path):
    """Test the command exits 1 when no assay could be scored."""
    result = invoke(runner, workspace, tmp_path, "score", "--checkpoint", str(checkpoint),
                    "--targets", str(corpus / "targets.fasta"), "--assay", str(tmp_path / "nowhere.csv"))

    assert result.exit_code == 1
    failures = json.loads((tmp_path / "failures.json").read_text())["failures"]
    assert failures[0]["error_code"] == "MISSING_INPUT"


def test_perplexity_csv(runner, workspace, corpus, checkpoint, tmp_path):
    """Test one perplexity row per FASTA record."""
    result = invoke(runner, workspace, tmp_path, "perplexity", "--checkpoint", str(checkpoint),
                    "--fasta", str(corpus / "targets.fasta"))

    assert result.exit_code == 0, result.output
    rows = list(csv.DictReader((tmp_path / "perplexity.csv").read_text().splitlines()))
    assert [r["id"] for r in rows] == ["target_00", "target_01"]
    assert all(int(r["length"]) == 20 and float(r["pseudo_perplexity"]) >= 1.0 for r in rows)


def test_grid_aggregate(runner, workspace, corpus, checkpoint, tmp_path):
    """Test the grid writes per-cell traces and an aggregate row per cell and step."""
    result = invoke(runner, workspace, tmp_path, "grid", "--checkpoint", str(checkpoint),
                    "--targets", str(corpus / "targets.fasta"),
                    "--assay", str(corpus / "assays" / "target_00.csv"))

    assert result.exit_code == 0, result.output
    rows = list(csv.DictReader((tmp_path / "aggregate.csv").read_text().splitlines()))
    assert len(rows) == 4 * 3
    assert list(rows[0]) == ["lr", "micro_batch", "accum", "masking", "step", "mean_perplexity", "mean_spearman",
                             "loss_kind"]
    assert sorted((tmp_path / "cells").iterdir())[0].name == "cell000"
    assert (tmp_path / "cells" / "cell003" / "target_01.jsonl").exists()
