"""
Synthetic protein families with an exact fitness oracle

Each family has a consensus sequence and a position-specific substitution
table putting ``1 - substitution_rate`` on the consensus residue and spreading
the rest by a Dirichlet draw. Members are sampled independently per position,
so the log-probability delta of any mutation set under the table is known
exactly and serves as its fitness.
"""
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Sequence, Tuple

import numpy as np
import structlog

from app.core.exceptions import ConfigurationError
from app.schemas.run import SyntheticFamilySpec
from app.schemas.sequence import CANONICAL_RESIDUES, GAP
from app.services.artifacts import csv_bytes
from app.services.seqio import write_fasta

logger = structlog.get_logger()

LOG_FLOOR = 1e-8
HOMOLOG_GAP_RATE = 0.05
MAX_CONSENSUS_ATTEMPTS = 1000
LABEL_COLUMNS = ("id", "family", "split")

Mutant = Tuple[Tuple[int, int], ...]  # ((position, residue index), ...)


@dataclass
class SyntheticFamily:
    index: int
    consensus: np.ndarray  # residue indices, shape (length,)
    table: np.ndarray  # probabilities, shape (length, 20)
    held_out: bool = False

    @property
    def consensus_string(self) -> str:
        return decode(self.consensus)


@dataclass
class AssayRow:
    mutant: str
    fitness: float


@dataclass
class SyntheticCorpus:
    spec: SyntheticFamilySpec
    families: List[SyntheticFamily]
    train: List[Tuple[str, str]] = field(default_factory=list)
    targets: List[Tuple[str, str]] = field(default_factory=list)
    labels: List[Tuple[str, int, str]] = field(default_factory=list)
    assays: Dict[str, List[AssayRow]] = field(default_factory=dict)
    msas: Dict[str, List[Tuple[str, str]]] = field(default_factory=dict)


def decode(indices: Sequence[int]) -> str:
    return "".join(CANONICAL_RESIDUES[int(i)] for i in indices)


def hamming_fraction(a: np.ndarray, b: np.ndarray) -> float:
    return float((a != b).mean())


def substitution_table(
    consensus: np.ndarray, rate: float, concentration: float, rng: np.random.Generator
) -> np.ndarray:
    length = len(consensus)
    onehot = np.zeros((length, len(CANONICAL_RESIDUES)))
    onehot[np.arange(length), consensus] = 1.0
    background = rng.dirichlet(np.full(len(CANONICAL_RESIDUES), concentration), size=length)
    return onehot * (1.0 - rate) + rate * background


def sample_members(table: np.ndarray, count: int, rng: np.random.Generator) -> np.ndarray:
    """Draw ``count`` sequences, each position independently from its table row"""
    cdf = np.cumsum(table, axis=1)
    cdf[:, -1] = 1.0
    u = rng.random((count, table.shape[0]))
    return (u[..., None] < cdf[None]).argmax(axis=-1)


def fitness_delta(table: np.ndarray, sequence: np.ndarray, mutant: Mutant) -> float:
    """Sum over mutated positions of log q(mutant) - log q(wild type), logs floored at 1e-8"""
    total = 0.0
    for position, residue in mutant:
        total += math.log(max(table[position, residue], LOG_FLOOR))
        total -= math.log(max(table[position, sequence[position]], LOG_FLOOR))
    return total


def mutant_notation(sequence: np.ndarray, mutant: Mutant) -> str:
    return ":".join(
        f"{CANONICAL_RESIDUES[sequence[p]]}{p + 1}{CANONICAL_RESIDUES[r]}" for p, r in sorted(mutant)
    )


def sample_assay(
    family: SyntheticFamily, sequence: np.ndarray, spec: SyntheticFamilySpec, rng: np.random.Generator
) -> List[AssayRow]:
    """Wild type first, then distinct single and double mutants scored by the oracle"""
    rows = [AssayRow(mutant="", fitness=0.0)]
    length = len(sequence)
    seen = set()
    max_distinct = length * (len(CANONICAL_RESIDUES) - 1)
    target = min(spec.mutants_per_assay, max_distinct)

    attempts = 0
    while len(rows) - 1 < target and attempts < 50 * target:
        attempts += 1
        order = 2 if length >= 2 and rng.random() < spec.double_mutant_fraction else 1
        positions = sorted(int(p) for p in rng.choice(length, size=order, replace=False))
        mutant = []
        for p in positions:
            # shift past the wild-type residue so the substitution is never silent
            r = int(rng.integers(0, len(CANONICAL_RESIDUES) - 1))
            mutant.append((p, r + 1 if r >= sequence[p] else r))
        mutant = tuple(mutant)
        if mutant in seen:
            continue
        seen.add(mutant)
        rows.append(
            AssayRow(
                mutant=mutant_notation(sequence, mutant),
                fitness=fitness_delta(family.table, sequence, mutant),
            )
        )
    return rows


def _consensus(length: int, existing: List[np.ndarray], min_distance: float, rng: np.random.Generator) -> np.ndarray:
    for _ in range(MAX_CONSENSUS_ATTEMPTS):
        candidate = rng.integers(0, len(CANONICAL_RESIDUES), size=length)
        if all(hamming_fraction(candidate, other) >= min_distance for other in existing):
            return candidate
    raise ConfigurationError(
        f"Could not place a consensus at distance >= {min_distance} from the others",
        details={"min_family_distance": min_distance},
    )


def _gapped(sequence: np.ndarray, rng: np.random.Generator) -> str:
    row = list(decode(sequence))
    for i in np.flatnonzero(rng.random(len(row)) < HOMOLOG_GAP_RATE):
        row[i] = GAP
    return "".join(row)


def generate_corpus(spec: SyntheticFamilySpec) -> SyntheticCorpus:
    rng = np.random.default_rng(spec.seed)

    held_in = [i for i in range(spec.num_families) if i != spec.held_out_family]
    consensus: Dict[int, np.ndarray] = {}
    for i in held_in:
        consensus[i] = rng.integers(0, len(CANONICAL_RESIDUES), size=spec.length)
    consensus[spec.held_out_family] = _consensus(
        spec.length, [consensus[i] for i in held_in], spec.min_family_distance, rng
    )

    families = []
    for i in range(spec.num_families):
        table = substitution_table(consensus[i], spec.substitution_rate, spec.concentration, rng)
        families.append(
            SyntheticFamily(index=i, consensus=consensus[i], table=table, held_out=i == spec.held_out_family)
        )

    corpus = SyntheticCorpus(spec=spec, families=families)
    for family in families:
        if family.held_out:
            continue
        for m, member in enumerate(sample_members(family.table, spec.members_per_family, rng)):
            record_id = f"fam{family.index}_{m:03d}"
            corpus.train.append((record_id, decode(member)))
            corpus.labels.append((record_id, family.index, "train"))

    held_out = families[spec.held_out_family]
    for t, target in enumerate(sample_members(held_out.table, spec.num_targets, rng)):
        target_id = f"target_{t:02d}"
        corpus.targets.append((target_id, decode(target)))
        corpus.labels.append((target_id, held_out.index, "target"))
        corpus.assays[target_id] = sample_assay(held_out, target, spec, rng)
        homologs = sample_members(held_out.table, spec.homologs_per_target, rng)
        corpus.msas[target_id] = [(target_id, decode(target))] + [
            (f"{target_id}_hom{h:02d}", _gapped(row, rng)) for h, row in enumerate(homologs)
        ]

    logger.info(
        "Generated synthetic corpus",
        families=spec.num_families,
        train=len(corpus.train),
        targets=len(corpus.targets),
        seed=spec.seed,
    )
    return corpus


def write_corpus(corpus: SyntheticCorpus, output_dir: Path) -> Dict[str, Path]:
    """Write FASTA, label, assay and A3M files; returns the paths by role"""
    output_dir.mkdir(parents=True, exist_ok=True)
    (output_dir / "assays").mkdir(exist_ok=True)
    (output_dir / "msas").mkdir(exist_ok=True)

    paths = {
        "train": output_dir / "train.fasta",
        "targets": output_dir / "targets.fasta",
        "labels": output_dir / "families.csv",
        "consensus": output_dir / "consensus.json",
    }
    paths["train"].write_bytes(write_fasta(corpus.train))
    paths["targets"].write_bytes(write_fasta(corpus.targets))
    paths["labels"].write_bytes(csv_bytes(LABEL_COLUMNS, (dict(zip(LABEL_COLUMNS, row)) for row in corpus.labels)))
    paths["consensus"].write_text(
        json.dumps({str(f.index): f.consensus_string for f in corpus.families}, indent=2, sort_keys=True) + "\n"
    )

    for target_id, rows in corpus.assays.items():
        path = output_dir / "assays" / f"{target_id}.csv"
        path.write_bytes(csv_bytes(("mutant", "fitness"), (vars(r) for r in rows)))
    for target_id, rows in corpus.msas.items():
        (output_dir / "msas" / f"{target_id}.a3m").write_bytes(write_fasta(rows))
    return paths
