"""
Sequence input/output: FASTA, A3M alignments, mutation tables and tokenization
"""
import csv
import io
import re
import string
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import structlog

from app.core.exceptions import (
    AlignmentError,
    DuplicatePositionError,
    EmptySequenceError,
    InvalidCharacterError,
    MalformedRecordError,
    PositionOutOfRangeError,
    WildTypeMismatchError,
)
from app.schemas.sequence import (
    ALPHABET,
    CANONICAL_RESIDUES,
    GAP,
    UNKNOWN_RESIDUE,
    Alphabet,
    Msa,
    Mutation,
    MutationRecord,
    MutationSet,
    TokenSequence,
)

logger = structlog.get_logger()

FastaRecord = Tuple[str, str]

SEQUENCE_SYMBOLS = frozenset(CANONICAL_RESIDUES + UNKNOWN_RESIDUE)
ALIGNMENT_SYMBOLS = SEQUENCE_SYMBOLS | {GAP}
DELETE_INSERTIONS = str.maketrans("", "", string.ascii_lowercase + ".")
MUTANT_PATTERN = re.compile(r"^([A-Z])(\d+)([A-Z])$")
WILD_TYPE_MARKERS = frozenset({"", "WT", "_wt", "wt"})


def _decode(data: bytes) -> str:
    try:
        return data.decode("utf-8")
    except UnicodeDecodeError as e:
        raise MalformedRecordError(f"Input is not UTF-8: {e}")


def _read_records(text: str) -> List[Tuple[str, List[str]]]:
    """Split FASTA-like text into (header, body lines) without validating symbols"""
    records: List[Tuple[str, List[str]]] = []
    for line_no, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line:
            continue
        if line.startswith(">"):
            header = line[1:].strip()
            if not header:
                raise MalformedRecordError(f"Empty header on line {line_no}", details={"line": line_no})
            records.append((header, []))
        elif not records:
            raise MalformedRecordError(
                f"Line {line_no} precedes the first '>' header", details={"line": line_no}
            )
        else:
            records[-1][1].append("".join(line.split()))
    return records


def _check_symbols(sequence: str, allowed: Iterable[str], record_id: Optional[str]) -> None:
    allowed = allowed if isinstance(allowed, frozenset) else frozenset(allowed)
    for i, ch in enumerate(sequence):
        if ch not in allowed:
            raise InvalidCharacterError(ch, i + 1, record_id=record_id)


def parse_fasta(data: bytes) -> List[FastaRecord]:
    """
    Parse FASTA bytes into (id, sequence) pairs in file order

    Bodies may wrap over several lines. Only the 20 canonical residues and
    ``X`` are accepted.
    """
    text = _decode(data)
    if not text.strip():
        raise EmptySequenceError("FASTA input is empty")

    records = []
    for header, lines in _read_records(text):
        sequence = "".join(lines)
        if not sequence:
            raise EmptySequenceError(f"Record {header!r} has an empty sequence", details={"record_id": header})
        _check_symbols(sequence, SEQUENCE_SYMBOLS, header)
        records.append((header, sequence))

    logger.debug("Parsed FASTA", records=len(records))
    return records


def write_fasta(records: Sequence[FastaRecord], line_width: Optional[int] = None) -> bytes:
    """Serialize (id, sequence) pairs; ``line_width`` wraps bodies"""
    out = io.StringIO()
    for record_id, sequence in records:
        out.write(f">{record_id}\n")
        if line_width:
            for start in range(0, len(sequence), line_width):
                out.write(sequence[start:start + line_width] + "\n")
        else:
            out.write(sequence + "\n")
    return out.getvalue().encode("utf-8")


def parse_a3m(data: bytes) -> Msa:
    """
    Parse an A3M alignment whose first record is the target

    Lowercase letters (and '.') are insertions relative to the target and are
    dropped; columns where the target itself has a gap are removed as well.
    """
    text = _decode(data)
    records = _read_records(text)
    if not records:
        raise AlignmentError("Alignment has zero rows")

    ids, rows = [], []
    for header, lines in records:
        row = "".join(lines).translate(DELETE_INSERTIONS)
        if not row:
            raise EmptySequenceError(f"Alignment row {header!r} is empty", details={"record_id": header})
        _check_symbols(row, ALIGNMENT_SYMBOLS, header)
        ids.append(header)
        rows.append(row)

    width = len(rows[0])
    for header, row in zip(ids, rows):
        if len(row) != width:
            raise AlignmentError(
                f"Row {header!r} has {len(row)} match columns, target has {width}",
                details={"record_id": header, "length": len(row), "expected": width},
            )

    keep = [j for j, ch in enumerate(rows[0]) if ch != GAP]
    if len(keep) != width:
        rows = ["".join(row[j] for j in keep) for row in rows]
    if not keep:
        raise EmptySequenceError("Alignment target has no residues")

    logger.debug("Parsed A3M alignment", rows=len(rows), width=len(keep))
    return Msa(rows=tuple(rows), ids=tuple(ids))


def tokenize(sequence: str, alphabet: Alphabet = ALPHABET, source_id: str = "") -> TokenSequence:
    """Frame a residue string with bos/eos; 'X' becomes the unknown token"""
    if not sequence:
        raise EmptySequenceError("Cannot tokenize an empty sequence")
    ids = [alphabet.bos_id]
    for i, ch in enumerate(sequence):
        if ch == UNKNOWN_RESIDUE:
            ids.append(alphabet.unknown_id)
        elif ch in alphabet.residue_tokens:
            ids.append(alphabet.token_to_id(ch))
        else:
            raise InvalidCharacterError(ch, i + 1, record_id=source_id or None)
    ids.append(alphabet.eos_id)
    return TokenSequence(ids=tuple(ids), source_id=source_id)


def detokenize(tokens: TokenSequence, alphabet: Alphabet = ALPHABET) -> str:
    """Inverse of tokenize; the unknown token maps back to 'X'"""
    return "".join(
        UNKNOWN_RESIDUE if t == alphabet.unknown_id else alphabet.id_to_token(t)
        for t in tokens.residue_ids
    )


def parse_mutant(mutant: str, reference: TokenSequence, alphabet: Alphabet = ALPHABET) -> MutationSet:
    """Parse 'A24G' or 'A24G:L30P' (1-based positions) against the reference"""
    mutant = mutant.strip()
    if mutant in WILD_TYPE_MARKERS:
        return MutationSet()

    residues = reference.residue_ids
    substitutions: List[Mutation] = []
    seen = set()
    for token in mutant.split(":"):
        match = MUTANT_PATTERN.match(token.strip())
        if not match:
            raise MalformedRecordError(f"Cannot parse mutation {token!r}", details={"mutant": mutant})
        wt, pos_text, mt = match.groups()
        position = int(pos_text)
        if position < 1 or position > len(residues):
            raise PositionOutOfRangeError(position, len(residues))
        if position in seen:
            raise DuplicatePositionError(mutant, position)
        seen.add(position)

        expected = residues[position - 1]
        expected_symbol = UNKNOWN_RESIDUE if expected == alphabet.unknown_id else alphabet.id_to_token(expected)
        if wt != expected_symbol:
            raise WildTypeMismatchError(mutant, expected=expected_symbol, found=wt)
        if mt not in alphabet.residue_tokens:
            raise InvalidCharacterError(mt, position, record_id=mutant)

        substitutions.append(
            Mutation(position=position - 1, wild_type=expected, mutant=alphabet.token_to_id(mt))
        )
    return MutationSet(substitutions=tuple(substitutions))


def parse_mutations(data: bytes, reference: TokenSequence) -> List[MutationRecord]:
    """
    Parse a ``mutant,fitness`` table (optional ``id`` column) into records

    An empty mutant cell denotes the wild type.
    """
    reader = csv.DictReader(io.StringIO(_decode(data)))
    columns = set(reader.fieldnames or [])
    missing = {"mutant", "fitness"} - columns
    if missing:
        raise MalformedRecordError(
            f"Mutation table lacks column(s) {sorted(missing)}", details={"columns": sorted(columns)}
        )

    records = []
    for row_no, row in enumerate(reader, start=2):
        mutant = (row.get("mutant") or "").strip()
        try:
            fitness = float(row["fitness"])
        except (TypeError, ValueError):
            raise MalformedRecordError(
                f"Row {row_no}: fitness {row.get('fitness')!r} is not a number", details={"row": row_no}
            )
        mutations = parse_mutant(mutant, reference)
        record_id = (row.get("id") or "").strip() or mutant or "WT"
        records.append(
            MutationRecord(id=record_id, mutant=mutant, mutations=mutations, measured_fitness=fitness)
        )

    logger.debug("Parsed mutation table", records=len(records), reference=reference.source_id)
    return records


def write_mutations(records: Sequence[MutationRecord]) -> bytes:
    out = io.StringIO()
    writer = csv.writer(out, lineterminator="\n")
    writer.writerow(["id", "mutant", "fitness"])
    for record in records:
        writer.writerow([record.id, record.mutant, repr(record.measured_fitness)])
    return out.getvalue().encode("utf-8")


def parse_labels(data: bytes) -> Dict[str, str]:
    """Read an ``id,family`` table into an id -> family label map"""
    reader = csv.DictReader(io.StringIO(_decode(data)))
    missing = {"id", "family"} - set(reader.fieldnames or [])
    if missing:
        raise MalformedRecordError(f"Label table lacks column(s) {sorted(missing)}")

    labels: Dict[str, str] = {}
    for row_no, row in enumerate(reader, start=2):
        record_id = (row.get("id") or "").strip()
        family = (row.get("family") or "").strip()
        if not record_id or not family:
            raise MalformedRecordError(f"Row {row_no}: empty id or family", details={"row": row_no})
        labels[record_id] = family
    return labels
