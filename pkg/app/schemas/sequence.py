"""
Sequence-related schemas: alphabet, tokenized sequences, alignments and mutations
"""
from functools import cached_property
from typing import Dict, List, Literal, Tuple

from pydantic import Field, field_validator, model_validator

from app.core.exceptions import PositionOutOfRangeError, WildTypeMismatchError
from app.schemas.base import DomainModel

CANONICAL_RESIDUES = "ACDEFGHIKLMNPQRSTVWY"
UNKNOWN_RESIDUE = "X"
GAP = "-"


class Alphabet(DomainModel):
    """
    Token vocabulary: five special tokens followed by the 20 canonical residues

    Ids are dense from 0: pad, bos, eos, unknown, mask, then residues in
    ``CANONICAL_RESIDUES`` order.
    """

    residue_tokens: Tuple[str, ...] = tuple(CANONICAL_RESIDUES)
    pad_token: str = "<pad>"
    bos_token: str = "<cls>"
    eos_token: str = "<eos>"
    unknown_token: str = "<unk>"
    mask_token: str = "<mask>"

    @field_validator("residue_tokens")
    @classmethod
    def check_residues(cls, v: Tuple[str, ...]) -> Tuple[str, ...]:
        if len(v) != 20 or len(set(v)) != 20:
            raise ValueError("residue_tokens must hold 20 distinct symbols")
        return v

    @cached_property
    def all_tokens(self) -> Tuple[str, ...]:
        specials = (self.pad_token, self.bos_token, self.eos_token, self.unknown_token, self.mask_token)
        return specials + self.residue_tokens

    @cached_property
    def token_index(self) -> Dict[str, int]:
        return {tok: i for i, tok in enumerate(self.all_tokens)}

    @property
    def vocab_size(self) -> int:
        return len(self.all_tokens)

    @property
    def pad_id(self) -> int:
        return 0

    @property
    def bos_id(self) -> int:
        return 1

    @property
    def eos_id(self) -> int:
        return 2

    @property
    def unknown_id(self) -> int:
        return 3

    @property
    def mask_id(self) -> int:
        return 4

    @cached_property
    def residue_ids(self) -> Tuple[int, ...]:
        return tuple(range(5, 5 + len(self.residue_tokens)))

    def token_to_id(self, token: str) -> int:
        try:
            return self.token_index[token]
        except KeyError:
            raise KeyError(f"Unknown token {token!r}") from None

    def id_to_token(self, token_id: int) -> str:
        return self.all_tokens[token_id]

    def is_residue_id(self, token_id: int) -> bool:
        return 5 <= token_id < 5 + len(self.residue_tokens)


ALPHABET = Alphabet()


class TokenSequence(DomainModel):
    """Tokenized protein framed as bos + residues + eos"""

    ids: Tuple[int, ...]
    source_id: str = ""

    @model_validator(mode="after")
    def check_framing(self) -> "TokenSequence":
        ids = self.ids
        if len(ids) < 2 or ids[0] != ALPHABET.bos_id or ids[-1] != ALPHABET.eos_id:
            raise ValueError("ids must start with bos and end with eos")
        for token_id in ids[1:-1]:
            if not (ALPHABET.is_residue_id(token_id) or token_id == ALPHABET.unknown_id):
                raise ValueError(f"interior id {token_id} is not a residue or unknown token")
        return self

    @property
    def raw_length(self) -> int:
        return len(self.ids) - 2

    @property
    def residue_ids(self) -> Tuple[int, ...]:
        return self.ids[1:-1]

    def __len__(self) -> int:
        return len(self.ids)


class Msa(DomainModel):
    """Aligned homologs; row 0 is the target and carries no gaps"""

    rows: Tuple[str, ...]
    ids: Tuple[str, ...] = ()
    target_index: Literal[0] = 0

    @model_validator(mode="after")
    def check_rows(self) -> "Msa":
        if not self.rows:
            raise ValueError("an MSA needs at least one row")
        width = len(self.rows[0])
        if width == 0:
            raise ValueError("target row is empty")
        allowed = set(CANONICAL_RESIDUES + UNKNOWN_RESIDUE + GAP)
        for i, row in enumerate(self.rows):
            if len(row) != width:
                raise ValueError(f"row {i} has length {len(row)}, expected {width}")
            bad = set(row) - allowed
            if bad:
                raise ValueError(f"row {i} contains invalid symbols {sorted(bad)}")
        if GAP in self.rows[0]:
            raise ValueError("target row must not contain gaps")
        if self.ids and len(self.ids) != len(self.rows):
            raise ValueError("ids and rows differ in length")
        return self

    @property
    def target(self) -> str:
        return self.rows[0]

    @property
    def depth(self) -> int:
        return len(self.rows)

    def degapped(self, index: int) -> str:
        return self.rows[index].replace(GAP, "")


class Mutation(DomainModel):
    """One substitution at a 0-based position, residues given as token ids"""

    position: int = Field(ge=0)
    wild_type: int
    mutant: int

    @model_validator(mode="after")
    def check_residues(self) -> "Mutation":
        if not ALPHABET.is_residue_id(self.mutant):
            raise ValueError(f"mutant id {self.mutant} is not a residue token")
        return self

    def notation(self) -> str:
        wt = ALPHABET.id_to_token(self.wild_type) if ALPHABET.is_residue_id(self.wild_type) else UNKNOWN_RESIDUE
        return f"{wt}{self.position + 1}{ALPHABET.id_to_token(self.mutant)}"


class MutationSet(DomainModel):
    """Substitutions with unique positions, kept sorted by position"""

    substitutions: Tuple[Mutation, ...] = ()

    @field_validator("substitutions")
    @classmethod
    def check_unique(cls, v: Tuple[Mutation, ...]) -> Tuple[Mutation, ...]:
        positions = [m.position for m in v]
        if len(positions) != len(set(positions)):
            raise ValueError("positions within a mutation set must be unique")
        return tuple(sorted(v, key=lambda m: m.position))

    @property
    def positions(self) -> List[int]:
        return [m.position for m in self.substitutions]

    def __len__(self) -> int:
        return len(self.substitutions)

    def notation(self) -> str:
        return ":".join(m.notation() for m in self.substitutions)

    def validate_against(self, reference: TokenSequence) -> None:
        residues = reference.residue_ids
        for m in self.substitutions:
            if m.position >= len(residues):
                raise PositionOutOfRangeError(m.position + 1, len(residues))
            if residues[m.position] != m.wild_type:
                raise WildTypeMismatchError(
                    m.notation(),
                    expected=ALPHABET.id_to_token(residues[m.position]),
                    found=ALPHABET.id_to_token(m.wild_type),
                )


class MutationRecord(DomainModel):
    """One assay row: a mutant and its measured fitness"""

    id: str
    mutant: str
    mutations: MutationSet
    measured_fitness: float
