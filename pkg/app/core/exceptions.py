"""
Custom exceptions for the test-time customization engine
"""
from typing import Any, Dict, Optional


class TTTError(Exception):
    """Base exception for engine errors"""

    def __init__(
        self,
        message: str,
        error_code: Optional[str] = None,
        details: Optional[Dict[str, Any]] = None,
        exit_code: int = 1,
    ):
        self.message = message
        self.error_code = error_code
        self.details = details or {}
        self.exit_code = exit_code
        super().__init__(self.message)


class ConfigurationError(TTTError):
    """Raised when a run configuration or CLI usage is invalid"""

    def __init__(self, message: str = "Invalid configuration", errors: Optional[list] = None, **kwargs):
        details = kwargs.pop("details", {})
        if errors:
            details["errors"] = errors
        super().__init__(message, error_code="CONFIG_ERROR", details=details, exit_code=2, **kwargs)


# Sequence input


class MalformedRecordError(TTTError):
    """Raised when a FASTA/A3M/CSV record cannot be parsed"""

    def __init__(self, message: str = "Malformed record", **kwargs):
        super().__init__(message, error_code="MALFORMED_RECORD", **kwargs)


class EmptySequenceError(TTTError):
    """Raised when a sequence or file has no residues"""

    def __init__(self, message: str = "Empty sequence", **kwargs):
        super().__init__(message, error_code="EMPTY_SEQUENCE", **kwargs)


class MissingInputError(TTTError):
    """Raised when an input file named by the run does not exist"""

    def __init__(self, path: str, flag: str, **kwargs):
        super().__init__(
            f"{path} does not exist", error_code="MISSING_INPUT", details={"path": path, "flag": flag}, **kwargs
        )


class InvalidCharacterError(TTTError):
    """Raised when a sequence contains a symbol outside the alphabet"""

    def __init__(self, character: str, position: int, record_id: Optional[str] = None, **kwargs):
        message = f"Non-alphabet character {character!r} at position {position}"
        if record_id:
            message += f" in record {record_id!r}"
        details = kwargs.pop("details", {})
        details.update({"character": character, "position": position, "record_id": record_id})
        super().__init__(message, error_code="INVALID_CHARACTER", details=details, **kwargs)


class AlignmentError(TTTError):
    """Raised when MSA rows do not align to the target"""

    def __init__(self, message: str = "Alignment length mismatch", **kwargs):
        super().__init__(message, error_code="ALIGNMENT_ERROR", **kwargs)


class WildTypeMismatchError(TTTError):
    """Raised when a mutation's wild-type residue disagrees with the reference"""

    def __init__(self, mutant: str, expected: str, found: str, **kwargs):
        message = f"Wrongly annotated wild type in {mutant!r}: reference has {expected!r}, mutant says {found!r}"
        details = {"mutant": mutant, "expected": expected, "found": found}
        super().__init__(message, error_code="WILD_TYPE_MISMATCH", details=details, **kwargs)


class PositionOutOfRangeError(TTTError):
    """Raised when a mutation position lies outside the reference"""

    def __init__(self, position: int, length: int, **kwargs):
        message = f"Position {position} is outside the reference of length {length}"
        super().__init__(
            message,
            error_code="POSITION_OUT_OF_RANGE",
            details={"position": position, "length": length},
            **kwargs,
        )


class DuplicatePositionError(TTTError):
    """Raised when a multi-point mutant mutates one position twice"""

    def __init__(self, mutant: str, position: int, **kwargs):
        message = f"Position {position} appears more than once in {mutant!r}"
        super().__init__(
            message,
            error_code="DUPLICATE_POSITION",
            details={"mutant": mutant, "position": position},
            **kwargs,
        )


# Model


class ModelConfigError(TTTError):
    """Raised when a model configuration is inconsistent"""

    def __init__(self, message: str = "Invalid model configuration", **kwargs):
        super().__init__(message, error_code="MODEL_CONFIG_ERROR", **kwargs)


class SequenceTooLongError(TTTError):
    """Raised when a framed sequence exceeds max_positions"""

    def __init__(self, length: int, max_positions: int, **kwargs):
        message = f"Sequence of {length} tokens exceeds max_positions={max_positions}"
        super().__init__(
            message,
            error_code="SEQUENCE_TOO_LONG",
            details={"length": length, "max_positions": max_positions},
            **kwargs,
        )


class ShapeMismatchError(TTTError):
    """Raised when a snapshot does not fit the target model"""

    def __init__(self, message: str = "Snapshot shape mismatch", **kwargs):
        super().__init__(message, error_code="SHAPE_MISMATCH", **kwargs)


class ChecksumMismatchError(TTTError):
    """Raised when a checkpoint fails its content checksum"""

    def __init__(self, message: str = "Checkpoint checksum mismatch", **kwargs):
        super().__init__(message, error_code="CHECKSUM_MISMATCH", **kwargs)


class UnsupportedFormatError(TTTError):
    """Raised when a checkpoint has unknown magic bytes or version"""

    def __init__(self, message: str = "Unsupported checkpoint format", **kwargs):
        super().__init__(message, error_code="UNSUPPORTED_FORMAT", **kwargs)


# Training


class EmptySupervisionError(TTTError):
    """Raised when a batch has no supervised positions"""

    def __init__(self, message: str = "Batch has no supervised positions", **kwargs):
        super().__init__(message, error_code="EMPTY_SUPERVISION", **kwargs)


class IncompleteAccumulationError(TTTError):
    """Raised when stepping before all micro-batches were accumulated"""

    def __init__(self, seen: int, expected: int, **kwargs):
        message = f"Optimizer step after {seen} of {expected} micro-batches"
        super().__init__(
            message,
            error_code="INCOMPLETE_ACCUMULATION",
            details={"seen": seen, "expected": expected},
            **kwargs,
        )


class MaskPlanMismatchError(TTTError):
    """Raised when a mask plan was not sampled for the given sequence"""

    def __init__(self, message: str = "Mask plan does not match sequence", **kwargs):
        super().__init__(message, error_code="MASK_PLAN_MISMATCH", **kwargs)


class NonFiniteLossError(TTTError):
    """Raised when the training loss diverges"""

    def __init__(self, step: int, loss: float, **kwargs):
        message = f"Non-finite loss {loss} at step {step}"
        super().__init__(
            message,
            error_code="NON_FINITE_LOSS",
            details={"step": step, "loss": str(loss)},
            **kwargs,
        )
        self.step = step


# Scoring and heads


class LengthMismatchError(TTTError):
    """Raised when paired vectors differ in length"""

    def __init__(self, message: str = "Length mismatch", **kwargs):
        super().__init__(message, error_code="LENGTH_MISMATCH", **kwargs)


class UndefinedCorrelationError(TTTError):
    """Raised when a rank correlation is undefined"""

    def __init__(self, message: str = "Correlation undefined for constant input", **kwargs):
        super().__init__(message, error_code="UNDEFINED_CORRELATION", **kwargs)


class UnknownResidueError(TTTError):
    """Raised when residue-renormalized scoring meets an unknown residue it cannot score"""

    def __init__(self, message: str = "Unknown residue has no probability under residue renormalization", **kwargs):
        super().__init__(message, error_code="UNKNOWN_RESIDUE", **kwargs)


class MissingHeadError(TTTError):
    """Raised when a head-based confidence is requested without a head"""

    def __init__(self, message: str = "head_max_prob confidence requires a classifier head", **kwargs):
        super().__init__(message, error_code="MISSING_HEAD", **kwargs)


class NonFiniteParametersError(TTTError):
    """Raised when a snapshot holds NaN or Inf values"""

    def __init__(self, message: str = "Snapshot contains non-finite parameters", **kwargs):
        super().__init__(message, error_code="NON_FINITE_PARAMETERS", **kwargs)
