"""
Versioned binary checkpoint container

Layout (all integers little-endian)::

    b"TTCK"                     magic
    u32                         format version
    u32                         section count
    per section:
        4 bytes                 tag, b"BKBN" (backbone) or b"HEAD" (classifier head)
        u32 + bytes             JSON metadata (ModelConfig for BKBN, class labels for HEAD)
        u32                     tensor count
        per tensor:
            u16 + bytes         UTF-8 name
            u8                  dtype code
            u8                  ndim
            u32 * ndim          dims
            u64 + bytes         raw little-endian data
    32 bytes                    SHA-256 of everything above
"""
import hashlib
import json
import struct
from collections import OrderedDict
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Optional, Tuple, Union

import numpy as np
import structlog
import torch
from pydantic import ValidationError

from app.core.exceptions import ChecksumMismatchError, NonFiniteParametersError, UnsupportedFormatError
from app.schemas.model import ModelConfig
from app.services.backbone import FORMAT_VERSION, BackboneSnapshot, validate_config
from app.services.heads import ClassifierHead

logger = structlog.get_logger()

MAGIC = b"TTCK"
BACKBONE_TAG = b"BKBN"
HEAD_TAG = b"HEAD"
DIGEST_SIZE = 32

DTYPE_CODES = {torch.float32: 0, torch.float64: 1, torch.int64: 2}
NUMPY_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8"), 2: np.dtype("<i8")}


@dataclass
class CheckpointContents:
    snapshot: BackboneSnapshot
    head: Optional[ClassifierHead] = None


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.offset = 0

    def take(self, size: int) -> bytes:
        end = self.offset + size
        if end > len(self.data):
            raise UnsupportedFormatError("Checkpoint ends inside a record")
        chunk = self.data[self.offset:end]
        self.offset = end
        return chunk

    def unpack(self, fmt: str) -> Tuple:
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def _pack_tensors(tensors: Dict[str, torch.Tensor]) -> bytes:
    out = [struct.pack("<I", len(tensors))]
    for name, tensor in tensors.items():
        tensor = tensor.detach().cpu().contiguous()
        if tensor.dtype not in DTYPE_CODES:
            raise UnsupportedFormatError(f"Cannot store dtype {tensor.dtype}", details={"tensor": name})
        code = DTYPE_CODES[tensor.dtype]
        raw = tensor.numpy().astype(NUMPY_DTYPES[code], copy=False).tobytes()
        encoded = name.encode("utf-8")
        out.append(struct.pack("<H", len(encoded)) + encoded)
        out.append(struct.pack("<BB", code, tensor.dim()))
        out.append(struct.pack(f"<{tensor.dim()}I", *tensor.shape))
        out.append(struct.pack("<Q", len(raw)) + raw)
    return b"".join(out)


def _unpack_tensors(reader: _Reader) -> "OrderedDict[str, torch.Tensor]":
    tensors = OrderedDict()
    (count,) = reader.unpack("<I")
    for _ in range(count):
        (name_len,) = reader.unpack("<H")
        name = reader.take(name_len).decode("utf-8")
        code, ndim = reader.unpack("<BB")
        if code not in NUMPY_DTYPES:
            raise UnsupportedFormatError(f"Unknown dtype code {code}", details={"tensor": name})
        dims = reader.unpack(f"<{ndim}I")
        (nbytes,) = reader.unpack("<Q")
        array = np.frombuffer(reader.take(nbytes), dtype=NUMPY_DTYPES[code]).reshape(dims)
        tensors[name] = torch.from_numpy(array.copy())
    return tensors


def _section(tag: bytes, meta: Dict, tensors: Dict[str, torch.Tensor]) -> bytes:
    encoded = json.dumps(meta, sort_keys=True).encode("utf-8")
    return tag + struct.pack("<I", len(encoded)) + encoded + _pack_tensors(tensors)


def encode_checkpoint(snapshot: BackboneSnapshot, head: Optional[ClassifierHead] = None) -> bytes:
    sections = [_section(BACKBONE_TAG, snapshot.config.model_dump(mode="json"), snapshot.tensors)]
    if head is not None:
        sections.append(_section(HEAD_TAG, {"classes": list(head.classes)}, head.tensors()))
    body = MAGIC + struct.pack("<II", snapshot.format_version, len(sections)) + b"".join(sections)
    return body + hashlib.sha256(body).digest()


def decode_checkpoint(data: bytes) -> CheckpointContents:
    if len(data) < len(MAGIC) + 8 + DIGEST_SIZE:
        raise ChecksumMismatchError("Checkpoint is truncated", details={"size": len(data)})
    if data[: len(MAGIC)] != MAGIC:
        raise UnsupportedFormatError("Not a checkpoint file (bad magic bytes)")
    body, digest = data[:-DIGEST_SIZE], data[-DIGEST_SIZE:]
    if hashlib.sha256(body).digest() != digest:
        raise ChecksumMismatchError()

    reader = _Reader(body)
    reader.take(len(MAGIC))
    version, num_sections = reader.unpack("<II")
    if version != FORMAT_VERSION:
        raise UnsupportedFormatError(
            f"Checkpoint format version {version} is not supported (expected {FORMAT_VERSION})",
            details={"version": version},
        )

    snapshot, head = None, None
    for _ in range(num_sections):
        tag = reader.take(4)
        (meta_len,) = reader.unpack("<I")
        meta = json.loads(reader.take(meta_len).decode("utf-8"))
        tensors = _unpack_tensors(reader)
        if tag == BACKBONE_TAG:
            try:
                config = ModelConfig.model_validate(meta)
            except ValidationError as e:
                raise UnsupportedFormatError(f"Checkpoint carries an invalid model config: {e}")
            validate_config(config)
            snapshot = BackboneSnapshot(config=config, tensors=tensors, format_version=version)
        elif tag == HEAD_TAG:
            head = ClassifierHead(weight=tensors["weight"], bias=tensors["bias"], classes=tuple(meta["classes"]))
        else:
            raise UnsupportedFormatError(f"Unknown checkpoint section {tag!r}")

    if snapshot is None:
        raise UnsupportedFormatError("Checkpoint has no backbone section")
    return CheckpointContents(snapshot=snapshot, head=head)


def save_checkpoint(
    path: Union[str, Path], snapshot: BackboneSnapshot, head: Optional[ClassifierHead] = None
) -> str:
    """Write a checkpoint and return its SHA-256 file hash"""
    if not snapshot.is_finite():
        raise NonFiniteParametersError()
    data = encode_checkpoint(snapshot, head)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(data)
    file_hash = hashlib.sha256(data).hexdigest()
    logger.info("Saved checkpoint", path=str(path), checkpoint_hash=file_hash, head=head is not None)
    return file_hash


def read_checkpoint(path: Union[str, Path]) -> CheckpointContents:
    return decode_checkpoint(Path(path).read_bytes())


def load_checkpoint(path: Union[str, Path]) -> BackboneSnapshot:
    return read_checkpoint(path).snapshot


def checkpoint_hash(path: Union[str, Path]) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
