"""
Binary model checkpoints.

Layout (all integers little-endian):

    b"SGAT"                      magic
    u32 version                  currently 1
    u32 meta_length
    meta_length bytes            UTF-8 JSON: {"config", "vocab", "extra"}
    u32 tensor_count
    per tensor:
        u16 name_length
        name_length bytes        UTF-8 tensor name
        u32 rows, u32 cols
        rows * cols f64          row-major
"""
import json
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List

import numpy as np

from .data_types import EncoderConfig
from .errors import CheckpointFormatError

logger = logging.getLogger(__name__)

MAGIC = b"SGAT"
VERSION = 1


@dataclass
class Checkpoint:
    config: EncoderConfig
    vocab: List[str]
    tensors: Dict[str, np.ndarray]
    extra: dict = field(default_factory=dict)


def save_checkpoint(path: Path, checkpoint: Checkpoint) -> None:
    """Write a checkpoint; tensors are stored in sorted name order."""
    meta = json.dumps(
        {
            "config": checkpoint.config.model_dump(mode="json"),
            "vocab": list(checkpoint.vocab),
            "extra": checkpoint.extra,
        },
        sort_keys=True,
    ).encode("utf-8")
    chunks = [MAGIC, struct.pack("<II", VERSION, len(meta)), meta, struct.pack("<I", len(checkpoint.tensors))]
    for name in sorted(checkpoint.tensors):
        tensor = np.asarray(checkpoint.tensors[name], dtype=np.float64)
        if tensor.ndim != 2:
            raise CheckpointFormatError(f"tensor {name} must be 2-D, got shape {tensor.shape}")
        encoded = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(encoded)))
        chunks.append(encoded)
        chunks.append(struct.pack("<II", *tensor.shape))
        chunks.append(np.ascontiguousarray(tensor, dtype="<f8").tobytes())
    Path(path).write_bytes(b"".join(chunks))
    logger.info(f"Saved checkpoint with {len(checkpoint.tensors)} tensors to {path}")


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, count: int) -> bytes:
        if self.pos + count > len(self.data):
            raise CheckpointFormatError(
                "checkpoint is truncated", {"offset": self.pos, "wanted": count}
            )
        chunk = self.data[self.pos:self.pos + count]
        self.pos += count
        return chunk

    def unpack(self, fmt: str) -> tuple:
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def load_checkpoint(path: Path) -> Checkpoint:
    """
    Read a checkpoint written by save_checkpoint.

    Raises:
        CheckpointFormatError: On a bad magic, unknown version, truncation or trailing bytes
    """
    reader = _Reader(Path(path).read_bytes())
    if reader.take(4) != MAGIC:
        raise CheckpointFormatError(f"{path} is not a checkpoint (bad magic)")
    version, meta_length = reader.unpack("<II")
    if version != VERSION:
        raise CheckpointFormatError(f"unsupported checkpoint version {version}", {"version": version})
    try:
        meta = json.loads(reader.take(meta_length).decode("utf-8"))
        config = EncoderConfig.model_validate(meta["config"])
    except (ValueError, KeyError) as e:
        raise CheckpointFormatError(f"invalid checkpoint metadata: {e}")
    (count,) = reader.unpack("<I")
    tensors: Dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_length,) = reader.unpack("<H")
        name = reader.take(name_length).decode("utf-8")
        rows, cols = reader.unpack("<II")
        raw = reader.take(rows * cols * 8)
        tensors[name] = np.frombuffer(raw, dtype="<f8").astype(np.float64).reshape(rows, cols)
    if reader.pos != len(reader.data):
        raise CheckpointFormatError("trailing bytes after the last tensor", {"offset": reader.pos})
    return Checkpoint(config=config, vocab=list(meta.get("vocab", [])), tensors=tensors, extra=meta.get("extra", {}))
