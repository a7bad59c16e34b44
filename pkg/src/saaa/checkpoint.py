"""Versioned binary checkpoints of parameters, optimizer state and config.

Layout, all little-endian::

    "SAAC" | u16 version | u32 header length | header (UTF-8 JSON)
    u32 blob count | blobs

and each blob is::

    u16 name length | name (UTF-8) | u8 dtype code | u8 ndim | u32 dims... | data

Blob names are `param/<name>`, `adam_m/<name>` and `adam_v/<name>`, written
in sorted order, so saving the same checkpoint always gives the same bytes.
"""

from __future__ import annotations

import json
import logging
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from .config import TrainConfig
from .constants import CHECKPOINT_MAGIC, CHECKPOINT_VERSION
from .errors import CheckpointError, ConfigurationError
from .optim import AdamState
from .tensor import Array

logger = logging.getLogger(__name__)

PREAMBLE = struct.Struct("<4sHI")
COUNT = struct.Struct("<I")
NAME_LENGTH = struct.Struct("<H")
BLOB_HEADER = struct.Struct("<BB")
DIM = struct.Struct("<I")

DTYPE_CODES = {1: np.dtype("<f4"), 2: np.dtype("<f8")}


def _dtype_code(array: Array) -> int:
    for code, dtype in DTYPE_CODES.items():
        if array.dtype == dtype:
            return code
    raise CheckpointError(f"Unsupported blob dtype {array.dtype}")


@dataclass
class Checkpoint:
    """Everything needed to rebuild a model and continue training.

    Attributes:
        config: The config that produced the parameters.
        step: Number of optimizer steps taken.
        params: Parameter values keyed by name.
        adam: Optimizer moments and counter.
        question_tokens: The question vocabulary, UNK first.
        answers: The answer vocabulary by class index.
        feature_depth: Depth of the feature maps as stored on disk.
        answer_coverage: Validation coverage of the answer vocabulary.
    """

    config: TrainConfig
    step: int
    params: dict[str, Array]
    adam: AdamState
    question_tokens: list[str]
    answers: list[str]
    feature_depth: int
    answer_coverage: float | None = None
    version: int = field(default=CHECKPOINT_VERSION)

    @property
    def rng_state(self) -> dict[str, int]:
        """Randomness is keyed by seed and step, so this is all there is."""
        return {"seed": self.config.seed, "next_step": self.step}

    def header(self) -> dict[str, Any]:
        return {
            "adam_step": self.adam.step,
            "answer_coverage": self.answer_coverage,
            "answers": self.answers,
            "config": self.config.model_dump(mode="json"),
            "feature_depth": self.feature_depth,
            "question_tokens": self.question_tokens,
            "rng": self.rng_state,
            "step": self.step,
        }

    def blobs(self) -> list[tuple[str, Array]]:
        named = [(f"param/{name}", value) for name, value in self.params.items()]
        named += [(f"adam_m/{name}", value) for name, value in self.adam.m.items()]
        named += [(f"adam_v/{name}", value) for name, value in self.adam.v.items()]
        return sorted(named, key=lambda item: item[0])


def checkpoint_bytes(ckpt: Checkpoint) -> bytes:
    header = json.dumps(ckpt.header(), sort_keys=True).encode("utf-8")
    parts = [PREAMBLE.pack(CHECKPOINT_MAGIC, ckpt.version, len(header)), header]
    blobs = ckpt.blobs()
    parts.append(COUNT.pack(len(blobs)))
    for name, array in blobs:
        encoded = name.encode("utf-8")
        code = _dtype_code(array)
        parts.append(NAME_LENGTH.pack(len(encoded)) + encoded)
        parts.append(BLOB_HEADER.pack(code, array.ndim))
        parts.extend(DIM.pack(extent) for extent in array.shape)
        parts.append(np.ascontiguousarray(array, dtype=DTYPE_CODES[code]).tobytes())
    return b"".join(parts)


def save_checkpoint(ckpt: Checkpoint, path: Path | str) -> None:
    """Writes a checkpoint; the file is replaced atomically."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    partial = path.with_name(path.name + ".partial")
    partial.write_bytes(checkpoint_bytes(ckpt))
    partial.replace(path)
    logger.info("Wrote checkpoint at step %d to %s", ckpt.step, path)


class _Reader:
    def __init__(self, data: bytes) -> None:
        self.data = data
        self.offset = 0

    def unpack(self, layout: struct.Struct) -> tuple[Any, ...]:
        if self.offset + layout.size > len(self.data):
            raise CheckpointError(f"Truncated checkpoint at byte {self.offset}")
        values = layout.unpack_from(self.data, self.offset)
        self.offset += layout.size
        return values

    def take(self, count: int) -> bytes:
        if self.offset + count > len(self.data):
            raise CheckpointError(f"Truncated checkpoint at byte {self.offset}")
        chunk = self.data[self.offset : self.offset + count]
        self.offset += count
        return chunk


def parse_checkpoint(data: bytes) -> Checkpoint:
    """Parses checkpoint bytes.

    Raises:
        CheckpointError: On a bad magic, an unsupported version or any
            corruption.
    """
    reader = _Reader(data)
    magic, version, header_length = reader.unpack(PREAMBLE)
    if magic != CHECKPOINT_MAGIC:
        raise CheckpointError(f"Bad checkpoint magic {magic!r}")
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(
            "Unsupported checkpoint version", version, CHECKPOINT_VERSION
        )
    try:
        header = json.loads(reader.take(header_length).decode("utf-8"))
        config = TrainConfig.from_mapping(header["config"], "<checkpoint>")
    except (UnicodeDecodeError, json.JSONDecodeError, KeyError) as error:
        raise CheckpointError(f"Corrupt checkpoint header: {error}") from error
    except ConfigurationError as error:
        raise CheckpointError(f"Invalid config in checkpoint: {error}") from error
    (count,) = reader.unpack(COUNT)
    groups: dict[str, dict[str, Array]] = {"param": {}, "adam_m": {}, "adam_v": {}}
    for _ in range(count):
        (name_length,) = reader.unpack(NAME_LENGTH)
        name = reader.take(name_length).decode("utf-8", errors="replace")
        code, ndim = reader.unpack(BLOB_HEADER)
        if code not in DTYPE_CODES:
            raise CheckpointError(f"Unknown dtype code {code} for blob {name}")
        shape = tuple(reader.unpack(DIM)[0] for _ in range(ndim))
        dtype = DTYPE_CODES[code]
        size = math.prod(shape) * dtype.itemsize
        if size > len(data) - reader.offset:
            raise CheckpointError(
                f"Blob {name} of shape {shape} overruns the checkpoint"
            )
        array = np.frombuffer(reader.take(size), dtype=dtype).reshape(shape)
        group, _, param = name.partition("/")
        if group not in groups or not param:
            raise CheckpointError(f"Unexpected blob name {name}")
        groups[group][param] = array.astype(dtype.newbyteorder("="))
    if reader.offset != len(data):
        raise CheckpointError(f"Trailing bytes after offset {reader.offset}")
    try:
        return Checkpoint(
            config=config,
            step=int(header["step"]),
            params=groups["param"],
            adam=AdamState(
                m=groups["adam_m"], v=groups["adam_v"], step=int(header["adam_step"])
            ),
            question_tokens=list(header["question_tokens"]),
            answers=list(header["answers"]),
            feature_depth=int(header["feature_depth"]),
            answer_coverage=header.get("answer_coverage"),
            version=version,
        )
    except (KeyError, TypeError, ValueError) as error:
        raise CheckpointError(f"Corrupt checkpoint header: {error}") from error


def load_checkpoint(path: Path | str) -> Checkpoint:
    try:
        data = Path(path).read_bytes()
    except OSError as error:
        raise CheckpointError(f"Cannot read checkpoint {path}: {error}") from error
    return parse_checkpoint(data)
