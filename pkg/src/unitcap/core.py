"""Shared domain types, repetition removal, and bit-exact file formats.

Unit streams and codebooks are plain binary artifacts:

* unit stream: magic ``UCU1``, u8 version, u32 vocab_size, u32 length,
  then tokens packed at ``ceil(log2(vocab_size))`` bits each, little-endian
  bit order within bytes, zero-padded to a byte boundary;
* codebook: magic ``UCB1``, u8 version, u32 K, u32 dim, then K*dim
  little-endian IEEE float32 centroid entries.

All types are immutable after construction and safe to share across
threads; every operation here is a pure function.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from itertools import groupby
from pathlib import Path
from typing import BinaryIO, Iterable, Iterator

import numpy as np

from .validation import check_finite

__all__ = [
    "DataFormatError",
    "UnitSequence",
    "Codebook",
    "FeatureSequence",
    "dedup",
    "token_bit_width",
    "write_units",
    "read_units",
    "write_codebook",
    "read_codebook",
]

UNITS_MAGIC = b"UCU1"
CODEBOOK_MAGIC = b"UCB1"
FORMAT_VERSION = 1

_UNITS_HEADER = struct.Struct("<4sBII")
_CODEBOOK_HEADER = struct.Struct("<4sBII")
_U32_MAX = 0xFFFFFFFF


class DataFormatError(ValueError):
    """Raised when an on-disk artifact is malformed, truncated, or out of range."""


@dataclass(frozen=True)
class UnitSequence:
    """An ordered stream of discrete unit ids drawn from ``[0, vocab_size)``.

    ``deduplicated`` records whether adjacent repetitions have been removed.
    It is explicit metadata (removal is lossy, downstream consumers must
    know) and is excluded from equality, which compares tokens and vocab.
    """

    tokens: tuple[int, ...]
    vocab_size: int
    deduplicated: bool = field(default=False, compare=False)

    def __post_init__(self) -> None:
        toks = tuple(int(t) for t in self.tokens)
        object.__setattr__(self, "tokens", toks)
        object.__setattr__(self, "vocab_size", int(self.vocab_size))
        if self.vocab_size < 1:
            raise ValueError(f"vocab_size must be >= 1, got {self.vocab_size}")
        for t in toks:
            if not 0 <= t < self.vocab_size:
                raise ValueError(
                    f"token {t} out of range for vocab_size {self.vocab_size}"
                )
        if self.deduplicated:
            for a, b in zip(toks, toks[1:]):
                if a == b:
                    raise ValueError(
                        "sequence marked deduplicated has adjacent equal tokens"
                    )

    def __len__(self) -> int:
        return len(self.tokens)

    def __iter__(self) -> Iterator[int]:
        return iter(self.tokens)

    def to_array(self) -> np.ndarray:
        return np.asarray(self.tokens, dtype=np.int64)


@dataclass(frozen=True, eq=False)
class Codebook:
    """K centroids of dimension ``dim``; the quantizer for either modality.

    Centroids are held as float32, matching the serialized format exactly,
    so write/read round-trips are bit-identical for every codebook.
    """

    centroids: np.ndarray

    def __post_init__(self) -> None:
        arr = np.ascontiguousarray(self.centroids, dtype=np.float32)
        if arr.ndim != 2:
            raise ValueError(f"centroids must be 2-D, got shape {arr.shape}")
        if arr.shape[0] < 1 or arr.shape[1] < 1:
            raise ValueError(f"codebook needs K >= 1 and dim >= 1, got {arr.shape}")
        check_finite(arr, "centroids")
        arr.setflags(write=False)
        object.__setattr__(self, "centroids", arr)

    @property
    def k(self) -> int:
        return int(self.centroids.shape[0])

    @property
    def dim(self) -> int:
        return int(self.centroids.shape[1])


@dataclass(frozen=True, eq=False)
class FeatureSequence:
    """A T x dim matrix of continuous frames at a fixed frame rate."""

    frames: np.ndarray
    frame_rate_hz: float = 50.0

    def __post_init__(self) -> None:
        arr = np.ascontiguousarray(self.frames, dtype=np.float64)
        if arr.ndim != 2:
            raise ValueError(f"frames must be 2-D, got shape {arr.shape}")
        check_finite(arr, "frames")
        if not self.frame_rate_hz > 0:
            raise ValueError(f"frame_rate_hz must be positive, got {self.frame_rate_hz}")
        arr.setflags(write=False)
        object.__setattr__(self, "frames", arr)
        object.__setattr__(self, "frame_rate_hz", float(self.frame_rate_hz))

    @property
    def num_frames(self) -> int:
        return int(self.frames.shape[0])

    @property
    def dim(self) -> int:
        return int(self.frames.shape[1])

    @property
    def duration_s(self) -> float:
        return self.num_frames / self.frame_rate_hz


def dedup(seq: UnitSequence) -> UnitSequence:
    """Collapse runs of identical adjacent tokens to a single token.

    Order is preserved, the vocabulary is unchanged, and the result is
    marked ``deduplicated``. Idempotent; never lengthens a sequence.
    """
    collapsed = tuple(t for t, _ in groupby(seq.tokens))
    return UnitSequence(collapsed, seq.vocab_size, deduplicated=True)


def token_bit_width(vocab_size: int) -> int:
    """Packed width per token: ceil(log2(vocab_size)); 0 for a 1-entry vocab."""
    if vocab_size < 1:
        raise ValueError(f"vocab_size must be >= 1, got {vocab_size}")
    return (vocab_size - 1).bit_length()


def _open_for_write(sink) -> tuple[BinaryIO, bool]:
    if isinstance(sink, (str, Path)):
        return open(sink, "wb"), True
    return sink, False


def _open_for_read(source) -> tuple[BinaryIO, bool]:
    if isinstance(source, (str, Path)):
        return open(source, "rb"), True
    return source, False


def _read_exact(fp: BinaryIO, n: int, what: str) -> bytes:
    data = fp.read(n)
    if len(data) != n:
        raise DataFormatError(f"truncated {what}: wanted {n} bytes, got {len(data)}")
    return data


def write_units(seq: UnitSequence, sink) -> None:
    """Serialize a unit sequence; ``sink`` is a path or binary file object."""
    if seq.vocab_size > _U32_MAX:
        raise ValueError("vocab_size does not fit the 32-bit stream header")
    if len(seq) > _U32_MAX:
        raise ValueError("sequence too long for the 32-bit stream header")
    width = token_bit_width(seq.vocab_size)
    packed = 0
    for i, tok in enumerate(seq.tokens):
        packed |= tok << (i * width)
    n_bytes = (len(seq) * width + 7) // 8
    fp, owned = _open_for_write(sink)
    try:
        fp.write(_UNITS_HEADER.pack(UNITS_MAGIC, FORMAT_VERSION, seq.vocab_size, len(seq)))
        fp.write(packed.to_bytes(n_bytes, "little"))
    finally:
        if owned:
            fp.close()


def read_units(source) -> UnitSequence:
    """Read a unit sequence written by :func:`write_units`.

    The dedup marker is not part of the format, so the result is returned
    with ``deduplicated=False``.
    """
    fp, owned = _open_for_read(source)
    try:
        header = _read_exact(fp, _UNITS_HEADER.size, "unit-stream header")
        magic, version, vocab_size, length = _UNITS_HEADER.unpack(header)
        if magic != UNITS_MAGIC:
            raise DataFormatError(f"bad unit-stream magic {magic!r}")
        if version != FORMAT_VERSION:
            raise DataFormatError(f"unsupported unit-stream version {version}")
        if vocab_size < 1:
            raise DataFormatError("unit-stream header has vocab_size 0")
        width = token_bit_width(vocab_size)
        n_bytes = (length * width + 7) // 8
        payload = int.from_bytes(_read_exact(fp, n_bytes, "unit-stream payload"), "little")
        mask = (1 << width) - 1
        tokens = []
        for i in range(length):
            tok = (payload >> (i * width)) & mask
            if tok >= vocab_size:
                raise DataFormatError(
                    f"decoded token {tok} >= vocab_size {vocab_size} at index {i}"
                )
            tokens.append(tok)
        return UnitSequence(tuple(tokens), vocab_size)
    finally:
        if owned:
            fp.close()


def write_codebook(cb: Codebook, sink) -> None:
    if cb.k > _U32_MAX or cb.dim > _U32_MAX:
        raise ValueError("codebook dimensions do not fit the 32-bit header")
    fp, owned = _open_for_write(sink)
    try:
        fp.write(_CODEBOOK_HEADER.pack(CODEBOOK_MAGIC, FORMAT_VERSION, cb.k, cb.dim))
        fp.write(cb.centroids.astype("<f4", copy=False).tobytes())
    finally:
        if owned:
            fp.close()


def read_codebook(source) -> Codebook:
    fp, owned = _open_for_read(source)
    try:
        header = _read_exact(fp, _CODEBOOK_HEADER.size, "codebook header")
        magic, version, k, dim = _CODEBOOK_HEADER.unpack(header)
        if magic != CODEBOOK_MAGIC:
            raise DataFormatError(f"bad codebook magic {magic!r}")
        if version != FORMAT_VERSION:
            raise DataFormatError(f"unsupported codebook version {version}")
        if k < 1 or dim < 1:
            raise DataFormatError(f"codebook header has empty geometry K={k} dim={dim}")
        payload = _read_exact(fp, 4 * k * dim, "codebook payload")
        arr = np.frombuffer(payload, dtype="<f4").reshape(k, dim)
        if not np.isfinite(arr).all():
            raise DataFormatError("codebook payload contains non-finite entries")
        return Codebook(arr)
    finally:
        if owned:
            fp.close()


def units_from_iterable(tokens: Iterable[int], vocab_size: int) -> UnitSequence:
    """Convenience constructor accepting any integer iterable."""
    return UnitSequence(tuple(int(t) for t in tokens), vocab_size)
