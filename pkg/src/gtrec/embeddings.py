"""Frozen embedding matrices, their binary file format, and a mock text encoder.

File layout (little-endian)::

    magic   b"GTEM"
    u16     format version (1)
    u16     flags (bit 0: rows are unit-normalized)
    u32     count
    u32     dim
    count x (u32 byte length, utf-8 key)
    count*dim float32 row-major values
"""

from __future__ import annotations

import hashlib
import os
import struct
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .enrichment import bucket_of, context_key
from .errors import (
    DimMismatch,
    DuplicateKey,
    MissingContext,
    NonFinite,
    ShapeMismatch,
    ZeroVector,
)

MAGIC = b"GTEM"
VERSION = 1
FLAG_NORMALIZED = 1
_HEADER = struct.Struct("<4sHHII")
NORM_TOL = 1e-6


def l2_normalize(rows: np.ndarray) -> np.ndarray:
    """Row-wise L2 normalization computed in float64, returned as float32."""
    x = np.asarray(rows, dtype=np.float64)
    norms = np.linalg.norm(x, axis=-1, keepdims=True)
    if np.any(norms == 0):
        raise ZeroVector("cannot normalize an all-zero row")
    return (x / norms).astype(np.float32)


class EmbeddingMatrix:
    """Immutable keyed matrix of float32 rows."""

    def __init__(self, keys: Sequence[str], rows, normalized: bool = False):
        rows = np.array(rows, dtype=np.float32, copy=True)
        if rows.ndim != 2 or rows.shape[0] != len(keys):
            raise ShapeMismatch(f"rows shape {rows.shape} does not match {len(keys)} keys")
        if rows.shape[1] < 1:
            raise ShapeMismatch("dim must be positive")
        if not np.isfinite(rows).all():
            raise NonFinite("embedding rows contain NaN or Inf")
        self.keys = tuple(str(k) for k in keys)
        self.index = {}
        for i, k in enumerate(self.keys):
            if k in self.index:
                raise DuplicateKey(k)
            self.index[k] = i
        if normalized:
            norms = np.linalg.norm(rows.astype(np.float64), axis=1)
            if np.any(np.abs(norms - 1.0) > NORM_TOL):
                raise ValueError("rows flagged as normalized are not unit length")
        rows.setflags(write=False)
        self.rows = rows
        self.normalized = normalized

    @classmethod
    def from_mapping(cls, mapping: Mapping[str, np.ndarray], normalize: bool = False):
        keys = sorted(mapping)
        rows = np.stack([np.asarray(mapping[k], dtype=np.float64) for k in keys])
        if normalize:
            return cls(keys, l2_normalize(rows), normalized=True)
        return cls(keys, rows)

    @property
    def dim(self) -> int:
        return self.rows.shape[1]

    def __len__(self) -> int:
        return len(self.keys)

    def __contains__(self, key) -> bool:
        return key in self.index

    def __getitem__(self, key: str) -> np.ndarray:
        return self.rows[self.index[key]]

    def get(self, key, default=None):
        i = self.index.get(key)
        return default if i is None else self.rows[i]

    def normalized_copy(self) -> "EmbeddingMatrix":
        if self.normalized:
            return self
        return EmbeddingMatrix(self.keys, l2_normalize(self.rows), normalized=True)

    def digest(self) -> str:
        h = hashlib.sha256()
        for k in self.keys:
            h.update(k.encode())
            h.update(b"\x00")
        h.update(self.rows.tobytes())
        return h.hexdigest()

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, EmbeddingMatrix)
            and self.keys == other.keys
            and self.normalized == other.normalized
            and self.rows.tobytes() == other.rows.tobytes()
        )

    def __repr__(self) -> str:
        return f"EmbeddingMatrix(n={len(self)}, dim={self.dim}, normalized={self.normalized})"


def write_embeddings(path: str | Path, matrix: EmbeddingMatrix) -> None:
    path = Path(path)
    flags = FLAG_NORMALIZED if matrix.normalized else 0
    tmp = path.with_name(path.name + ".tmp")
    with tmp.open("wb") as fh:
        fh.write(_HEADER.pack(MAGIC, VERSION, flags, len(matrix), matrix.dim))
        for k in matrix.keys:
            raw = k.encode("utf-8")
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
        fh.write(matrix.rows.astype("<f4", copy=False).tobytes())
    os.replace(tmp, path)


def load_embeddings(path: str | Path, normalize: bool = True) -> EmbeddingMatrix:
    """Read a matrix; rows not already flagged unit-norm are normalized when ``normalize``."""
    data = Path(path).read_bytes()
    if len(data) < _HEADER.size:
        raise ShapeMismatch("file shorter than header")
    magic, version, flags, count, dim = _HEADER.unpack_from(data, 0)
    if magic != MAGIC:
        raise ValueError(f"not an embedding file (magic {magic!r})")
    if version != VERSION:
        raise ValueError(f"unsupported embedding file version {version}")
    if dim < 1:
        raise ShapeMismatch("dim must be positive")
    off = _HEADER.size
    keys = []
    for _ in range(count):
        if off + 4 > len(data):
            raise ShapeMismatch("key table truncated")
        (n,) = struct.unpack_from("<I", data, off)
        off += 4
        if off + n > len(data):
            raise ShapeMismatch("key table truncated")
        keys.append(data[off:off + n].decode("utf-8"))
        off += n
    need = count * dim * 4
    if len(data) - off != need:
        raise ShapeMismatch(f"body holds {len(data) - off} bytes, header declares {need}")
    rows = np.frombuffer(data, dtype="<f4", count=count * dim, offset=off).reshape(count, dim)
    if not np.isfinite(rows).all():
        raise NonFinite(f"{path}: non-finite values in embedding rows")
    if len(set(keys)) != len(keys):
        seen = set()
        dup = next(k for k in keys if k in seen or seen.add(k))
        raise DuplicateKey(dup)
    is_normalized = bool(flags & FLAG_NORMALIZED)
    if normalize and not is_normalized:
        return EmbeddingMatrix(keys, l2_normalize(rows), normalized=True)
    return EmbeddingMatrix(keys, rows, normalized=is_normalized)


def mock_encode(text: str, dim: int = 64, seed: int = 0) -> np.ndarray:
    """Seeded hash expansion of ``text`` into a unit vector. Carries no semantics."""
    if dim < 2:
        raise ValueError("dim must be >= 2")
    digest = hashlib.blake2b(text.encode("utf-8"), digest_size=16, key=str(seed).encode()).digest()
    rng = np.random.Generator(np.random.PCG64(int.from_bytes(digest, "little")))
    v = rng.standard_normal(dim)
    return v / np.linalg.norm(v)


def encode_texts(texts: Mapping[str, str], dim: int = 64, seed: int = 0) -> EmbeddingMatrix:
    keys = sorted(texts)
    rows = np.stack([mock_encode(texts[k], dim, seed) for k in keys])
    return EmbeddingMatrix(keys, l2_normalize(rows), normalized=True)


def cosine_sim(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise DimMismatch(f"shapes {a.shape} and {b.shape} differ")
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise ZeroVector("cosine similarity of a zero vector")
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


def attach_gt(
    log: Sequence,
    contexts: Mapping | Iterable | None,
    context_embeddings: EmbeddingMatrix,
    bucket: str = "day",
) -> dict[int, np.ndarray]:
    """Resolve every interaction to its context vector.

    ``contexts`` (keyed by (bucket, location)) may be None to skip the context
    presence check. All unresolved keys are reported together before any
    result is returned.
    """
    keys = [(bucket_of(x.timestamp_utc, bucket), x.location) for x in log]
    missing = set()
    for b, loc in keys:
        if contexts is not None and (b, loc) not in contexts:
            missing.add(context_key(b, loc))
        elif context_key(b, loc) not in context_embeddings:
            missing.add(context_key(b, loc))
    if missing:
        raise MissingContext(missing)
    return {i: context_embeddings[context_key(b, loc)] for i, (b, loc) in enumerate(keys)}
