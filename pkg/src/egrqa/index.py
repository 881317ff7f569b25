"""Exact flat inner-product index over unit vectors.

On-disk layout (all integers little-endian)::

    magic   8 bytes  b"EGRIDX01"
    version u32      1
    dim     u32
    count   u64
    metric  u32      1 = inner product over unit vectors
    rows    count * dim float32, row-major

Row metadata lives in a JSONL sidecar next to the binary file
(``<path>.chunks.jsonl``), one ``{row, chunk_id, doc_id, text}`` object per row.
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .corpus import ChunkRecord
from .embedding import EmbedderConfig, Embedder, EmbeddingVector, make_embedder
from .errors import BackendError, ContractError, IndexFormatError

MAGIC = b"EGRIDX01"
VERSION = 1
METRIC_COSINE_UNIT = 1
HEADER = struct.Struct("<8sIIQI")
UNIT_NORM_TOL = 1e-4
_SCORE_BLOCK_ROWS = 65_536
_BUILD_BATCH = 256


@dataclass(frozen=True)
class ScoredChunk:
    chunk_id: str
    score: float
    rank: int
    row: int


@dataclass(frozen=True)
class VectorIndex:
    """Immutable store of unit vectors keyed by chunk id."""

    dim: int
    vectors: np.ndarray
    chunk_ids: tuple[str, ...]
    doc_ids: tuple[str, ...] = ()
    texts: tuple[str, ...] = ()
    metric: str = "cosine_unit"
    _row_of: dict[str, int] = field(init=False, repr=False, compare=False)

    def __post_init__(self) -> None:
        vecs = np.ascontiguousarray(self.vectors, dtype=np.float32)
        if vecs.ndim != 2 or vecs.shape[1] != self.dim:
            raise ContractError(f"vectors must have shape (count, {self.dim}), got {vecs.shape}")
        if len(self.chunk_ids) != vecs.shape[0]:
            raise ContractError(f"{len(self.chunk_ids)} chunk ids for {vecs.shape[0]} rows")
        for name in ("doc_ids", "texts"):
            meta = getattr(self, name)
            if meta and len(meta) != vecs.shape[0]:
                raise ContractError(f"{len(meta)} {name} for {vecs.shape[0]} rows")
        row_of: dict[str, int] = {}
        for i, cid in enumerate(self.chunk_ids):
            if cid in row_of:
                raise ContractError(f"duplicate chunk_id {cid!r}")
            row_of[cid] = i
        if vecs.shape[0]:
            norms = np.linalg.norm(vecs.astype(np.float64), axis=1)
            bad = np.flatnonzero(np.abs(norms - 1.0) > UNIT_NORM_TOL)
            if bad.size:
                raise ContractError(f"row {int(bad[0])} has norm {norms[bad[0]]:.6f}, expected unit norm")
        vecs.setflags(write=False)
        object.__setattr__(self, "vectors", vecs)
        object.__setattr__(self, "_row_of", row_of)

    @property
    def count(self) -> int:
        return int(self.vectors.shape[0])

    def row(self, chunk_id: str) -> int:
        return self._row_of[chunk_id]

    def text(self, row: int) -> str:
        return self.texts[row] if self.texts else ""

    def scores(self, query: np.ndarray) -> np.ndarray:
        q = np.asarray(query, dtype=np.float64)
        out = np.empty(self.count, dtype=np.float64)
        for start in range(0, self.count, _SCORE_BLOCK_ROWS):
            stop = min(start + _SCORE_BLOCK_ROWS, self.count)
            out[start:stop] = self.vectors[start:stop].astype(np.float64) @ q
        return out

    def search(self, query: EmbeddingVector | np.ndarray, k: int) -> list[ScoredChunk]:
        """Exact top-``k`` rows by inner product, ties going to the lower row."""
        values = query.values if isinstance(query, EmbeddingVector) else np.asarray(query)
        if values.ndim != 1 or values.shape[0] != self.dim:
            raise ContractError(f"query dim {values.shape[-1] if values.ndim else 0} != index dim {self.dim}")
        if k < 1:
            raise ContractError("k must be >= 1")
        if self.count == 0:
            return []
        s = self.scores(values)
        k = min(k, self.count)
        if k < self.count:
            threshold = np.partition(s, self.count - k)[self.count - k]
            candidates = np.flatnonzero(s >= threshold)
        else:
            candidates = np.arange(self.count)
        # stable sort on -score keeps ascending row order among equal scores
        order = candidates[np.argsort(-s[candidates], kind="stable")][:k]
        return [
            ScoredChunk(chunk_id=self.chunk_ids[r], score=float(s[r]), rank=i + 1, row=int(r))
            for i, r in enumerate(order)
        ]


def search(index: VectorIndex, query: EmbeddingVector | np.ndarray, k: int) -> list[ScoredChunk]:
    return index.search(query, k)


def build_index(chunks: Sequence[ChunkRecord], embedder: Embedder | EmbedderConfig) -> VectorIndex:
    if not chunks:
        raise ContractError("cannot build an index from zero chunks")
    seen: set[str] = set()
    for c in chunks:
        if c.chunk_id in seen:
            raise ContractError(f"duplicate chunk_id {c.chunk_id!r}")
        seen.add(c.chunk_id)
    if isinstance(embedder, EmbedderConfig):
        embedder = make_embedder(embedder)
    rows: list[np.ndarray] = []
    for start in range(0, len(chunks), _BUILD_BATCH):
        stop = min(start + _BUILD_BATCH, len(chunks))
        try:
            vecs = embedder.embed_batch([c.text for c in chunks[start:stop]])
        except BackendError as exc:
            raise BackendError(
                f"embedding chunks[{start}:{stop}] ({chunks[start].chunk_id} .. {chunks[stop - 1].chunk_id}) failed: {exc}",
                status=exc.status,
                attempts=exc.attempts,
            ) from exc
        rows.extend(v.values for v in vecs)
    return VectorIndex(
        dim=embedder.dim,
        vectors=np.vstack(rows),
        chunk_ids=tuple(c.chunk_id for c in chunks),
        doc_ids=tuple(c.doc_id for c in chunks),
        texts=tuple(c.text for c in chunks),
    )


def sidecar_path(path: str | os.PathLike) -> Path:
    return Path(f"{os.fspath(path)}.chunks.jsonl")


def save_index(index: VectorIndex, path: str | os.PathLike) -> None:
    path = Path(path)
    header = HEADER.pack(MAGIC, VERSION, index.dim, index.count, METRIC_COSINE_UNIT)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(header)
        fh.write(index.vectors.astype("<f4", copy=False).tobytes(order="C"))
    os.replace(tmp, path)
    side = sidecar_path(path)
    tmp = side.with_name(side.name + ".tmp")
    with open(tmp, "w", encoding="utf-8", newline="\n") as fh:
        for i, cid in enumerate(index.chunk_ids):
            rec = {
                "row": i,
                "chunk_id": cid,
                "doc_id": index.doc_ids[i] if index.doc_ids else None,
                "text": index.text(i),
            }
            fh.write(json.dumps(rec, ensure_ascii=False) + "\n")
    os.replace(tmp, side)


def load_index(path: str | os.PathLike) -> VectorIndex:
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as exc:
        raise IndexFormatError(f"{path}: cannot read index ({exc.strerror})") from exc
    if len(data) < HEADER.size:
        raise IndexFormatError(f"{path}: truncated header ({len(data)} bytes)")
    magic, version, dim, count, metric = HEADER.unpack_from(data)
    if magic != MAGIC:
        raise IndexFormatError(f"{path}: bad magic {magic!r}")
    if version != VERSION:
        raise IndexFormatError(f"{path}: unsupported version {version}")
    if dim == 0:
        raise IndexFormatError(f"{path}: dim is zero")
    if metric != METRIC_COSINE_UNIT:
        raise IndexFormatError(f"{path}: unknown metric tag {metric}")
    expected = HEADER.size + count * dim * 4
    if len(data) != expected:
        raise IndexFormatError(f"{path}: size {len(data)} bytes, header implies {expected}")
    vectors = np.frombuffer(data, dtype="<f4", offset=HEADER.size).reshape(count, dim).astype(np.float32)

    side = sidecar_path(path)
    chunk_ids, doc_ids, texts = [], [], []
    try:
        with open(side, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh):
                rec = json.loads(line)
                if rec["row"] != lineno:
                    raise IndexFormatError(f"{side}: line {lineno + 1} has row {rec['row']}")
                chunk_ids.append(rec["chunk_id"])
                doc_ids.append(rec.get("doc_id") or "")
                texts.append(rec.get("text") or "")
    except OSError as exc:
        raise IndexFormatError(f"{side}: cannot read sidecar ({exc.strerror})") from exc
    except (json.JSONDecodeError, KeyError, TypeError) as exc:
        raise IndexFormatError(f"{side}: malformed sidecar ({exc})") from exc
    if len(chunk_ids) != count:
        raise IndexFormatError(f"{side}: {len(chunk_ids)} rows, index header says {count}")
    try:
        return VectorIndex(
            dim=dim, vectors=vectors, chunk_ids=tuple(chunk_ids), doc_ids=tuple(doc_ids), texts=tuple(texts)
        )
    except ContractError as exc:
        raise IndexFormatError(f"{path}: {exc}") from exc
