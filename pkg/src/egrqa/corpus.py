"""Plain-text corpus loading and recursive character splitting.

Chunks are contiguous substrings of the normalized document text, so every
chunk carries an exact ``[span_start, span_end)`` span back into its source.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable

from .errors import IngestError

log = logging.getLogger(__name__)

DEFAULT_SEPARATORS: tuple[str, ...] = ("\n\n", "\n", " ", "")


@dataclass(frozen=True)
class SourceDocument:
    doc_id: str
    text: str

    @property
    def char_count(self) -> int:
        return len(self.text)


@dataclass(frozen=True)
class ChunkRecord:
    chunk_id: str
    doc_id: str
    ordinal: int
    span_start: int
    span_end: int
    text: str


@dataclass(frozen=True)
class SplitterConfig:
    max_chars: int = 3000
    overlap_chars: int = 1000
    separators: tuple[str, ...] = DEFAULT_SEPARATORS

    def __post_init__(self) -> None:
        if self.max_chars <= 0:
            raise ValueError("max_chars must be positive")
        if not 0 <= self.overlap_chars < self.max_chars:
            raise ValueError("overlap_chars must satisfy 0 <= overlap_chars < max_chars")
        if not self.separators or self.separators[-1] != "":
            raise ValueError("the last separator must be the empty string")


@dataclass
class IngestStats:
    documents: int = 0
    chunks: int = 0
    total_chars: int = 0
    skipped_empty: list[str] = field(default_factory=list)

    @property
    def estimated_tokens(self) -> int:
        # rough 4 chars/token heuristic, informational only
        return self.total_chars // 4

    def as_dict(self) -> dict:
        return {
            "documents": self.documents,
            "chunks": self.chunks,
            "total_chars": self.total_chars,
            "estimated_tokens": self.estimated_tokens,
            "skipped_empty": list(self.skipped_empty),
        }


def normalize_text(raw: str) -> str:
    """Strip a leading BOM and NUL bytes and turn CRLF into LF.

    Nothing else is touched, so offsets into the returned string are the
    canonical chunk spans.
    """
    if raw.startswith("\ufeff"):
        raw = raw[1:]
    return raw.replace("\r\n", "\n").replace("\x00", "")


def decode_source(data: bytes, name: str) -> str:
    try:
        raw = data.decode("utf-8")
    except UnicodeDecodeError as exc:
        raise IngestError(f"{name}: not valid UTF-8 ({exc.reason} at byte {exc.start})") from exc
    return normalize_text(raw)


def _split_keep(text: str, sep: str) -> list[str]:
    if sep == "":
        return list(text)
    parts = []
    start = 0
    while True:
        j = text.find(sep, start)
        if j < 0:
            break
        parts.append(text[start : j + len(sep)])
        start = j + len(sep)
    if start < len(text):
        parts.append(text[start:])
    return parts


def split_fragments(text: str, separators: tuple[str, ...], max_chars: int) -> list[str]:
    """Recursively cut ``text`` into fragments no longer than ``max_chars``.

    Uses the first separator that occurs in ``text``; oversized pieces are
    re-cut with the separators that follow it. Separators stay attached to
    the end of the fragment they terminate.
    """
    for i, sep in enumerate(separators):
        if sep == "" or sep in text:
            break
    else:
        # unreachable with a valid config: "" always matches
        return [text]
    rest = separators[i + 1 :]
    out: list[str] = []
    for piece in _split_keep(text, sep):
        if len(piece) > max_chars and rest:
            out.extend(split_fragments(piece, rest, max_chars))
        else:
            out.append(piece)
    return out


def _merge_spans(lengths: list[int], max_chars: int, overlap_chars: int) -> list[tuple[int, int]]:
    spans: list[tuple[int, int]] = []
    current: list[tuple[int, int]] = []
    current_len = 0
    pos = 0
    for flen in lengths:
        frag = (pos, pos + flen)
        pos += flen
        if current and current_len + flen > max_chars:
            spans.append((current[0][0], current[-1][1]))
            seed: list[tuple[int, int]] = []
            seed_len = 0
            for start, end in reversed(current):
                if seed_len + (end - start) > overlap_chars:
                    break
                seed.insert(0, (start, end))
                seed_len += end - start
            while seed and seed_len + flen > max_chars:
                start, end = seed.pop(0)
                seed_len -= end - start
            current, current_len = seed, seed_len
        current.append(frag)
        current_len += flen
    if current:
        spans.append((current[0][0], current[-1][1]))
    return spans


def split_document(doc: SourceDocument, cfg: SplitterConfig | None = None) -> list[ChunkRecord]:
    cfg = cfg or SplitterConfig()
    if not doc.text:
        return []
    fragments = split_fragments(doc.text, cfg.separators, cfg.max_chars)
    spans = _merge_spans([len(f) for f in fragments], cfg.max_chars, cfg.overlap_chars)
    return [
        ChunkRecord(
            chunk_id=f"{doc.doc_id}#{n}",
            doc_id=doc.doc_id,
            ordinal=n,
            span_start=start,
            span_end=end,
            text=doc.text[start:end],
        )
        for n, (start, end) in enumerate(spans)
    ]


def load_documents(path: str | Path) -> tuple[list[SourceDocument], list[str]]:
    """Read every ``.txt`` file under ``path`` in sorted path order.

    Returns the non-empty documents and the ids of files that normalized to
    nothing.
    """
    root = Path(path)
    if not root.is_dir():
        raise IngestError(f"{root}: not a directory")
    files = sorted(p for p in root.rglob("*.txt") if p.is_file())
    if not files:
        raise IngestError(f"{root}: no .txt files found")
    docs: list[SourceDocument] = []
    empty: list[str] = []
    for f in files:
        doc_id = f.relative_to(root).as_posix()
        try:
            data = f.read_bytes()
        except OSError as exc:
            raise IngestError(f"{f}: unreadable ({exc.strerror})") from exc
        text = decode_source(data, str(f))
        if not text:
            log.warning("skipping empty document %s", doc_id)
            empty.append(doc_id)
            continue
        docs.append(SourceDocument(doc_id=doc_id, text=text))
    return docs, empty


def ingest_directory(
    path: str | Path, cfg: SplitterConfig | None = None
) -> tuple[list[ChunkRecord], IngestStats]:
    cfg = cfg or SplitterConfig()
    docs, empty = load_documents(path)
    stats = IngestStats(skipped_empty=empty)
    chunks: list[ChunkRecord] = []
    for doc in docs:
        doc_chunks = split_document(doc, cfg)
        chunks.extend(doc_chunks)
        stats.documents += 1
        stats.total_chars += doc.char_count
    stats.chunks = len(chunks)
    return chunks, stats


def write_chunks(path: str | Path, chunks: Iterable[ChunkRecord]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for c in chunks:
            fh.write(json.dumps(asdict(c), ensure_ascii=False) + "\n")


def read_chunks(path: str | Path) -> list[ChunkRecord]:
    chunks = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                chunks.append(ChunkRecord(**json.loads(line)))
            except (json.JSONDecodeError, TypeError) as exc:
                raise IngestError(f"{path}:{lineno}: bad chunk record ({exc})") from exc
    return chunks
