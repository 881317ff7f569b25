"""Expand-guess-refine question answering for one multiple-choice item.

The three stage prompts are loaded verbatim from ``templates/``. The guess
stage sees the rewritten question and retrieved textbook passages but never
the answer options; only the refine stage sees the options.
"""

from __future__ import annotations

import logging
import re
import time
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field
from functools import lru_cache
from importlib import resources
from typing import Any, Callable, Iterator, Literal, Mapping, Sequence

from .chat import ChatBackend, ChatRequest
from .embedding import Embedder
from .errors import BackendError, ContractError, ScriptMismatchError, StageError
from .index import VectorIndex

log = logging.getLogger(__name__)

TEMPLATE_NAMES = ("expand", "guess", "refine")
DIRECT_INSTRUCTION = "Answer with the single letter of the best option."
CHAPTER_BEGIN = "BEGIN TEXTBOOK CHAPTER"
CHAPTER_END = "END OF TEXTBOOK CHAPTER"


@lru_cache(maxsize=None)
def load_template(name: str) -> str:
    if name not in TEMPLATE_NAMES:
        raise KeyError(name)
    ref = resources.files("egrqa").joinpath("templates", f"{name}.txt")
    return ref.read_bytes().decode("utf-8")


def _fill(template: str, values: Mapping[str, str]) -> str:
    # single pass, so model text containing "{context}" etc. is never re-expanded
    pattern = re.compile("|".join(re.escape("{" + k + "}") for k in values))
    return pattern.sub(lambda m: values[m.group(0)[1:-1]], template)


@dataclass(frozen=True)
class McqItem:
    item_id: str
    stem: str
    options: dict[str, str]
    gold_letter: str | None = None
    excluded: bool = False
    exclusion_reason: str | None = None

    def __post_init__(self) -> None:
        letters = list(self.options)
        expected = [chr(ord("A") + i) for i in range(len(letters))]
        if not letters or letters != expected:
            raise ContractError(f"item {self.item_id}: option letters {letters} are not contiguous from A")
        if self.gold_letter is not None and self.gold_letter not in self.options:
            raise ContractError(f"item {self.item_id}: gold letter {self.gold_letter!r} not among options")

    def options_block(self) -> str:
        return "\n".join(f"{letter}) {text}" for letter, text in self.options.items())


@dataclass(frozen=True)
class ExpandResult:
    expanded_context: str
    direct_question: str
    raw_output: str


@dataclass(frozen=True)
class RetrievedChunk:
    chunk_id: str
    score: float
    rank: int
    text: str


@dataclass(frozen=True)
class PipelineConfig:
    k: int = 3
    prompt_char_budget: int = 12_000
    strategy: Literal["egr", "direct"] = "egr"
    include_chapter_in_refine: bool = True
    retrieval_query: Literal["expansion", "stem"] = "expansion"
    model_name: str = "gpt-3.5-turbo"
    temperature: float = 0.0
    max_output_tokens: int = 512
    record_timings: bool = True

    def __post_init__(self) -> None:
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if self.prompt_char_budget < 1:
            raise ValueError("prompt_char_budget must be positive")
        if self.strategy not in ("egr", "direct"):
            raise ValueError(f"unknown strategy {self.strategy!r}")
        if self.retrieval_query not in ("expansion", "stem"):
            raise ValueError(f"unknown retrieval_query {self.retrieval_query!r}")

    def request(self, prompt: str) -> ChatRequest:
        return ChatRequest(
            user_text=prompt,
            temperature=self.temperature,
            max_output_tokens=self.max_output_tokens,
            model_name=self.model_name,
        )


@dataclass
class PipelineTrace:
    """Audit record of one item's run.

    For the ``direct`` strategy the single prompt and reply are stored in
    ``refine_prompt`` and ``refine_output``; the other stage fields stay empty.
    """

    item_id: str
    strategy: str = "egr"
    expand_prompt: str = ""
    expand: ExpandResult | None = None
    retrieval_query: str = ""
    retrieved: list[RetrievedChunk] = field(default_factory=list)
    guess_prompt: str = ""
    guess_chunks_used: int = 0
    guess_text: str = ""
    refine_prompt: str = ""
    refine_chunks_used: int = 0
    refine_output: str = ""
    predicted_letter: str | None = None
    abstained: bool = True
    timings_ms: dict[str, float] = field(default_factory=dict)
    warnings: list[str] = field(default_factory=list)
    error: str | None = None

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> PipelineTrace:
        d = dict(d)
        if d.get("expand") is not None:
            d["expand"] = ExpandResult(**d["expand"])
        d["retrieved"] = [RetrievedChunk(**r) for r in d.get("retrieved", [])]
        return cls(**d)


TRACE_SCHEMA: dict[str, Any] = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "type": "object",
    "required": [
        "item_id", "strategy", "expand_prompt", "expand", "retrieval_query", "retrieved",
        "guess_prompt", "guess_chunks_used", "guess_text", "refine_prompt", "refine_chunks_used",
        "refine_output", "predicted_letter", "abstained", "timings_ms", "warnings", "error",
    ],
    "additionalProperties": False,
    "properties": {
        "item_id": {"type": "string"},
        "strategy": {"enum": ["egr", "direct"]},
        "expand_prompt": {"type": "string"},
        "expand": {
            "oneOf": [
                {"type": "null"},
                {
                    "type": "object",
                    "required": ["expanded_context", "direct_question", "raw_output"],
                    "additionalProperties": False,
                    "properties": {
                        "expanded_context": {"type": "string", "minLength": 1},
                        "direct_question": {"type": "string", "minLength": 1},
                        "raw_output": {"type": "string"},
                    },
                },
            ]
        },
        "retrieval_query": {"type": "string"},
        "retrieved": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["chunk_id", "score", "rank", "text"],
                "additionalProperties": False,
                "properties": {
                    "chunk_id": {"type": "string"},
                    "score": {"type": "number"},
                    "rank": {"type": "integer", "minimum": 1},
                    "text": {"type": "string"},
                },
            },
        },
        "guess_prompt": {"type": "string"},
        "guess_chunks_used": {"type": "integer", "minimum": 0},
        "guess_text": {"type": "string"},
        "refine_prompt": {"type": "string"},
        "refine_chunks_used": {"type": "integer", "minimum": 0},
        "refine_output": {"type": "string"},
        "predicted_letter": {"type": ["string", "null"], "pattern": "^[A-Z]$"},
        "abstained": {"type": "boolean"},
        "timings_ms": {"type": "object", "additionalProperties": {"type": "number"}},
        "warnings": {"type": "array", "items": {"type": "string"}},
        "error": {"type": ["string", "null"]},
    },
}


# -- prompt rendering ------------------------------------------------------


def render_expand_prompt(item: McqItem) -> str:
    return _fill(load_template("expand"), {"question": f"{item.stem}\n\n{item.options_block()}"})


def _expansion_text(expand: ExpandResult) -> str:
    return f"{expand.expanded_context}\n\n{expand.direct_question}"


def _render_guess(expand: ExpandResult, texts: Sequence[str]) -> str:
    return _fill(
        load_template("guess"),
        {"question": _expansion_text(expand), "context": "\n\n".join(texts)},
    )


def _within_budget(render: Callable[[Sequence[str]], str], texts: Sequence[str], budget: int | None) -> tuple[str, int]:
    """Render with as many top-ranked chunks as fit in ``budget`` characters."""
    n = len(texts)
    prompt = render(texts)
    while budget is not None and len(prompt) > budget and n > 0:
        n -= 1
        prompt = render(texts[:n])
    return prompt, n


def render_guess_prompt(
    expand: ExpandResult, retrieved: Sequence[RetrievedChunk], budget: int | None = None
) -> str:
    return guess_prompt_with_count(expand, retrieved, budget)[0]


def guess_prompt_with_count(
    expand: ExpandResult, retrieved: Sequence[RetrievedChunk], budget: int | None = None
) -> tuple[str, int]:
    if not retrieved:
        log.warning("guess prompt rendered with an empty textbook chapter")
    texts = [r.text for r in sorted(retrieved, key=lambda r: r.rank)]
    return _within_budget(lambda t: _render_guess(expand, t), texts, budget)


def _chapter_block(texts: Sequence[str]) -> str:
    return f"{CHAPTER_BEGIN}\n\n" + "\n\n".join(texts) + f"\n\n{CHAPTER_END}"


def _render_refine(
    expand: ExpandResult, texts: Sequence[str], guess_text: str, item: McqItem, include_chapter: bool
) -> str:
    expansion = f"Expanded context:\n{expand.expanded_context}\n\nDirect question:\n{expand.direct_question}"
    if include_chapter and texts:
        expansion += "\n\n" + _chapter_block(texts)
    return _fill(
        load_template("refine"),
        {
            "Expansion": expansion,
            "Guess": f"Preliminary answer:\n{guess_text}",
            "Options": item.options_block(),
        },
    )


def refine_prompt_with_count(
    expand: ExpandResult,
    retrieved: Sequence[RetrievedChunk],
    guess_text: str,
    item: McqItem,
    *,
    include_chapter: bool = True,
    budget: int | None = None,
) -> tuple[str, int]:
    if not guess_text:
        raise ContractError("refine stage needs a non-empty guess")
    texts = [r.text for r in sorted(retrieved, key=lambda r: r.rank)] if include_chapter else []
    return _within_budget(lambda t: _render_refine(expand, t, guess_text, item, include_chapter), texts, budget)


def render_refine_prompt(
    expand: ExpandResult,
    retrieved: Sequence[RetrievedChunk],
    guess_text: str,
    item: McqItem,
    *,
    include_chapter: bool = True,
    budget: int | None = None,
) -> str:
    return refine_prompt_with_count(
        expand, retrieved, guess_text, item, include_chapter=include_chapter, budget=budget
    )[0]


def render_direct_prompt(item: McqItem) -> str:
    return f"{item.stem}\n\n{item.options_block()}\n\n{DIRECT_INSTRUCTION}"


# -- output parsing --------------------------------------------------------

_WRAP = r"[*_`]*"


def _marker(words: str) -> re.Pattern[str]:
    name = r"[ \t]+".join(words.split())
    # "Name:" anywhere (optionally bold/italic), or a bare "Name" heading line
    return re.compile(
        rf"{_WRAP}{name}[ \t]*{_WRAP}[ \t]*:[ \t]*{_WRAP}"
        rf"|^[ \t]*(?:#+[ \t]*)?{_WRAP}{name}[ \t]*{_WRAP}[ \t]*$",
        re.IGNORECASE | re.MULTILINE,
    )


_EXPANDED_RE = _marker("expanded context")
_DIRECT_RE = _marker("direct question")
_SENTENCE_SPLIT = re.compile(r"(?<=[.?!])\s+")


def _last(pattern: re.Pattern[str], text: str) -> re.Match[str] | None:
    m = None
    for m in pattern.finditer(text):
        pass
    return m


def _clean(s: str) -> str:
    return s.strip().strip("*_`").strip()


def final_sentence(text: str) -> str:
    parts = [p.strip() for p in _SENTENCE_SPLIT.split(text.strip()) if p.strip()]
    return parts[-1] if parts else text.strip()


def parse_expand_output(raw: str, item: McqItem) -> ExpandResult:
    if not raw or not raw.strip():
        raise StageError(f"item {item.item_id}: empty expand output")
    ec_m = _last(_EXPANDED_RE, raw)
    dq_m = _last(_DIRECT_RE, raw)
    context = question = ""
    if ec_m and dq_m:
        if ec_m.start() < dq_m.start():
            context = raw[ec_m.end() : dq_m.start()]
            question = raw[dq_m.end() :]
        else:
            question = raw[dq_m.end() : ec_m.start()]
            context = raw[ec_m.end() :]
    elif ec_m:
        context = raw[ec_m.end() :]
    elif dq_m:
        context = raw[: dq_m.start()]
        question = raw[dq_m.end() :]
    context, question = _clean(context), _clean(question)
    if not context:
        context = raw.strip()
    if not question:
        question = final_sentence(item.stem)
    return ExpandResult(expanded_context=context, direct_question=question, raw_output=raw)


_LETTER_RE = re.compile(
    r"(?i:\b(?:answer|option)\b)[^\w\n]*(?i:is|would\s+be|:)?[^\w\n]*\(?(?P<a>[A-Z])\b"
    r"|(?<![A-Za-z0-9])\(?(?P<b>[A-Z])(?=[).:])"
)
_BARE_LETTER_RE = re.compile(r"^\W*([A-Za-z])\W*$")
_PUNCT_RE = re.compile(r"[^\w\s]")
_SPACE_RE = re.compile(r"\s+")


def normalize_option_text(s: str) -> str:
    return _SPACE_RE.sub(" ", _PUNCT_RE.sub("", s.lower())).strip()


def extract_letter(output: str, item: McqItem) -> tuple[str | None, bool]:
    """Pick the answer letter from a model reply.

    Rules, first hit wins: a reply that is just one option letter; the
    earliest lettered pattern such as ``(B)``, ``C.``, ``D:`` or
    ``answer is A``; the option whose normalized text appears earliest.
    Otherwise the item is abstained.
    """
    m = _BARE_LETTER_RE.match(output)
    if m and m.group(1).upper() in item.options:
        return m.group(1).upper(), False
    for m in _LETTER_RE.finditer(output):
        letter = (m.group("a") or m.group("b")).upper()
        if letter in item.options:
            return letter, False
    haystack = f" {normalize_option_text(output)} "
    best: tuple[int, int, str] | None = None
    for letter, text in item.options.items():
        needle = normalize_option_text(text)
        if not needle:
            continue
        pos = haystack.find(f" {needle} ")
        if pos >= 0:
            key = (pos, -len(needle), letter)
            if best is None or key < best:
                best = key
    if best is not None:
        return best[2], False
    return None, True


def option_leaks(prompt: str, item: McqItem) -> list[str]:
    """Letters whose option text occurs (case-insensitively) in ``prompt``."""
    low = prompt.lower()
    return [letter for letter, text in item.options.items() if text.strip() and text.strip().lower() in low]


# -- orchestration ---------------------------------------------------------


@contextmanager
def _timed(trace: PipelineTrace, stage: str, enabled: bool) -> Iterator[None]:
    t0 = time.perf_counter()
    try:
        yield
    finally:
        ms = (time.perf_counter() - t0) * 1000 if enabled else 0.0
        trace.timings_ms[stage] = round(ms, 3)


_ABORTING = (BackendError, ScriptMismatchError, StageError)


def run_item(
    item: McqItem,
    index: VectorIndex,
    embedder: Embedder,
    chat: ChatBackend,
    cfg: PipelineConfig | None = None,
) -> PipelineTrace:
    """Run expand, retrieve, guess and refine for one item.

    A backend failure stops the run; the returned trace then keeps every
    completed stage and records the failure in ``error``.
    """
    cfg = cfg or PipelineConfig()
    if item.excluded:
        raise ContractError(f"item {item.item_id} is excluded ({item.exclusion_reason})")
    trace = PipelineTrace(item_id=item.item_id, strategy="egr")
    try:
        with _timed(trace, "expand", cfg.record_timings):
            trace.expand_prompt = render_expand_prompt(item)
            raw = chat.complete(cfg.request(trace.expand_prompt)).text
            trace.expand = parse_expand_output(raw, item)

        with _timed(trace, "retrieve", cfg.record_timings):
            if cfg.retrieval_query == "expansion":
                trace.retrieval_query = f"{trace.expand.expanded_context}\n{trace.expand.direct_question}"
            else:
                trace.retrieval_query = item.stem
            hits = []
            if index.count:
                qvec = embedder.embed_batch([trace.retrieval_query])[0]
                hits = index.search(qvec, cfg.k)
            trace.retrieved = [
                RetrievedChunk(chunk_id=h.chunk_id, score=h.score, rank=h.rank, text=index.text(h.row))
                for h in hits
            ]
            if not trace.retrieved:
                trace.warnings.append("no chunks retrieved; guess stage ran with an empty textbook chapter")

        with _timed(trace, "guess", cfg.record_timings):
            trace.guess_prompt, trace.guess_chunks_used = guess_prompt_with_count(
                trace.expand, trace.retrieved, cfg.prompt_char_budget
            )
            if trace.guess_chunks_used < len(trace.retrieved):
                trace.warnings.append(
                    f"guess prompt over budget; kept {trace.guess_chunks_used} of {len(trace.retrieved)} chunks"
                )
            leaked = option_leaks(trace.guess_prompt, item)
            if leaked:
                trace.warnings.append(f"guess prompt contains option text for {','.join(leaked)}")
            trace.guess_text = chat.complete(cfg.request(trace.guess_prompt)).text

        with _timed(trace, "refine", cfg.record_timings):
            trace.refine_prompt, trace.refine_chunks_used = refine_prompt_with_count(
                trace.expand,
                trace.retrieved,
                trace.guess_text,
                item,
                include_chapter=cfg.include_chapter_in_refine,
                budget=cfg.prompt_char_budget,
            )
            if cfg.include_chapter_in_refine and trace.refine_chunks_used < len(trace.retrieved):
                trace.warnings.append(
                    f"refine prompt over budget; kept {trace.refine_chunks_used} of {len(trace.retrieved)} chunks"
                )
            trace.refine_output = chat.complete(cfg.request(trace.refine_prompt)).text

        trace.predicted_letter, trace.abstained = extract_letter(trace.refine_output, item)
    except _ABORTING as exc:
        trace.error = f"{type(exc).__name__}: {exc}"
        trace.predicted_letter, trace.abstained = None, True
        log.error("item %s aborted: %s", item.item_id, trace.error)
    return trace


def run_item_direct(item: McqItem, chat: ChatBackend, cfg: PipelineConfig | None = None) -> PipelineTrace:
    """Single-prompt baseline: stem and options, answer letter requested."""
    cfg = cfg or PipelineConfig(strategy="direct")
    if item.excluded:
        raise ContractError(f"item {item.item_id} is excluded ({item.exclusion_reason})")
    trace = PipelineTrace(item_id=item.item_id, strategy="direct")
    try:
        with _timed(trace, "direct", cfg.record_timings):
            trace.refine_prompt = render_direct_prompt(item)
            trace.refine_output = chat.complete(cfg.request(trace.refine_prompt)).text
        trace.predicted_letter, trace.abstained = extract_letter(trace.refine_output, item)
    except _ABORTING as exc:
        trace.error = f"{type(exc).__name__}: {exc}"
        trace.predicted_letter, trace.abstained = None, True
        log.error("item %s aborted: %s", item.item_id, trace.error)
    return trace
