"""Dataset loading, subset selection, scoring and strategy comparison."""

from __future__ import annotations

import json
import logging
import os
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Callable, Iterable, Mapping, Sequence

from .chat import ChatBackend
from .embedding import Embedder
from .errors import ContractError, DatasetError
from .index import VectorIndex
from .pipeline import McqItem, PipelineConfig, PipelineTrace, run_item, run_item_direct
from .prng import SplitMix64
from .stats import ProportionTestResult, Sided, format_percent, two_proportion_test

log = logging.getLogger(__name__)

IMAGE_HINT_RE = re.compile(r"\b(shown|figure|image)\b", re.IGNORECASE)
EXCLUSION_REASON = "image-based"
INFERRED_VARIANT_NOTE = (
    "The default test variant is an inference: one-sided with continuity correction is the "
    "standard variant that gives p = 0.031 for 101/143 against 85/143."
)


def load_dataset(path: str | Path) -> list[McqItem]:
    """Read MedQA-style JSONL: ``question``, ``options``, ``answer_idx``.

    ``item_id`` is the ``id`` field when present, otherwise the 0-based
    ordinal of the record. A missing ``answer_idx`` leaves the gold letter
    unset.
    """
    items: list[McqItem] = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                options = {str(k): str(v) for k, v in rec["options"].items()}
                item = McqItem(
                    item_id=str(rec["id"]) if "id" in rec else str(len(items)),
                    stem=str(rec["question"]),
                    options=dict(sorted(options.items())),
                    gold_letter=rec.get("answer_idx") or None,
                )
            except json.JSONDecodeError as exc:
                raise DatasetError(f"{path}:{lineno}: invalid JSON ({exc.msg})") from exc
            except (KeyError, AttributeError, TypeError) as exc:
                raise DatasetError(f"{path}:{lineno}: missing or malformed field ({exc})") from exc
            except ContractError as exc:
                raise DatasetError(f"{path}:{lineno}: {exc}") from exc
            if IMAGE_HINT_RE.search(item.stem):
                log.warning("item %s may depend on an image (line %d); exclude it explicitly if so", item.item_id, lineno)
            items.append(item)
    ids = [i.item_id for i in items]
    if len(set(ids)) != len(ids):
        raise DatasetError(f"{path}: duplicate item ids")
    return items


@dataclass(frozen=True)
class SubsetSpec:
    first_n: int = 100
    random_m: int = 50
    seed: int = 0
    exclude_ids: tuple[str, ...] = ()


def select_subset(items: Sequence[McqItem], spec: SubsetSpec) -> list[McqItem]:
    """The first ``first_n`` items plus ``random_m`` drawn from the rest.

    The random draw is a partial Fisher-Yates shuffle driven by
    ``SplitMix64(seed)``; drawn items are returned in dataset order after the
    leading block. Ids in ``exclude_ids`` are marked excluded, not removed.
    """
    if spec.first_n < 0 or spec.random_m < 0:
        raise ContractError("first_n and random_m must be non-negative")
    if spec.first_n + spec.random_m > len(items):
        raise ContractError(f"first_n + random_m = {spec.first_n + spec.random_m} exceeds {len(items)} items")
    pool = list(range(spec.first_n, len(items)))
    rng = SplitMix64(spec.seed)
    for i in range(spec.random_m):
        j = i + rng.below(len(pool) - i)
        pool[i], pool[j] = pool[j], pool[i]
    chosen = list(range(spec.first_n)) + sorted(pool[: spec.random_m])
    excluded = set(spec.exclude_ids)
    out = []
    for pos in chosen:
        item = items[pos]
        if item.item_id in excluded:
            item = McqItem(
                item_id=item.item_id,
                stem=item.stem,
                options=item.options,
                gold_letter=item.gold_letter,
                excluded=True,
                exclusion_reason=EXCLUSION_REASON,
            )
        out.append(item)
    missing = excluded - {i.item_id for i in out}
    for item_id in sorted(missing):
        log.warning("excluded id %s is not in the selected subset", item_id)
    return out


@dataclass(frozen=True)
class EvalRun:
    strategy: str
    items_total: int
    items_excluded: int
    items_answered: int
    items_correct: int
    accuracy: float
    traces_path: str | None = None
    items_failed: int = 0

    @property
    def accuracy_pct(self) -> str:
        return format_percent(self.items_correct, self.items_total - self.items_excluded)


def accuracy(
    traces: Iterable[PipelineTrace],
    items: Sequence[McqItem],
    strategy: str = "egr",
    traces_path: str | None = None,
) -> EvalRun:
    """Score traces against gold letters.

    Abstentions, aborted runs and items without a trace all count as wrong;
    excluded items are left out of every count but ``items_total``.
    """
    by_id = {i.item_id: i for i in items}
    seen: dict[str, PipelineTrace] = {}
    for t in traces:
        item = by_id.get(t.item_id)
        if item is None:
            raise ContractError(f"trace for unknown item {t.item_id}")
        if item.excluded:
            raise ContractError(f"trace for excluded item {t.item_id}")
        seen[t.item_id] = t
    answered = correct = failed = 0
    for item in items:
        if item.excluded:
            continue
        if item.gold_letter is None:
            raise ContractError(f"item {item.item_id} has no gold answer")
        t = seen.get(item.item_id)
        if t is None or t.error:
            failed += 1
            continue
        if t.predicted_letter is not None and not t.abstained:
            answered += 1
            correct += t.predicted_letter == item.gold_letter
    n_excluded = sum(1 for i in items if i.excluded)
    denom = len(items) - n_excluded
    return EvalRun(
        strategy=strategy,
        items_total=len(items),
        items_excluded=n_excluded,
        items_answered=answered,
        items_correct=correct,
        accuracy=correct / denom if denom else 0.0,
        traces_path=traces_path,
        items_failed=failed,
    )


# -- trace files -----------------------------------------------------------


def trace_line(trace: PipelineTrace) -> str:
    return json.dumps(trace.to_dict(), ensure_ascii=False, sort_keys=True)


def write_traces(path: str | Path, traces: Iterable[PipelineTrace]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for t in traces:
            fh.write(trace_line(t) + "\n")


def read_traces(path: str | Path) -> list[PipelineTrace]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                out.append(PipelineTrace.from_dict(json.loads(line)))
    return out


def run_strategy(
    items: Sequence[McqItem],
    runner: Callable[[McqItem], PipelineTrace],
    *,
    max_workers: int = 4,
    resume: Mapping[str, PipelineTrace] | None = None,
    traces_path: str | Path | None = None,
) -> list[PipelineTrace]:
    """Run ``runner`` over the non-excluded items, in parallel.

    Traces come back in item order whatever the completion order. Clean
    traces from ``resume`` are reused instead of re-run. When
    ``traces_path`` is given, completed traces are written there even if the
    run is interrupted.
    """
    todo = [i for i in items if not i.excluded]
    done: dict[str, PipelineTrace] = {}
    for item in todo:
        prev = (resume or {}).get(item.item_id)
        if prev is not None and prev.error is None:
            done[item.item_id] = prev
    pending = [i for i in todo if i.item_id not in done]
    try:
        if pending:
            with ThreadPoolExecutor(max_workers=max(1, max_workers)) as pool:
                futures = {pool.submit(runner, item): item.item_id for item in pending}
                for fut, item_id in futures.items():
                    done[item_id] = fut.result()
    finally:
        if traces_path is not None:
            write_traces(traces_path, [done[i.item_id] for i in todo if i.item_id in done])
    return [done[i.item_id] for i in todo]


@dataclass
class EvalReport:
    run_a: EvalRun
    run_b: EvalRun
    test: ProportionTestResult
    config: dict[str, Any] = field(default_factory=dict)
    timestamp: str = ""
    item_ids: list[str] = field(default_factory=list)
    complete: bool = True
    notes: list[str] = field(default_factory=list)

    def to_dict(self) -> dict[str, Any]:
        return {
            "run_a": {**asdict(self.run_a), "accuracy_pct": self.run_a.accuracy_pct},
            "run_b": {**asdict(self.run_b), "accuracy_pct": self.run_b.accuracy_pct},
            "test": self.test.as_dict(),
            "config": self.config,
            "timestamp": self.timestamp,
            "item_ids": list(self.item_ids),
            "complete": self.complete,
            "notes": list(self.notes),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True, ensure_ascii=False) + "\n"

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> EvalReport:
        def run(r: Mapping[str, Any]) -> EvalRun:
            r = {k: v for k, v in r.items() if k != "accuracy_pct"}
            return EvalRun(**r)

        t = {k: v for k, v in d["test"].items() if k != "variant"}
        return cls(
            run_a=run(d["run_a"]),
            run_b=run(d["run_b"]),
            test=ProportionTestResult(**t),
            config=dict(d.get("config", {})),
            timestamp=d.get("timestamp", ""),
            item_ids=list(d.get("item_ids", [])),
            complete=bool(d.get("complete", True)),
            notes=list(d.get("notes", [])),
        )


def report_timestamp(reproducible: bool = False) -> str:
    """Current UTC time, or ``SOURCE_DATE_EPOCH`` (default 0) when reproducible."""
    if reproducible:
        ts = datetime.fromtimestamp(int(os.environ.get("SOURCE_DATE_EPOCH", "0")), tz=timezone.utc)
    else:
        ts = datetime.now(timezone.utc)
    return ts.replace(microsecond=0).isoformat()


def compare_strategies(
    subset: Sequence[McqItem],
    index: VectorIndex,
    embedder: Embedder,
    chat: ChatBackend,
    cfg: PipelineConfig | None = None,
    *,
    direct_chat: ChatBackend | None = None,
    sided: Sided = "one",
    continuity_correction: bool = True,
    max_workers: int = 4,
    traces_paths: tuple[str | Path | None, str | Path | None] = (None, None),
    resume: tuple[Mapping[str, PipelineTrace] | None, Mapping[str, PipelineTrace] | None] = (None, None),
    config_snapshot: Mapping[str, Any] | None = None,
    reproducible: bool = False,
) -> EvalReport:
    """Run expand-guess-refine (run A) and the direct baseline (run B) on
    the same items and test whether A's accuracy exceeds B's."""
    cfg = cfg or PipelineConfig()
    direct_chat = direct_chat or chat
    path_a, path_b = traces_paths
    traces_a = run_strategy(
        subset,
        lambda item: run_item(item, index, embedder, chat, cfg),
        max_workers=max_workers,
        resume=resume[0],
        traces_path=path_a,
    )
    traces_b = run_strategy(
        subset,
        lambda item: run_item_direct(item, direct_chat, cfg),
        max_workers=max_workers,
        resume=resume[1],
        traces_path=path_b,
    )
    run_a = accuracy(traces_a, subset, "egr", str(path_a) if path_a else None)
    run_b = accuracy(traces_b, subset, "direct", str(path_b) if path_b else None)
    n = run_a.items_total - run_a.items_excluded
    if n == 0:
        raise ContractError("subset has no evaluable items")
    test = two_proportion_test(run_a.items_correct, n, run_b.items_correct, n, sided, continuity_correction)
    complete = run_a.items_failed == 0 and run_b.items_failed == 0
    notes = [INFERRED_VARIANT_NOTE]
    if not complete:
        notes.append(f"incomplete: {run_a.items_failed} egr and {run_b.items_failed} direct items failed")
    return EvalReport(
        run_a=run_a,
        run_b=run_b,
        test=test,
        config=dict(config_snapshot or {"pipeline": asdict(cfg)}),
        timestamp=report_timestamp(reproducible),
        item_ids=[i.item_id for i in subset if not i.excluded],
        complete=complete,
        notes=notes,
    )
