"""``egrqa`` command-line entry point.

Exit codes: 0 success, 1 runtime failure, 2 usage error. Results go to
stdout; diagnostics, including a one-line JSON error record, go to stderr.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import re
import sys
from dataclasses import asdict
from pathlib import Path
from typing import Any, Sequence

from . import __version__
from ._http import API_KEY_ENV
from .chat import make_chat
from .config import AppConfig, load_config
from .corpus import ingest_directory, read_chunks, write_chunks
from .embedding import make_embedder
from .errors import EgrError
from .evaluation import (
    SubsetSpec,
    accuracy,
    compare_strategies,
    load_dataset,
    read_traces,
    report_timestamp,
    run_strategy,
    select_subset,
)
from .index import build_index, load_index, save_index, sidecar_path
from .pipeline import McqItem, run_item, run_item_direct
from .stats import format_percent, two_proportion_test

log = logging.getLogger("egrqa")


class UsageError(Exception):
    pass


def _on_off(value: str) -> bool:
    v = value.lower()
    if v in ("on", "true", "yes", "1"):
        return True
    if v in ("off", "false", "no", "0"):
        return False
    raise argparse.ArgumentTypeError(f"expected on/off, got {value!r}")


_FRACTION_RE = re.compile(r"^\s*(\d+)\s*/\s*(\d+)\s*$")


def _fraction(value: str) -> tuple[int, int]:
    m = _FRACTION_RE.match(value)
    if not m:
        raise argparse.ArgumentTypeError(f"expected X/N, got {value!r}")
    x, n = int(m.group(1)), int(m.group(2))
    if n == 0 or x > n:
        raise argparse.ArgumentTypeError(f"need 0 <= X <= N and N > 0, got {value!r}")
    return x, n


def parse_options(spec: str) -> dict[str, str]:
    """``"A=foo,B=bar, baz"`` -> ``{"A": "foo", "B": "bar, baz"}``.

    Only a comma followed by ``<LETTER>=`` starts a new option, so option
    text may itself contain commas.
    """
    out: dict[str, str] = {}
    for part in re.split(r",\s*(?=[A-Z]=)", spec.strip()):
        letter, sep, text = part.partition("=")
        letter = letter.strip()
        if not sep or not re.fullmatch(r"[A-Z]", letter) or not text.strip():
            raise UsageError(f"malformed option {part!r}; expected LETTER=text")
        if letter in out:
            raise UsageError(f"option {letter} given twice")
        out[letter] = text.strip()
    return out


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="egrqa", description="Retrieval-augmented expand-guess-refine MCQ answering.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("--config", help="JSON config file (defaults < file < flags)")
    p.add_argument("--log-level", default="WARNING", choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("ingest", help="split a directory of .txt files into a chunks file")
    s.add_argument("--corpus-dir")
    s.add_argument("--out")
    s.add_argument("--max-chars", type=int)
    s.add_argument("--overlap", type=int)

    def embed_flags(s: argparse.ArgumentParser) -> None:
        s.add_argument("--embedder", choices=["hash", "remote"])
        s.add_argument("--dim", type=int)
        s.add_argument("--embed-url")
        s.add_argument("--embed-model")

    def chat_flags(s: argparse.ArgumentParser) -> None:
        s.add_argument("--chat", choices=["remote", "mock"])
        s.add_argument("--mock-script", help="JSON script for the mock chat backend")
        s.add_argument("--base-url")
        s.add_argument("--model")
        s.add_argument("--temperature", type=float)
        s.add_argument("--max-output-tokens", type=int)

    def pipeline_flags(s: argparse.ArgumentParser) -> None:
        s.add_argument("--k", type=int)
        s.add_argument("--prompt-budget", type=int)
        s.add_argument("--include-chapter-in-refine", type=_on_off, metavar="on|off")
        s.add_argument("--retrieval-query", choices=["expansion", "stem"])
        s.add_argument("--reproducible", action="store_true",
                       help="zero stage timings and take the report time from SOURCE_DATE_EPOCH")

    s = sub.add_parser("index", help="embed chunks and write a vector index")
    s.add_argument("--chunks")
    s.add_argument("--out")
    embed_flags(s)

    s = sub.add_parser("ask", help="answer one question")
    s.add_argument("--index")
    s.add_argument("--question", required=True)
    s.add_argument("--options", help='e.g. "A=Aspirin,B=Heparin,C=Warfarin,D=Alteplase"')
    s.add_argument("--strategy", choices=["egr", "direct"])
    s.add_argument("--trace-out")
    embed_flags(s)
    chat_flags(s)
    pipeline_flags(s)

    s = sub.add_parser("eval", help="compare egr against the direct baseline on a dataset subset")
    s.add_argument("--index")
    s.add_argument("--dataset")
    s.add_argument("--first-n", type=int, default=100)
    s.add_argument("--random-m", type=int, default=50)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--exclude", default="", help="comma-separated item ids, or @file with one id per line")
    s.add_argument("--strategies", default="egr,direct")
    s.add_argument("--report")
    s.add_argument("--traces-dir", help="where trace JSONL files go (default: next to the report)")
    s.add_argument("--resume", action="store_true", help="reuse clean traces already on disk")
    s.add_argument("--workers", type=int)
    s.add_argument("--sided", choices=["one", "two"], default="one")
    s.add_argument("--correction", type=_on_off, default=True, metavar="on|off")
    embed_flags(s)
    chat_flags(s)
    pipeline_flags(s)

    s = sub.add_parser("stats", help="two-sample test for equality of proportions")
    s.add_argument("--a", type=_fraction, required=True, metavar="X/N")
    s.add_argument("--b", type=_fraction, required=True, metavar="X/N")
    s.add_argument("--sided", choices=["one", "two"], default="two")
    s.add_argument("--correction", type=_on_off, default=True, metavar="on|off")
    return p


def _overrides(args: argparse.Namespace) -> dict[str, dict[str, Any]]:
    g = lambda name: getattr(args, name, None)  # noqa: E731
    return {
        "paths": {
            "corpus_dir": g("corpus_dir"),
            "chunks": g("chunks"),
            "index": g("index"),
            "dataset": g("dataset"),
            "report": g("report"),
        },
        "splitter": {"max_chars": g("max_chars"), "overlap_chars": g("overlap")},
        "embedder": {
            "backend": g("embedder"),
            "dim": g("dim"),
            "endpoint_url": g("embed_url"),
            "model_name": g("embed_model"),
        },
        "chat": {
            "backend": g("chat"),
            "mock_script": g("mock_script"),
            "base_url": g("base_url"),
            "model_name": g("model"),
            "temperature": g("temperature"),
            "max_output_tokens": g("max_output_tokens"),
            "max_in_flight": g("workers"),
        },
        "pipeline": {
            "k": g("k"),
            "prompt_char_budget": g("prompt_budget"),
            "strategy": g("strategy"),
            "include_chapter_in_refine": g("include_chapter_in_refine"),
            "retrieval_query": g("retrieval_query"),
            "model_name": g("model"),
            "temperature": g("temperature"),
            "max_output_tokens": g("max_output_tokens"),
            "record_timings": False if g("reproducible") else None,
        },
    }


def _require_file(value: str | None, flag: str) -> Path:
    if not value:
        raise UsageError(f"{flag} is required")
    path = Path(value)
    if not path.is_file():
        raise UsageError(f"{flag}: no such file {value}")
    return path


def _check_remote(cfg: AppConfig, needs_embedder: bool, needs_chat: bool) -> None:
    remote = (needs_embedder and cfg.embedder.backend == "remote") or (needs_chat and cfg.chat.backend == "remote")
    if remote and not os.environ.get(API_KEY_ENV):
        raise UsageError(f"remote backend selected but {API_KEY_ENV} is not set")
    if needs_chat and cfg.chat.backend == "mock":
        _require_file(cfg.chat.mock_script, "--mock-script")


def _emit(obj: Any) -> None:
    print(json.dumps(obj, ensure_ascii=False, sort_keys=True))


def cmd_ingest(args: argparse.Namespace, cfg: AppConfig) -> int:
    corpus = cfg.paths.corpus_dir
    if not corpus or not Path(corpus).is_dir():
        raise UsageError(f"--corpus-dir: not a directory: {corpus}")
    if not args.out:
        raise UsageError("--out is required")
    chunks, stats = ingest_directory(corpus, cfg.splitter)
    write_chunks(args.out, chunks)
    _emit({"out": args.out, **stats.as_dict()})
    return 0


def cmd_index(args: argparse.Namespace, cfg: AppConfig) -> int:
    chunks_path = _require_file(cfg.paths.chunks, "--chunks")
    if not args.out:
        raise UsageError("--out is required")
    _check_remote(cfg, needs_embedder=True, needs_chat=False)
    chunks = read_chunks(chunks_path)
    index = build_index(chunks, make_embedder(cfg.embedder))
    save_index(index, args.out)
    size = Path(args.out).stat().st_size
    _emit({"out": args.out, "count": index.count, "dim": index.dim, "bytes": size,
           "sidecar_bytes": sidecar_path(args.out).stat().st_size})
    return 0


def _query_embedder(cfg: AppConfig, index_dim: int, dim_given: bool):
    emb_cfg = cfg.embedder
    if emb_cfg.dim != index_dim:
        if dim_given:
            raise UsageError(f"--dim {emb_cfg.dim} does not match index dim {index_dim}")
        emb_cfg = type(emb_cfg)(**{**asdict(emb_cfg), "dim": index_dim})
    return make_embedder(emb_cfg)


def cmd_ask(args: argparse.Namespace, cfg: AppConfig) -> int:
    strategy = cfg.pipeline.strategy
    if not args.options:
        raise UsageError(f"--options is required for strategy {strategy}")
    item = McqItem(item_id="ask", stem=args.question, options=parse_options(args.options))
    if strategy == "egr":
        index_path = _require_file(cfg.paths.index, "--index")
    _check_remote(cfg, needs_embedder=strategy == "egr", needs_chat=True)
    chat = make_chat(cfg.chat)
    if strategy == "egr":
        index = load_index(index_path)
        embedder = _query_embedder(cfg, index.dim, args.dim is not None)
        trace = run_item(item, index, embedder, chat, cfg.pipeline)
    else:
        trace = run_item_direct(item, chat, cfg.pipeline)
    if args.trace_out:
        Path(args.trace_out).write_text(
            json.dumps(trace.to_dict(), ensure_ascii=False, sort_keys=True) + "\n", encoding="utf-8"
        )
    if trace.error:
        raise EgrError(trace.error)
    print(f"answer: {trace.predicted_letter or 'ABSTAIN'}")
    print(trace.refine_output)
    return 0


def _exclude_ids(spec: str) -> tuple[str, ...]:
    if spec.startswith("@"):
        lines = Path(spec[1:]).read_text(encoding="utf-8").splitlines()
        return tuple(x.strip() for x in lines if x.strip() and not x.lstrip().startswith("#"))
    return tuple(x.strip() for x in spec.split(",") if x.strip())


def cmd_eval(args: argparse.Namespace, cfg: AppConfig) -> int:
    strategies = [s.strip() for s in args.strategies.split(",") if s.strip()]
    if not strategies or any(s not in ("egr", "direct") for s in strategies) or len(set(strategies)) != len(strategies):
        raise UsageError(f"--strategies must name egr and/or direct, got {args.strategies!r}")
    dataset_path = _require_file(cfg.paths.dataset, "--dataset")
    if "egr" in strategies:
        index_path = _require_file(cfg.paths.index, "--index")
    if not cfg.paths.report:
        raise UsageError("--report is required")
    if args.exclude.startswith("@"):
        _require_file(args.exclude[1:], "--exclude")
    _check_remote(cfg, needs_embedder="egr" in strategies, needs_chat=True)

    report_path = Path(cfg.paths.report)
    traces_dir = Path(args.traces_dir) if args.traces_dir else report_path.parent
    traces_dir.mkdir(parents=True, exist_ok=True)
    trace_path = {s: traces_dir / f"{report_path.stem}.{s}.traces.jsonl" for s in ("egr", "direct")}
    resume = {
        s: ({t.item_id: t for t in read_traces(p)} if args.resume and p.is_file() else None)
        for s, p in trace_path.items()
    }

    items = load_dataset(dataset_path)
    subset = select_subset(
        items, SubsetSpec(first_n=args.first_n, random_m=args.random_m, seed=args.seed,
                          exclude_ids=_exclude_ids(args.exclude))
    )
    chat = make_chat(cfg.chat)
    workers = cfg.chat.max_in_flight
    snapshot = {**cfg.snapshot(), "subset": {"first_n": args.first_n, "random_m": args.random_m, "seed": args.seed,
                                             "exclude_ids": list(_exclude_ids(args.exclude))},
                "strategies": strategies, "test": {"sided": args.sided, "continuity_correction": args.correction}}

    if strategies == ["egr", "direct"]:
        index = load_index(index_path)
        embedder = _query_embedder(cfg, index.dim, args.dim is not None)
        report = compare_strategies(
            subset, index, embedder, chat, cfg.pipeline,
            sided=args.sided, continuity_correction=args.correction, max_workers=workers,
            traces_paths=(trace_path["egr"], trace_path["direct"]),
            resume=(resume["egr"], resume["direct"]),
            config_snapshot=snapshot, reproducible=bool(args.reproducible),
        )
        report_path.write_text(report.to_json(), encoding="utf-8")
        for run in (report.run_a, report.run_b):
            n = run.items_total - run.items_excluded
            print(f"{run.strategy}: {run.items_correct}/{n} = {run.accuracy_pct}")
        t = report.test
        print(f"test: z={t.z:.4f} p={t.p_value:.4f} ({t.variant()})" + (" DEGENERATE" if t.degenerate else ""))
        if not report.complete:
            print("report incomplete: some items failed, see traces", file=sys.stderr)
            return 1
        return 0

    # a single strategy: accuracy only, no comparison
    s = strategies[0]
    if s == "egr":
        index = load_index(index_path)
        embedder = _query_embedder(cfg, index.dim, args.dim is not None)
        runner = lambda item: run_item(item, index, embedder, chat, cfg.pipeline)  # noqa: E731
    else:
        runner = lambda item: run_item_direct(item, chat, cfg.pipeline)  # noqa: E731
    traces = run_strategy(subset, runner, max_workers=workers, resume=resume[s], traces_path=trace_path[s])
    run = accuracy(traces, subset, s, str(trace_path[s]))
    doc = {"run": {**asdict(run), "accuracy_pct": run.accuracy_pct}, "config": snapshot,
           "timestamp": report_timestamp(bool(args.reproducible)), "complete": run.items_failed == 0}
    report_path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    n = run.items_total - run.items_excluded
    print(f"{s}: {run.items_correct}/{n} = {run.accuracy_pct}")
    return 0 if run.items_failed == 0 else 1


def cmd_stats(args: argparse.Namespace, cfg: AppConfig) -> int:
    (x1, n1), (x2, n2) = args.a, args.b
    t = two_proportion_test(x1, n1, x2, n2, args.sided, args.correction)
    print(f"a: {x1}/{n1} = {format_percent(x1, n1)}")
    print(f"b: {x2}/{n2} = {format_percent(x2, n2)}")
    print(f"z={t.z:.4f} p={t.p_value:.4f} ({t.variant()})")
    if t.degenerate:
        print("degenerate: pooled proportion is 0 or 1, no variance; z and p set to 0 and 1")
    return 0


COMMANDS = {"ingest": cmd_ingest, "index": cmd_index, "ask": cmd_ask, "eval": cmd_eval, "stats": cmd_stats}


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=args.log_level, stream=sys.stderr, format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.config and not Path(args.config).is_file():
            raise UsageError(f"--config: no such file {args.config}")
        try:
            cfg = load_config(args.config, _overrides(args))
        except EgrError as exc:
            raise UsageError(str(exc)) from exc
        return COMMANDS[args.command](args, cfg)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(json.dumps({"error": "usage", "message": str(exc)}), file=sys.stderr)
        return 2
    except KeyboardInterrupt:
        print(json.dumps({"error": "interrupted", "message": "completed traces were flushed"}), file=sys.stderr)
        return 130
    except (EgrError, OSError, ValueError) as exc:
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}), file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
