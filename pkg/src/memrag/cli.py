"""Command-line entry point: ``index``, ``run``, ``eval``, ``filtergen``, ``trace``.

Every flag can also be set in a flat ``key = value`` config file passed with
``--config``; keys are the flag names with dashes turned into underscores.
Flags given on the command line win over the file.

Exit codes: 0 success (including partial batches), 2 configuration or input
error, 3 requested item not found, 130 interrupted.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from datetime import datetime, timezone
from pathlib import Path

from . import __version__
from .adaptive_loop import TRACE_VERSION, LoopConfig, run_question
from .content_filter import build_training_set, pass_rates
from .core import Query, load_templates
from .errors import MemragError, PipelineAborted
from .evaluation import LONGFORM, SHORTFORM, evaluate_run, load_dataset
from .llm import CACHE_DIR_ENV, Gateway, MockBackend, RemoteBackend
from .retriever import (DEFAULT_B, DEFAULT_K1, DEFAULT_TOP_K, DEFAULT_WINDOW, Bm25Index, build_index,
                        chunk_document, ingest_corpus)

log = logging.getLogger("memrag")

EXIT_OK, EXIT_CONFIG, EXIT_NOT_FOUND, EXIT_INTERRUPTED = 0, 2, 3, 130


class ConfigError(Exception):
    pass


class NotFound(Exception):
    pass


_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


def parse_bool(value: str) -> bool:
    v = value.strip().lower()
    if v in _TRUE:
        return True
    if v in _FALSE:
        return False
    raise ValueError(f"not a boolean: {value!r}")


def read_config_file(path: str | Path) -> dict[str, str]:
    out = {}
    try:
        lines = Path(path).read_text(encoding="utf-8").splitlines()
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e.strerror}") from None
    for n, line in enumerate(lines, 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ConfigError(f"{path}:{n}: expected key = value")
        out[key.strip().replace("-", "_")] = value.strip()
    return out


def _dests(parser: argparse.ArgumentParser) -> dict[str, argparse.Action]:
    return {a.dest: a for a in parser._actions if a.dest not in ("help", "config", "command")}


def _merge_config(parser: argparse.ArgumentParser, args: argparse.Namespace,
                  known: set[str] = frozenset()) -> argparse.Namespace:
    """Fill options not given on the command line from ``--config``, then defaults.

    Keys meant for another subcommand (listed in ``known``) are skipped so one
    file can serve a whole index/run/eval session.
    """
    actions = _dests(parser)
    file_values = read_config_file(args.config) if args.config else {}
    for key, raw in file_values.items():
        if key not in actions:
            if key in known:
                continue
            raise ConfigError(f"unknown config key {key!r}")
        if getattr(args, key) is not None:
            continue
        action = actions[key]
        try:
            if isinstance(action, argparse.BooleanOptionalAction):
                value = parse_bool(raw)
            elif action.nargs == "*":
                value = [action.type(v) if action.type else v for v in raw.split(",") if v.strip()]
            else:
                value = action.type(raw) if action.type else raw
        except (TypeError, ValueError) as e:
            raise ConfigError(f"config key {key}: {e}") from None
        if action.choices is not None and value not in action.choices:
            raise ConfigError(f"config key {key}: {value!r} not one of {sorted(action.choices)}")
        setattr(args, key, value)
    for dest, action in actions.items():
        if getattr(args, dest) is None:
            setattr(args, dest, _DEFAULTS.get(dest))
    return args


_DEFAULTS = {
    "window": DEFAULT_WINDOW,
    "k1": DEFAULT_K1,
    "b": DEFAULT_B,
    "top_k": DEFAULT_TOP_K,
    "max_iter": 3,
    "stop_on_no_improvement": True,
    "concurrency": 4,
    "kind": SHORTFORM,
    "model": "default",
    "retries": 3,
    "timeout": 60.0,
    "max_tokens": 512,
    "scoring": False,
    "measure": "strinc",
    "threshold": 0.0,
    "nli": True,
    "sweep": [],
}


def _require_file(path, what: str) -> Path:
    if path is None:
        raise ConfigError(f"--{what} is required")
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"{what} file not found: {p}")
    return p


def _effective(args: argparse.Namespace) -> dict:
    return {k: (str(v) if isinstance(v, Path) else v) for k, v in sorted(vars(args).items())
            if k not in ("func", "config", "command", "verbose")}


# --- shared builders ----------------------------------------------------------------

def _load_index(args) -> Bm25Index:
    if args.index is not None:
        path = _require_file(args.index, "index")
        return Bm25Index.load(path)
    if args.corpus is not None:
        docs = ingest_corpus(_require_file(args.corpus, "corpus"))
        return build_index([p for d in docs for p in chunk_document(d, args.window)], args.k1, args.b)
    raise ConfigError("one of --index or --corpus is required")


def _make_gateway(args, *, required: bool = True) -> Gateway | None:
    if args.endpoint and args.mock:
        raise ConfigError("configure exactly one backend: --endpoint or --mock, not both")
    if not args.endpoint and not args.mock:
        if required:
            raise ConfigError("no backend configured: pass --endpoint (with --model) or --mock")
        return None
    if args.prompts is not None and not Path(args.prompts).is_dir():
        raise ConfigError(f"prompts directory not found: {args.prompts}")
    prompts = load_templates(args.prompts)
    if args.mock:
        backend = MockBackend.from_file(_require_file(args.mock, "mock"))
    else:
        backend = RemoteBackend(args.endpoint, timeout=args.timeout, retries=args.retries,
                                supports_scoring=args.scoring)
    cache_dir = args.cache_dir or os.environ.get(CACHE_DIR_ENV) or None
    return Gateway(backend, args.model, cache_dir, prompts, max_in_flight=max(1, args.concurrency),
                   max_tokens=args.max_tokens)


def read_trace(path: str | Path) -> tuple[dict | None, list[dict]]:
    header, records = None, []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            rec = json.loads(line)
            if "header" in rec:
                header = rec
            else:
                records.append(rec)
    return header, records


def _dump(obj) -> str:
    return json.dumps(obj, sort_keys=True, ensure_ascii=False)


# --- commands ----------------------------------------------------------------------------

def cmd_index(args) -> int:
    if args.window < 1:
        raise ConfigError("--window must be >= 1")
    if args.out is None:
        raise ConfigError("--out is required")
    docs = ingest_corpus(_require_file(args.corpus, "corpus"))
    passages = [p for d in docs for p in chunk_document(d, args.window)]
    index = build_index(passages, args.k1, args.b)
    index.save(args.out)
    print(f"indexed {len(docs)} documents into {index.N} passages, avgdl={index.avgdl:.2f} -> {args.out}")
    return EXIT_OK


def cmd_run(args) -> int:
    dataset = load_dataset(_require_file(args.dataset, "dataset"), args.kind)
    if args.out is None:
        raise ConfigError("--out is required")
    config = LoopConfig(args.max_iter, args.top_k, args.stop_on_no_improvement)
    index = _load_index(args)
    gateway = _make_gateway(args)
    workers = max(1, args.concurrency)
    if isinstance(gateway.backend, MockBackend) and gateway.backend.mode == "sequential" and workers > 1:
        log.info("sequential mock script: running questions one at a time")
        workers = 1
    trace_dir = Path(args.trace_dir) if args.trace_dir else None
    if trace_dir:
        trace_dir.mkdir(parents=True, exist_ok=True)

    def one(ex):
        q = Query(ex.id, ex.question)
        try:
            return run_question(q, index, config, gateway).to_dict()
        except PipelineAborted as e:
            log.warning("question %s failed: %s", ex.id, e)
            return e.partial.to_dict()
        except Exception as e:  # keep the batch going
            log.warning("question %s failed: %s: %s", ex.id, type(e).__name__, e)
            return {"trace_version": TRACE_VERSION, "query": {"id": ex.id, "text": ex.question},
                    "final_note": None, "answer": {"text": ""}, "iterations": [], "llm_calls": 0,
                    "stopped_because": None, "query_log": [], "flags": [],
                    "error": {"type": type(e).__name__, "message": str(e)}}

    header = {"trace_version": TRACE_VERSION, "header": {"config": _effective(args), "version": __version__},
              "started_at": datetime.now(timezone.utc).isoformat()}
    stops: Counter = Counter()
    calls = failures = done = 0
    pool = ThreadPoolExecutor(max_workers=workers)
    interrupted = False
    with open(args.out, "w", encoding="utf-8") as out:
        out.write(_dump(header) + "\n")
        futures = [pool.submit(one, ex) for ex in dataset]
        try:
            for fut in futures:
                rec = fut.result()
                out.write(_dump(rec) + "\n")
                out.flush()
                done += 1
                calls += rec["llm_calls"]
                stops[rec["stopped_because"] or "failed"] += 1
                failures += rec["error"] is not None
                if trace_dir:
                    name = "".join(c if c.isalnum() or c in "-_." else "_" for c in rec["query"]["id"])
                    (trace_dir / f"{name}.json").write_text(
                        json.dumps(rec, indent=2, sort_keys=True, ensure_ascii=False) + "\n", encoding="utf-8")
        except KeyboardInterrupt:
            interrupted = True
        finally:
            pool.shutdown(wait=not interrupted, cancel_futures=True)
    print(f"questions: {done}/{len(dataset)}  failed: {failures}")
    print(f"llm calls: {calls}  backend calls: {gateway.backend_calls}  cache hits: {gateway.cache_hits}")
    print("stop reasons: " + ", ".join(f"{k}={v}" for k, v in sorted(stops.items())))
    if failures:
        print(f"warning: {failures} question(s) failed; see the error field in {args.out}", file=sys.stderr)
    if isinstance(gateway.backend, MockBackend) and gateway.backend.remaining:
        print(f"warning: mock script has {gateway.backend.remaining} unused entries", file=sys.stderr)
    return EXIT_INTERRUPTED if interrupted else EXIT_OK


def cmd_eval(args) -> int:
    dataset = load_dataset(_require_file(args.dataset, "dataset"), args.kind)
    _, records = read_trace(_require_file(args.trace, "trace"))
    if not records:
        print("warning: trace holds no results", file=sys.stderr)
    report = evaluate_run(records, dataset, args.kind)
    table = report.table()
    print(table)
    if report.missing:
        print(f"warning: {len(report.missing)} item(s) without results scored 0", file=sys.stderr)
    if args.out_json:
        Path(args.out_json).write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
    if args.out_table:
        Path(args.out_table).write_text(table + "\n", encoding="utf-8")
    return EXIT_OK


def cmd_filtergen(args) -> int:
    if args.out is None:
        raise ConfigError("--out is required")
    dataset = load_dataset(_require_file(args.dataset, "dataset"), args.kind)
    index = _load_index(args)
    needs_llm = args.nli or args.measure == "cxmi"
    gateway = _make_gateway(args, required=needs_llm)
    items = []
    for ex in dataset:
        q = Query(ex.id, ex.question)
        items.append((q, index.search(ex.question, args.top_k), ex.gold))
    result = build_training_set(items, args.measure, args.threshold, gateway, label_chunks=args.nli)
    with open(args.out, "w", encoding="utf-8") as fh:
        for ex in result.examples:
            fh.write(_dump(ex.to_dict()) + "\n")
    for key, n in result.counts().items():
        print(f"{key}: {n}")
    for f in result.failures:
        print(f"warning: {f['query_id']} / {f['chunk_id']}: {f['error']}", file=sys.stderr)
    if args.sweep:
        if args.measure != "cxmi":
            print("warning: --sweep only applies to --measure cxmi", file=sys.stderr)
        else:
            for t, rate in pass_rates(result.examples, args.sweep).items():
                print(f"threshold {t:g}: pass-rate {rate:.4f}")
    return EXIT_OK


def _describe(rec: dict) -> str:
    lines = [f"question {rec['query']['id']}: {rec['query']['text']}"]
    for it in rec["iterations"]:
        verdicts = Counter(v["verdict"] or "parse_error" for v in it["verdicts"])
        vtxt = ", ".join(f"{k}={v}" for k, v in sorted(verdicts.items())) or "none"
        lines.append(f"  step {it['step']}: query={it['issued_query']!r}")
        lines.append(f"    retrieved {len(it['retrieved'])}, verdicts {vtxt}, kept {len(it['passages'])}")
        lines.append(f"    note v{it['note_before']} -> v{it['note_after']}"
                     f"  compare={it['compare_result']}  sufficient={it['sufficiency']}")
        if it["flags"]:
            lines.append(f"    flags: {', '.join(it['flags'])}")
    lines.append(f"  stopped: {rec['stopped_because']}  llm calls: {rec['llm_calls']}")
    if rec.get("error"):
        lines.append(f"  error: {rec['error']['type']}: {rec['error']['message']}")
    lines.append(f"  answer: {rec['answer']['text']}")
    return "\n".join(lines)


def cmd_trace(args) -> int:
    _, records = read_trace(_require_file(args.trace, "trace"))
    if args.id is None:
        stops = Counter(r["stopped_because"] or "failed" for r in records)
        print(f"{len(records)} question(s); stop reasons: "
              + ", ".join(f"{k}={v}" for k, v in sorted(stops.items())))
        for r in records:
            print(f"  {r['query']['id']}: {len(r['iterations'])} step(s), {r['stopped_because'] or 'failed'},"
                  f" answer={r['answer']['text']!r}")
        return EXIT_OK
    for r in records:
        if r["query"]["id"] == args.id:
            print(_describe(r))
            return EXIT_OK
    raise NotFound(f"no question with id {args.id!r} in {args.trace}")


# --- parser ------------------------------------------------------------------------------

def _backend_opts(p: argparse.ArgumentParser) -> None:
    p.add_argument("--endpoint", help="OpenAI-compatible API root, e.g. http://localhost:8000/v1")
    p.add_argument("--model")
    p.add_argument("--mock", help="mock script (JSON lines) instead of a live endpoint")
    p.add_argument("--prompts", help="directory overriding bundled prompt templates")
    p.add_argument("--cache-dir", help=f"response cache directory (default ${CACHE_DIR_ENV})")
    p.add_argument("--retries", type=int)
    p.add_argument("--timeout", type=float)
    p.add_argument("--max-tokens", type=int)
    p.add_argument("--concurrency", type=int)
    p.add_argument("--scoring", action=argparse.BooleanOptionalAction, default=None,
                   help="endpoint supports echo+logprobs on /completions")


def _index_opts(p: argparse.ArgumentParser) -> None:
    p.add_argument("--index")
    p.add_argument("--corpus")
    p.add_argument("--window", type=int)
    p.add_argument("--k1", type=float)
    p.add_argument("--b", type=float)


def build_parser() -> tuple[argparse.ArgumentParser, dict[str, argparse.ArgumentParser]]:
    parser = argparse.ArgumentParser(prog="memrag", description=__doc__.split("\n")[0])
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    subs = {}

    p = sub.add_parser("index", help="chunk a corpus and build a BM25 index file")
    p.add_argument("--corpus")
    p.add_argument("--out")
    p.add_argument("--window", type=int)
    p.add_argument("--k1", type=float)
    p.add_argument("--b", type=float)
    p.set_defaults(func=cmd_index)
    subs["index"] = p

    p = sub.add_parser("run", help="answer every question of a dataset, writing a trace")
    _index_opts(p)
    p.add_argument("--dataset")
    p.add_argument("--kind", choices=(SHORTFORM, LONGFORM))
    _backend_opts(p)
    p.add_argument("--max-iter", type=int)
    p.add_argument("--top-k", type=int)
    p.add_argument("--stop-on-no-improvement", action=argparse.BooleanOptionalAction, default=None)
    p.add_argument("--out", help="trace JSON-lines output")
    p.add_argument("--trace-dir", help="also write one pretty JSON file per question here")
    p.set_defaults(func=cmd_run)
    subs["run"] = p

    p = sub.add_parser("eval", help="score a trace against gold answers")
    p.add_argument("--trace")
    p.add_argument("--dataset")
    p.add_argument("--kind", choices=(SHORTFORM, LONGFORM))
    p.add_argument("--out-json")
    p.add_argument("--out-table")
    p.set_defaults(func=cmd_eval)
    subs["eval"] = p

    p = sub.add_parser("filtergen", help="generate content-filter training data")
    _index_opts(p)
    p.add_argument("--dataset")
    p.add_argument("--kind", choices=(SHORTFORM, LONGFORM))
    p.add_argument("--top-k", type=int)
    p.add_argument("--measure", choices=("strinc", "cxmi"))
    p.add_argument("--threshold", type=float, help="cxmi pass threshold in nats")
    p.add_argument("--sweep", type=float, nargs="*", help="report cxmi pass-rates at these thresholds")
    p.add_argument("--nli", action=argparse.BooleanOptionalAction, default=None,
                   help="also emit chunk-level NLI examples labelled by the backend")
    _backend_opts(p)
    p.add_argument("--out")
    p.set_defaults(func=cmd_filtergen)
    subs["filtergen"] = p

    p = sub.add_parser("trace", help="inspect a trace file")
    p.add_argument("--trace")
    p.add_argument("--id")
    p.set_defaults(func=cmd_trace)
    subs["trace"] = p

    for p in subs.values():
        p.add_argument("--config", help="flat key = value file with defaults for any flag")
    return parser, subs


def main(argv: list[str] | None = None) -> int:
    parser, subs = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        known = {d for p in subs.values() for d in _dests(p)}
        args = _merge_config(subs[args.command], args, known)
        return args.func(args)
    except ConfigError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except NotFound as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_NOT_FOUND
    except (MemragError, ValueError, OSError) as e:
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
