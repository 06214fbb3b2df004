"""The iterative collector: retrieve, filter, update memory, judge, rewrite, answer."""

from __future__ import annotations

import enum
import logging
from dataclasses import dataclass, field
from typing import Sequence

from .content_filter import ChunkDecision, filter_chunks
from .core import Answer, FilteredPassage, MemoryNote, NoteOrigin, Query, join_refs, normalize_ws
from .errors import (AnswerFailed, DuplicateQuery, InitFailed, MemragError, PipelineAborted,
                     RewriteParseError)
from .llm import CountingGateway
from .memory_agents import AgentTranscript, MemoryUpdateFailed, compare_notes, update_memory
from .parsing import parse_json_object
from .retriever import DEFAULT_TOP_K, Retriever

log = logging.getLogger(__name__)

TRACE_VERSION = 1
REWRITE_MARKER = "### New Question"


@dataclass(frozen=True)
class LoopConfig:
    max_iter: int = 3
    top_k: int = DEFAULT_TOP_K
    stop_on_no_improvement: bool = True

    def __post_init__(self):
        if self.max_iter < 1:
            raise ValueError("max_iter must be >= 1")
        if self.top_k < 1:
            raise ValueError("top_k must be >= 1")


class StopReason(str, enum.Enum):
    SUFFICIENT = "sufficient"
    NO_IMPROVEMENT = "no_improvement"
    MAX_ITER = "max_iter"
    REWRITE_FAILED = "rewrite_failed"


def _query_key(text: str) -> str:
    return normalize_ws(text).lower()


class QueryLog:
    """Issued retrieval queries, original first; rejects normalized repeats."""

    def __init__(self, original: str):
        self.entries = [original]
        self._keys = {_query_key(original)}

    def __contains__(self, text: str) -> bool:
        return _query_key(text) in self._keys

    def __len__(self) -> int:
        return len(self.entries)

    def add(self, text: str) -> None:
        if text in self:
            raise DuplicateQuery(text)
        self.entries.append(text)
        self._keys.add(_query_key(text))

    def render(self) -> str:
        return "\n".join(f"{i}. {q}" for i, q in enumerate(self.entries, 1))


@dataclass
class IterationTrace:
    step: int
    issued_query: str
    retrieved: list[dict] = field(default_factory=list)
    verdicts: list[ChunkDecision] = field(default_factory=list)
    passages: list[dict] = field(default_factory=list)
    transcript: AgentTranscript | None = None
    compare_result: bool | None = None
    sufficiency: bool | None = None
    note_before: int | None = None
    note_after: int | None = None
    flags: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "step": self.step,
            "issued_query": self.issued_query,
            "retrieved": self.retrieved,
            "verdicts": [v.to_dict() for v in self.verdicts],
            "passages": self.passages,
            "transcript": None if self.transcript is None else self.transcript.to_dict(),
            "compare_result": self.compare_result,
            "sufficiency": self.sufficiency,
            "note_before": self.note_before,
            "note_after": self.note_after,
            "flags": list(self.flags),
        }


@dataclass
class RunResult:
    query: Query
    final_note: MemoryNote | None
    answer: Answer
    iterations: list[IterationTrace]
    llm_calls: int
    stopped_because: StopReason | None
    query_log: list[str] = field(default_factory=list)
    flags: list[str] = field(default_factory=list)
    error: dict | None = None

    def to_dict(self) -> dict:
        return {
            "trace_version": TRACE_VERSION,
            "query": {"id": self.query.id, "text": self.query.text},
            "final_note": None if self.final_note is None else self.final_note.to_dict(),
            "answer": {"text": self.answer.text},
            "iterations": [it.to_dict() for it in self.iterations],
            "llm_calls": self.llm_calls,
            "stopped_because": None if self.stopped_because is None else self.stopped_because.value,
            "query_log": list(self.query_log),
            "flags": list(self.flags),
            "error": self.error,
        }


# --- single-call stages --------------------------------------------------------

def init_memory(query: Query, passages: Sequence[FilteredPassage], gateway) -> MemoryNote:
    text = gateway.ask("memory_init", query=query.text, refs=join_refs(passages))
    if not text.strip():
        raise InitFailed("memory initialization returned an empty note")
    return MemoryNote(text, 0, NoteOrigin.INITIALIZED)


def judge_sufficiency(query: Query, note: MemoryNote, gateway) -> tuple[bool, str | None]:
    """Returns ``(sufficient, flag)``; unparseable replies count as not sufficient."""
    raw = gateway.ask("sufficiency_judge", query=query.text, note=note.text)
    try:
        obj, _ = parse_json_object(raw)
    except ValueError:
        return False, "sufficiency_unparseable"
    value = obj.get("sufficient")
    if not isinstance(value, bool):
        return False, "sufficiency_unparseable"
    return value, None


def parse_rewrite(raw: str) -> str:
    lines = raw.splitlines()
    marks = [i for i, line in enumerate(lines) if line.lstrip().startswith(REWRITE_MARKER)]
    if not marks:
        raise RewriteParseError(raw)
    i = marks[-1]
    rest = lines[i].lstrip()[len(REWRITE_MARKER):].strip()
    if rest.startswith(":"):
        rest = rest[1:].strip()
    if not rest:
        # marker alone on its line; take the next non-blank line
        rest = next((line.strip() for line in lines[i + 1:] if line.strip()), "")
    if not rest:
        raise RewriteParseError(raw)
    return rest


def rewrite_query(query: Query, note: MemoryNote, query_log: QueryLog, gateway) -> str:
    raw = gateway.ask("query_rewrite", query=query.text, note=note.text, query_log=query_log.render())
    new = parse_rewrite(raw)
    if new in query_log:
        raise DuplicateQuery(new)
    return new


def generate_answer(query: Query, final_note: MemoryNote, gateway) -> Answer:
    text = gateway.ask("final_answer", query=query.text, note=final_note.text).strip()
    if not text:
        raise AnswerFailed("answer generation returned nothing")
    return Answer(text)


# --- the loop ----------------------------------------------------------------------

def _collect(query: Query, issued: str, step: int, retriever: Retriever, top_k: int,
             gateway) -> tuple[IterationTrace, list[FilteredPassage]]:
    it = IterationTrace(step, issued)
    chunks = retriever.search(issued, top_k, step)
    it.retrieved = [{"id": c.doc_id, "rank": c.rank, "score": c.score} for c in chunks]
    issued_q = Query(f"{query.id}@{step}", issued)
    passages = filter_chunks(issued_q, chunks, gateway, it.verdicts)
    it.passages = [{"chunk_id": p.source.doc_id, "sentences": list(p.sentences)} for p in passages]
    return it, passages


def run_question(query: Query, retriever: Retriever, config: LoopConfig, gateway) -> RunResult:
    """Answer one question with the adaptive memory loop.

    Raises :class:`PipelineAborted` (with the partial result attached) when
    initialization, answering, or a non-recoverable model call fails.
    """
    gw = CountingGateway(gateway)
    qlog = QueryLog(query.text)
    result = RunResult(query, None, Answer(""), [], 0, None)
    try:
        it, passages = _collect(query, query.text, 1, retriever, config.top_k, gw)
        result.iterations.append(it)
        best = init_memory(query, passages, gw)
        result.final_note = best
        it.note_after = best.version
        it.sufficiency, flag = judge_sufficiency(query, best, gw)
        if flag:
            it.flags.append(flag)
        stop = StopReason.SUFFICIENT if it.sufficiency else None

        t = 1
        while stop is None and t < config.max_iter:
            try:
                issued = rewrite_query(query, best, qlog, gw)
            except (RewriteParseError, DuplicateQuery) as e:
                result.flags.append(f"rewrite_failed: {type(e).__name__}")
                stop = StopReason.REWRITE_FAILED
                break
            qlog.add(issued)
            t += 1
            it, passages = _collect(query, issued, t, retriever, config.top_k, gw)
            result.iterations.append(it)
            it.note_before = best.version
            try:
                candidate, it.transcript = update_memory(query, passages, best, gw)
            except MemoryUpdateFailed as e:
                it.transcript = e.transcript
                it.flags.append("memory_update_failed")
                candidate = None
            if candidate is not None:
                it.compare_result, flag = compare_notes(query, best, candidate, gw)
                if flag:
                    it.flags.append(flag)
                if it.compare_result:
                    best = candidate
                    result.final_note = best
                elif config.stop_on_no_improvement:
                    it.note_after = best.version
                    stop = StopReason.NO_IMPROVEMENT
                    break
            it.note_after = best.version
            it.sufficiency, flag = judge_sufficiency(query, best, gw)
            if flag:
                it.flags.append(flag)
            if it.sufficiency:
                stop = StopReason.SUFFICIENT
        result.stopped_because = stop or StopReason.MAX_ITER
        result.query_log = list(qlog.entries)
        result.answer = generate_answer(query, best, gw)
    except MemragError as e:
        result.query_log = list(qlog.entries)
        result.llm_calls = gw.calls
        result.error = {"type": type(e).__name__, "message": str(e)}
        if isinstance(e, PipelineAborted):
            e.partial = result
            raise
        raise PipelineAborted(f"{type(e).__name__}: {e}", result) from e
    result.llm_calls = gw.calls
    return result
