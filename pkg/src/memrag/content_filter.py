"""Two-level content filtering of retrieved chunks, and training-data generation
for fine-tuning a dedicated filter model."""

from __future__ import annotations

import enum
import logging
import re
import string
from dataclasses import dataclass, field
from typing import Iterable, Sequence

from .core import Chunk, FilteredPassage, Query, split_sentences
from .errors import FilterParseError, MemragError, Unsupported
from .parsing import parse_json_object

log = logging.getLogger(__name__)

NLI_KEY = "NLI result"


class Verdict(str, enum.Enum):
    USEFUL = "useful"
    USELESS = "useless"


@dataclass(frozen=True)
class FilterVerdict:
    value: Verdict
    raw: str


def parse_verdict(raw: str) -> FilterVerdict:
    try:
        obj, _ = parse_json_object(raw)
    except ValueError:
        raise FilterParseError(raw) from None
    value = obj.get(NLI_KEY)
    if set(obj) != {NLI_KEY} or not isinstance(value, str):
        raise FilterParseError(raw)
    try:
        return FilterVerdict(Verdict(value.strip()), raw)
    except ValueError:
        raise FilterParseError(raw) from None


def chunk_filter(query: Query, chunk: Chunk, gateway) -> FilterVerdict:
    raw = gateway.ask("chunk_filter", External_Knowledge=chunk.text, Question=query.text)
    return parse_verdict(raw)


# --- sentence level ------------------------------------------------------------

_BULLET = re.compile(r"^\s*(?:[-*•]|\d+[.)])\s+")


def _collapsed_with_offsets(text: str) -> tuple[str, list[int]]:
    """Whitespace-collapsed, stripped copy of ``text`` plus, for every character
    of the copy, its offset in the original."""
    chars, offsets = [], []
    pending_space = False
    for i, ch in enumerate(text):
        if ch.isspace():
            pending_space = bool(chars)
            continue
        if pending_space:
            chars.append(" ")
            offsets.append(i - 1)
            pending_space = False
        chars.append(ch)
        offsets.append(i)
    return "".join(chars), offsets


def _candidates(reply: str) -> Iterable[str]:
    for line in reply.splitlines():
        line = _BULLET.sub("", line).strip().strip('"“”')
        yield from split_sentences(line)


def extract_sentences(reply: str, chunk_text: str) -> tuple[list[str], list[str]]:
    """Map the sentences of a model reply back onto verbatim spans of the chunk.

    Returns ``(kept, dropped)``: kept spans in chunk order, and reply
    sentences that could not be found in the chunk.
    """
    flat, offsets = _collapsed_with_offsets(chunk_text)
    spans: set[tuple[int, int]] = set()
    dropped = []
    for cand in _candidates(reply):
        needle = " ".join(cand.split())
        pos = flat.find(needle)
        if pos < 0:
            dropped.append(cand)
            continue
        spans.add((offsets[pos], offsets[pos + len(needle) - 1] + 1))
    merged: list[list[int]] = []
    for start, end in sorted(spans):
        if merged and start < merged[-1][1]:
            merged[-1][1] = max(merged[-1][1], end)
        else:
            merged.append([start, end])
    return [chunk_text[a:b] for a, b in merged], dropped


def _extract(query: Query, chunk: Chunk, gateway) -> tuple[list[str], list[str]]:
    raw = gateway.ask("sentence_filter", query=query.text, context=chunk.text)
    kept, dropped = extract_sentences(raw, chunk.text)
    for d in dropped:
        log.warning("sentence not in chunk %s, dropped: %r", chunk.doc_id, d)
    return kept, dropped


def sentence_filter(query: Query, chunk: Chunk, gateway) -> FilteredPassage | None:
    """Ask for the helpful sentences of ``chunk``; ``None`` when nothing valid survives."""
    kept, _ = _extract(query, chunk, gateway)
    return FilteredPassage(chunk, tuple(kept)) if kept else None


@dataclass
class ChunkDecision:
    """What happened to one retrieved chunk, for the run trace."""

    chunk_id: str
    verdict: str | None
    raw: str
    kept: bool
    whole: bool = False
    error: str | None = None
    dropped_lines: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "chunk_id": self.chunk_id,
            "verdict": self.verdict,
            "raw": self.raw,
            "kept": self.kept,
            "whole": self.whole,
            "error": self.error,
            "dropped_lines": list(self.dropped_lines),
        }


def _whole(chunk: Chunk) -> FilteredPassage:
    return FilteredPassage(chunk, tuple(split_sentences(chunk.text)))


def filter_chunks(query: Query, chunks: Sequence[Chunk], gateway,
                  decisions: list[ChunkDecision] | None = None) -> list[FilteredPassage]:
    """Chunk-level verdict, then sentence extraction for the survivors.

    An unparseable verdict keeps the chunk whole, as does an extraction that
    finds nothing verifiable. Output keeps retrieval order.
    """
    out = []
    for chunk in chunks:
        try:
            verdict = chunk_filter(query, chunk, gateway)
        except FilterParseError as e:
            out.append(_whole(chunk))
            if decisions is not None:
                decisions.append(ChunkDecision(chunk.doc_id, None, e.raw, True, True, "FilterParseError"))
            continue
        if verdict.value is Verdict.USELESS:
            if decisions is not None:
                decisions.append(ChunkDecision(chunk.doc_id, verdict.value.value, verdict.raw, False))
            continue
        kept, dropped = _extract(query, chunk, gateway)
        passage = FilteredPassage(chunk, tuple(kept)) if kept else _whole(chunk)
        out.append(passage)
        if decisions is not None:
            decisions.append(ChunkDecision(chunk.doc_id, verdict.value.value, verdict.raw, True,
                                           not kept, None, dropped))
    return out


# --- training data ---------------------------------------------------------------

_PUNCT = str.maketrans("", "", string.punctuation)


def _norm_tokens(text: str) -> list[str]:
    return text.lower().translate(_PUNCT).split()


def _contains_run(haystack: list[str], needle: list[str]) -> bool:
    n = len(needle)
    if n == 0:
        return False
    return any(haystack[i:i + n] == needle for i in range(len(haystack) - n + 1))


def strinc_label(sentence: str, gold_answer: str) -> int:
    return int(_contains_run(_norm_tokens(sentence), _norm_tokens(gold_answer)))


SCORING_PROMPT = "Context: {context}\nQuestion: {question}\nAnswer:"


def _answer_logprob(query: Query, context: str, gold_answer: str, gateway) -> float:
    prefix = SCORING_PROMPT.format(context=context, question=query.text)
    return gateway.score_continuation(prefix, " " + gold_answer)


def _join_context(base: str, sentence: str) -> str:
    return f"{base} {sentence}" if base else sentence


def logprob_gain(query: Query, with_context: str, without_context: str, gold_answer: str, gateway) -> float:
    return (_answer_logprob(query, with_context, gold_answer, gateway)
            - _answer_logprob(query, without_context, gold_answer, gateway))


def cxmi_score(query: Query, sentence: str, gold_answer: str, base_context: str, gateway) -> float:
    """Log-likelihood gain (nats) of the gold answer when ``sentence`` joins the context."""
    return logprob_gain(query, _join_context(base_context, sentence), base_context, gold_answer, gateway)


@dataclass
class TrainingExample:
    kind: str  # "chunk_nli" | "sentence_filter"
    query: str
    input_context: str
    label: str
    measure_meta: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        key = "label" if self.kind == "chunk_nli" else "target"
        return {"kind": self.kind, "query": self.query, "input": self.input_context,
                key: self.label, "meta": self.measure_meta}


@dataclass
class FiltergenResult:
    examples: list[TrainingExample]
    failures: list[dict]

    def counts(self) -> dict[str, int]:
        c: dict[str, int] = {"failures": len(self.failures)}
        for ex in self.examples:
            if ex.kind == "chunk_nli":
                k = f"chunk_nli:{ex.label}"
            else:
                k = "sentence_filter:low_signal" if ex.measure_meta.get("low_signal") else "sentence_filter"
            c[k] = c.get(k, 0) + 1
        return dict(sorted(c.items()))


def _nli_example(query: Query, chunk: Chunk, gateway) -> TrainingExample:
    raw = gateway.ask("chunk_filter", External_Knowledge=chunk.text, Question=query.text)
    verdict = parse_verdict(raw)
    _, (a, b) = parse_json_object(raw)
    explanation = (raw[:a] + raw[b:]).strip()
    return TrainingExample("chunk_nli", query.text, chunk.text, verdict.value.value,
                           {"chunk_id": chunk.doc_id, "explanation": explanation})


def _sentence_example(query: Query, chunk: Chunk, gold: str, measure: str, threshold: float,
                      gateway, base_context: str) -> TrainingExample:
    rows, picked = [], []
    for s in split_sentences(chunk.text):
        row = {"text": s, "strinc": strinc_label(s, gold), "cxmi": None}
        if measure == "cxmi":
            row["cxmi"] = cxmi_score(query, s, gold, base_context, gateway)
            passes = row["cxmi"] >= threshold
        else:
            passes = row["strinc"] == 1
        rows.append(row)
        if passes:
            picked.append(s)
    meta = {"chunk_id": chunk.doc_id, "measure": measure, "sentences": rows, "low_signal": not picked}
    if measure == "cxmi":
        meta["threshold"] = threshold
    return TrainingExample("sentence_filter", query.text, chunk.text, " ".join(picked), meta)


def build_training_set(examples: Iterable[tuple[Query, Sequence[Chunk], str]], measure: str = "strinc",
                       threshold: float = 0.0, gateway=None, label_chunks: bool = True,
                       base_context: str = "") -> FiltergenResult:
    """Emit chunk-NLI and sentence-filter examples for every (query, chunk) pair.

    Sentence targets keep the sentences whose gold-answer inclusion flag is 1
    (``strinc``) or whose likelihood gain reaches ``threshold`` nats
    (``cxmi``). Chunk labels come from ``gateway`` through the chunk-filter
    prompt. A failing pair is recorded in ``failures`` and skipped.
    """
    if measure not in ("strinc", "cxmi"):
        raise ValueError(f"unknown measure {measure!r}")
    if measure == "cxmi" and (gateway is None or not gateway.supports_scoring):
        raise Unsupported("cxmi labelling needs a backend that can score continuations")
    out: list[TrainingExample] = []
    failures: list[dict] = []
    for query, chunks, gold in examples:
        for chunk in chunks:
            try:
                batch = []
                if label_chunks:
                    batch.append(_nli_example(query, chunk, gateway))
                batch.append(_sentence_example(query, chunk, gold, measure, threshold, gateway, base_context))
            except (MemragError, ValueError) as e:
                failures.append({"query_id": query.id, "chunk_id": chunk.doc_id,
                                 "error": f"{type(e).__name__}: {e}"})
                continue
            out.extend(batch)
    return FiltergenResult(out, failures)


def pass_rates(examples: Iterable[TrainingExample], thresholds: Sequence[float]) -> dict[float, float]:
    """Fraction of scored sentences at or above each threshold."""
    scores = [row["cxmi"] for ex in examples if ex.kind == "sentence_filter"
              for row in ex.measure_meta.get("sentences", []) if row["cxmi"] is not None]
    if not scores:
        return {t: 0.0 for t in thresholds}
    return {t: sum(s >= t for s in scores) / len(scores) for t in thresholds}
