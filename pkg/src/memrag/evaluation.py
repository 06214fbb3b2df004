"""QA metrics (containment accuracy, token F1, str-em, str-hit) and batch scoring."""

from __future__ import annotations

import json
import logging
import re
import string
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

from .errors import ParseError, SchemaError, UnknownId

log = logging.getLogger(__name__)

_ARTICLES = re.compile(r"\b(a|an|the)\b")
_PUNCT = set(string.punctuation)


def normalize_answer(s: str) -> str:
    """Lowercase, drop punctuation and English articles, collapse whitespace."""
    s = s.lower()
    s = "".join(ch for ch in s if ch not in _PUNCT)
    s = _ARTICLES.sub(" ", s)
    return " ".join(s.split())


def _contains_tokens(pred: list[str], gold: list[str]) -> bool:
    if not gold:
        return not pred
    n = len(gold)
    return any(pred[i:i + n] == gold for i in range(len(pred) - n + 1))


def metric_acc(prediction: str, golds: Sequence[str]) -> int:
    pred = normalize_answer(prediction).split()
    return int(any(_contains_tokens(pred, normalize_answer(g).split()) for g in golds))


def _f1(pred: list[str], gold: list[str]) -> float:
    if not pred or not gold:
        return float(pred == gold)
    overlap = sum((Counter(pred) & Counter(gold)).values())
    if overlap == 0:
        return 0.0
    p = overlap / len(pred)
    r = overlap / len(gold)
    return 2 * p * r / (p + r)


def metric_token_f1(prediction: str, golds: Sequence[str]) -> float:
    pred = normalize_answer(prediction).split()
    return max(_f1(pred, normalize_answer(g).split()) for g in golds)


def _covered(prediction_norm: str, short_answers: Iterable[str]) -> bool:
    # Plain substring test on normalized strings, as in the ALCE scorer.
    return any(normalize_answer(a) and normalize_answer(a) in prediction_norm for a in short_answers)


def metric_str_em(prediction: str, qa_pairs: Sequence[Sequence[str]]) -> float:
    norm = normalize_answer(prediction)
    return sum(_covered(norm, answers) for answers in qa_pairs) / len(qa_pairs)


def metric_str_hit(prediction: str, qa_pairs: Sequence[Sequence[str]]) -> int:
    return int(metric_str_em(prediction, qa_pairs) == 1.0)


# --- datasets ---------------------------------------------------------------------

SHORTFORM, LONGFORM = "shortform", "longform"


@dataclass(frozen=True)
class QaExample:
    id: str
    question: str
    answers: tuple[str, ...] = ()
    qa_pairs: tuple[tuple[str, ...], ...] = ()

    @property
    def gold(self) -> str:
        """First gold string, used as the target for training-data labelling."""
        return self.answers[0] if self.answers else self.qa_pairs[0][0]


def _str_list(value, field_name: str, line_no: int) -> tuple[str, ...]:
    if not isinstance(value, list) or not value or not all(isinstance(v, str) and v.strip() for v in value):
        raise SchemaError(field_name, line_no)
    return tuple(value)


def load_dataset(path: str | Path, kind: str) -> list[QaExample]:
    if kind not in (SHORTFORM, LONGFORM):
        raise ValueError(f"unknown dataset kind {kind!r}")
    out = []
    seen = set()
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as e:
                raise ParseError(line_no, e.msg) from None
            if not isinstance(rec, dict):
                raise ParseError(line_no, "not an object")
            for key in ("id", "question"):
                if not isinstance(rec.get(key), str) or not rec[key].strip():
                    raise SchemaError(key, line_no)
            if rec["id"] in seen:
                raise SchemaError("id", line_no)
            seen.add(rec["id"])
            if kind == SHORTFORM:
                ex = QaExample(rec["id"], rec["question"], answers=_str_list(rec.get("answers"), "answers", line_no))
            else:
                pairs = rec.get("qa_pairs")
                if not isinstance(pairs, list) or not pairs:
                    raise SchemaError("qa_pairs", line_no)
                sets = []
                for pair in pairs:
                    if not isinstance(pair, dict):
                        raise SchemaError("qa_pairs", line_no)
                    sets.append(_str_list(pair.get("short_answers"), "short_answers", line_no))
                ex = QaExample(rec["id"], rec["question"], qa_pairs=tuple(sets))
            out.append(ex)
    return out


# --- reports ----------------------------------------------------------------------

@dataclass
class MetricReport:
    kind: str
    per_example: dict[str, dict[str, float]]
    missing: list[str] = field(default_factory=list)

    @property
    def metric_names(self) -> tuple[str, ...]:
        return ("acc", "f1") if self.kind == SHORTFORM else ("str_em", "str_hit")

    @property
    def aggregates(self) -> dict[str, float]:
        n = len(self.per_example)
        if n == 0:
            return {m: 0.0 for m in self.metric_names}
        return {m: round(100 * sum(v[m] for v in self.per_example.values()) / n, 2) for m in self.metric_names}

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "count": len(self.per_example),
            "missing": sorted(self.missing),
            "aggregates": self.aggregates,
            "per_example": {k: self.per_example[k] for k in sorted(self.per_example)},
        }

    def table(self) -> str:
        names = self.metric_names
        rows = [("id",) + names]
        for qid in sorted(self.per_example):
            rows.append((qid,) + tuple(f"{self.per_example[qid][m]:.4f}" for m in names))
        rows.append(("MEAN x100",) + tuple(f"{self.aggregates[m]:.2f}" for m in names))
        widths = [max(len(r[i]) for r in rows) for i in range(len(rows[0]))]
        lines = ["  ".join(c.ljust(w) if i == 0 else c.rjust(w) for i, (c, w) in enumerate(zip(r, widths)))
                 for r in rows]
        lines.insert(1, "-" * len(lines[0]))
        lines.insert(len(lines) - 1, "-" * len(lines[0]))
        return "\n".join(lines)


def score_example(example: QaExample, prediction: str, kind: str) -> dict[str, float]:
    if kind == SHORTFORM:
        return {"acc": metric_acc(prediction, example.answers), "f1": metric_token_f1(prediction, example.answers)}
    return {"str_em": metric_str_em(prediction, example.qa_pairs), "str_hit": metric_str_hit(prediction, example.qa_pairs)}


def evaluate_run(results: Iterable[Mapping], dataset: Sequence[QaExample], kind: str) -> MetricReport:
    """Score trace records (dicts with ``query.id`` and ``answer.text``) against gold.

    Dataset items without a result score zero and are listed in ``missing``.
    """
    by_id = {ex.id: ex for ex in dataset}
    answers: dict[str, str] = {}
    for rec in results:
        qid = rec["query"]["id"]
        if qid not in by_id:
            raise UnknownId(qid)
        answers[qid] = (rec.get("answer") or {}).get("text", "")
    report = MetricReport(kind, {})
    for ex in dataset:
        if ex.id not in answers:
            report.missing.append(ex.id)
            report.per_example[ex.id] = {m: 0.0 for m in report.metric_names}
            continue
        report.per_example[ex.id] = score_example(ex, answers[ex.id], kind)
    if report.missing:
        log.warning("%d dataset item(s) have no result and score 0", len(report.missing))
    return report
