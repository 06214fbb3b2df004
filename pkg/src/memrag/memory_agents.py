"""Reviewer / challenger / refiner memory update, and best-note comparison."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

from .core import FilteredPassage, MemoryNote, NoteOrigin, Query, join_refs
from .errors import MemragError
from .parsing import parse_json_object

log = logging.getLogger(__name__)


@dataclass
class AgentTranscript:
    review_info: str = ""
    suggestions: str = ""
    refined_note: str = ""
    call_count: int = 0
    flags: list[str] = field(default_factory=list)
    error: str | None = None

    def to_dict(self) -> dict:
        return {
            "review_info": self.review_info,
            "suggestions": self.suggestions,
            "refined_note": self.refined_note,
            "call_count": self.call_count,
            "flags": list(self.flags),
            "error": self.error,
        }


class MemoryUpdateFailed(MemragError):
    """An agent call failed; ``transcript`` shows how far the update got."""

    def __init__(self, cause: Exception, transcript: AgentTranscript):
        super().__init__(f"memory update aborted after {transcript.call_count} call(s): {cause}")
        self.cause = cause
        self.transcript = transcript


def review(query: Query, refs: Sequence[FilteredPassage], note: MemoryNote, gateway) -> str:
    return gateway.ask("reviewer", query=query.text, refs=join_refs(refs), note=note.text)


def challenge(query: Query, refs: Sequence[FilteredPassage], note: MemoryNote, review_info: str, gateway) -> str:
    return gateway.ask("challenger", query=query.text, refs=join_refs(refs), note=note.text,
                       review_info=review_info)


def refine(query: Query, refs: Sequence[FilteredPassage], note: MemoryNote, review_info: str,
           suggestions: str, gateway) -> tuple[str, bool]:
    """Returns the refined note and whether the no-op guard fired
    (blank reply replaced by the input note)."""
    text = gateway.ask("refiner", query=query.text, refs=join_refs(refs), note=note.text,
                       review_info=review_info, suggestions=suggestions)
    if not text.strip():
        return note.text, True
    return text, False


def update_memory(query: Query, refs: Sequence[FilteredPassage], note: MemoryNote,
                  gateway) -> tuple[MemoryNote, AgentTranscript]:
    """One reviewer -> challenger -> refiner pass over ``note``.

    Raises :class:`MemoryUpdateFailed` on the first failing call; the caller
    keeps its note.
    """
    tr = AgentTranscript()
    try:
        tr.review_info = review(query, refs, note, gateway)
        tr.call_count += 1
        tr.suggestions = challenge(query, refs, note, tr.review_info, gateway)
        tr.call_count += 1
        tr.refined_note, noop = refine(query, refs, note, tr.review_info, tr.suggestions, gateway)
        tr.call_count += 1
    except MemragError as e:
        tr.error = f"{type(e).__name__}: {e}"
        raise MemoryUpdateFailed(e, tr) from e
    if noop:
        tr.flags.append("refiner_blank")
    origin = NoteOrigin.KEPT if noop else NoteOrigin.REFINED
    return MemoryNote(tr.refined_note, note.version + 1, origin), tr


def compare_notes(query: Query, best_note: MemoryNote, new_note: MemoryNote, gateway) -> tuple[bool, str | None]:
    """True when the judge says the new note is a significant improvement.

    Returns ``(better, flag)``; an unparseable reply yields ``(False, flag)``.
    """
    raw = gateway.ask("note_compare", query=query.text, best_note=best_note.text, new_note=new_note.text)
    try:
        obj, _ = parse_json_object(raw)
        status = obj["status"]
    except (ValueError, KeyError):
        log.warning("note comparison unparseable, keeping best note: %r", raw[:80])
        return False, "compare_unparseable"
    if isinstance(status, bool):
        return status, None
    if isinstance(status, str) and status.strip().lower() in ("true", "false"):
        return status.strip().lower() == "true", None
    log.warning("note comparison status %r not True/False, keeping best note", status)
    return False, "compare_unparseable"
