"""Domain types, prompt templates and small text utilities used by every stage."""

from __future__ import annotations

import enum
import re
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Mapping

from .errors import MissingBinding, TemplateError, UnknownPlaceholder

TEMPLATE_NAMES = (
    "memory_init",
    "query_rewrite",
    "chunk_filter",
    "sentence_filter",
    "reviewer",
    "challenger",
    "refiner",
    "note_compare",
    "sufficiency_judge",
    "final_answer",
)

# Templates transcribed from the published prompt tables; the remaining two are local.
TRANSCRIBED_TEMPLATES = TEMPLATE_NAMES[:8]


@dataclass(frozen=True)
class Query:
    id: str
    text: str

    def __post_init__(self):
        if not self.text.strip():
            raise ValueError(f"query {self.id!r} has empty text")


@dataclass(frozen=True)
class Chunk:
    doc_id: str
    title: str
    text: str
    rank: int
    score: float
    step: int = 0

    def __post_init__(self):
        if self.rank < 1:
            raise ValueError("rank must be >= 1")
        if not self.text.strip():
            raise ValueError(f"chunk {self.doc_id!r} has empty text")


@dataclass(frozen=True)
class FilteredPassage:
    source: Chunk
    sentences: tuple[str, ...]

    def __post_init__(self):
        if not self.sentences:
            raise ValueError("a filtered passage keeps at least one sentence")
        for s in self.sentences:
            if s not in self.source.text:
                raise ValueError(f"sentence not found in source chunk: {s!r}")

    @property
    def text(self) -> str:
        return " ".join(self.sentences)


class NoteOrigin(str, enum.Enum):
    INITIALIZED = "initialized"
    REFINED = "refined"
    KEPT = "kept"


@dataclass(frozen=True)
class MemoryNote:
    text: str
    version: int = 0
    origin: NoteOrigin = NoteOrigin.INITIALIZED

    def to_dict(self) -> dict:
        return {"text": self.text, "version": self.version, "origin": self.origin.value}

    @classmethod
    def from_dict(cls, d: Mapping) -> "MemoryNote":
        return cls(d["text"], int(d["version"]), NoteOrigin(d["origin"]))


@dataclass(frozen=True)
class Answer:
    text: str


# --- prompt templates -------------------------------------------------------

_TOKEN = re.compile(r"\{\{|\}\}|\{([A-Za-z_][A-Za-z0-9_]*)\}|[{}]")


@dataclass(frozen=True)
class PromptTemplate:
    """A named prompt body with ``{name}`` placeholders.

    Literal braces are written doubled (``{{`` / ``}}``) and come out single
    after rendering. A lone brace that is not part of a placeholder is a
    syntax error, caught at construction.
    """

    name: str
    body: str
    placeholders: frozenset[str] = field(init=False, repr=False)

    def __post_init__(self):
        names = set()
        for m in _TOKEN.finditer(self.body):
            tok = m.group(0)
            if m.group(1):
                names.add(m.group(1))
            elif tok not in ("{{", "}}"):
                raise TemplateError(f"template {self.name!r}: stray {tok!r} at offset {m.start()}")
        object.__setattr__(self, "placeholders", frozenset(names))


def render_prompt(template: PromptTemplate, bindings: Mapping[str, str], strict: bool = True) -> str:
    """Substitute every placeholder; unbound names raise, and so do unused
    bindings unless ``strict`` is off."""
    missing = template.placeholders - bindings.keys()
    if missing:
        raise MissingBinding(sorted(missing)[0])
    if strict:
        extra = bindings.keys() - template.placeholders
        if extra:
            raise UnknownPlaceholder(extra)

    def sub(m: re.Match) -> str:
        if m.group(1):
            return str(bindings[m.group(1)])
        return m.group(0)[0]

    return _TOKEN.sub(sub, template.body)


def load_template(path: str | Path, name: str | None = None) -> PromptTemplate:
    path = Path(path)
    body = path.read_text(encoding="utf-8")
    if body.endswith("\n"):
        body = body[:-1]
    return PromptTemplate(name or path.stem, body)


def load_templates(directory: str | Path | None = None) -> dict[str, PromptTemplate]:
    """Load all ten templates, from ``directory`` if given, else the bundled set.

    A user directory may hold only some templates; missing ones fall back to
    the bundled copies so a single prompt can be swapped out.
    """
    bundled = resources.files("memrag") / "prompts"
    out = {}
    for name in TEMPLATE_NAMES:
        candidate = Path(directory) / name if directory is not None else None
        if candidate is not None and candidate.is_file():
            out[name] = load_template(candidate, name)
        else:
            body = (bundled / name).read_text(encoding="utf-8")
            if body.endswith("\n"):
                body = body[:-1]
            out[name] = PromptTemplate(name, body)
    return out


# --- text helpers ------------------------------------------------------------

NO_REFERENCES = "(no references)"


def join_refs(passages) -> str:
    if not passages:
        return NO_REFERENCES
    blocks = [f"[{i}] {p.source.title}\n{' '.join(p.sentences)}" for i, p in enumerate(passages, 1)]
    return "\n\n".join(blocks)


# Boundary: terminal punctuation, whitespace, then an uppercase ASCII letter.
# Abbreviations ("Dr. Smith") split too.
_SENT_BOUNDARY = re.compile(r"(?<=[.!?])\s+(?=[A-Z])")


def split_sentences(text: str) -> list[str]:
    text = text.strip()
    if not text:
        return []
    return [s for s in _SENT_BOUNDARY.split(text) if s]


def normalize_ws(text: str) -> str:
    return " ".join(text.split())
