"""Corpus ingestion, fixed-window passage chunking and an in-memory BM25 index."""

from __future__ import annotations

import io
import json
import math
import re
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Protocol

from .core import Chunk
from .errors import DuplicateDocId, EmptyCorpus, IndexFormatError, ParseError

DEFAULT_WINDOW = 100
DEFAULT_K1 = 1.2
DEFAULT_B = 0.75
DEFAULT_TOP_K = 5


@dataclass(frozen=True)
class CorpusDoc:
    doc_id: str
    title: str
    text: str


@dataclass(frozen=True)
class Passage:
    passage_id: str
    title: str
    text: str


@dataclass(frozen=True)
class RetrievalConfig:
    top_k: int = DEFAULT_TOP_K

    def __post_init__(self):
        if self.top_k < 1:
            raise ValueError("top_k must be >= 1")


class Retriever(Protocol):
    def search(self, query: str, top_k: int, step: int = 0) -> list[Chunk]: ...


def ingest_corpus(path: str | Path) -> list[CorpusDoc]:
    """Read a JSON-lines corpus with string fields ``id``, ``title``, ``text``.

    Blank lines are skipped. Line numbers in errors are 1-based.
    """
    docs: list[CorpusDoc] = []
    seen: set[str] = set()
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
            for key in ("id", "title", "text"):
                if not isinstance(rec.get(key), str):
                    raise ParseError(line_no, f"field {key!r} missing or not a string")
            if not rec["text"].strip():
                raise ParseError(line_no, "empty text")
            if rec["id"] in seen:
                raise DuplicateDocId(rec["id"])
            seen.add(rec["id"])
            docs.append(CorpusDoc(rec["id"], rec["title"], rec["text"]))
    return docs


def chunk_document(doc: CorpusDoc, window: int = DEFAULT_WINDOW) -> list[Passage]:
    if window < 1:
        raise ValueError("window must be >= 1")
    words = doc.text.split()
    return [
        Passage(f"{doc.doc_id}#{n}", doc.title, " ".join(words[i:i + window]))
        for n, i in enumerate(range(0, len(words), window))
    ]


_NON_ALNUM = re.compile(r"[^0-9a-z]+")


def tokenize(text: str) -> list[str]:
    # ASCII alphanumerics only; accented letters act as separators.
    return [t for t in _NON_ALNUM.split(text.lower()) if t]


def idf(n_docs: int, df: int) -> float:
    return math.log((n_docs - df + 0.5) / (df + 0.5) + 1.0)


class Bm25Index:
    """Inverted BM25 index over passages; immutable once built."""

    def __init__(self, passages: list[Passage], doc_lengths: list[int],
                 postings: dict[str, list[tuple[int, int]]], k1: float, b: float):
        if k1 <= 0 or not 0 <= b <= 1:
            raise ValueError(f"invalid BM25 parameters k1={k1} b={b}")
        self.passages = passages
        self.doc_lengths = doc_lengths
        self.postings = postings
        self.k1 = k1
        self.b = b
        self.N = len(passages)
        self.avgdl = sum(doc_lengths) / self.N if self.N else 0.0

    def search(self, query: str, top_k: int = DEFAULT_TOP_K, step: int = 0) -> list[Chunk]:
        return search(self, query, top_k, step)

    def term_postings(self, term: str) -> list[tuple[int, int]]:
        return self.postings.get(term, [])

    def save(self, path: str | Path) -> None:
        Path(path).write_bytes(dump_index(self))

    @classmethod
    def load(cls, path: str | Path) -> "Bm25Index":
        return load_index(Path(path).read_bytes())


def build_index(passages: Iterable[Passage], k1: float = DEFAULT_K1, b: float = DEFAULT_B) -> Bm25Index:
    passages = list(passages)
    if not passages:
        raise EmptyCorpus("cannot index an empty passage list")
    postings: dict[str, list[tuple[int, int]]] = {}
    lengths = []
    for ordinal, p in enumerate(passages):
        terms = tokenize(p.text)
        lengths.append(len(p.text.split()))
        counts: dict[str, int] = {}
        for t in terms:
            counts[t] = counts.get(t, 0) + 1
        for t, tf in counts.items():
            postings.setdefault(t, []).append((ordinal, tf))
    return Bm25Index(passages, lengths, postings, k1, b)


def search(index: Bm25Index, query: str, top_k: int = DEFAULT_TOP_K, step: int = 0) -> list[Chunk]:
    """Rank passages for ``query``; ties break on passage id so the order is total.

    Repeated query terms contribute once per occurrence. Zero-score passages
    are never returned.
    """
    if top_k < 1:
        raise ValueError("top_k must be >= 1")
    scores: dict[int, float] = {}
    k1, b, avgdl = index.k1, index.b, index.avgdl
    for term in tokenize(query):
        plist = index.postings.get(term)
        if not plist:
            continue
        w = idf(index.N, len(plist))
        for ordinal, tf in plist:
            norm = k1 * (1 - b + b * index.doc_lengths[ordinal] / avgdl)
            scores[ordinal] = scores.get(ordinal, 0.0) + w * tf * (k1 + 1) / (tf + norm)
    ranked = sorted(
        ((s, index.passages[o].passage_id, o) for o, s in scores.items() if s > 0),
        key=lambda x: (-x[0], x[1]),
    )[:top_k]
    return [
        Chunk(pid, index.passages[o].title, index.passages[o].text, rank, s, step)
        for rank, (s, pid, o) in enumerate(ranked, 1)
    ]


# --- persistence -----------------------------------------------------------
# Little-endian layout:
#   b"ABIX" | u8 version
#   params:   f64 k1 | f64 b
#   doc table: u32 N, then N x (str passage_id, str title, str text, u32 length)
#   postings: u32 T, then T x (str term, u32 n, n x (u32 ordinal, u32 tf))
# str = u32 byte length + UTF-8 bytes. Terms are written in sorted order.

MAGIC = b"ABIX"
FORMAT_VERSION = 1


def _put_str(buf: io.BytesIO, s: str) -> None:
    raw = s.encode("utf-8")
    buf.write(struct.pack("<I", len(raw)))
    buf.write(raw)


def dump_index(index: Bm25Index) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<B", FORMAT_VERSION))
    buf.write(struct.pack("<dd", index.k1, index.b))
    buf.write(struct.pack("<I", index.N))
    for p, dl in zip(index.passages, index.doc_lengths):
        _put_str(buf, p.passage_id)
        _put_str(buf, p.title)
        _put_str(buf, p.text)
        buf.write(struct.pack("<I", dl))
    buf.write(struct.pack("<I", len(index.postings)))
    for term in sorted(index.postings):
        plist = index.postings[term]
        _put_str(buf, term)
        buf.write(struct.pack("<I", len(plist)))
        for ordinal, tf in plist:
            buf.write(struct.pack("<II", ordinal, tf))
    return buf.getvalue()


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, fmt: str):
        size = struct.calcsize(fmt)
        if self.pos + size > len(self.data):
            raise IndexFormatError("truncated index file")
        vals = struct.unpack_from(fmt, self.data, self.pos)
        self.pos += size
        return vals

    def string(self) -> str:
        (n,) = self.take("<I")
        if self.pos + n > len(self.data):
            raise IndexFormatError("truncated index file")
        raw = self.data[self.pos:self.pos + n]
        self.pos += n
        try:
            return raw.decode("utf-8")
        except UnicodeDecodeError as e:
            raise IndexFormatError(f"bad string at offset {self.pos - n}") from e


def load_index(data: bytes) -> Bm25Index:
    if data[:4] != MAGIC:
        raise IndexFormatError("not an index file (bad magic)")
    r = _Reader(data)
    r.pos = 4
    (version,) = r.take("<B")
    if version != FORMAT_VERSION:
        raise IndexFormatError(f"unsupported index format version {version}")
    k1, b = r.take("<dd")
    (n,) = r.take("<I")
    passages, lengths = [], []
    for _ in range(n):
        pid, title, text = r.string(), r.string(), r.string()
        (dl,) = r.take("<I")
        passages.append(Passage(pid, title, text))
        lengths.append(dl)
    (n_terms,) = r.take("<I")
    postings = {}
    for _ in range(n_terms):
        term = r.string()
        (cnt,) = r.take("<I")
        plist = []
        for _ in range(cnt):
            ordinal, tf = r.take("<II")
            if ordinal >= n:
                raise IndexFormatError(f"posting for {term!r} points past the doc table")
            plist.append((ordinal, tf))
        postings[term] = plist
    if r.pos != len(data):
        raise IndexFormatError("trailing bytes after postings")
    if not passages:
        raise IndexFormatError("index has no passages")
    return Bm25Index(passages, lengths, postings, k1, b)
