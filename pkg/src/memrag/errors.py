"""Exception hierarchy shared by every pipeline stage."""

from __future__ import annotations


class MemragError(Exception):
    """Base class for all package errors."""


# prompt engine
class TemplateError(MemragError):
    pass


class MissingBinding(TemplateError):
    def __init__(self, name: str):
        super().__init__(f"no binding for placeholder {{{name}}}")
        self.name = name


class UnknownPlaceholder(TemplateError):
    def __init__(self, names):
        names = sorted(names)
        super().__init__(f"bindings not used by template: {', '.join(names)}")
        self.names = names


# corpus / index
class ParseError(MemragError):
    def __init__(self, line_no: int, detail: str = ""):
        msg = f"line {line_no}: malformed record"
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)
        self.line_no = line_no


class DuplicateDocId(MemragError):
    def __init__(self, doc_id: str):
        super().__init__(f"duplicate doc id {doc_id!r}")
        self.doc_id = doc_id


class EmptyCorpus(MemragError):
    pass


class IndexFormatError(MemragError):
    pass


# llm gateway
class TransportError(MemragError):
    def __init__(self, detail: str, status: int | None = None):
        super().__init__(detail)
        self.status = status


class MockExhausted(MemragError):
    pass


class MockUnmatched(MemragError):
    pass


class Unsupported(MemragError):
    pass


# model-output parsing
class FilterParseError(MemragError):
    def __init__(self, raw: str):
        super().__init__(f"unparseable NLI verdict: {raw[:80]!r}")
        self.raw = raw


class RewriteParseError(MemragError):
    def __init__(self, raw: str):
        super().__init__("rewrite reply has no '### New Question' line")
        self.raw = raw


class DuplicateQuery(MemragError):
    def __init__(self, query: str):
        super().__init__(f"rewritten query repeats an earlier one: {query!r}")
        self.query = query


# loop
class PipelineAborted(MemragError):
    """A question could not be completed; ``partial`` holds the trace so far."""

    def __init__(self, detail: str, partial=None):
        super().__init__(detail)
        self.partial = partial


class InitFailed(PipelineAborted):
    pass


class AnswerFailed(PipelineAborted):
    pass


# evaluation
class SchemaError(MemragError):
    def __init__(self, field: str, line_no: int | None = None):
        where = f" (line {line_no})" if line_no is not None else ""
        super().__init__(f"missing or invalid field {field!r}{where}")
        self.field = field
        self.line_no = line_no


class UnknownId(MemragError):
    def __init__(self, qid: str):
        super().__init__(f"result id {qid!r} not in dataset")
        self.qid = qid
