"""Strict parsers for model replies that are supposed to be tiny JSON objects."""

from __future__ import annotations

import json

_decoder = json.JSONDecoder()


def parse_json_object(raw: str) -> tuple[dict, tuple[int, int]]:
    """Return the JSON object in ``raw`` and its character span.

    The whole reply is tried first; failing that, exactly one repair pass
    decodes from the first ``{``. Anything else raises ``ValueError``.
    """
    text = raw.strip()
    try:
        obj = json.loads(text)
    except ValueError:
        pass
    else:
        if isinstance(obj, dict):
            start = raw.index(text[0])
            return obj, (start, start + len(text))
        raise ValueError("reply is JSON but not an object")
    start = raw.find("{")
    if start < 0:
        raise ValueError("no JSON object in reply")
    obj, end = _decoder.raw_decode(raw, start)
    if not isinstance(obj, dict):
        raise ValueError("reply is JSON but not an object")
    return obj, (start, end)
