import json
import random

import pytest
from hypothesis import given, strategies as st

from memrag.content_filter import (
    ChunkDecision,
    Verdict,
    build_training_set,
    chunk_filter,
    cxmi_score,
    extract_sentences,
    filter_chunks,
    logprob_gain,
    pass_rates,
    sentence_filter,
    strinc_label,
)
from memrag.core import Chunk, Query
from memrag.errors import FilterParseError, TransportError, Unsupported
from memrag.llm import Gateway, LlmResponse, MockBackend, MockEntry
from oracles import strinc_brute_force

Q = Query("q1", "Where is the Eiffel Tower?")


def chunk(text, doc_id="d#0", rank=1, title="T"):
    return Chunk(doc_id, title, text, rank, 1.0)


def gw_replies(*texts):
    mock = MockBackend.replies(*texts)
    return Gateway(mock), mock


@pytest.mark.parametrize("reply, expected", [
    ('{"NLI result":"useful"}', Verdict.USEFUL),
    ('{"NLI result":"useless"}', Verdict.USELESS),
    ('Here you go: {"NLI result": "useful"} done', Verdict.USEFUL),
    ('```json\n{"NLI result":"useless"}\n```', Verdict.USELESS),
])
def test_chunk_filter_verdicts(reply, expected):
    gw, mock = gw_replies(reply)
    v = chunk_filter(Q, chunk("Paris has a tower."), gw)
    assert v.value is expected and v.raw == reply
    assert "External Knowledge: Paris has a tower.\nQuestion: Where is the Eiffel Tower?" in mock.calls[0].prompt_text


@pytest.mark.parametrize("reply", [
    "Sure! It is useful.",
    '{"NLI result":"maybe"}',
    '{"verdict":"useful"}',
    '{"NLI result":"useful","extra":1}',
    '["useful"]',
    "",
])
def test_chunk_filter_strict_parse(reply):
    gw, _ = gw_replies(reply)
    with pytest.raises(FilterParseError):
        chunk_filter(Q, chunk("x"), gw)


def test_sentence_filter_substring_validation():
    gw, _ = gw_replies("A. C.")
    p = sentence_filter(Q, chunk("A. B. C."), gw)
    assert p.sentences == ("A.", "C.")


def test_sentence_filter_drops_hallucination():
    gw, _ = gw_replies("A.\nZ.\nC.")
    assert sentence_filter(Q, chunk("A. B. C."), gw).sentences == ("A.", "C.")


def test_sentence_filter_identity():
    gw, _ = gw_replies("A. B. C.")
    assert sentence_filter(Q, chunk("A. B. C."), gw).sentences == ("A.", "B.", "C.")


def test_sentence_filter_empty_returns_none():
    gw, _ = gw_replies("Nothing relevant here.")
    assert sentence_filter(Q, chunk("A. B. C."), gw) is None


def test_extract_handles_whitespace_bullets_and_order():
    text = "The tower is  in\nParis. It opened in 1889. Gustave Eiffel built it."
    kept, dropped = extract_sentences("- Gustave Eiffel built it.\n1. The tower is in Paris.\n* Cats.", text)
    assert kept == ["The tower is  in\nParis.", "Gustave Eiffel built it."]
    assert dropped == ["Cats."]
    assert all(k in text for k in kept)


def test_extract_merges_overlapping_spans():
    text = "Alpha beta gamma delta. Epsilon."
    kept, _ = extract_sentences("Alpha beta\nbeta gamma\nEpsilon.", text)
    assert kept == ["Alpha beta gamma", "Epsilon."]


@given(st.lists(st.sampled_from(["Aa.", "Bb b.", "Cc!", "Dd?", "Ee e e."]), min_size=1, max_size=6),
       st.lists(st.sampled_from(["Aa.", "Bb b.", "Zz.", "Cc!", "q", "Ee e"]), max_size=6))
def test_extract_conservation(chunk_sents, reply_sents):
    text = " ".join(chunk_sents)
    kept, _ = extract_sentences("\n".join(reply_sents), text)
    for k in kept:
        assert k in text
    positions = [text.index(k) for k in kept]
    assert positions == sorted(positions)


def three_chunks():
    return [chunk("Alpha one. Alpha two.", "a#0", 1),
            chunk("Bravo junk text.", "b#0", 2),
            chunk("Charlie one. Charlie two.", "c#0", 3)]


def test_filter_chunks_drop_rule():
    gw, mock = gw_replies('{"NLI result":"useful"}', "Alpha two.",
                          '{"NLI result":"useless"}',
                          '{"NLI result":"useful"}', "Charlie one.")
    decisions: list[ChunkDecision] = []
    out = filter_chunks(Q, three_chunks(), gw, decisions)
    assert [p.source.doc_id for p in out] == ["a#0", "c#0"]
    assert [p.sentences for p in out] == [("Alpha two.",), ("Charlie one.",)]
    assert [d.kept for d in decisions] == [True, False, True]
    assert mock.remaining == 0
    # only the chunk-filter prompt for chunk 2 may contain its text
    assert [c.tag for c in mock.calls if "Bravo junk" in c.prompt_text] == ["chunk_filter"]


def test_filter_chunks_all_useless():
    gw, _ = gw_replies(*['{"NLI result":"useless"}'] * 3)
    assert filter_chunks(Q, three_chunks(), gw) == []


def test_filter_chunks_fail_open_on_parse_error():
    gw, mock = gw_replies("no idea", '{"NLI result":"useless"}', '{"NLI result":"useless"}')
    decisions = []
    out = filter_chunks(Q, three_chunks(), gw, decisions)
    assert len(out) == 1 and out[0].sentences == ("Alpha one.", "Alpha two.")
    assert decisions[0].error == "FilterParseError" and decisions[0].whole
    assert mock.remaining == 0  # no sentence call for the fail-open chunk


def test_filter_chunks_empty_extraction_keeps_whole():
    gw, _ = gw_replies('{"NLI result":"useful"}', "Made up.", *['{"NLI result":"useless"}'] * 2)
    decisions = []
    out = filter_chunks(Q, three_chunks(), gw, decisions)
    assert out[0].sentences == ("Alpha one.", "Alpha two.")
    assert decisions[0].whole and decisions[0].dropped_lines == ["Made up."]


def test_filter_chunks_transport_error_propagates():
    class Down:
        supports_scoring = False

        def complete(self, request):
            raise TransportError("down")

    with pytest.raises(TransportError):
        filter_chunks(Q, three_chunks(), Gateway(Down()))


# --- STRINC / CXMI ------------------------------------------------------------------------

@pytest.mark.parametrize("sentence, gold, expected", [
    ("The Eiffel Tower is in Paris.", "Paris", 1),
    ("The tower is tall.", "Paris", 0),
    ("PARIS, France", "paris", 1),
    ("Parisian food", "Paris", 0),
    ("in New York City.", "new york", 1),
    ("York, New", "new york", 0),
])
def test_strinc_label(sentence, gold, expected):
    assert strinc_label(sentence, gold) == expected


def test_strinc_matches_oracle_random():
    rng = random.Random(5)
    words = ["paris", "Paris,", "new", "York", "the", "tower", "is", "in", "a", "city."]
    for _ in range(500):
        s = " ".join(rng.choice(words) for _ in range(rng.randint(1, 10)))
        g = " ".join(rng.choice(words) for _ in range(rng.randint(1, 3)))
        assert strinc_label(s, g) == strinc_brute_force(s, g)


def scoring_gateway(pairs):
    """Matched mock: prompts containing a key return the given logprob list."""
    entries = [MockEntry("score", key, LlmResponse("", tuple(("t", x) for x in lps))) for key, lps in pairs]
    return Gateway(MockBackend(entries, mode="matched"))


def test_cxmi_definitional_difference():
    gw = scoring_gateway([("Context: S1\n", [-1.0]), ("Context: \n", [-3.0])])
    assert cxmi_score(Q, "S1", "Paris", "", gw) == 2.0


def test_cxmi_null_effect():
    gw = scoring_gateway([("Context: S1\n", [-3.0]), ("Context: \n", [-3.0])])
    assert cxmi_score(Q, "S1", "Paris", "", gw) == 0.0


def test_cxmi_harmful_sentence():
    gw = scoring_gateway([("Context: S1\n", [-4.0]), ("Context: \n", [-3.0])])
    assert cxmi_score(Q, "S1", "Paris", "", gw) == -1.0


def test_cxmi_base_context_concatenation():
    gw = scoring_gateway([("Context: base S1\n", [-0.5]), ("Context: base\n", [-2.0])])
    assert cxmi_score(Q, "S1", "Paris", "base", gw) == 1.5


def test_cxmi_antisymmetry():
    gw = scoring_gateway([("Context: X\n", [-1.25]), ("Context: Y\n", [-3.5, -0.25])])
    assert logprob_gain(Q, "X", "Y", "Paris", gw) == -logprob_gain(Q, "Y", "X", "Paris", gw)


def test_cxmi_unsupported():
    with pytest.raises(Unsupported):
        cxmi_score(Q, "S", "Paris", "", Gateway(MockBackend.replies("x")))


# --- training set ---------------------------------------------------------------------------

def test_training_strinc_targets_without_llm():
    c = chunk("The tower is in Paris. It is tall.")
    res = build_training_set([(Q, [c], "Paris")], "strinc", label_chunks=False)
    assert len(res.examples) == 1
    ex = res.examples[0]
    assert ex.kind == "sentence_filter" and ex.label == "The tower is in Paris."
    assert [r["strinc"] for r in ex.measure_meta["sentences"]] == [1, 0]
    assert ex.to_dict()["target"] == "The tower is in Paris."


def test_training_cxmi_threshold():
    c = chunk("First fact. Second fact.")
    gw = scoring_gateway([("Context: First fact.\n", [-0.1]), ("Context: Second fact.\n", [-0.9]),
                          ("Context: \n", [-1.0])])
    res = build_training_set([(Q, [c], "Paris")], "cxmi", 0.5, gw, label_chunks=False)
    ex = res.examples[0]
    assert [r["cxmi"] for r in ex.measure_meta["sentences"]] == pytest.approx([0.9, 0.1])
    assert ex.label == "First fact."
    rates = pass_rates(res.examples, [0.0, 0.5, 1.0])
    assert rates == {0.0: 1.0, 0.5: 0.5, 1.0: 0.0}


def test_training_low_signal():
    res = build_training_set([(Q, [chunk("Nothing here.")], "Paris")], "strinc", label_chunks=False)
    ex = res.examples[0]
    assert ex.label == "" and ex.measure_meta["low_signal"] is True
    assert res.counts() == {"failures": 0, "sentence_filter:low_signal": 1}


def test_training_nli_labels_and_failures():
    mock = MockBackend.replies('Because it names the city. {"NLI result":"useful"}', "garbage")
    gw = Gateway(mock)
    chunks = [chunk("The tower is in Paris."), chunk("Unrelated.", "e#0", 2)]
    res = build_training_set([(Q, chunks, "Paris")], "strinc", gateway=gw)
    kinds = [e.kind for e in res.examples]
    assert kinds == ["chunk_nli", "sentence_filter"]
    nli = res.examples[0]
    assert nli.label == "useful" and nli.measure_meta["explanation"] == "Because it names the city."
    assert json.loads(json.dumps(nli.to_dict()))["label"] == "useful"
    assert len(res.failures) == 1 and res.failures[0]["chunk_id"] == "e#0"


def test_training_cxmi_requires_scoring():
    with pytest.raises(Unsupported):
        build_training_set([(Q, [chunk("A.")], "Paris")], "cxmi", 0.0, Gateway(MockBackend.replies()))


def test_training_strinc_deterministic():
    c = [chunk("Paris is big. Lyon is not. Paris again.")]
    a = build_training_set([(Q, c, "Paris")], "strinc", label_chunks=False)
    b = build_training_set([(Q, c, "Paris")], "strinc", label_chunks=False)
    assert [e.to_dict() for e in a.examples] == [e.to_dict() for e in b.examples]
    assert a.examples[0].label == "Paris is big. Paris again."
