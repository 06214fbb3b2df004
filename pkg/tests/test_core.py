from pathlib import Path

import pytest
from hypothesis import given, strategies as st

from memrag.core import (
    NO_REFERENCES,
    TRANSCRIBED_TEMPLATES,
    TEMPLATE_NAMES,
    Chunk,
    FilteredPassage,
    MemoryNote,
    PromptTemplate,
    Query,
    join_refs,
    load_templates,
    render_prompt,
    split_sentences,
)
from memrag.errors import MissingBinding, TemplateError, UnknownPlaceholder

GOLDEN = Path(__file__).parent / "golden"


def chunk(text, title="T", doc_id="d#0", rank=1):
    return Chunk(doc_id, title, text, rank, 1.0)


def test_render_direct_substitution():
    assert render_prompt(PromptTemplate("t", "Q: {query}"), {"query": "who?"}) == "Q: who?"


def test_render_repeated_placeholder():
    assert render_prompt(PromptTemplate("t", "{a}{a}"), {"a": "x"}) == "xx"


def test_render_missing_binding():
    with pytest.raises(MissingBinding) as e:
        render_prompt(PromptTemplate("t", "{a} {b}"), {"a": "x"})
    assert e.value.name == "b"


def test_render_unknown_binding_strict():
    t = PromptTemplate("t", "{a}")
    with pytest.raises(UnknownPlaceholder):
        render_prompt(t, {"a": "x", "zzz": "y"})
    assert render_prompt(t, {"a": "x", "zzz": "y"}, strict=False) == "x"


def test_render_escaped_braces_and_binding_with_braces():
    t = PromptTemplate("t", '{{"k":"{v}"}}')
    assert t.placeholders == {"v"}
    # braces inside a bound value are not re-interpreted
    assert render_prompt(t, {"v": "{x}"}) == '{"k":"{x}"}'


def test_stray_brace_is_a_template_error():
    with pytest.raises(TemplateError):
        PromptTemplate("t", "a { b")


def test_chunk_filter_prompt_ends_with_json_exemplar():
    t = load_templates()["chunk_filter"]
    out = render_prompt(t, {"External_Knowledge": "K", "Question": "Q"})
    assert out.endswith('{"NLI result":"xxx"}')
    assert "External Knowledge: K\nQuestion: Q\n" in out


def test_template_placeholders():
    t = load_templates()
    assert set(t) == set(TEMPLATE_NAMES)
    assert t["refiner"].placeholders == {"query", "refs", "note", "review_info", "suggestions"}
    assert t["note_compare"].placeholders == {"query", "best_note", "new_note"}
    assert t["query_rewrite"].placeholders == {"query", "note", "query_log"}
    assert t["chunk_filter"].placeholders == {"External_Knowledge", "Question"}
    assert t["sentence_filter"].placeholders == {"query", "context"}


@pytest.mark.parametrize("name", TRANSCRIBED_TEMPLATES)
def test_transcribed_templates_match_golden(name):
    t = load_templates()[name]
    rendered = render_prompt(t, {p: "{" + p + "}" for p in t.placeholders})
    golden = (GOLDEN / f"{name}.txt").read_text(encoding="utf-8")
    assert rendered + "\n" == golden


def test_prompts_dir_override(tmp_path):
    (tmp_path / "final_answer").write_text("A? {query} {note}\n")
    t = load_templates(tmp_path)
    assert t["final_answer"].body == "A? {query} {note}"
    assert t["reviewer"].body == load_templates()["reviewer"].body


@given(st.dictionaries(st.sampled_from(["a", "b"]), st.text(max_size=5), min_size=2),
       st.dictionaries(st.sampled_from(["a", "b"]), st.text(max_size=5), min_size=2))
def test_render_injective_and_pure(b1, b2):
    t = PromptTemplate("t", "<{a}|{b}>")
    assert render_prompt(t, b1) == render_prompt(t, b1)
    if b1 != b2:
        assert render_prompt(t, b1) != render_prompt(t, b2)


def test_join_refs_single():
    p = FilteredPassage(chunk("A. B."), ("A.", "B."))
    assert join_refs([p]) == "[1] T\nA. B."


def test_join_refs_empty():
    assert join_refs([]) == NO_REFERENCES == "(no references)"


def test_join_refs_two_blocks():
    p1 = FilteredPassage(chunk("A.", "T1"), ("A.",))
    p2 = FilteredPassage(chunk("B.", "T2", "e#0", 2), ("B.",))
    assert join_refs([p1, p2]) == "[1] T1\nA.\n\n[2] T2\nB."


def test_filtered_passage_rejects_foreign_sentence():
    with pytest.raises(ValueError):
        FilteredPassage(chunk("A. B."), ("Z.",))
    with pytest.raises(ValueError):
        FilteredPassage(chunk("A. B."), ())


@pytest.mark.parametrize("text, expected", [
    ("A is B. C is D.", ["A is B.", "C is D."]),
    ("One sentence", ["One sentence"]),
    ("Hi! Ok? Yes.", ["Hi!", "Ok?", "Yes."]),
    ("", []),
    ("   ", []),
    ("pi is 3.14 roughly. Next", ["pi is 3.14 roughly.", "Next"]),
    ("lower. case stays", ["lower. case stays"]),
])
def test_split_sentences(text, expected):
    assert split_sentences(text) == expected


_sentence_text = st.text(alphabet=st.sampled_from(list("aAbB .!?\n")), max_size=60)


@given(_sentence_text)
def test_split_sentences_round_trip_fixed_point(text):
    parts = split_sentences(text)
    assert split_sentences(" ".join(parts)) == parts


@given(_sentence_text)
def test_split_sentences_cover_content_in_order(text):
    parts = split_sentences(text)
    assert "".join("".join(parts).split()) == "".join(text.split())
    pos = 0
    for p in parts:
        pos = text.index(p, pos) + len(p)


def test_domain_invariants():
    with pytest.raises(ValueError):
        Query("q", "   ")
    with pytest.raises(ValueError):
        Chunk("d", "t", "x", 0, 1.0)
    note = MemoryNote("n")
    assert note.version == 0 and MemoryNote.from_dict(note.to_dict()) == note
