import hashlib
import json

import jsonschema
import numpy as np
import pytest

from egrqa.chat import ScriptedMock
from egrqa.embedding import HashEmbedder
from egrqa.errors import ContractError, StageError
from egrqa.index import VectorIndex
from egrqa.pipeline import (
    TRACE_SCHEMA,
    ExpandResult,
    McqItem,
    PipelineConfig,
    PipelineTrace,
    RetrievedChunk,
    extract_letter,
    load_template,
    parse_expand_output,
    render_direct_prompt,
    render_expand_prompt,
    render_guess_prompt,
    render_refine_prompt,
    run_item,
    run_item_direct,
)

TEMPLATE_SHA256 = {
    "expand": "565fa18367e50bc57e23244a5bd9f113ca41275e46051dec486ca6337db2326b",
    "guess": "82b774e91d0ad49a1e65d037a924fd3e74c0184a031a0f7ec5d62099d3a7129d",
    "refine": "31712e1a25ee6a35c2ede46bd035700ed2a4a23c52f4aa7d91aba36b82a01b46",
}
KNOWLEDGE_LINE = "IF THE TEXTBOOK CHAPTER DOES NOT CONTAIN THE ANSWER, GIVE THE ANSWER BASED ON YOUR KNOWLEDGE."

ITEM = McqItem(
    item_id="t1",
    stem="A 30-year-old has fever and a stiff neck. Cerebrospinal fluid shows neutrophils. What should be given first?",
    options={"A": "Ceftriaxone", "B": "Oral amoxicillin", "C": "Acyclovir", "D": "Observation"},
    gold_letter="A",
)
EXPANSION = ExpandResult("Adult with likely bacterial meningitis.", "What is the first treatment?", "raw")


def rc(i, text):
    return RetrievedChunk(chunk_id=f"c{i}", score=1.0 - i / 10, rank=i, text=text)


@pytest.mark.parametrize("name", sorted(TEMPLATE_SHA256))
def test_template_bytes_are_frozen(name):
    assert hashlib.sha256(load_template(name).encode("utf-8")).hexdigest() == TEMPLATE_SHA256[name]


def test_item_validation():
    with pytest.raises(ContractError):
        McqItem("x", "s", {"A": "a", "C": "c"})
    with pytest.raises(ContractError):
        McqItem("x", "s", {"A": "a"}, gold_letter="B")


# -- expand ------------------------------------------------------------------


def test_expand_prompt_has_markers_and_all_options():
    p = render_expand_prompt(ITEM)
    assert "Expanded context:" in p and "Direct question:" in p
    for text in ITEM.options.values():
        assert text in p
    assert ITEM.stem in p


def test_parse_expand_plain():
    r = parse_expand_output("Expanded context: X\nDirect question: Y", ITEM)
    assert (r.expanded_context, r.direct_question) == ("X", "Y")


def test_parse_expand_fallback_uses_final_sentence():
    r = parse_expand_output("blah", ITEM)
    assert r.expanded_context == "blah"
    assert r.direct_question == "What should be given first?"


# transcript shapes collected while building the mock script and from hand-written model styles
TRANSCRIPTS = [
    "**Expanded context:** X\n\n**Direct question:** Y",
    "**Expanded context:**\nX\n\n**Direct question:**\nY",
    "Expanded Context:\n  X  \nDirect Question:\nY\n",
    "## Expanded context\nX\n## Direct question\nY",
    "*Expanded context*: X\n*Direct question*: Y",
    "Preamble that repeats the template.\nExpanded context:\n\nDirect question:\n\nExpanded context: X\nDirect question: Y",
]


@pytest.mark.parametrize("raw", TRANSCRIPTS)
def test_parse_expand_markdown_variants(raw):
    r = parse_expand_output(raw, ITEM)
    assert (r.expanded_context, r.direct_question) == ("X", "Y")


def test_parse_expand_reversed_order():
    r = parse_expand_output("Direct question: Y\nExpanded context: X", ITEM)
    assert (r.expanded_context, r.direct_question) == ("X", "Y")


def test_parse_expand_empty_is_stage_error():
    with pytest.raises(StageError):
        parse_expand_output("  \n", ITEM)


# -- guess ---------------------------------------------------------------------


def test_guess_markers_once_and_rank_order():
    p = render_guess_prompt(EXPANSION, [rc(2, "SECOND passage"), rc(1, "FIRST passage")])
    assert p.count("BEGIN TEXTBOOK CHAPTER") == 1 and p.count("END OF TEXTBOOK CHAPTER") == 1
    begin, end = p.index("BEGIN TEXTBOOK CHAPTER"), p.index("END OF TEXTBOOK CHAPTER")
    first, second = p.index("FIRST passage"), p.index("SECOND passage")
    assert begin < first < second < end
    assert EXPANSION.expanded_context in p and EXPANSION.direct_question in p


def test_guess_with_no_chunks_still_has_markers():
    p = render_guess_prompt(EXPANSION, [])
    assert p.count("BEGIN TEXTBOOK CHAPTER") == 1 and p.count("END OF TEXTBOOK CHAPTER") == 1


def test_guess_budget_drops_lowest_rank_first():
    chunks = [rc(1, "a" * 3000), rc(2, "b" * 3000), rc(3, "c" * 3000)]
    full = render_guess_prompt(EXPANSION, chunks)
    budget = len(full) - 1000
    p = render_guess_prompt(EXPANSION, chunks, budget=budget)
    assert len(p) <= budget
    assert "a" * 3000 in p and "b" * 3000 in p and "c" * 3000 not in p


def test_guess_prompt_does_not_reexpand_placeholders():
    tricky = ExpandResult("mentions {context} literally", "and {question}?", "raw")
    p = render_guess_prompt(tricky, [rc(1, "CHUNK")])
    assert "mentions {context} literally" in p and p.count("CHUNK") == 1


# -- refine ---------------------------------------------------------------------


def test_refine_contains_instruction_options_and_guess():
    p = render_refine_prompt(EXPANSION, [rc(1, "chapter text")], "Give ceftriaxone now.", ITEM)
    assert KNOWLEDGE_LINE in p
    for letter, text in ITEM.options.items():
        assert f"{letter}) {text}" in p
    assert "Give ceftriaxone now." in p and "chapter text" in p


def test_refine_without_chapter():
    p = render_refine_prompt(EXPANSION, [rc(1, "chapter text")], "g", ITEM, include_chapter=False)
    assert "chapter text" not in p


def test_refine_needs_guess():
    with pytest.raises(ContractError):
        render_refine_prompt(EXPANSION, [], "", ITEM)


# -- letter extraction -------------------------------------------------------


@pytest.mark.parametrize(
    "output, expected",
    [
        ("The best answer is (B) because...", "B"),
        ("B", "B"),
        ("c", "C"),
        ("Answer: D", "D"),
        ("answer is A", "A"),
        ("I choose option C.", "C"),
        ("D. Observation is reasonable", "D"),
        ("A) Ceftriaxone", "A"),
        ("Start ceftriaxone immediately.", "A"),
        # "I" and "E" are not options here, so the first lettered hit is skipped
        ("I think (E) is wrong; the answer is B", "B"),
    ],
)
def test_extract_letter_cases(output, expected):
    assert extract_letter(output, ITEM) == (expected, False)


def test_extract_letter_option_text_rule():
    item = McqItem("m", "s", {"A": "Penicillin", "B": "Doxycycline", "C": "Ceftriaxone"})
    assert extract_letter("I would give ceftriaxone.", item) == ("C", False)


def test_extract_letter_adversarial_earliest_text_wins():
    # hand-applied cascade: no lettered pattern; "acyclovir" starts before "ceftriaxone"
    out = "Acyclovir is tempting, but ceftriaxone is the drug of choice"
    assert extract_letter(out, ITEM) == ("C", False)


def test_extract_letter_longer_option_wins_at_same_position():
    item = McqItem("m", "s", {"A": "Vitamin B", "B": "Vitamin B12 deficiency"})
    assert extract_letter("vitamin b12 deficiency explains it", item) == ("B", False)


def test_lowercase_article_is_not_a_letter():
    # "a" after "answer is" is read as an article, so the text rule decides
    assert extract_letter("the answer is a course of acyclovir", ITEM) == ("C", False)


def test_extract_letter_abstains():
    assert extract_letter("I am not sure about this one", ITEM) == (None, True)


# -- end to end ----------------------------------------------------------------


def small_index(texts, dim=32):
    emb = HashEmbedder(dim)
    vecs = np.vstack([v.values for v in emb.embed_batch(texts)])
    return VectorIndex(dim=dim, vectors=vecs, chunk_ids=tuple(f"c{i}" for i in range(len(texts))), texts=tuple(texts)), emb


EXPAND_REPLY = "Expanded context: An adult with bacterial meningitis findings.\nDirect question: What drug comes first?"


def stage_mock(guess="g", refine="A"):
    # the refine prompt also holds the chapter and expansion markers, so it is matched first
    return ScriptedMock([("THINK STEP BY STEP", refine), ("BEGIN TEXTBOOK", guess), ("Expanded context:", EXPAND_REPLY)])


def test_run_item_scripted_three_replies():
    index, emb = small_index(["meningitis needs prompt antibiotics", "kidney text", "heart text"])
    mock = ScriptedMock(
        [("Expanded context:", EXPAND_REPLY), ("BEGIN TEXTBOOK CHAPTER", "Empiric antibiotics now."), ("THINK STEP BY STEP", "Answer: A")],
        strict=True,
    )
    t = run_item(ITEM, index, emb, mock, PipelineConfig(k=2))
    assert t.error is None and t.predicted_letter == "A" and not t.abstained
    assert "Expanded context:" in t.expand_prompt
    assert "BEGIN TEXTBOOK CHAPTER" in t.guess_prompt
    assert KNOWLEDGE_LINE in t.refine_prompt
    assert t.retrieval_query == "An adult with bacterial meningitis findings.\nWhat drug comes first?"
    assert [r.rank for r in t.retrieved] == [1, 2] and t.guess_chunks_used == 2
    assert [c.user_text for c in mock.calls] == [t.expand_prompt, t.guess_prompt, t.refine_prompt]
    assert all(c.temperature == 0.0 for c in mock.calls)
    assert set(t.timings_ms) == {"expand", "retrieve", "guess", "refine"}


def test_stage_ordering_invariant():
    index, emb = small_index(["meningitis needs prompt antibiotics"])
    mock = stage_mock("antibiotics", "(A)")
    t = run_item(ITEM, index, emb, mock)
    for text in ITEM.options.values():
        assert text not in t.guess_prompt
        assert text in t.refine_prompt
        assert text in t.expand_prompt
    assert t.warnings == []
    assert t.predicted_letter == "A"


def test_option_leak_into_guess_prompt_is_warned():
    index, emb = small_index(["Ceftriaxone is first line"])
    mock = stage_mock()
    t = run_item(ITEM, index, emb, mock)
    assert any("option text for A" in w for w in t.warnings)


def test_empty_index_runs_with_empty_chapter_and_warns():
    index = VectorIndex(dim=8, vectors=np.zeros((0, 8)), chunk_ids=())
    mock = stage_mock()
    t = run_item(ITEM, index, HashEmbedder(8), mock)
    assert t.retrieved == [] and t.predicted_letter == "A"
    assert "BEGIN TEXTBOOK CHAPTER" in t.guess_prompt
    assert any("no chunks retrieved" in w for w in t.warnings)


def test_stem_retrieval_query_option():
    index, emb = small_index(["x"])
    mock = stage_mock()
    t = run_item(ITEM, index, emb, mock, PipelineConfig(retrieval_query="stem"))
    assert t.retrieval_query == ITEM.stem


def test_backend_failure_keeps_completed_stages():
    index, emb = small_index(["x"])
    mock = ScriptedMock([("Expanded context:", EXPAND_REPLY), ("BEGIN TEXTBOOK", "g")], strict=True)
    t = run_item(ITEM, index, emb, mock)
    assert t.error and t.error.startswith("ScriptMismatchError")
    assert t.guess_text == "g" and t.expand is not None
    assert t.abstained and t.predicted_letter is None
    assert t.refine_output == ""


def test_excluded_item_is_rejected():
    item = McqItem("x", "s", {"A": "a"}, excluded=True, exclusion_reason="image-based")
    with pytest.raises(ContractError):
        run_item_direct(item, ScriptedMock([], default="A"))


@pytest.mark.parametrize(
    "reply, letter, abstained",
    [("B", "B", False), ("I would just watch and wait: observation.", "D", False), ("The weather is nice.", None, True)],
)
def test_run_item_direct(reply, letter, abstained):
    mock = ScriptedMock([("Answer with the single letter", reply)])
    t = run_item_direct(ITEM, mock)
    assert (t.predicted_letter, t.abstained) == (letter, abstained)
    assert t.refine_prompt == render_direct_prompt(ITEM)
    assert t.refine_prompt.endswith("Answer with the single letter of the best option.")
    assert t.strategy == "direct" and t.guess_prompt == ""


def test_trace_validates_and_round_trips():
    index, emb = small_index(["meningitis"])
    mock = stage_mock()
    t = run_item(ITEM, index, emb, mock)
    d = json.loads(json.dumps(t.to_dict()))
    jsonschema.validate(d, TRACE_SCHEMA)
    assert PipelineTrace.from_dict(d) == t
    jsonschema.validate(run_item_direct(ITEM, ScriptedMock([], default="B")).to_dict(), TRACE_SCHEMA)


def test_record_timings_off_gives_zero_timings():
    t = run_item_direct(ITEM, ScriptedMock([], default="B"), PipelineConfig(strategy="direct", record_timings=False))
    assert t.timings_ms == {"direct": 0.0}
