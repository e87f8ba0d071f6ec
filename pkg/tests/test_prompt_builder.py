import json

import pytest
from hypothesis import given, strategies as st

from gerea.prompt_builder import (PROMPT_CLASSES, auxiliary_prompt, backend_styles, extract_phrases, load_templates,
                                  render_prompts)

from conftest import GOLDEN

CHUNKS = json.loads((GOLDEN / "chunks.json").read_text(encoding="utf-8"))


@pytest.mark.parametrize("entry", CHUNKS, ids=[c["q"] for c in CHUNKS])
def test_chunker_matches_annotations(entry):
    got = extract_phrases(entry["q"])
    assert list(got.noun_phrases) == entry["np"]
    assert list(got.verb_phrases) == entry["vp"]


def test_ordered_follows_question_position():
    got = extract_phrases("Where does Roger Federer live?")
    assert got.ordered == ("Roger Federer", "live")
    assert got.joined() == "Roger Federer, live"


def test_duplicate_phrases_collapse():
    got = extract_phrases("Is the dog chasing another Dog?")
    assert [p.lower() for p in got.ordered].count("dog") == 1


words = st.sampled_from("what is the man holding red bus Paris why can you play tennis on a cold day of this picture kind "
                        "brand apple 3 two old made".split())


@given(st.lists(words, min_size=1, max_size=10), st.sampled_from(["?", "", "."]))
def test_phrases_are_substrings_in_order(ws, end):
    q = " ".join(ws) + end
    got = extract_phrases(q)
    pos = 0
    for p in got.ordered:
        assert p in q
        found = q.find(p, pos)
        assert found >= 0
        pos = found + 1
    assert set(got.noun_phrases) | set(got.verb_phrases) >= set(got.ordered)


@given(st.text(max_size=40))
def test_extraction_is_total_and_deterministic(q):
    assert extract_phrases(q) == extract_phrases(q)


@pytest.mark.parametrize("style", ["instructblip", "llava"])
def test_template_inventory(style):
    ts = load_templates(style)
    assert [t.template_id for t in ts] == [1, 2, 3, 4, 5, 6]
    assert [t.prompt_class for t in ts] == [PROMPT_CLASSES[0], PROMPT_CLASSES[1]] + [PROMPT_CLASSES[2]] * 2 + [PROMPT_CLASSES[3]] * 2


def test_styles_and_errors():
    assert set(backend_styles()) == {"instructblip", "llava"}
    with pytest.raises(ValueError):
        load_templates("gpt")
    with pytest.raises(ValueError):
        render_prompts("why?", n=7)


def test_braces_in_question_are_literal():
    out = render_prompts("What is {phrases}?")
    assert out[2] == "What is {phrases}?"


def test_prefix_selection():
    assert render_prompts("What is it?", n=2) == render_prompts("What is it?")[:2]


def test_auxiliary_prompts():
    assert auxiliary_prompt("generic_caption") == "a picture of"
    assert auxiliary_prompt("zero_shot", "llava").startswith("{question}")
