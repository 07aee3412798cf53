"""Prompt template: determinism, structure, placeholder location."""

import pytest

from reasoncd import tokenizer as tok
from reasoncd.prompt import (PromptError, build_answer, build_prompt,
                             locate_placeholders)
from reasoncd.tokenizer import decode, tokenize, train_bpe


@pytest.fixture(scope="module")
def vocab():
    corpus = [
        build_prompt("Building").text,
        build_prompt("water area").text,
        "changes caused by heavy rainfall",
        "trees low vegetation playground non vegetated surface",
    ]
    return train_bpe(corpus, 80)


def test_template_contains_required_parts():
    p = build_prompt("Building")
    assert p.text.startswith("For the Change Detection task")
    assert p.text.endswith("Please produce the changemap for me.")
    assert p.text.count(tok.IMG_T1) == 1
    assert p.text.count(tok.IMG_T2) == 1
    assert p.text.index(tok.IMG_T1) < p.text.index(tok.IMG_T2)
    assert tok.CROI_OPEN in p.text and tok.CROI_CLOSE in p.text


def test_template_deterministic():
    assert build_prompt("water").text == build_prompt("water").text


def test_explain_variant(vocab):
    p = build_prompt("water", explain=True)
    assert p.explain
    assert p.text.endswith("and explain the change.")
    assert build_prompt("water").text != p.text
    p1, p2, (s, e) = locate_placeholders(p, vocab)
    assert p1 < p2 < s < e


def test_croi_span_holds_description(vocab):
    p = build_prompt("Building")
    _, _, (s, e) = locate_placeholders(p, vocab)
    ids = tokenize(p.text, vocab)
    assert decode(ids[s:e], vocab).strip() == "Building"


def test_croi_span_verbatim_phrase(vocab):
    phrase = "changes caused by heavy rainfall"
    p = build_prompt(phrase)
    _, _, (s, e) = locate_placeholders(p, vocab)
    ids = tokenize(p.text, vocab)
    assert decode(ids[s:e], vocab).strip() == phrase


def test_empty_description_rejected():
    with pytest.raises(PromptError):
        build_prompt("")
    with pytest.raises(PromptError):
        build_prompt("   ")


def test_special_literal_in_description_rejected():
    with pytest.raises(PromptError):
        build_prompt("sneaky <CHG> marker")


def test_placeholders_atomic_and_ordered(vocab):
    p = build_prompt("water")
    p1, p2, (s, e) = locate_placeholders(p, vocab)
    ids = tokenize(p.text, vocab)
    assert ids[p1] == vocab.special_id(tok.IMG_T1)
    assert ids[p2] == vocab.special_id(tok.IMG_T2)
    assert p1 < p2
    assert s < e


def test_duplicate_placeholder_rejected(vocab):
    from reasoncd.prompt import TaskPrompt
    base = build_prompt("water")
    doubled = TaskPrompt(text=base.text + " <ImgT1>", description="water")
    with pytest.raises(PromptError):
        locate_placeholders(doubled, vocab)


def test_positions_match_substring_scan(vocab):
    # independent oracle: walk the decoded tokens and find the placeholders
    import numpy as np
    rng = np.random.default_rng(3)
    words = ["water", "trees", "building", "playground", "surface", "low",
             "vegetation", "area", "new", "old"]
    for _ in range(50):
        descr = " ".join(rng.choice(words, size=rng.integers(1, 4)))
        p = build_prompt(descr)
        ids = tokenize(p.text, vocab)
        p1, p2, (s, e) = locate_placeholders(p, vocab)
        scan1 = [i for i, t in enumerate(ids) if t == vocab.special_id(tok.IMG_T1)]
        scan2 = [i for i, t in enumerate(ids) if t == vocab.special_id(tok.IMG_T2)]
        assert scan1 == [p1] and scan2 == [p2]
        assert vocab.special_id(tok.CROI_OPEN) == ids[s - 1]
        assert vocab.special_id(tok.CROI_CLOSE) == ids[e]


def test_answer_templates():
    assert tok.CHG in build_answer("building")
    none = build_answer(None)
    assert tok.CHG not in none and none
