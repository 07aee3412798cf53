"""Task prompt construction.

The model is steered by one fixed English template: a task preamble, a
temporal clause binding the two image placeholder tokens, the change region
of interest wrapped in marker tokens, and a closing result request. Training
and inference must share the template byte-for-byte, so the wording is
version-stamped and shipped alongside checkpoints.
"""

from __future__ import annotations

from dataclasses import dataclass

from .tensor import ContractError
from . import tokenizer as tok
from .tokenizer import Vocabulary

TEMPLATE_VERSION = 1

PROMPT_TEMPLATE = (
    "For the Change Detection task, the earlier image is {imgt1} and the "
    "later image is {imgt2}. The change of interest is {open} {descr} {close}. "
    "{request}"
)

RESULT_REQUEST = "Please produce the changemap for me."
RESULT_REQUEST_EXPLAIN = "Please produce the changemap for me and explain the change."

ANSWER_TEMPLATE = "It's {chg}."
ANSWER_NO_CHANGE = "There is no such change."


class PromptError(ContractError):
    """Prompt text violates the template structure."""


@dataclass(frozen=True)
class TaskPrompt:
    text: str
    description: str
    template_version: int = TEMPLATE_VERSION
    explain: bool = False


def build_prompt(croi_description: str, explain: bool = False) -> TaskPrompt:
    """Render the fixed template around a change-of-interest description.

    explain=True swaps in the request variant that also asks for a written
    explanation; training data for explanation samples uses the same variant
    so the association is learnable.
    """
    if not croi_description or not croi_description.strip():
        raise PromptError("empty change-of-interest description")
    for literal in tok.SPECIAL_TOKENS:
        if literal in croi_description:
            raise PromptError(f"description must not embed {literal!r}")
    if tok.BOUNDARY in croi_description:
        raise PromptError("description must not contain the boundary marker")
    text = PROMPT_TEMPLATE.format(
        imgt1=tok.IMG_T1, imgt2=tok.IMG_T2, open=tok.CROI_OPEN,
        close=tok.CROI_CLOSE, descr=croi_description,
        request=RESULT_REQUEST_EXPLAIN if explain else RESULT_REQUEST)
    return TaskPrompt(text=text, description=croi_description, explain=explain)


def build_answer(category: str | None) -> str:
    """Ground-truth answer text: affirmative with the change marker token, or
    the fixed declining sentence when nothing matches the request."""
    if category is None:
        return ANSWER_NO_CHANGE
    return ANSWER_TEMPLATE.format(chg=tok.CHG)


def locate_placeholders(prompt: TaskPrompt, vocab: Vocabulary):
    """Token-level positions of the two image placeholders and the CRoI span.

    Returns (imgT1_pos, imgT2_pos, (croi_start, croi_end)) where the span is
    the half-open index range strictly between the marker tokens.
    """
    ids = tok.tokenize(prompt.text, vocab)
    t1 = vocab.special_id(tok.IMG_T1)
    t2 = vocab.special_id(tok.IMG_T2)
    op = vocab.special_id(tok.CROI_OPEN)
    cl = vocab.special_id(tok.CROI_CLOSE)
    for tid, name in ((t1, tok.IMG_T1), (t2, tok.IMG_T2), (op, tok.CROI_OPEN),
                      (cl, tok.CROI_CLOSE)):
        n = ids.count(tid)
        if n != 1:
            raise PromptError(f"expected exactly one {name}, found {n}")
    p1, p2 = ids.index(t1), ids.index(t2)
    if p1 >= p2:
        raise PromptError("earlier-image placeholder must precede the later one")
    s, e = ids.index(op) + 1, ids.index(cl)
    if e <= s:
        raise PromptError("empty change-of-interest span")
    return p1, p2, (s, e)
