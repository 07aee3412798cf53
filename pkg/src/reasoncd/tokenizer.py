"""BPE tokenizer with reserved control tokens, and the embedding lookup table.

Whitespace handling: the tokenizer pre-splits text on spaces and re-attaches
each space to the following characters as the reserved boundary marker U+2581,
so a segment either starts with the marker or sits at the start of the text.
Merges never cross segment boundaries. decode() inverts the transform, giving
an exact round trip for any text over the training alphabet that contains
neither control-token literals nor the marker character itself.

Pair statistics are counted non-overlapping: a run of k identical symbols
contributes floor(k/2) occurrences of the self-pair, matching how the merge
is later applied (left-to-right greedy replacement).
"""

from __future__ import annotations

import json
from collections import Counter
from typing import Iterable, Sequence

import numpy as np

from . import tensor as T
from .tensor import ContractError, DimensionError, Tensor

SPECIAL_TOKENS = (
    "<s>", "</s>", "<unk>", "<ImgT1>", "<ImgT2>", "<CRoI>", "</CRoI>", "<CHG>",
)
BOS, EOS, UNK, IMG_T1, IMG_T2, CROI_OPEN, CROI_CLOSE, CHG = SPECIAL_TOKENS
BOUNDARY = "▁"

VOCAB_FORMAT_VERSION = 1


class Vocabulary:
    """Immutable token inventory: 8 control tokens, base alphabet, merges."""

    def __init__(self, alphabet: Sequence[str], merges: Sequence[tuple[str, str]]):
        self.alphabet = tuple(sorted(set(alphabet)))
        self.merges = tuple((l, r) for l, r in merges)
        self.specials = SPECIAL_TOKENS
        tokens: list[str] = list(SPECIAL_TOKENS)
        seen = set(tokens)
        for ch in self.alphabet:
            if ch not in seen:
                tokens.append(ch)
                seen.add(ch)
        for l, r in self.merges:
            tok = l + r
            if tok not in seen:
                tokens.append(tok)
                seen.add(tok)
        self.id_to_token: tuple[str, ...] = tuple(tokens)
        self.token_to_id: dict[str, int] = {t: i for i, t in enumerate(tokens)}
        self._alpha_set = set(self.alphabet)

    def __len__(self) -> int:
        return len(self.id_to_token)

    @property
    def size(self) -> int:
        return len(self.id_to_token)

    @property
    def learned_size(self) -> int:
        return len(self.id_to_token) - len(SPECIAL_TOKENS)

    def special_id(self, literal: str) -> int:
        if literal not in SPECIAL_TOKENS:
            raise ContractError(f"{literal!r} is not a control token")
        return self.token_to_id[literal]

    # -- persistence --------------------------------------------------------
    def to_json(self) -> str:
        return json.dumps({
            "merges": [[l, r] for l, r in self.merges],
            "specials": list(self.specials),
            "alphabet": list(self.alphabet),
            "version": VOCAB_FORMAT_VERSION,
        }, ensure_ascii=False)

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self.to_json())

    @classmethod
    def from_json(cls, payload: str) -> "Vocabulary":
        obj = json.loads(payload)
        if obj.get("version") != VOCAB_FORMAT_VERSION:
            raise ContractError(f"unsupported vocabulary version {obj.get('version')}")
        if tuple(obj["specials"]) != SPECIAL_TOKENS:
            raise ContractError("vocabulary file disagrees on control tokens")
        return cls(obj["alphabet"], [tuple(m) for m in obj["merges"]])

    @classmethod
    def load(cls, path) -> "Vocabulary":
        with open(path, encoding="utf-8") as fh:
            return cls.from_json(fh.read())


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

def _segments(text: str) -> list[list[str]]:
    """Split into merge domains; each space starts a marker-prefixed segment."""
    segs: list[list[str]] = []
    cur: list[str] = []
    for ch in text:
        if ch == " ":
            if cur:
                segs.append(cur)
            cur = [BOUNDARY]
        else:
            cur.append(ch)
    if cur:
        segs.append(cur)
    return segs


def _pair_counts(seqs: dict) -> Counter:
    counts: Counter = Counter()
    for syms, freq in seqs.items():
        n = len(syms)
        for i in range(n - 1):
            counts[(syms[i], syms[i + 1])] += freq
        # overlap correction: identical-symbol runs count floor(k/2), not k-1
        i = 0
        while i < n:
            j = i
            while j < n and syms[j] == syms[i]:
                j += 1
            k = j - i
            if k >= 2:
                counts[(syms[i], syms[i])] -= ((k - 1) - (k // 2)) * freq
            i = j
    return counts


def _apply_merge(syms: Sequence[str], l: str, r: str) -> tuple:
    out = []
    i, n = 0, len(syms)
    merged = l + r
    while i < n:
        if i < n - 1 and syms[i] == l and syms[i + 1] == r:
            out.append(merged)
            i += 2
        else:
            out.append(syms[i])
            i += 1
    return tuple(out)


def train_bpe(corpus: Iterable[str], target_merges: int) -> Vocabulary:
    """Learn merge rules by repeatedly fusing the most frequent adjacent pair.

    Ties break to the lexicographically smallest (left, right) pair. Training
    stops early when no adjacent pair remains. Merges whose fused string would
    collide with a control-token literal are skipped.
    """
    texts = list(corpus)
    if not texts or all(t == "" for t in texts):
        raise ContractError("empty corpus")
    if target_merges < 0:
        raise ContractError("target_merges must be >= 0")

    seqs: Counter = Counter()
    alphabet: set[str] = set()
    for text in texts:
        for seg in _segments(text):
            seqs[tuple(seg)] += 1
            alphabet.update(seg)

    blocked = set(SPECIAL_TOKENS)
    merges: list[tuple[str, str]] = []
    work = dict(seqs)
    for _ in range(target_merges):
        counts = _pair_counts(work)
        live = {pair: c for pair, c in counts.items()
                if c > 0 and pair[0] + pair[1] not in blocked}
        if not live:
            break
        top = max(live.values())
        best = min(pair for pair, c in live.items() if c == top)
        merges.append(best)
        nxt: Counter = Counter()
        for syms, freq in work.items():
            nxt[_apply_merge(syms, *best)] += freq
        work = dict(nxt)
    return Vocabulary(alphabet, merges)


# ---------------------------------------------------------------------------
# tokenize / decode
# ---------------------------------------------------------------------------

def _split_on_specials(text: str) -> list[tuple[bool, str]]:
    """Chunk text into (is_special, piece) with greedy literal matching."""
    literals = sorted(SPECIAL_TOKENS, key=len, reverse=True)
    out: list[tuple[bool, str]] = []
    plain_start = 0
    i = 0
    while i < len(text):
        hit = next((s for s in literals if text.startswith(s, i)), None)
        if hit is not None:
            if i > plain_start:
                out.append((False, text[plain_start:i]))
            out.append((True, hit))
            i += len(hit)
            plain_start = i
        else:
            i += 1
    if plain_start < len(text):
        out.append((False, text[plain_start:]))
    return out


def tokenize(text: str, vocab: Vocabulary) -> list[int]:
    """Segment text into token ids; control-token literals stay atomic and
    characters outside the training alphabet become the unknown marker."""
    ids: list[int] = []
    unk_id = vocab.token_to_id[UNK]
    for is_special, piece in _split_on_specials(text):
        if is_special:
            ids.append(vocab.token_to_id[piece])
            continue
        for seg in _segments(piece):
            syms: list[str] = [c if c in vocab._alpha_set else UNK for c in seg]
            for l, r in vocab.merges:
                syms = list(_apply_merge(syms, l, r))
            ids.extend(vocab.token_to_id.get(s, unk_id) for s in syms)
    return ids


def decode(ids: Sequence[int], vocab: Vocabulary) -> str:
    toks = []
    for i in ids:
        if not 0 <= i < len(vocab.id_to_token):
            raise DimensionError(f"token id {i} out of range")
        toks.append(vocab.id_to_token[i])
    return "".join(toks).replace(BOUNDARY, " ")


def tokens_of(ids: Sequence[int], vocab: Vocabulary) -> list[str]:
    return [vocab.id_to_token[i] for i in ids]


# ---------------------------------------------------------------------------
# embedding
# ---------------------------------------------------------------------------

def one_hot(ids: Sequence[int], v: int) -> Tensor:
    arr = np.asarray(list(ids), dtype=np.int64)
    if arr.size and (arr.min() < 0 or arr.max() >= v):
        raise DimensionError("token id out of range for one_hot")
    out = np.zeros((arr.shape[0], v), dtype=np.float32)
    if arr.size:
        out[np.arange(arr.shape[0]), arr] = 1.0
    return Tensor(out)


def embed(ids: Sequence[int], elt: Tensor) -> Tensor:
    """Rows of the lookup table; defined as one_hot(ids) @ ELT, computed as a
    gather (bitwise identical, cheaper)."""
    arr = np.asarray(list(ids), dtype=np.int64)
    return T.embedding(elt, arr)


def init_embedding_table(v: int, d_text: int, rng: np.random.Generator) -> np.ndarray:
    return (rng.standard_normal((v, d_text)) * 0.02).astype(np.float32)
