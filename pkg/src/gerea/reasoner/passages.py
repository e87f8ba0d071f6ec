"""Passage assembly for the fusion-in-decoder reader, and a word-level tokenizer."""
from __future__ import annotations

import re
from collections import Counter
from dataclasses import dataclass
from typing import Iterable, Sequence

from .._hashing import stable_hash
from ..exceptions import PassageBudgetError

PASSAGE_TEMPLATE_VERSION = "1"
QUERY_BLOCK = "question: {question} context: {caption}"
EXEMPLAR_BLOCK = " question: {question} answer: {answer} context: {caption}"


def passage_template_hash() -> str:
    return stable_hash(PASSAGE_TEMPLATE_VERSION, QUERY_BLOCK, EXEMPLAR_BLOCK)


_WORD_RE = re.compile(r"\w+(?:[-'.]\w+)*|[^\w\s]")


def tokenize_words(text: str) -> list[str]:
    return _WORD_RE.findall(text.lower())


class WordTokenizer:
    """Lowercased word/punctuation vocabulary built from training text.

    Word-internal ``-``, ``'`` and ``.`` stay inside the token so decoded
    answers like ``t-shirt`` survive a round trip.
    """

    pad_id, start_id, eos_id, unk_id = 0, 1, 2, 3
    SPECIALS = ("<pad>", "<s>", "</s>", "<unk>")

    def __init__(self, vocab: Sequence[str] | None = None):
        self.itos = list(self.SPECIALS) + [t for t in (vocab or []) if t not in self.SPECIALS]
        self.stoi = {t: i for i, t in enumerate(self.itos)}

    @classmethod
    def fit(cls, texts: Iterable[str], min_freq: int = 1) -> "WordTokenizer":
        counts = Counter()
        for t in texts:
            counts.update(tokenize_words(t))
        vocab = sorted((t for t, c in counts.items() if c >= min_freq), key=lambda t: (-counts[t], t))
        return cls(vocab)

    @property
    def vocab_size(self) -> int:
        return len(self.itos)

    def count(self, text: str) -> int:
        return len(tokenize_words(text))

    def encode(self, text: str, add_eos: bool = False) -> list[int]:
        ids = [self.stoi.get(t, self.unk_id) for t in tokenize_words(text)]
        return ids + [self.eos_id] if add_eos else ids

    def decode(self, ids: Iterable[int]) -> str:
        out = []
        for i in ids:
            i = int(i)
            if i == self.eos_id:
                break
            if i in (self.pad_id, self.start_id):
                continue
            out.append(self.itos[i] if 0 <= i < len(self.itos) else "<unk>")
        return " ".join(out)

    def to_dict(self) -> dict:
        return {"kind": "word", "vocab": self.itos[len(self.SPECIALS):]}

    @classmethod
    def from_dict(cls, d: dict) -> "WordTokenizer":
        return cls(d["vocab"])


class HFTokenizer:
    """Adapter over a Hugging Face tokenizer (T5 family)."""

    def __init__(self, name_or_path: str, cache_dir=None):
        from transformers import AutoTokenizer

        self.name_or_path = name_or_path
        self.tok = AutoTokenizer.from_pretrained(name_or_path, cache_dir=cache_dir)
        self.pad_id = self.tok.pad_token_id
        self.eos_id = self.tok.eos_token_id
        self.start_id = self.tok.pad_token_id
        self.unk_id = self.tok.unk_token_id

    @property
    def vocab_size(self):
        return len(self.tok)

    def count(self, text):
        return len(self.tok(text, add_special_tokens=False)["input_ids"])

    def encode(self, text, add_eos=False):
        ids = self.tok(text, add_special_tokens=False)["input_ids"]
        return ids + [self.eos_id] if add_eos else ids

    def decode(self, ids):
        ids = list(ids)
        if self.eos_id in ids:
            ids = ids[: ids.index(self.eos_id)]
        return self.tok.decode(ids, skip_special_tokens=True).strip()

    def to_dict(self):
        return {"kind": "hf", "name_or_path": self.name_or_path}


def tokenizer_from_dict(d: dict, cache_dir=None):
    if d["kind"] == "word":
        return WordTokenizer.from_dict(d)
    return HFTokenizer(d["name_or_path"], cache_dir=cache_dir)


@dataclass(frozen=True)
class ReformattedPassage:
    index: int  # 0-based position j in the caption list
    text: str
    n_tokens: int
    n_exemplars: int  # exemplar blocks kept after truncation


def _texts(captions) -> list[str]:
    if hasattr(captions, "texts"):
        return captions.texts()
    return [c if isinstance(c, str) else c.text for c in captions]


def reformat_inputs(question: str, captions, exemplars: Sequence = (), token_budget: int | None = None,
                    tokenizer=None) -> list[ReformattedPassage]:
    """One passage per query caption.

    Passage j is ``question: Q context: C_j`` followed by one block per
    exemplar with that exemplar's j-th caption (index wraps when an exemplar
    has fewer captions). Over budget, exemplar blocks are dropped from the tail;
    a query block that alone exceeds the budget is an error.
    """
    caps = _texts(captions)
    if not caps:
        raise ValueError("empty caption set")
    count = tokenizer.count if tokenizer is not None else (lambda t: len(tokenize_words(t)))
    out = []
    for j, cap in enumerate(caps):
        head = QUERY_BLOCK.format(question=question, caption=cap)
        used = count(head)
        if token_budget is not None and used > token_budget:
            raise PassageBudgetError(f"query block of passage {j} needs {used} tokens, budget is {token_budget}")
        parts = [head]
        kept = 0
        for ex in exemplars:
            ex_caps = list(ex.captions)
            ex_cap = ex_caps[j % len(ex_caps)] if ex_caps else ""
            block = EXEMPLAR_BLOCK.format(question=ex.question, answer=ex.answer, caption=ex_cap)
            cost = count(block)
            if token_budget is not None and used + cost > token_budget:
                break
            parts.append(block)
            used += cost
            kept += 1
        out.append(ReformattedPassage(index=j, text="".join(parts), n_tokens=used, n_exemplars=kept))
    return out
