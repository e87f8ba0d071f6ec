"""Seed-ensemble majority vote."""
from __future__ import annotations

from collections import Counter
from typing import Sequence

from ..metrics import normalize_answer


def vote_counts(per_seed_answers: Sequence[str]) -> dict[str, int]:
    return dict(Counter(normalize_answer(a) for a in per_seed_answers))


def ensemble_vote(per_seed_answers: Sequence[str]) -> str:
    """Most frequent normalized answer; a tie goes to the answer of the lowest seed index."""
    if not per_seed_answers:
        raise ValueError("need at least one answer to vote on")
    normed = [normalize_answer(a) for a in per_seed_answers]
    counts = Counter(normed)
    best = max(counts.values())
    # first occurrence in seed order among the tied answers
    return next(a for a in normed if counts[a] == best)
