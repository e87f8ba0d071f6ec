"""Input validation shared by the estimators."""
from __future__ import annotations

import numbers

import numpy as np

from .data_io import Sample


def check_samples(X, *, require_answers: bool = False) -> list[Sample]:
    """Accept a sequence of :class:`Sample` or ``(sample_id, image_ref, question)`` tuples."""
    if isinstance(X, Sample):
        X = [X]
    out = []
    for i, x in enumerate(X):
        if isinstance(x, Sample):
            s = x
        elif isinstance(x, (tuple, list)) and len(x) == 3:
            s = Sample(sample_id=str(x[0]), image_ref=str(x[1]), question=str(x[2]))
        else:
            raise TypeError(f"element {i} is neither a Sample nor a (sample_id, image_ref, question) tuple")
        if not s.question.strip():
            raise ValueError(f"sample {s.sample_id} has an empty question")
        if require_answers and not s.human_answers:
            raise ValueError(f"sample {s.sample_id} has no human answers")
        out.append(s)
    return out


def check_count(value, name: str, *, minimum: int = 0, maximum: int | None = None) -> int:
    if isinstance(value, bool) or not isinstance(value, numbers.Integral):
        raise TypeError(f"{name} must be an integer, got {type(value).__name__}")
    value = int(value)
    if value < minimum or (maximum is not None and value > maximum):
        hi = "" if maximum is None else f" and <= {maximum}"
        raise ValueError(f"{name} must be >= {minimum}{hi}, got {value}")
    return value


def check_finite_array(a, name: str, *, shape=None, dtype=np.float64) -> np.ndarray:
    a = np.asarray(a, dtype=dtype)
    if shape is not None and a.shape != tuple(shape):
        raise ValueError(f"{name} has shape {a.shape}, expected {tuple(shape)}")
    if not np.all(np.isfinite(a)):
        raise ValueError(f"{name} contains non-finite values")
    return a
