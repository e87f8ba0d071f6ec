"""Similar-sample retrieval over the training split.

Strategies:

``fused``
    cosine similarity of the ITE's cross-attended (multimodal) embedding.
``ques_img``
    mean of the question-embedding cosine and the image-embedding cosine.
``rand``
    uniform draw without replacement, seeded by ``(seed, query id)``.
"""
from __future__ import annotations

import base64
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from ._hashing import derive_seed
from .data_io import Sample
from .validation import check_count, check_samples

STRATEGIES = ("fused", "ques_img", "rand")
TIE_DECIMALS = 12
FEATURE_VERSION = "fused=ite-crossattn-pooled/v1;ques_img=mean-cos/v1"


def _unit(v) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64).ravel()
    n = np.linalg.norm(v)
    if n == 0 or not np.isfinite(n):
        raise ValueError("cannot normalize a zero or non-finite embedding")
    return v / n


def encode_feature(v: np.ndarray) -> str:
    return base64.b64encode(np.asarray(v, dtype="<f4").tobytes()).decode("ascii")


def decode_feature(s: str) -> np.ndarray:
    return np.frombuffer(base64.b64decode(s), dtype="<f4").astype(np.float64)


@dataclass
class Exemplar:
    sample_id: str
    question: str
    answer: str
    captions: list = field(default_factory=list)
    feature: np.ndarray | None = None


def strategy_feature(embedding: Mapping[str, np.ndarray], strategy: str) -> np.ndarray | None:
    if strategy == "fused":
        return _unit(embedding["fused"])
    if strategy == "ques_img":
        # Dot product of these equals the mean of the two per-modality cosines.
        return _unit(np.concatenate([_unit(embedding["question"]), _unit(embedding["image"])]))
    if strategy == "rand":
        return None
    raise ValueError(f"unknown strategy {strategy!r}; expected one of {STRATEGIES}")


def cosine_scores(query_feature: np.ndarray, features: np.ndarray) -> np.ndarray:
    """Cosine of one unit query against unit rows."""
    return features @ query_feature


class ExemplarIndex(BaseEstimator):
    """Index the training split; ``select_similar`` returns N neighbours per query.

    ``embedder`` must provide ``embed(image_ref, question) -> dict`` with keys
    ``question``, ``image`` and ``fused`` (see :class:`~gerea.region_selector.SyntheticITE`).
    """

    def __init__(self, strategy="fused", embedder=None, seed=0, embedder_id=None):
        self.strategy = strategy
        self.embedder = embedder
        self.seed = seed
        self.embedder_id = embedder_id

    def fit(self, X, y=None, captions: Mapping[str, Sequence[str]] | None = None):
        """``X``: training samples. ``captions``: sample id -> caption texts."""
        if self.strategy not in STRATEGIES:
            raise ValueError(f"unknown strategy {self.strategy!r}; expected one of {STRATEGIES}")
        samples = check_samples(X, require_answers=True)
        captions = captions or {}
        self.missing_captions_ = sorted(s.sample_id for s in samples if s.sample_id not in captions)
        if self.strategy != "rand" and self.embedder is None:
            raise ValueError(f"strategy {self.strategy!r} needs an embedder")
        entries = []
        for s in samples:
            feat = None
            if self.strategy != "rand":
                if s.image_missing:
                    raise FileNotFoundError(f"image missing for training sample {s.sample_id}: {s.image_ref}")
                feat = strategy_feature(self.embedder.embed(s.image_ref, s.question), self.strategy)
            entries.append(Exemplar(s.sample_id, s.question, s.answer, list(captions.get(s.sample_id, [])), feat))
        self._set_entries(entries)
        return self

    def _set_entries(self, entries):
        entries = sorted(entries, key=lambda e: e.sample_id)
        ids = [e.sample_id for e in entries]
        if len(set(ids)) != len(ids):
            raise ValueError("duplicate sample ids in exemplar index")
        self.entries_ = entries
        self.ids_ = np.array(ids, dtype=object)
        self._pos = {sid: i for i, sid in enumerate(ids)}
        if self.strategy != "rand" and entries:
            self.features_ = np.stack([e.feature for e in entries])
        else:
            self.features_ = None

    def __len__(self):
        check_is_fitted(self, "entries_")
        return len(self.entries_)

    def query_feature(self, query: Sample) -> np.ndarray | None:
        if self.strategy == "rand":
            return None
        if query.sample_id in self._pos:
            return self.entries_[self._pos[query.sample_id]].feature
        if self.embedder is None:
            raise ValueError(f"query {query.sample_id} is not indexed and no embedder is set")
        return strategy_feature(self.embedder.embed(query.image_ref, query.question), self.strategy)

    def select_similar(self, query: Sample, N: int, seed: int | None = None) -> list[Exemplar]:
        """Top-N neighbours by similarity (ties within 1e-12 by ascending id), never the query itself."""
        check_is_fitted(self, "entries_")
        N = check_count(N, "N", minimum=0)
        pool = len(self.entries_) - (1 if query.sample_id in self._pos else 0)
        if N > pool:
            raise ValueError(f"N={N} exceeds the {pool} available exemplars")
        if N == 0:
            return []
        keep = np.ones(len(self.entries_), dtype=bool)
        if query.sample_id in self._pos:
            keep[self._pos[query.sample_id]] = False
        candidates = np.flatnonzero(keep)
        if self.strategy == "rand":
            s = self.seed if seed is None else seed
            rng = np.random.default_rng(derive_seed("exemplar-rand", s, query.sample_id))
            picks = rng.choice(candidates, size=N, replace=False)
            return [self.entries_[i] for i in picks]
        # Round so that exactly tied vectors do not differ by float noise.
        sims = np.round(cosine_scores(self.query_feature(query), self.features_[candidates]), TIE_DECIMALS)
        # lexsort: last key is primary; candidates are already in ascending id order.
        order = np.lexsort((np.arange(len(candidates)), -sims))[:N]
        return [self.entries_[candidates[i]] for i in order]

    def kneighbors(self, X, n_neighbors=10):
        """sklearn-style batch form: list of neighbour-id lists."""
        return [[e.sample_id for e in self.select_similar(q, n_neighbors)] for q in check_samples(X)]

    # -- persistence -----------------------------------------------------------

    def to_records(self) -> list[dict]:
        check_is_fitted(self, "entries_")
        return [
            {
                "sample_id": e.sample_id,
                "strategy": self.strategy,
                "feature": encode_feature(e.feature) if e.feature is not None else None,
                "answer": e.answer,
                "question": e.question,
            }
            for e in self.entries_
        ]

    @classmethod
    def from_records(cls, records: Sequence[dict], captions: Mapping[str, Sequence[str]] | None = None, embedder=None, seed=0):
        if not records:
            raise ValueError("no exemplar records")
        strategy = records[0]["strategy"]
        idx = cls(strategy=strategy, embedder=embedder, seed=seed)
        captions = captions or {}
        entries = []
        for r in records:
            if r["strategy"] != strategy:
                raise ValueError("mixed strategies in exemplar records")
            feat = decode_feature(r["feature"]) if r.get("feature") is not None else None
            if feat is not None:
                # float32 storage loses the exact norm
                feat = _unit(feat)
            entries.append(Exemplar(r["sample_id"], r["question"], r["answer"], list(captions.get(r["sample_id"], [])), feat))
        idx._set_entries(entries)
        idx.missing_captions_ = sorted(e.sample_id for e in entries if not e.captions)
        return idx
