"""Question-relevant image regions from gradient-weighted cross-attention.

An image-grounded text encoder (ITE) scores how well a question matches an
image. Its cross-attention ``W`` (heads x question tokens x patches) is
weighted element-wise by the clamped gradient of the match score and reduced
to one relevance value per patch; regions are then sampled from that
relevance.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Protocol, runtime_checkable

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from ._hashing import derive_seed, file_checksum
from .validation import check_count, check_samples

CLAMP_MODES = ("positive", "literal_min")
ROW_SUM_TOL = 1e-6


@dataclass
class ITEOutput:
    attention: np.ndarray  # (H, L, M), rows are distributions over patches
    gradient: np.ndarray  # d sim / d attention, same shape
    sim: float

    @property
    def n_heads(self):
        return self.attention.shape[0]

    @property
    def n_tokens(self):
        return self.attention.shape[1]

    @property
    def n_patches(self):
        return self.attention.shape[2]


@runtime_checkable
class ITEBackend(Protocol):
    n_patches: int

    def cross_attention(self, image_ref: str, question: str, layer: int) -> ITEOutput: ...

    def embed(self, image_ref: str, question: str) -> dict: ...


def check_attention_rows(attention: np.ndarray, tol: float = ROW_SUM_TOL) -> None:
    a = np.asarray(attention)
    if np.any(a < 0) or not np.all(np.isfinite(a)):
        raise ValueError("cross-attention has negative or non-finite entries")
    dev = np.abs(a.sum(axis=-1) - 1.0).max(initial=0.0)
    if dev > tol:
        raise ValueError(f"cross-attention rows deviate from 1 by {dev:.3g}")


def relevance_from_attention(attention, gradient, clamp_mode: str = "positive") -> np.ndarray:
    """``r_j = (1/H) sum_l sum_h clamp(dsim/dW[h,l,j]) * W[h,l,j]``.

    ``positive`` clamps with ``max(0, .)``; ``literal_min`` uses ``min(0, .)``
    which gives non-positive scores (see :meth:`RelevanceMap.sampling_weights`).
    """
    attention = np.asarray(attention, dtype=np.float64)
    gradient = np.asarray(gradient, dtype=np.float64)
    if attention.shape != gradient.shape or attention.ndim != 3:
        raise ValueError(f"attention {attention.shape} and gradient {gradient.shape} must both be (H, L, M)")
    if clamp_mode == "positive":
        g = np.maximum(gradient, 0.0)
    elif clamp_mode == "literal_min":
        g = np.minimum(gradient, 0.0)
    else:
        raise ValueError(f"clamp_mode must be one of {CLAMP_MODES}, got {clamp_mode!r}")
    h = attention.shape[0]
    return (g * attention).sum(axis=(0, 1)) / h


@dataclass
class RelevanceMap:
    r: np.ndarray
    layer: int
    clamp_mode: str = "positive"

    def __post_init__(self):
        self.r = np.asarray(self.r, dtype=np.float64)
        if self.r.ndim != 1 or not np.all(np.isfinite(self.r)):
            raise ValueError("relevance must be a finite 1-d vector")

    @property
    def n_patches(self) -> int:
        return int(self.r.shape[0])

    def sampling_weights(self) -> np.ndarray:
        w = -self.r if self.clamp_mode == "literal_min" else self.r
        return np.maximum(w, 0.0)

    def stats(self) -> dict:
        r = self.r
        return {
            "min": float(r.min(initial=0.0)),
            "max": float(r.max(initial=0.0)),
            "mean": float(r.mean()) if r.size else 0.0,
            "sum": float(r.sum()),
            "nonzero": int(np.count_nonzero(r)),
        }


@dataclass
class RegionSet:
    # Each region is a tuple of K distinct patch indices in draw order.
    regions: list
    seed: int
    K: int
    m: int
    n_patches: int = field(default=0)

    def __post_init__(self):
        if len(self.regions) != self.m:
            raise ValueError(f"expected {self.m} regions, got {len(self.regions)}")
        for reg in self.regions:
            if len(reg) != self.K or len(set(reg)) != self.K:
                raise ValueError(f"region {reg} does not hold {self.K} distinct patches")
            if self.n_patches and any(not 0 <= p < self.n_patches for p in reg):
                raise ValueError(f"region {reg} has indices outside [0, {self.n_patches})")

    def sorted_regions(self) -> list:
        return [tuple(sorted(r)) for r in self.regions]

    def to_dict(self) -> dict:
        return {"regions": [list(r) for r in self.regions], "seed": self.seed, "K": self.K, "m": self.m, "n_patches": self.n_patches}

    @classmethod
    def from_dict(cls, d: dict) -> "RegionSet":
        return cls(regions=[tuple(r) for r in d["regions"]], seed=d["seed"], K=d["K"], m=d["m"], n_patches=d.get("n_patches", 0))


def compute_relevance(backend: ITEBackend, image_ref: str, question: str, layer: int = 6, clamp_mode: str = "positive") -> RelevanceMap:
    if not question or not question.strip():
        raise ValueError("question must be non-empty")
    if clamp_mode not in CLAMP_MODES:
        raise ValueError(f"clamp_mode must be one of {CLAMP_MODES}, got {clamp_mode!r}")
    out = backend.cross_attention(image_ref, question, layer)
    check_attention_rows(out.attention)
    r = relevance_from_attention(out.attention, out.gradient, clamp_mode)
    return RelevanceMap(r=r, layer=layer, clamp_mode=clamp_mode)


def draw_region(weights: np.ndarray, K: int, rng: np.random.Generator) -> tuple:
    """K patches without replacement, each draw proportional to the remaining mass.

    Once the remaining mass is zero the rest are drawn uniformly over unselected patches.
    """
    w = np.array(weights, dtype=np.float64)
    M = w.shape[0]
    available = np.ones(M, dtype=bool)
    picks = []
    for _ in range(K):
        mass = np.where(available, w, 0.0)
        total = mass.sum()
        if total > 0:
            p = mass / total
        else:
            p = available / available.sum()
        j = int(rng.choice(M, p=p))
        picks.append(j)
        available[j] = False
    return tuple(picks)


def sample_regions(relevance: RelevanceMap, K: int, m: int, seed: int) -> RegionSet:
    M = relevance.n_patches
    K = check_count(K, "K", minimum=1)
    m = check_count(m, "m", minimum=1)
    if K > M:
        raise ValueError(f"K={K} exceeds the number of patches M={M}")
    rng = np.random.default_rng(seed)
    weights = relevance.sampling_weights()
    regions = [draw_region(weights, K, rng) for _ in range(m)]
    return RegionSet(regions=regions, seed=seed, K=K, m=m, n_patches=M)


# -- synthetic backend ---------------------------------------------------------


def _word_vector(word: str, dim: int, salt) -> np.ndarray:
    return np.random.default_rng(derive_seed("word", salt, word)).standard_normal(dim)


def image_key(image_ref: str) -> str:
    """Content key of an image: file checksum, or the ref itself for ``synthetic:`` refs."""
    if image_ref.startswith("synthetic:"):
        return image_ref
    path = Path(image_ref)
    if not path.is_file():
        raise FileNotFoundError(f"image not found: {image_ref}")
    return file_checksum(path)


class SyntheticITE:
    """Small numpy ITE with an analytic match score.

    Patch features come from the image content hash and token features from a
    hashed word table, so outputs are a pure function of (image, question,
    layer, seed). The match score is

        sim = (1/H) sum_h sum_l a_l * tanh(sum_j W[h,l,j] * g_h[j])

    with ``g_h = V_f @ W_value_h @ u_h``, which gives a closed-form gradient
    with respect to the attention itself.
    """

    def __init__(self, n_patches=64, n_heads=2, dim_v=16, dim_q=16, seed=0):
        self.n_patches = n_patches
        self.n_heads = n_heads
        self.dim_v = dim_v
        self.dim_q = dim_q
        self.seed = seed
        self.backend_id = f"synthetic-ite-{n_patches}x{n_heads}"

    def _layer_params(self, layer):
        rng = np.random.default_rng(derive_seed("ite-layer", self.seed, layer))
        H, dv, dq = self.n_heads, self.dim_v, self.dim_q
        return {
            "w_query": rng.standard_normal((H, dq, dq)) / np.sqrt(dq),
            "w_key": rng.standard_normal((H, dv, dq)) / np.sqrt(dv),
            "w_value": rng.standard_normal((H, dv, dq)) / np.sqrt(dv),
            "u": rng.standard_normal((H, dq)),
        }

    def patch_features(self, image_ref: str, layer: int = 0) -> np.ndarray:
        rng = np.random.default_rng(derive_seed("patches", self.seed, image_key(image_ref), layer))
        return rng.standard_normal((self.n_patches, self.dim_v))

    def question_features(self, question: str, layer: int = 0) -> np.ndarray:
        words = question.lower().split() or ["<empty>"]
        return np.stack([_word_vector(w, self.dim_q, (self.seed, layer)) for w in words])

    def token_weights(self, n_tokens: int) -> np.ndarray:
        rng = np.random.default_rng(derive_seed("token-weights", self.seed, n_tokens))
        return rng.uniform(0.5, 1.5, size=n_tokens)

    @staticmethod
    def attention_from_features(q_feat, v_feat, w_query, w_key) -> np.ndarray:
        """softmax(Q Wq (V Wk)^T / sqrt(Dq)) per head -> (H, L, M)."""
        dq = w_query.shape[-1]
        q = np.einsum("ld,hde->hle", q_feat, w_query)
        k = np.einsum("md,hde->hme", v_feat, w_key)
        logits = np.einsum("hle,hme->hlm", q, k) / np.sqrt(dq)
        logits -= logits.max(axis=-1, keepdims=True)
        e = np.exp(logits)
        return e / e.sum(axis=-1, keepdims=True)

    def score_vectors(self, v_feat, params) -> np.ndarray:
        return np.einsum("md,hde,he->hm", v_feat, params["w_value"], params["u"])

    def sim_from_attention(self, attention, g, a) -> float:
        z = np.einsum("hlm,hm->hl", attention, g)
        return float((a[None, :] * np.tanh(z)).sum() / attention.shape[0])

    def grad_from_attention(self, attention, g, a) -> np.ndarray:
        z = np.einsum("hlm,hm->hl", attention, g)
        coeff = a[None, :] * (1.0 - np.tanh(z) ** 2) / attention.shape[0]
        return coeff[:, :, None] * g[:, None, :]

    def _state(self, image_ref, question, layer):
        params = self._layer_params(layer)
        v = self.patch_features(image_ref, layer)
        q = self.question_features(question, layer)
        attn = self.attention_from_features(q, v, params["w_query"], params["w_key"])
        g = self.score_vectors(v, params)
        a = self.token_weights(q.shape[0])
        return attn, g, a, v, q

    def cross_attention(self, image_ref: str, question: str, layer: int = 6) -> ITEOutput:
        attn, g, a, _, _ = self._state(image_ref, question, layer)
        return ITEOutput(attention=attn, gradient=self.grad_from_attention(attn, g, a), sim=self.sim_from_attention(attn, g, a))

    def embed(self, image_ref: str, question: str, layer: int = 6) -> dict:
        """Pooled question, image and cross-attended (fused) embeddings; all unnormalized."""
        attn, _, _, v, q = self._state(image_ref, question, layer)
        fused = np.tanh(np.einsum("hlm,md->d", attn, v) / (attn.shape[0] * attn.shape[1]))
        return {"question": q.mean(axis=0), "image": v.mean(axis=0), "fused": np.concatenate([fused, np.tanh(q.mean(axis=0))])}


# -- estimator -----------------------------------------------------------------


class RegionSelector(TransformerMixin, BaseEstimator):
    """Map samples to their ``m`` question-relevant regions of ``K`` patches.

    Stateless apart from the backend; the per-sample seed is derived from
    ``(seed, sample_id)`` so results do not depend on batch order.
    """

    def __init__(self, backend=None, K=20, m=20, layer=6, clamp_mode="positive", seed=0):
        self.backend = backend
        self.K = K
        self.m = m
        self.layer = layer
        self.clamp_mode = clamp_mode
        self.seed = seed

    def fit(self, X=None, y=None):
        check_count(self.K, "K", minimum=1)
        check_count(self.m, "m", minimum=1)
        check_count(self.layer, "layer", minimum=0)
        if self.clamp_mode not in CLAMP_MODES:
            raise ValueError(f"clamp_mode must be one of {CLAMP_MODES}, got {self.clamp_mode!r}")
        self.backend_ = self.backend if self.backend is not None else SyntheticITE(seed=self.seed)
        if self.K > self.backend_.n_patches:
            raise ValueError(f"K={self.K} exceeds backend patch count {self.backend_.n_patches}")
        return self

    def relevance(self, X) -> list[RelevanceMap]:
        check_is_fitted(self, "backend_")
        return [
            compute_relevance(self.backend_, s.image_ref, s.question, self.layer, self.clamp_mode)
            for s in check_samples(X)
        ]

    def sample_seed(self, sample_id: str) -> int:
        return derive_seed("regions", self.seed, sample_id)

    def transform(self, X) -> list[RegionSet]:
        samples = check_samples(X)
        maps = self.relevance(samples)
        return [sample_regions(r, self.K, self.m, self.sample_seed(s.sample_id)) for s, r in zip(samples, maps)]
