"""Drive a multimodal captioner over (region x prompt) pairs.

For each sample the engine produces ``m * n`` captions in region-major order
(all templates of region 0, then region 1, ...). A JSONL cache keyed by the
full generation context makes reruns free.
"""
from __future__ import annotations

import logging
import threading
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Mapping, Protocol, Sequence, runtime_checkable

import numpy as np

from ._hashing import derive_seed, stable_hash
from .data_io import Sample, append_records, read_artifact
from .exceptions import CaptionGenerationError
from .region_selector import RegionSet, image_key

log = logging.getLogger(__name__)

MAX_FAILURES = 3


@dataclass(frozen=True)
class DecodingParams:
    num_beams: int = 5
    top_p: float = 0.9
    temperature: float = 1.0
    min_len: int = 10
    max_len: int = 25
    # Beam search with nucleus sampling; the test profile switches this off.
    do_sample: bool = True

    def __post_init__(self):
        if not 0 < self.top_p <= 1:
            raise ValueError(f"top_p must be in (0, 1], got {self.top_p}")
        if self.min_len > self.max_len:
            raise ValueError(f"min_len {self.min_len} > max_len {self.max_len}")
        if self.num_beams < 1:
            raise ValueError("num_beams must be >= 1")
        if self.temperature <= 0:
            raise ValueError("temperature must be > 0")

    @classmethod
    def for_style(cls, style: str, **overrides) -> "DecodingParams":
        lengths = {"instructblip": (10, 25), "llava": (1, 32)}.get(style, (10, 25))
        return cls(**{"min_len": lengths[0], "max_len": lengths[1], **overrides})

    def deterministic(self) -> "DecodingParams":
        """Pure beam search; temperature and top_p are ignored by backends."""
        return replace(self, do_sample=False)

    def params_hash(self) -> str:
        d = asdict(self)
        if not self.do_sample:
            d["temperature"] = d["top_p"] = None
        return stable_hash(d)


@runtime_checkable
class CaptionBackend(Protocol):
    backend_id: str
    style: str

    def generate(self, image_ref: str, region: Sequence[int], prompt: str, params: DecodingParams, **context) -> str: ...


@dataclass(frozen=True)
class CaptionRecord:
    text: str
    region_index: int
    template_id: int
    backend_id: str
    region_patches: tuple = ()
    prompt: str = ""
    params_hash: str = ""

    def to_line(self, sample_id: str) -> dict:
        return {
            "sample_id": sample_id,
            "backend_id": self.backend_id,
            "region_index": self.region_index,
            "region_patches": list(self.region_patches),
            "template_id": self.template_id,
            "prompt": self.prompt,
            "caption": self.text,
            "params_hash": self.params_hash,
        }

    @classmethod
    def from_line(cls, d: dict) -> "CaptionRecord":
        return cls(
            text=d["caption"],
            region_index=d["region_index"],
            template_id=d["template_id"],
            backend_id=d["backend_id"],
            region_patches=tuple(d.get("region_patches", ())),
            prompt=d.get("prompt", ""),
            params_hash=d.get("params_hash", ""),
        )


@dataclass
class CaptionSet:
    sample_id: str
    captions: list = field(default_factory=list)
    # (region_index, template_id, attempts, message) for records that needed retries.
    errors: list = field(default_factory=list)

    def __len__(self):
        return len(self.captions)

    def texts(self) -> list[str]:
        return [c.text for c in self.captions]

    def check_complete(self, m: int, n: int) -> None:
        expected = [(r, t) for r in range(m) for t in range(1, n + 1)]
        got = [(c.region_index, c.template_id) for c in self.captions]
        if got != expected:
            raise ValueError(f"caption set for {self.sample_id} is not the region-major {m}x{n} grid")


class CaptionCache:
    """Append-only JSONL cache of generated captions.

    Thread-safe; ``flush`` writes pending entries so an interrupted run keeps
    everything generated so far.
    """

    def __init__(self, path=None):
        self.path = Path(path) if path is not None else None
        self._entries: dict[str, str] = {}
        self._pending: list[dict] = []
        self._lock = threading.Lock()
        if self.path is not None and self.path.is_file():
            for rec in read_artifact(self.path):
                self._entries[rec["key"]] = rec["caption"]

    @staticmethod
    def key(backend_id, image_checksum, question, region, template_id, params_hash) -> str:
        return stable_hash(backend_id, image_checksum, question, sorted(int(p) for p in region), template_id, params_hash, length=32)

    def get(self, key):
        with self._lock:
            return self._entries.get(key)

    def put(self, key, caption):
        with self._lock:
            if key not in self._entries:
                self._entries[key] = caption
                self._pending.append({"key": key, "caption": caption})

    def flush(self):
        with self._lock:
            if self.path is not None and self._pending:
                append_records(self.path, self._pending)
            self._pending = []

    def __len__(self):
        return len(self._entries)


def _image_checksum(image_ref: str) -> str:
    try:
        return image_key(image_ref)
    except FileNotFoundError:
        return f"missing:{image_ref}"


def generate_captions(
    sample: Sample,
    regions: RegionSet,
    prompts: Sequence[str],
    backend: CaptionBackend,
    params: DecodingParams,
    cache: CaptionCache | None = None,
) -> CaptionSet:
    """``len(regions) * len(prompts)`` captions, region-major, template ids from 1.

    A record that fails more than ``MAX_FAILURES`` times (exception or blank
    text) is collected; if any exist a :class:`CaptionGenerationError` lists them.
    """
    if not prompts:
        raise ValueError("need at least one prompt")
    checksum = _image_checksum(sample.image_ref)
    phash = params.params_hash()
    out = CaptionSet(sample_id=sample.sample_id)
    failures = []
    for ri, region in enumerate(regions.regions):
        patches = tuple(sorted(int(p) for p in region))
        for tid, prompt in enumerate(prompts, 1):
            key = CaptionCache.key(backend.backend_id, checksum, sample.question, patches, tid, phash)
            text = cache.get(key) if cache is not None else None
            attempts = 0
            last_err = None
            while text is None and attempts <= MAX_FAILURES:
                attempts += 1
                try:
                    cand = backend.generate(
                        sample.image_ref, patches, prompt, params,
                        sample_id=sample.sample_id, region_index=ri, template_id=tid, question=sample.question,
                    )
                    cand = " ".join(str(cand).split())
                    if cand:
                        text = cand
                    else:
                        last_err = "empty caption"
                except Exception as exc:  # backend errors are retried, then reported
                    last_err = f"{type(exc).__name__}: {exc}"
            if text is None:
                failures.append((ri, tid, attempts, last_err))
                continue
            if attempts > 1:
                out.errors.append((ri, tid, attempts, last_err))
            if cache is not None and attempts:
                cache.put(key, text)
            out.captions.append(
                CaptionRecord(text=text, region_index=ri, template_id=tid, backend_id=backend.backend_id,
                              region_patches=patches, prompt=prompt, params_hash=phash)
            )
    if cache is not None:
        cache.flush()
    if failures:
        raise CaptionGenerationError(sample.sample_id, failures)
    return out


def merge_caption_sets(sets: Sequence[CaptionSet], budgets) -> CaptionSet:
    """Concatenate the first ``budget`` captions of each set, in set order.

    ``budgets`` is a sequence aligned with ``sets`` or a mapping from backend id
    to count (each set's backend id is taken from its first caption).
    """
    if not sets:
        raise ValueError("nothing to merge")
    sid = sets[0].sample_id
    if any(s.sample_id != sid for s in sets):
        raise ValueError("caption sets belong to different samples")
    if isinstance(budgets, Mapping):
        resolved = []
        for s in sets:
            bid = s.captions[0].backend_id if s.captions else None
            if bid not in budgets:
                raise ValueError(f"no budget given for backend {bid!r}")
            resolved.append((bid, budgets[bid]))
    else:
        if len(budgets) != len(sets):
            raise ValueError(f"{len(budgets)} budgets for {len(sets)} caption sets")
        resolved = [(s.captions[0].backend_id if s.captions else f"set{i}", b) for i, (s, b) in enumerate(zip(sets, budgets))]
    merged = CaptionSet(sample_id=sid)
    for s, (bid, budget) in zip(sets, resolved):
        if budget < 0 or budget > len(s):
            raise ValueError(f"budget {budget} for backend {bid!r} exceeds its {len(s)} captions")
        merged.captions.extend(s.captions[:budget])
    return merged


# -- mock backend --------------------------------------------------------------

_SYLLABLES = ("zor", "vek", "lum", "ta", "qui", "bren", "osk", "mira", "dul", "fen", "yax", "pol", "rhu", "kesh")


def _pseudo_word(rng) -> str:
    return "".join(rng.choice(_SYLLABLES, size=int(rng.integers(2, 4))))


class MockCaptionBackend:
    """Deterministic captioner for tests and the fixture pipeline.

    The caption is a pure function of ``(sample_id, sorted region, template_id,
    seed)`` built from invented pseudo-words, so no real answer can appear by
    accident. ``embed(sample_id, region_index, template_id)`` decides whether
    ``answers[sample_id]`` gets spliced into a record; ``fail(...)`` can inject
    errors. ``calls`` counts generate invocations.
    """

    def __init__(self, seed=0, style="instructblip", answers: Mapping[str, str] | None = None,
                 embed: Callable | None = None, fail: Callable | None = None, backend_id=None,
                 zero_shot_accuracy=0.5):
        self.seed = seed
        self.style = style
        self.answers = dict(answers or {})
        self.embed = embed
        self.fail = fail
        self.backend_id = backend_id or f"mock-{style}"
        self.zero_shot_accuracy = zero_shot_accuracy
        self.calls = 0
        self._lock = threading.Lock()

    @classmethod
    def embedding_fraction(cls, fraction: float, **kw) -> "MockCaptionBackend":
        """Embed the answer into a pseudo-random ``fraction`` of records."""
        seed = kw.get("seed", 0)

        def rule(sid, ri, tid):
            u = np.random.default_rng(derive_seed("embed", seed, sid, ri, tid)).random()
            return u < fraction

        return cls(embed=rule, **kw)

    def generate(self, image_ref, region, prompt, params, *, sample_id=None, region_index=None, template_id=None, **_):
        with self._lock:
            self.calls += 1
        key = sample_id if sample_id is not None else image_ref
        if self.fail is not None and self.fail(key, region_index, template_id):
            raise RuntimeError("injected backend failure")
        rng = np.random.default_rng(derive_seed("mock-caption", self.seed, key, sorted(int(p) for p in region), template_id))
        length = int(rng.integers(params.min_len, params.max_len + 1))
        words = [_pseudo_word(rng) for _ in range(max(length, 1))]
        if self.embed is not None and key in self.answers and self.embed(key, region_index, template_id):
            words[int(rng.integers(0, len(words)))] = self.answers[key]
        return " ".join(words)

    def answer(self, image_ref, question, params, *, sample_id=None, **_) -> str:
        """Zero-shot answer: the configured answer with probability ``zero_shot_accuracy``."""
        with self._lock:
            self.calls += 1
        key = sample_id if sample_id is not None else image_ref
        rng = np.random.default_rng(derive_seed("mock-zeroshot", self.seed, key))
        if key in self.answers and rng.random() < self.zero_shot_accuracy:
            return self.answers[key]
        return _pseudo_word(rng)


def mock_backend(seed: int = 0, **kw) -> MockCaptionBackend:
    return MockCaptionBackend(seed=seed, **kw)
