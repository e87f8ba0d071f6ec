"""Visual feature streams fed to the reader next to the passages."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .._hashing import derive_seed
from ..region_selector import image_key

# (tokens, width) per encoder variant.
VISUAL_SHAPES = {
    "detr": (100, 256),
    "clip-grid": (49, 2048),
    "resnet-pooled": (512, 2048),
}
VISUAL_ENCODERS = tuple(VISUAL_SHAPES) + ("none",)


@dataclass
class VisualFeature:
    values: np.ndarray
    encoder_id: str = "detr"

    def __post_init__(self):
        if self.encoder_id not in VISUAL_SHAPES:
            raise ValueError(f"unknown visual encoder {self.encoder_id!r}; expected one of {VISUAL_ENCODERS}")
        self.values = np.asarray(self.values, dtype=np.float32)
        expected = VISUAL_SHAPES[self.encoder_id]
        if self.values.shape != expected:
            raise ValueError(f"{self.encoder_id} feature has shape {self.values.shape}, expected {expected}")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("visual feature has non-finite entries")


class SyntheticVisualEncoder:
    """Deterministic stand-in features keyed on image content.

    ``resnet-pooled`` repeats one pooled vector across all tokens, mirroring
    how a pooled feature is stretched into a patch-like sequence.
    """

    def __init__(self, encoder_id="detr", seed=0):
        if encoder_id not in VISUAL_SHAPES:
            raise ValueError(f"unknown visual encoder {encoder_id!r}")
        self.encoder_id = encoder_id
        self.seed = seed

    def encode(self, image_ref: str) -> VisualFeature:
        n, d = VISUAL_SHAPES[self.encoder_id]
        rng = np.random.default_rng(derive_seed("visual", self.encoder_id, self.seed, image_key(image_ref)))
        if self.encoder_id == "resnet-pooled":
            vals = np.repeat(rng.standard_normal((1, d)), n, axis=0)
        else:
            vals = rng.standard_normal((n, d))
        return VisualFeature(vals.astype(np.float32), self.encoder_id)
