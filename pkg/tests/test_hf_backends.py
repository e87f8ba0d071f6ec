import numpy as np
import pytest
import torch

from gerea import hf_backends as hb
from gerea.region_selector import check_attention_rows, relevance_from_attention


def test_map_region_identity_and_upsampling():
    assert hb.map_region([0, 5, 15], 4, 4) == [0, 5, 15]
    # one coarse cell covers a 2x2 block of the finer grid
    assert hb.map_region([0], 2, 4) == [0, 1, 4, 5]
    assert hb.map_region([3], 2, 4) == [10, 11, 14, 15]
    assert hb.map_region([], 8, 24) == []
    assert len(hb.map_region(range(64), 8, 24)) == 576


def test_grid_must_be_square():
    assert hb._grid(576) == 24
    with pytest.raises(ValueError):
        hb._grid(50)


class _Processor:
    def __init__(self, image_size, vocab):
        self.image_size = image_size
        self.vocab = vocab

    def __call__(self, images=None, text=None, return_tensors="pt"):
        ids = [1 + (sum(map(ord, w)) % (self.vocab - 2)) for w in text.split()]
        g = torch.Generator().manual_seed(0)
        return {
            "pixel_values": torch.randn(1, 3, self.image_size, self.image_size, generator=g),
            "input_ids": torch.tensor([[0] + ids]),
            "attention_mask": torch.ones(1, len(ids) + 1, dtype=torch.long),
        }


@pytest.fixture
def tiny_blip(monkeypatch):
    transformers = pytest.importorskip("transformers")
    monkeypatch.setattr(hb, "load_image", lambda ref: None)
    torch.manual_seed(0)
    cfg = transformers.BlipConfig(
        text_config=dict(vocab_size=50, hidden_size=32, num_hidden_layers=2, num_attention_heads=2,
                         intermediate_size=64, encoder_hidden_size=32),
        vision_config=dict(hidden_size=32, num_hidden_layers=1, num_attention_heads=2, intermediate_size=64,
                           image_size=32, patch_size=8),
        projection_dim=16,
    )
    model = transformers.BlipForImageTextRetrieval(cfg)
    model.config._attn_implementation = "eager"
    return hb.BlipITE("tiny", model=model, processor=_Processor(32, 50))


def test_blip_ite_attention_and_gradient(tiny_blip):
    out = tiny_blip.cross_attention("img.jpg", "what is this", layer=1)
    H, L, M = out.attention.shape
    assert (H, M) == (2, 16) and L == 4
    check_attention_rows(out.attention)
    assert out.gradient.shape == out.attention.shape
    assert np.isfinite(out.gradient).all() and np.abs(out.gradient).sum() > 0
    assert 0 < out.sim < 1
    assert relevance_from_attention(out.attention, out.gradient).shape == (16,)
    with pytest.raises(ValueError, match="layer"):
        tiny_blip.cross_attention("img.jpg", "what", layer=2)


def test_blip_ite_embeddings(tiny_blip):
    emb = tiny_blip.embed("img.jpg", "what is this")
    proj = tiny_blip.model.config.image_text_hidden_size
    assert emb["question"].shape == (proj,) and emb["image"].shape == (proj,) and emb["fused"].shape == (32,)
    assert tiny_blip.n_patches == 16


def test_caption_backend_masks_unselected_patches():
    from types import SimpleNamespace

    class Fake(torch.nn.Module):
        def __init__(self):
            super().__init__()
            self.embeddings = torch.nn.Identity()
            self.vision_model = torch.nn.Module()
            self.vision_model.embeddings = self.embeddings
            self.config = SimpleNamespace(vision_config=SimpleNamespace(image_size=32, patch_size=8))

    be = hb.HFCaptionBackend("instructblip", "none", n_patches=4, model=Fake(), processor=None)
    assert be.dst_grid() == 4
    be._mask = hb.map_region([0], be.src_grid, be.dst_grid())
    out = be.model.vision_model.embeddings(torch.ones(1, 17, 3))
    kept = out[0, :, 0].nonzero().flatten().tolist()
    assert kept == [0] + [1 + p for p in (0, 1, 4, 5)]
    be._mask = None
    assert be.model.vision_model.embeddings(torch.ones(1, 17, 3)).sum() == 51
