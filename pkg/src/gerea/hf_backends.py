"""Adapters over Hugging Face checkpoints (needs the ``hf`` extra).

* :class:`BlipITE` - image-text matching cross-attention and its gradient.
* :class:`HFCaptionBackend` - InstructBLIP / LLaVA captioning with patch masking.
* :class:`DetrEncoder` - 100 x 256 decoder queries as the reader's visual stream.

Regions are presented to a captioner by zeroing the vision-encoder input
tokens of unselected patches; the ITE patch grid is mapped onto the
captioner's grid by patch-centre lookup.
"""
from __future__ import annotations

import math
from typing import Sequence

import numpy as np
import torch

from .reasoner.visual import VisualFeature
from .region_selector import ITEOutput


def load_image(image_ref: str):
    from PIL import Image

    return Image.open(image_ref).convert("RGB")


def map_region(region: Sequence[int], src_grid: int, dst_grid: int) -> list[int]:
    """Indices of ``dst_grid x dst_grid`` cells whose centre lies in a selected ``src_grid`` cell."""
    selected = set(int(p) for p in region)
    out = []
    for i in range(dst_grid):
        for j in range(dst_grid):
            r = int((i + 0.5) * src_grid / dst_grid)
            c = int((j + 0.5) * src_grid / dst_grid)
            if r * src_grid + c in selected:
                out.append(i * dst_grid + j)
    return out


def _grid(n_patches: int) -> int:
    g = int(math.isqrt(n_patches))
    if g * g != n_patches:
        raise ValueError(f"patch count {n_patches} is not a square grid")
    return g


class BlipITE:
    """BLIP image-text matching head as an ITE backend.

    ``layer`` indexes the text encoder's cross-attention layers from 0. The
    image CLS column is removed from the attention and the remaining patch
    rows are renormalized; gradients are those of the raw entries.
    """

    def __init__(self, checkpoint="Salesforce/blip-itm-base-coco", model=None, processor=None, device="cpu"):
        self.checkpoint = checkpoint
        self.device = device
        if model is None:
            from transformers import BlipForImageTextRetrieval, BlipProcessor

            from .config import checkpoint_cache_dir

            model = BlipForImageTextRetrieval.from_pretrained(checkpoint, cache_dir=checkpoint_cache_dir(), attn_implementation="eager")
            processor = BlipProcessor.from_pretrained(checkpoint, cache_dir=checkpoint_cache_dir())
        self.model = model.to(device).eval()
        self.processor = processor
        vc = self.model.config.vision_config
        self.n_patches = (vc.image_size // vc.patch_size) ** 2
        self.backend_id = f"blip-itm:{checkpoint}"

    def _inputs(self, image_ref, question):
        enc = self.processor(images=load_image(image_ref), text=question, return_tensors="pt")
        return {k: v.to(self.device) for k, v in enc.items()}

    def _forward(self, pixel_values, input_ids, attention_mask, output_attentions=False):
        m = self.model
        image_embeds = m.vision_model(pixel_values=pixel_values).last_hidden_state
        image_mask = torch.ones(image_embeds.shape[:-1], dtype=torch.long, device=image_embeds.device)
        out = m.text_encoder(input_ids=input_ids, attention_mask=attention_mask, encoder_hidden_states=image_embeds,
                             encoder_attention_mask=image_mask, output_attentions=output_attentions, return_dict=True)
        return image_embeds, out

    def cross_attention(self, image_ref: str, question: str, layer: int = 6) -> ITEOutput:
        enc = self._inputs(image_ref, question)
        _, out = self._forward(enc["pixel_values"], enc["input_ids"], enc["attention_mask"], output_attentions=True)
        cross = out.cross_attentions
        if not 0 <= layer < len(cross):
            raise ValueError(f"layer {layer} out of range; the ITE has {len(cross)} cross-attention layers")
        attn = cross[layer]
        attn.retain_grad()
        logits = self.model.itm_head(out.last_hidden_state[:, 0, :])
        sim = torch.softmax(logits, dim=-1)[0, 1]
        self.model.zero_grad(set_to_none=True)
        sim.backward()
        valid = enc["attention_mask"][0].bool()
        a = attn[0][:, valid, 1:].detach().double()
        g = attn.grad[0][:, valid, 1:].detach().double()
        a = a / a.sum(-1, keepdim=True).clamp_min(1e-12)
        return ITEOutput(attention=a.cpu().numpy(), gradient=g.cpu().numpy(), sim=float(sim.detach()))

    @torch.no_grad()
    def embed(self, image_ref: str, question: str, layer: int = 6) -> dict:
        enc = self._inputs(image_ref, question)
        m = self.model
        image_embeds, fused = self._forward(enc["pixel_values"], enc["input_ids"], enc["attention_mask"])
        text = m.text_encoder(input_ids=enc["input_ids"], attention_mask=enc["attention_mask"], return_dict=True)
        return {
            "question": m.text_proj(text.last_hidden_state[:, 0, :])[0].cpu().numpy(),
            "image": m.vision_proj(image_embeds[:, 0, :])[0].cpu().numpy(),
            "fused": fused.last_hidden_state[0, 0, :].cpu().numpy(),
        }


class HFCaptionBackend:
    """InstructBLIP- or LLaVA-style captioner; ``style`` selects prompt formatting."""

    def __init__(self, kind, checkpoint, backend_id=None, style=None, n_patches=576, model=None, processor=None,
                 device="cpu"):
        self.kind = kind
        self.style = style or kind
        self.backend_id = backend_id or f"{kind}:{checkpoint}"
        self.src_grid = _grid(n_patches)
        self.device = device
        if model is None:
            from transformers import AutoProcessor

            from .config import checkpoint_cache_dir

            cache = checkpoint_cache_dir()
            if kind == "instructblip":
                from transformers import InstructBlipForConditionalGeneration as cls
            elif kind == "llava":
                from transformers import LlavaForConditionalGeneration as cls
            else:
                raise ValueError(f"unknown caption backend kind {kind!r}")
            model = cls.from_pretrained(checkpoint, cache_dir=cache)
            processor = AutoProcessor.from_pretrained(checkpoint, cache_dir=cache)
        self.model = model.to(device).eval()
        self.processor = processor
        self._mask = None
        self._embeddings().register_forward_hook(self._apply_mask)

    def _embeddings(self):
        if self.kind == "instructblip":
            return self.model.vision_model.embeddings
        return self.model.vision_tower.vision_model.embeddings

    def dst_grid(self) -> int:
        vc = self.model.config.vision_config
        return vc.image_size // vc.patch_size

    def _apply_mask(self, module, inputs, output):
        if self._mask is None:
            return output
        # token 0 is the class embedding; patches follow in row-major order
        keep = torch.zeros(output.shape[1], dtype=output.dtype, device=output.device)
        keep[0] = 1
        keep[1 + torch.as_tensor(self._mask, dtype=torch.long)] = 1
        return output * keep[None, :, None]

    def _prompt(self, prompt):
        if self.kind == "llava":
            return f"USER: <image>\n{prompt} ASSISTANT:"
        return prompt

    @torch.no_grad()
    def _run(self, image_ref, prompt, params, patches=None):
        self._mask = patches
        try:
            enc = self.processor(images=load_image(image_ref), text=self._prompt(prompt), return_tensors="pt").to(self.device)
            kw = dict(num_beams=params.num_beams, do_sample=params.do_sample, max_new_tokens=params.max_len,
                      min_new_tokens=params.min_len)
            if params.do_sample:
                kw.update(top_p=params.top_p, temperature=params.temperature)
            ids = self.model.generate(**enc, **kw)
        finally:
            self._mask = None
        if self.kind == "llava":
            ids = ids[:, enc["input_ids"].shape[1]:]
        return self.processor.batch_decode(ids, skip_special_tokens=True)[0].strip()

    def generate(self, image_ref, region, prompt, params, **context) -> str:
        patches = map_region(region, self.src_grid, self.dst_grid())
        return self._run(image_ref, prompt, params, patches)

    def answer(self, image_ref, question, params, *, prompt=None, **context) -> str:
        from dataclasses import replace

        short = replace(params, min_len=1, max_len=min(params.max_len, 10))
        return self._run(image_ref, prompt or question, short)


def caption_backend(kind, checkpoint, **kw) -> HFCaptionBackend:
    if checkpoint is None:
        raise ValueError(f"caption backend {kind!r} needs a checkpoint path or hub id")
    return HFCaptionBackend(kind, checkpoint, **kw)


class DetrEncoder:
    """DETR decoder outputs (100 queries x 256) as a visual feature."""

    encoder_id = "detr"

    def __init__(self, checkpoint="facebook/detr-resnet-101-dc5", model=None, processor=None, device="cpu"):
        if model is None:
            from transformers import DetrImageProcessor, DetrModel

            from .config import checkpoint_cache_dir

            model = DetrModel.from_pretrained(checkpoint, cache_dir=checkpoint_cache_dir())
            processor = DetrImageProcessor.from_pretrained(checkpoint, cache_dir=checkpoint_cache_dir())
        self.model = model.to(device).eval()
        self.processor = processor
        self.device = device

    @torch.no_grad()
    def encode(self, image_ref: str) -> VisualFeature:
        enc = self.processor(images=load_image(image_ref), return_tensors="pt").to(self.device)
        out = self.model(**enc).last_hidden_state[0]
        return VisualFeature(out.cpu().numpy().astype(np.float32), "detr")
