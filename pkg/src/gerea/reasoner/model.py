"""Fusion-in-decoder reader with a projected visual-token stream.

Each passage is encoded independently by a shared encoder; the valid tokens
of all passages are concatenated in passage order, the visual tokens are
appended last, and a single decoder cross-attends to that memory.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import torch
from torch import nn
from torch.nn import functional as F

from .visual import VISUAL_SHAPES, VisualFeature


def sequence_nll(logits: torch.Tensor, targets: torch.Tensor, target_mask: torch.Tensor) -> torch.Tensor:
    """Per-sequence summed negative log-likelihood, ``-sum_l log p(y_l | y_<l)``.

    logits (B, T, V), targets (B, T), target_mask (B, T) bool -> (B,)
    """
    logp = F.log_softmax(logits, dim=-1)
    nll = -logp.gather(-1, targets.unsqueeze(-1)).squeeze(-1)
    return (nll * target_mask.to(nll.dtype)).sum(-1)


@dataclass
class EncodedExample:
    sample_id: str
    passage_ids: torch.Tensor  # (P, T) long
    passage_mask: torch.Tensor  # (P, T) bool, True on real tokens
    visual: torch.Tensor | None  # (N_v, visual_dim)
    target_ids: torch.Tensor | None = None  # (L,) long, ends with eos


def encode_example(tokenizer, sample_id, passages, visual=None, answer=None, max_passage_len=512) -> EncodedExample:
    seqs = [tokenizer.encode(p)[:max_passage_len] or [tokenizer.eos_id] for p in passages]
    if not seqs:
        raise ValueError(f"sample {sample_id} has no passages")
    T = max(len(s) for s in seqs)
    ids = torch.full((len(seqs), T), tokenizer.pad_id, dtype=torch.long)
    mask = torch.zeros((len(seqs), T), dtype=torch.bool)
    for i, s in enumerate(seqs):
        ids[i, : len(s)] = torch.tensor(s, dtype=torch.long)
        mask[i, : len(s)] = True
    if isinstance(visual, VisualFeature):
        visual = visual.values
    vis = None if visual is None else torch.as_tensor(visual, dtype=torch.float32)
    tgt = None if answer is None else torch.tensor(tokenizer.encode(answer, add_eos=True), dtype=torch.long)
    return EncodedExample(sample_id, ids, mask, vis, tgt)


class FiDBase(nn.Module):
    """Shared memory assembly, loss and decoding. Subclasses provide the backbone."""

    d_model: int
    decoder_start_id: int
    pad_id: int

    def _init_visual(self, visual_dim, n_visual_tokens, n_heads, d_ff, dropout, use_visual):
        self.visual_dim = visual_dim
        self.n_visual_tokens = n_visual_tokens
        self.use_visual = use_visual
        self.visual_fc = nn.Linear(visual_dim, self.d_model)
        self.visual_block = nn.TransformerEncoderLayer(
            self.d_model, n_heads, d_ff, dropout, batch_first=True, norm_first=True
        )

    # backbone hooks
    def encode_passages(self, ids: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        raise NotImplementedError

    def decode_logits(self, memory, memory_mask, decoder_input_ids) -> torch.Tensor:
        raise NotImplementedError

    def encode_visual(self, feature: torch.Tensor) -> torch.Tensor:
        """``F_vision(FC(feature))``: (N_v, visual_dim) -> (N_v, D). Also accepts a leading batch dim."""
        expected = (self.n_visual_tokens, self.visual_dim)
        if tuple(feature.shape[-2:]) != expected or feature.dim() not in (2, 3):
            raise ValueError(f"visual feature has shape {tuple(feature.shape)}, expected {expected}")
        squeeze = feature.dim() == 2
        x = feature.unsqueeze(0) if squeeze else feature
        x = self.visual_block(self.visual_fc(x.to(self.visual_fc.weight.dtype)))
        return x.squeeze(0) if squeeze else x

    def sample_memory(self, ex: EncodedExample, use_visual: bool | None = None) -> torch.Tensor:
        """(sum of passage lengths [+ N_v], D) memory for one sample."""
        if ex.passage_ids.numel() == 0:
            raise ValueError("empty concatenation: no passages")
        enc = self.encode_passages(ex.passage_ids, ex.passage_mask)
        parts = [enc[p][ex.passage_mask[p]] for p in range(enc.shape[0])]
        use_visual = self.use_visual if use_visual is None else use_visual
        if use_visual:
            if ex.visual is None:
                raise ValueError(f"sample {ex.sample_id} has no visual feature but the reader expects one")
            parts.append(self.encode_visual(ex.visual))
        return torch.cat(parts, dim=0)

    def batch_memory(self, batch, use_visual=None):
        mems = [self.sample_memory(ex, use_visual) for ex in batch]
        L = max(m.shape[0] for m in mems)
        D = mems[0].shape[1]
        memory = mems[0].new_zeros((len(mems), L, D))
        mask = torch.zeros((len(mems), L), dtype=torch.bool, device=memory.device)
        for b, m in enumerate(mems):
            memory[b, : m.shape[0]] = m
            mask[b, : m.shape[0]] = True
        return memory, mask

    def loss(self, batch) -> torch.Tensor:
        """Summed token NLL of each example's target, shape (B,)."""
        memory, mmask = self.batch_memory(batch)
        L = max(ex.target_ids.shape[0] for ex in batch)
        tgt = torch.full((len(batch), L), self.pad_id, dtype=torch.long)
        tmask = torch.zeros((len(batch), L), dtype=torch.bool)
        for b, ex in enumerate(batch):
            tgt[b, : ex.target_ids.shape[0]] = ex.target_ids
            tmask[b, : ex.target_ids.shape[0]] = True
        dec_in = torch.cat([torch.full((len(batch), 1), self.decoder_start_id, dtype=torch.long), tgt[:, :-1]], dim=1)
        logits = self.decode_logits(memory, mmask, dec_in)
        return sequence_nll(logits, tgt, tmask)

    @torch.no_grad()
    def generate(self, ex: EncodedExample, eos_id: int, max_len: int = 10, num_beams: int = 1) -> list[int]:
        memory, mmask = self.batch_memory([ex])
        if num_beams <= 1:
            seq = [self.decoder_start_id]
            for _ in range(max_len):
                logits = self.decode_logits(memory, mmask, torch.tensor([seq]))
                nxt = int(logits[0, -1].argmax())
                seq.append(nxt)
                if nxt == eos_id:
                    break
            return seq[1:]
        beams = [([self.decoder_start_id], 0.0, False)]
        for _ in range(max_len):
            cand = []
            for seq, score, done in beams:
                if done:
                    cand.append((seq, score, True))
                    continue
                logp = F.log_softmax(self.decode_logits(memory, mmask, torch.tensor([seq]))[0, -1], -1)
                top = torch.topk(logp, num_beams)
                for lp, tok in zip(top.values.tolist(), top.indices.tolist()):
                    cand.append((seq + [tok], score + lp, tok == eos_id))
            # stable sort: earlier candidates win ties
            beams = sorted(cand, key=lambda c: -c[1])[:num_beams]
            if all(d for _, _, d in beams):
                break
        return beams[0][0][1:]


class FiDModel(FiDBase):
    """Small from-scratch encoder-decoder; used for tests and the fixture pipeline."""

    def __init__(self, vocab_size, d_model=64, n_layers=2, n_heads=4, d_ff=None, visual_dim=256,
                 n_visual_tokens=100, max_positions=512, dropout=0.0, use_visual=True,
                 pad_id=0, start_id=1):
        super().__init__()
        d_ff = d_ff or 4 * d_model
        self.d_model = d_model
        self.pad_id = pad_id
        self.decoder_start_id = start_id
        self.embed = nn.Embedding(vocab_size, d_model)
        self.pos = nn.Embedding(max_positions, d_model)
        enc_layer = nn.TransformerEncoderLayer(d_model, n_heads, d_ff, dropout, batch_first=True, norm_first=True)
        self.encoder = nn.TransformerEncoder(enc_layer, n_layers, norm=nn.LayerNorm(d_model), enable_nested_tensor=False)
        dec_layer = nn.TransformerDecoderLayer(d_model, n_heads, d_ff, dropout, batch_first=True, norm_first=True)
        self.decoder = nn.TransformerDecoder(dec_layer, n_layers, norm=nn.LayerNorm(d_model))
        self.lm_head = nn.Linear(d_model, vocab_size, bias=False)
        self._init_visual(visual_dim, n_visual_tokens, n_heads, d_ff, dropout, use_visual)

    def _embed(self, ids):
        pos = torch.arange(ids.shape[-1], device=ids.device)
        return self.embed(ids) * math.sqrt(self.d_model) + self.pos(pos)

    def encode_passages(self, ids, mask):
        return self.encoder(self._embed(ids), src_key_padding_mask=~mask)

    def decode_logits(self, memory, memory_mask, decoder_input_ids):
        T = decoder_input_ids.shape[1]
        causal = nn.Transformer.generate_square_subsequent_mask(T, dtype=memory.dtype)
        h = self.decoder(
            self._embed(decoder_input_ids).to(memory.dtype), memory, tgt_mask=causal,
            memory_key_padding_mask=~memory_mask, tgt_is_causal=True,
        )
        return self.lm_head(h)


class T5FiD(FiDBase):
    """FiD over a Hugging Face T5 checkpoint (``t5-large`` at full scale)."""

    def __init__(self, t5, visual_dim=256, n_visual_tokens=100, n_heads=None, dropout=0.1, use_visual=True):
        super().__init__()
        self.t5 = t5
        cfg = t5.config
        self.d_model = cfg.d_model
        self.pad_id = cfg.pad_token_id
        self.decoder_start_id = cfg.decoder_start_token_id
        self._init_visual(visual_dim, n_visual_tokens, n_heads or cfg.num_heads, cfg.d_ff, dropout, use_visual)

    @classmethod
    def from_pretrained(cls, name_or_path, cache_dir=None, **kw):
        from transformers import T5ForConditionalGeneration

        return cls(T5ForConditionalGeneration.from_pretrained(name_or_path, cache_dir=cache_dir), **kw)

    @classmethod
    def from_config(cls, config_kwargs: dict, **kw):
        from transformers import T5Config, T5ForConditionalGeneration

        return cls(T5ForConditionalGeneration(T5Config(**config_kwargs)), **kw)

    def encode_passages(self, ids, mask):
        return self.t5.encoder(input_ids=ids, attention_mask=mask.long()).last_hidden_state

    def decode_logits(self, memory, memory_mask, decoder_input_ids):
        from transformers.modeling_outputs import BaseModelOutput

        out = self.t5(
            encoder_outputs=BaseModelOutput(last_hidden_state=memory),
            attention_mask=memory_mask.long(),
            decoder_input_ids=decoder_input_ids,
            use_cache=False,
        )
        return out.logits


def build_model(backbone: str, vocab_size: int, *, visual_encoder="detr", use_visual=True, d_model=64,
                n_layers=2, n_heads=4, d_ff=None, dropout=0.0, max_positions=512, base_checkpoint=None,
                cache_dir=None, pad_id=0, start_id=1) -> FiDBase:
    n_vis, vis_dim = VISUAL_SHAPES.get(visual_encoder, VISUAL_SHAPES["detr"])
    use_visual = use_visual and visual_encoder != "none"
    if backbone == "tiny":
        return FiDModel(vocab_size, d_model, n_layers, n_heads, d_ff, vis_dim, n_vis, max_positions, dropout,
                        use_visual, pad_id=pad_id, start_id=start_id)
    if backbone == "t5":
        if base_checkpoint is None:
            raise ValueError("backbone 't5' needs base_checkpoint (e.g. 't5-large')")
        return T5FiD.from_pretrained(base_checkpoint, cache_dir=cache_dir, visual_dim=vis_dim,
                                     n_visual_tokens=n_vis, dropout=dropout, use_visual=use_visual)
    raise ValueError(f"unknown backbone {backbone!r}; expected 'tiny' or 't5'")
