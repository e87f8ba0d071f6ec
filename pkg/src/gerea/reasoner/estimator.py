"""sklearn-style wrappers around the fusion-in-decoder reader."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from sklearn.base import BaseEstimator, clone
from sklearn.utils.validation import check_is_fitted

from .._hashing import derive_seed, stable_hash
from ..metrics import normalize_answer, vqa_score
from .ensemble import ensemble_vote, vote_counts
from .model import build_model, encode_example
from .passages import HFTokenizer, WordTokenizer, passage_template_hash, reformat_inputs, tokenizer_from_dict
from .training import TrainConfig, train

WEIGHTS_FILE = "weights.safetensors"
CONFIG_FILE = "config.json"
TOKENIZER_FILE = "tokenizer.json"


@dataclass
class ReaderInput:
    """Everything the reader sees for one sample."""

    sample_id: str
    question: str
    captions: Sequence[str]
    exemplars: Sequence = ()
    visual: np.ndarray | None = None  # (N_v, width) or None
    passages: list = field(default_factory=list, repr=False)


class FiDReader(BaseEstimator):
    """Fusion-in-decoder reader over ``m * n`` reformatted passages plus visual tokens.

    ``backbone='tiny'`` trains a small transformer from scratch with a word
    vocabulary; ``backbone='t5'`` initializes from ``base_checkpoint``.
    """

    def __init__(self, backbone="tiny", base_checkpoint="t5-large", d_model=64, n_layers=2, n_heads=4,
                 dropout=0.0, visual_encoder="detr", use_visual=True, lr=5e-5, weight_decay=0.01,
                 warmup_steps=1000, total_steps=20000, batch_size=1, eval_every=10000, token_budget=None,
                 max_passage_len=512, answer_max_len=10, num_beams=1, seed=0, cache_dir=None):
        self.backbone = backbone
        self.base_checkpoint = base_checkpoint
        self.d_model = d_model
        self.n_layers = n_layers
        self.n_heads = n_heads
        self.dropout = dropout
        self.visual_encoder = visual_encoder
        self.use_visual = use_visual
        self.lr = lr
        self.weight_decay = weight_decay
        self.warmup_steps = warmup_steps
        self.total_steps = total_steps
        self.batch_size = batch_size
        self.eval_every = eval_every
        self.token_budget = token_budget
        self.max_passage_len = max_passage_len
        self.answer_max_len = answer_max_len
        self.num_beams = num_beams
        self.seed = seed
        self.cache_dir = cache_dir

    # -- helpers ---------------------------------------------------------------

    def config_hash(self) -> str:
        params = {k: v for k, v in self.get_params().items() if k != "cache_dir"}
        return stable_hash(params, passage_template_hash())

    def _visual_on(self):
        return self.use_visual and self.visual_encoder != "none"

    def _passages(self, x: ReaderInput, tokenizer=None) -> list[str]:
        return [p.text for p in reformat_inputs(x.question, x.captions, x.exemplars, self.token_budget, tokenizer)]

    def _encode(self, x: ReaderInput, answer=None):
        passages = x.passages or self._passages(x, self.tokenizer_)
        visual = x.visual if self._visual_on() else None
        if self._visual_on() and visual is None:
            raise ValueError(f"sample {x.sample_id} has no visual feature; set visual_encoder='none' to ablate")
        return encode_example(self.tokenizer_, x.sample_id, passages, visual, answer, self.max_passage_len)

    def _train_config(self):
        return TrainConfig(lr=self.lr, weight_decay=self.weight_decay, warmup_steps=self.warmup_steps,
                           total_steps=self.total_steps, batch_size=self.batch_size, eval_every=self.eval_every,
                           seed=self.seed)

    def _build(self, vocab_size):
        torch.manual_seed(derive_seed("reader-init", self.seed) % (2**31))
        return build_model(self.backbone, vocab_size, visual_encoder=self.visual_encoder, use_visual=self.use_visual,
                           d_model=self.d_model, n_layers=self.n_layers, n_heads=self.n_heads, dropout=self.dropout,
                           max_positions=self.max_passage_len, base_checkpoint=self.base_checkpoint,
                           cache_dir=self.cache_dir, pad_id=WordTokenizer.pad_id, start_id=WordTokenizer.start_id)

    # -- estimator API -----------------------------------------------------------

    def fit(self, X: Sequence[ReaderInput], y: Sequence[str], dev=None, stop_loss=None):
        """``y``: canonical answers. ``dev``: optional ``(inputs, human_answer_lists)``."""
        if len(X) != len(y):
            raise ValueError(f"{len(X)} inputs but {len(y)} answers")
        if not X:
            raise ValueError("no training inputs")
        if self.backbone == "tiny":
            texts = [p for x in X for p in (x.passages or self._passages(x))] + list(y)
            if dev is not None:
                texts += [p for x in dev[0] for p in (x.passages or self._passages(x))]
            self.tokenizer_ = WordTokenizer.fit(texts)
        else:
            self.tokenizer_ = HFTokenizer(self.base_checkpoint, cache_dir=self.cache_dir)
        self.model_ = self._build(self.tokenizer_.vocab_size)
        examples = [self._encode(x, a) for x, a in zip(X, y)]
        dev_eval = None
        if dev is not None:
            dev_inputs, dev_answers = dev

            def dev_eval(model):
                return {"vqa_score": self.score(dev_inputs, dev_answers)}

        self.train_log_ = train(self.model_, examples, self._train_config(), dev_eval=dev_eval, stop_loss=stop_loss)
        return self

    def predict(self, X: Sequence[ReaderInput]) -> list[str]:
        check_is_fitted(self, "model_")
        self.model_.eval()
        out = []
        for x in X:
            ids = self.model_.generate(self._encode(x), self.tokenizer_.eos_id, self.answer_max_len, self.num_beams)
            out.append(self.tokenizer_.decode(ids))
        return out

    def score(self, X, y) -> float:
        """Mean VQA score; ``y`` holds the human answer lists."""
        preds = self.predict(X)
        return float(np.mean([vqa_score(p, h) for p, h in zip(preds, y)])) if preds else float("nan")

    def train_loss(self, X, y) -> float:
        from .training import mean_loss

        check_is_fitted(self, "model_")
        return mean_loss(self.model_, [self._encode(x, a) for x, a in zip(X, y)])

    # -- persistence -------------------------------------------------------------

    def save(self, directory) -> Path:
        from safetensors.torch import save_model

        check_is_fitted(self, "model_")
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        save_model(self.model_, str(d / WEIGHTS_FILE))
        params = {k: v for k, v in self.get_params().items() if k != "cache_dir"}
        meta = {"params": params, "config_hash": self.config_hash(), "passage_template": passage_template_hash(),
                "train_log": getattr(self, "train_log_", None).to_dict() if hasattr(self, "train_log_") else None}
        (d / CONFIG_FILE).write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
        (d / TOKENIZER_FILE).write_text(json.dumps(self.tokenizer_.to_dict(), sort_keys=True) + "\n")
        return d

    @classmethod
    def load(cls, directory, cache_dir=None) -> "FiDReader":
        from safetensors.torch import load_model

        d = Path(directory)
        for name in (CONFIG_FILE, WEIGHTS_FILE, TOKENIZER_FILE):
            if not (d / name).is_file():
                raise FileNotFoundError(f"checkpoint file missing: {d / name}")
        meta = json.loads((d / CONFIG_FILE).read_text())
        reader = cls(**meta["params"], cache_dir=cache_dir)
        reader.tokenizer_ = tokenizer_from_dict(json.loads((d / TOKENIZER_FILE).read_text()), cache_dir=cache_dir)
        reader.model_ = reader._build(reader.tokenizer_.vocab_size)
        load_model(reader.model_, str(d / WEIGHTS_FILE))
        reader.model_.eval()
        return reader


class SeedEnsemble(BaseEstimator):
    """Train one reader per seed and combine answers by majority vote."""

    def __init__(self, reader=None, seeds=(0, 1, 2)):
        self.reader = reader
        self.seeds = seeds

    def fit(self, X, y, **fit_kw):
        if len(set(self.seeds)) != len(self.seeds):
            raise ValueError(f"seeds must be distinct, got {self.seeds}")
        base = self.reader if self.reader is not None else FiDReader()
        self.readers_ = [clone(base).set_params(seed=s).fit(X, y, **fit_kw) for s in self.seeds]
        return self

    def predict_votes(self, X) -> list[dict]:
        check_is_fitted(self, "readers_")
        per_seed = [r.predict(X) for r in self.readers_]
        out = []
        for i, x in enumerate(X):
            answers = [p[i] for p in per_seed]
            out.append({"sample_id": x.sample_id, "answer": ensemble_vote(answers),
                        "seed_answers": answers, "votes": vote_counts(answers)})
        return out

    def predict(self, X) -> list[str]:
        return [v["answer"] for v in self.predict_votes(X)]

    def score(self, X, y):
        preds = self.predict(X)
        return float(np.mean([vqa_score(p, h) for p, h in zip(preds, y)]))
