"""Training loop: summed answer NLL, AdamW, linear warmup then linear decay."""
from __future__ import annotations

import logging
import math
import time
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np
import torch

from .._hashing import derive_seed
from ..exceptions import NonFiniteLossError
from .model import EncodedExample, FiDBase

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    lr: float = 5e-5
    weight_decay: float = 0.01
    warmup_steps: int = 1000
    total_steps: int = 20000
    batch_size: int = 1
    eval_every: int = 10000
    grad_clip: float | None = 1.0
    seed: int = 0
    log_every: int = 100

    def __post_init__(self):
        if self.total_steps < 1 or self.batch_size < 1:
            raise ValueError("total_steps and batch_size must be >= 1")
        if self.warmup_steps < 0:
            raise ValueError("warmup_steps must be >= 0")
        if not self.lr > 0:
            raise ValueError("lr must be > 0")

    def to_dict(self):
        return asdict(self)


@dataclass
class TrainLog:
    losses: list = field(default_factory=list)  # (step, mean batch loss)
    dev: list = field(default_factory=list)  # (step, dev metrics dict)
    seconds: float = 0.0

    def to_dict(self):
        # wall time is left out so saved logs are reproducible
        return {"losses": self.losses, "dev": self.dev}


def warmup_linear(warmup_steps: int, total_steps: int) -> Callable[[int], float]:
    def factor(step: int) -> float:
        if warmup_steps and step < warmup_steps:
            return (step + 1) / warmup_steps
        span = max(total_steps - warmup_steps, 1)
        return max(0.0, 1.0 - (step - warmup_steps) / span)

    return factor


def make_optimizer(model: torch.nn.Module, cfg: TrainConfig):
    # no decay on biases and norm weights
    decay, no_decay = [], []
    for name, p in model.named_parameters():
        if not p.requires_grad:
            continue
        (no_decay if p.ndim < 2 else decay).append(p)
    opt = torch.optim.AdamW(
        [{"params": decay, "weight_decay": cfg.weight_decay}, {"params": no_decay, "weight_decay": 0.0}], lr=cfg.lr
    )
    sched = torch.optim.lr_scheduler.LambdaLR(opt, warmup_linear(cfg.warmup_steps, cfg.total_steps))
    return opt, sched


def batches(n: int, batch_size: int, seed: int):
    """Endless stream of index batches; each epoch is a seeded permutation."""
    epoch = 0
    while True:
        order = np.random.default_rng(derive_seed("train-order", seed, epoch)).permutation(n)
        for i in range(0, n, batch_size):
            yield order[i : i + batch_size].tolist()
        epoch += 1


def mean_loss(model: FiDBase, examples: Sequence[EncodedExample]) -> float:
    was_training = model.training
    model.eval()
    with torch.no_grad():
        total = sum(float(model.loss([ex])[0]) for ex in examples)
    model.train(was_training)
    return total / max(len(examples), 1)


def train(model: FiDBase, examples: Sequence[EncodedExample], cfg: TrainConfig,
          dev_examples: Sequence[EncodedExample] | None = None,
          dev_eval: Callable[[FiDBase], dict] | None = None, stop_loss: float | None = None) -> TrainLog:
    """Optimize ``model`` in place.

    ``dev_eval`` (default: mean dev loss) runs every ``eval_every`` steps and at
    the end. ``stop_loss`` ends training early once the mean train loss over
    all examples drops below it (checked at epoch boundaries).
    """
    if not examples:
        raise ValueError("no training examples")
    torch.manual_seed(derive_seed("train-init", cfg.seed) % (2**31))
    opt, sched = make_optimizer(model, cfg)
    tlog = TrainLog()
    start = time.perf_counter()
    model.train()
    steps_per_epoch = math.ceil(len(examples) / cfg.batch_size)

    def run_dev(step):
        if dev_eval is not None:
            tlog.dev.append((step, dev_eval(model)))
        elif dev_examples:
            tlog.dev.append((step, {"loss": mean_loss(model, dev_examples)}))

    stream = batches(len(examples), cfg.batch_size, cfg.seed)
    for step in range(cfg.total_steps):
        idx = next(stream)
        batch = [examples[i] for i in idx]
        losses = model.loss(batch)
        bad = ~torch.isfinite(losses)
        if bad.any():
            k = int(bad.nonzero()[0])
            raise NonFiniteLossError(batch[k].sample_id, step, float(losses[k].detach()))
        loss = losses.mean()
        opt.zero_grad(set_to_none=True)
        loss.backward()
        if cfg.grad_clip:
            torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.grad_clip)
        opt.step()
        sched.step()
        tlog.losses.append((step + 1, float(loss.detach())))
        if cfg.log_every and (step + 1) % cfg.log_every == 0:
            log.info("step %d loss %.4f lr %.2e", step + 1, tlog.losses[-1][1], sched.get_last_lr()[0])
        if cfg.eval_every and (step + 1) % cfg.eval_every == 0:
            run_dev(step + 1)
        if stop_loss is not None and (step + 1) % steps_per_epoch == 0:
            if mean_loss(model, examples) < stop_loss:
                break
    if not tlog.dev or tlog.dev[-1][0] != len(tlog.losses):
        run_dev(len(tlog.losses))
    model.eval()
    tlog.seconds = time.perf_counter() - start
    return tlog
