"""Causal-LM training: loss, AdamW, warmup-cosine schedule and the training loop."""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import tensor as T
from .backbone import ModelConfig, TransformerLM
from .checkpoint import Checkpoint, save_checkpoint
from .errors import ConfigError, DataError, NumericalAbort
from .tensor import Tensor

log = logging.getLogger(__name__)


def cross_entropy_lm(logits: Tensor, targets, mask=None, denom: float | None = None) -> Tensor:
    """Mean next-token negative log-likelihood.

    ``logits`` is ``(..., N, V)`` and ``targets`` ``(..., N)`` (already shifted).
    Positions with ``mask == False`` are skipped. ``denom`` overrides the
    number of counted positions, which keeps micro-batch losses additive.
    """
    x = logits.data
    v = x.shape[-1]
    tgt = np.asarray(targets, dtype=np.int64)
    if tgt.shape != x.shape[:-1]:
        raise DataError(f"targets shape {tgt.shape} does not match logits {x.shape}")
    if tgt.size and (tgt.min() < 0 or tgt.max() >= v):
        raise DataError(f"target id out of range for vocabulary of size {v}")
    w = np.ones(tgt.shape) if mask is None else np.asarray(mask, dtype=np.float64)
    count = float(w.sum()) if denom is None else float(denom)
    if count <= 0:
        raise DataError("no target positions to score")
    m = x.max(axis=-1, keepdims=True)
    lse = m[..., 0] + np.log(np.exp(x - m).sum(axis=-1))
    picked = np.take_along_axis(x, tgt[..., None], axis=-1)[..., 0]
    nll = lse - picked
    loss = float((nll * w).sum() / count)

    def vjp(g):
        p = np.exp(x - lse[..., None])
        np.put_along_axis(p, tgt[..., None], np.take_along_axis(p, tgt[..., None], -1) - 1.0, -1)
        return (p * (w / count)[..., None] * g,)

    return Tensor.from_op(np.array(loss), (logits,), vjp, "cross_entropy")


def token_nll(logits: np.ndarray, targets: np.ndarray) -> np.ndarray:
    """Per-position negative log-likelihood (numpy, no graph)."""
    m = logits.max(axis=-1, keepdims=True)
    lse = m[..., 0] + np.log(np.exp(logits - m).sum(axis=-1))
    return lse - np.take_along_axis(logits, np.asarray(targets)[..., None], axis=-1)[..., 0]


# ---------------------------------------------------------------------------
# Optimizer
# ---------------------------------------------------------------------------
@dataclass
class OptimizerState:
    lr: float = 3e-4
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.0
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    def hyper(self) -> dict:
        return {"lr": self.lr, "betas": list(self.betas), "eps": self.eps,
                "weight_decay": self.weight_decay, "step": self.step}


def decays(name: str, shape) -> bool:
    """Weight decay applies to matrices only (not norms, not lambda)."""
    return len(shape) >= 2


def adamw_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray],
               state: OptimizerState, lr_t: float) -> None:
    """One decoupled-weight-decay Adam update, in place on ``params`` and ``state``."""
    for name, g in grads.items():
        if not np.isfinite(g).all():
            bad = int((~np.isfinite(g)).sum())
            raise NumericalAbort(f"non-finite gradient in {name} ({bad} entries) at step {state.step}")
    state.step += 1
    b1, b2 = state.betas
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if p.shape != g.shape:
            raise DataError(f"gradient for {name} has shape {g.shape}, parameter {p.shape}")
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros_like(p)
            v = np.zeros_like(p)
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * g * g
        state.m[name], state.v[name] = m, v
        if state.weight_decay and decays(name, p.shape):
            p *= 1.0 - lr_t * state.weight_decay
        p -= lr_t * (m / c1) / (np.sqrt(v / c2) + state.eps)


def lr_schedule(step: int, warmup_steps: int, max_lr: float, total_steps: int,
                floor_ratio: float = 0.1) -> float:
    """Linear warmup from 0, then cosine decay to ``floor_ratio * max_lr`` at ``total_steps``."""
    if warmup_steps > total_steps:
        raise ConfigError(f"warmup_steps {warmup_steps} exceeds total_steps {total_steps}")
    if step < 0:
        raise ConfigError("step must be non-negative")
    if step < warmup_steps:
        return max_lr * step / warmup_steps
    span = total_steps - warmup_steps
    progress = 1.0 if span == 0 else min(1.0, (step - warmup_steps) / span)
    floor = floor_ratio * max_lr
    return floor + (max_lr - floor) * 0.5 * (1.0 + math.cos(math.pi * progress))


def clip_grad_norm(grads: dict[str, np.ndarray], max_norm: float) -> float:
    total = math.sqrt(sum(float((g * g).sum()) for g in grads.values()))
    if max_norm and total > max_norm:
        scale = max_norm / (total + 1e-12)
        for k in grads:
            grads[k] = grads[k] * scale
    return total


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------
@dataclass
class TrainConfig:
    steps: int = 500
    batch_size: int = 16
    grad_accum: int = 1
    seq_len: int = 256
    lr: float = 3e-4
    warmup_steps: int = 100
    total_steps: int | None = None
    min_lr_ratio: float = 0.1
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.0
    grad_clip: float = 1.0
    seed: int = 0
    log_every: int = 50
    checkpoint_every: int = 0

    @property
    def schedule_steps(self) -> int:
        return self.total_steps if self.total_steps is not None else self.steps

    def to_dict(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        if "betas" in d:
            d["betas"] = tuple(d["betas"])
        return cls(**d)


@dataclass
class StepRecord:
    step: int
    lr: float
    loss: float


class Trainer:
    """Owns the model, optimizer state and the batch sampler.

    Batches are drawn with a Philox generator whose state is checkpointed, so
    a resumed run consumes exactly the batches an uninterrupted run would.
    ``windows`` is an ``(M, L)`` int array; ``loss_mask`` marks real tokens.
    """

    def __init__(self, model: TransformerLM, windows: np.ndarray, train_config: TrainConfig,
                 loss_mask: np.ndarray | None = None, opt_state: OptimizerState | None = None,
                 rng_state: dict | None = None, step: int = 0, vocab_hash: str = ""):
        windows = np.asarray(windows, dtype=np.int64)
        if windows.ndim != 2 or windows.shape[1] < 2 or windows.shape[0] < 1:
            raise DataError(f"need at least one window of >= 2 tokens, got shape {windows.shape}")
        if windows.shape[1] - 1 > model.config.max_seq_len:
            raise ConfigError(f"window length {windows.shape[1]} exceeds max_seq_len + 1")
        self.model = model
        self.windows = windows
        self.loss_mask = np.ones(windows.shape, dtype=bool) if loss_mask is None else np.asarray(loss_mask, bool)
        self.tc = train_config
        self.opt = opt_state or OptimizerState(lr=train_config.lr, betas=tuple(train_config.betas),
                                               eps=train_config.eps, weight_decay=train_config.weight_decay)
        self.rng = np.random.Generator(np.random.Philox(train_config.seed))
        if rng_state is not None:
            self.rng.bit_generator.state = rng_state
        self.step = step
        self.vocab_hash = vocab_hash
        self.records: list[StepRecord] = []

    def _sample(self) -> np.ndarray:
        n = self.tc.batch_size * self.tc.grad_accum
        return self.rng.integers(0, self.windows.shape[0], size=n)

    def compute_grads(self, idx: np.ndarray, grad_accum: int) -> tuple[float, dict[str, np.ndarray]]:
        """Loss and summed gradients over ``idx`` split into ``grad_accum`` micro-batches."""
        w = self.windows[idx]
        tmask = self.loss_mask[idx][:, 1:]
        denom = float(tmask.sum())
        if denom == 0:
            raise DataError("batch contains no target tokens")
        self.model.zero_grad()
        total = 0.0
        for chunk in np.array_split(np.arange(len(idx)), grad_accum):
            logits = self.model.forward(w[chunk, :-1])
            loss = cross_entropy_lm(logits, w[chunk, 1:], tmask[chunk], denom=denom)
            total += loss.item()
            T.backward(loss)
        grads = {k: (p.grad if p.grad is not None else np.zeros_like(p.data))
                 for k, p in self.model.params.items()}
        return total, grads

    def train_step(self) -> StepRecord:
        lr = lr_schedule(self.step, self.tc.warmup_steps, self.tc.lr, self.tc.schedule_steps,
                         self.tc.min_lr_ratio)
        idx = self._sample()
        loss, grads = self.compute_grads(idx, self.tc.grad_accum)
        if not math.isfinite(loss):
            raise NumericalAbort(f"non-finite loss at step {self.step}")
        clip_grad_norm(grads, self.tc.grad_clip)
        adamw_step({k: p.data for k, p in self.model.params.items()}, grads, self.opt, lr)
        rec = StepRecord(self.step, lr, loss)
        self.records.append(rec)
        self.step += 1
        return rec

    def run(self, steps: int, out_dir: Path | None = None,
            on_step: Callable[[StepRecord], None] | None = None) -> list[StepRecord]:
        for _ in range(steps):
            try:
                rec = self.train_step()
            except NumericalAbort:
                if out_dir is not None:
                    save_checkpoint(self.checkpoint(), Path(out_dir) / "diagnostic.iatl")
                raise
            if on_step:
                on_step(rec)
            if self.tc.log_every and rec.step % self.tc.log_every == 0:
                log.info("step %d lr %.3e loss %.4f", rec.step, rec.lr, rec.loss)
            every = self.tc.checkpoint_every
            if out_dir is not None and every and self.step % every == 0:
                save_checkpoint(self.checkpoint(), Path(out_dir) / f"step{self.step:06d}.iatl")
        return self.records

    def checkpoint(self) -> Checkpoint:
        return Checkpoint(
            config=self.model.config,
            params=self.model.state_dict(),
            opt_state=OptimizerState(lr=self.opt.lr, betas=self.opt.betas, eps=self.opt.eps,
                                     weight_decay=self.opt.weight_decay, step=self.opt.step,
                                     m={k: v.copy() for k, v in self.opt.m.items()},
                                     v={k: v.copy() for k, v in self.opt.v.items()}),
            rng_state=self.rng.bit_generator.state,
            step=self.step,
            train_config=self.tc.to_dict(),
            vocab_hash=self.vocab_hash,
        )

    @classmethod
    def from_checkpoint(cls, ckpt: Checkpoint, windows: np.ndarray,
                        loss_mask: np.ndarray | None = None,
                        train_config: TrainConfig | None = None) -> "Trainer":
        tc = train_config or TrainConfig.from_dict(ckpt.train_config)
        model = TransformerLM.from_state(ckpt.config, ckpt.params)
        return cls(model, windows, tc, loss_mask=loss_mask, opt_state=ckpt.opt_state,
                   rng_state=ckpt.rng_state, step=ckpt.step, vocab_hash=ckpt.vocab_hash)


def write_loss_csv(records: list[StepRecord], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "lr", "loss"])
        for r in records:
            w.writerow([r.step, repr(r.lr), repr(r.loss)])


def train(config: ModelConfig, windows: np.ndarray, steps: int, batch_size: int,
          grad_accum: int = 1, train_config: TrainConfig | None = None,
          loss_mask: np.ndarray | None = None, out_dir=None,
          vocab_hash: str = "") -> tuple[Checkpoint, list[StepRecord]]:
    """Train a freshly initialized model; returns the final checkpoint and loss curve."""
    tc = train_config or TrainConfig()
    tc = TrainConfig.from_dict({**tc.to_dict(), "steps": steps, "batch_size": batch_size,
                                "grad_accum": grad_accum})
    trainer = Trainer(TransformerLM(config), windows, tc, loss_mask=loss_mask, vocab_hash=vocab_hash)
    if out_dir is not None:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
    records = trainer.run(steps, out_dir)
    ckpt = trainer.checkpoint()
    if out_dir is not None:
        save_checkpoint(ckpt, Path(out_dir) / "final.iatl")
        write_loss_csv(records, Path(out_dir) / "loss.csv")
    return ckpt, records
