"""Supervised training and fine-tuning: AdamW, warmup + cosine schedule, SpecAugment."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import tensor as tn
from .data import Entry
from .model import (ENCODER_PREFIXES, CheckpointError, KwtConfig, KwtModel, forward_logits,
                    init_classifier_head, init_model, load_checkpoint, predict)
from .tensor import ParameterSet

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 140
    batch_size: int = 512
    max_lr: float = 1e-3
    weight_decay: float = 0.1
    warmup_epochs: int = 10
    betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    data_policy: str = "clean"
    spec_augment: bool = True

    def __post_init__(self):
        if not self.warmup_epochs < self.epochs:
            raise ValueError("warmup_epochs must be smaller than epochs")
        if not self.max_lr > 0:
            raise ValueError("max_lr must be positive")
        if self.data_policy not in ("clean", "mtr"):
            raise ValueError(f"data_policy must be 'clean' or 'mtr', not {self.data_policy!r}")


@dataclass
class OptimState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


def adamw_step(params: ParameterSet, optim: OptimState, lr: float, cfg) -> None:
    """One AdamW update with decoupled weight decay, in place.

    ``cfg`` supplies ``betas``, ``adam_eps`` and ``weight_decay``; gradients
    are read from ``param.grad``.
    """
    if lr < 0:
        raise ValueError("learning rate must be non-negative")
    b1, b2 = cfg.betas
    optim.step += 1
    c1 = 1.0 - b1 ** optim.step
    c2 = 1.0 - b2 ** optim.step
    for name, p in params.items():
        g = p.grad
        if g is None:
            raise ValueError(f"no gradient for {name}")
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {p.shape} for {name}")
        if not np.all(np.isfinite(g)):
            raise tn.NonFiniteError(f"non-finite gradient for {name}")
        m = optim.m.setdefault(name, np.zeros_like(p.data))
        v = optim.v.setdefault(name, np.zeros_like(p.data))
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        update = (m / c1) / (np.sqrt(v / c2) + cfg.adam_eps) + cfg.weight_decay * p.data
        p.data = (p.data - lr * update).astype(p.data.dtype, copy=False)


def lr_schedule(step: int, steps_per_epoch: int, cfg) -> float:
    """Linear warmup over ``warmup_epochs`` then cosine annealing towards zero."""
    warm = cfg.warmup_epochs * steps_per_epoch
    total = cfg.epochs * steps_per_epoch
    if step < warm:
        return cfg.max_lr * (step + 1) / warm
    progress = min(1.0, (step - warm) / max(1, total - warm))
    return cfg.max_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


# ---------------------------------------------------------------- SpecAugment


@dataclass(frozen=True)
class SpecAugmentConfig:
    n_time_masks: int = 2
    max_time_width: int = 25
    n_freq_masks: int = 2
    max_freq_width: int = 7
    fill: float = 0.0


def spec_augment(features: np.ndarray, cfg: SpecAugmentConfig, rng: np.random.Generator) -> np.ndarray:
    """Zero random time and coefficient blocks of a [T, F] matrix (returns a copy)."""
    out = np.array(features, copy=True)
    t, f = out.shape[-2:]
    if cfg.max_time_width > t or cfg.max_freq_width > f:
        raise ValueError("mask width exceeds feature extent")
    for _ in range(cfg.n_time_masks):
        w = int(rng.integers(0, cfg.max_time_width + 1))
        s = int(rng.integers(0, t - w + 1))
        out[..., s:s + w, :] = cfg.fill
    for _ in range(cfg.n_freq_masks):
        w = int(rng.integers(0, cfg.max_freq_width + 1))
        s = int(rng.integers(0, f - w + 1))
        out[..., :, s:s + w] = cfg.fill
    return out


# ---------------------------------------------------------------- training loop


def accuracy(model: KwtModel, features: np.ndarray, labels: np.ndarray) -> float:
    if len(labels) == 0:
        return float("nan")
    return float(np.mean(predict(model, features) == labels))


def load_pretrained_encoder(model: KwtModel, path) -> dict:
    """Copy input projection and encoder blocks from a checkpoint; all-or-nothing."""
    meta, arrays = load_checkpoint(path)
    ckpt_cfg = KwtConfig(**meta["config"])
    if (ckpt_cfg.dim, ckpt_cfg.n_blocks, ckpt_cfg.heads, ckpt_cfg.input_dim) != \
            (model.cfg.dim, model.cfg.n_blocks, model.cfg.heads, model.cfg.input_dim):
        raise CheckpointError(
            f"checkpoint has dim={ckpt_cfg.dim}, blocks={ckpt_cfg.n_blocks}, heads={ckpt_cfg.heads}; "
            f"model expects dim={model.cfg.dim}, blocks={model.cfg.n_blocks}, heads={model.cfg.heads}")
    wanted = model.params.subset(ENCODER_PREFIXES).names()
    missing = [n for n in wanted if n not in arrays]
    if missing:
        raise CheckpointError(f"checkpoint lacks encoder tensors, e.g. {missing[0]}")
    for n in wanted:
        if arrays[n].shape != model.params[n].shape:
            raise CheckpointError(f"{n}: shape {arrays[n].shape} != {model.params[n].shape}")
    model.params.load_arrays({n: arrays[n] for n in wanted})
    return meta


def supervised_params(model: KwtModel) -> ParameterSet:
    return ParameterSet({n: t for n, t in model.params.items() if n != "mask_token"})


def run_supervised(model: KwtModel, train_x: np.ndarray, train_y: np.ndarray,
                   val_x: np.ndarray, val_y: np.ndarray, cfg: TrainConfig, seed: int = 0,
                   augment: SpecAugmentConfig = SpecAugmentConfig(),
                   init_checkpoint=None) -> tuple[KwtModel, list[dict]]:
    """Train ``model`` in place on precomputed features; keeps the best-validation weights.

    ``train_x`` already reflects the data policy (clean or multistyle mixes).
    With ``init_checkpoint`` the encoder is loaded from a pretrained model and
    the classifier head is freshly drawn from ``seed``.
    """
    if init_checkpoint is not None:
        load_pretrained_encoder(model, init_checkpoint)
        init_classifier_head(model, seed)
    rng = np.random.default_rng(seed)
    params = supervised_params(model)
    optim = OptimState()
    n = len(train_y)
    steps_per_epoch = math.ceil(n / cfg.batch_size)
    rows: list[dict] = []
    best_acc, best = -1.0, None
    step = 0
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        for s in range(0, n, cfg.batch_size):
            idx = order[s:s + cfg.batch_size]
            xb = train_x[idx]
            if cfg.spec_augment:
                xb = np.stack([spec_augment(x, augment, rng) for x in xb])
            lr = lr_schedule(step, steps_per_epoch, cfg)
            params.zero_grads()
            with tn.Tape() as tape:
                loss = tn.cross_entropy(forward_logits(model, xb), train_y[idx])
                tn.backward(tape, loss)
            adamw_step(params, optim, lr, cfg)
            step += 1
            rows.append({"epoch": epoch, "step": step, "lr": lr, "train_loss": loss.item(), "val_accuracy": ""})
        val_acc = accuracy(model, val_x, val_y)
        rows[-1]["val_accuracy"] = val_acc
        log.info("epoch %d loss %.4f val_acc %.4f", epoch, rows[-1]["train_loss"], val_acc)
        if val_acc > best_acc:
            best_acc, best = val_acc, model.params.snapshot()
    if best is not None:
        model.params.load_arrays(best)
    return model, rows


def fresh_model(cfg: KwtConfig, seed: int) -> KwtModel:
    return init_model(cfg, seed)


def stack_labels(entries: Sequence[Entry]) -> np.ndarray:
    return np.array([e.label for e in entries], dtype=np.int64)
