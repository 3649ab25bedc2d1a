"""Data2Vec-style pretraining: span masking, EMA teacher, top-K averaged targets.

Three input routings are supported:

* ``clean``      student and teacher both see clean features
* ``noisy``      both see the multistyle mix (items without a MixSpec stay clean)
* ``denoising``  student sees the mix, teacher sees the clean clip
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import tensor as tn
from .data import SNR_GRID, DataError, Entry
from .model import ENCODER_PREFIXES, KwtModel, encoder_block_outputs
from .tensor import ParameterSet, Tensor
from .train import OptimState, adamw_step, lr_schedule

log = logging.getLogger(__name__)

VARIANTS = ("clean", "noisy", "denoising")
STUDENT_ONLY = ("mask_token", "regression_head.")


@dataclass(frozen=True)
class PretrainConfig:
    k: int = 8
    tau_start: float = 0.999
    tau_end: float = 0.9999
    tau_anneal_steps: int | None = None
    mask_span: int = 10
    mask_target_prob: float = 0.65
    variant: str = "clean"
    epochs: int = 100
    batch_size: int = 512
    max_lr: float = 1e-3
    weight_decay: float = 0.1
    warmup_epochs: int = 10
    betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}")
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if not 0 < self.mask_target_prob < 1:
            raise ValueError("mask_target_prob must lie in (0, 1)")
        if not (0 <= self.tau_start <= 1 and 0 <= self.tau_end <= 1):
            raise ValueError("tau values must lie in [0, 1]")
        if self.mask_span < 1:
            raise ValueError("mask_span must be >= 1")


# ---------------------------------------------------------------- masking


@dataclass(frozen=True)
class MaskPlan:
    t: int
    start_indices: np.ndarray
    mask: np.ndarray


def span_start_prob(target: float, span: int) -> float:
    """Per-index start probability giving ``target`` coverage away from the left edge."""
    return 1.0 - (1.0 - target) ** (1.0 / span)


def spans_to_mask(starts: np.ndarray, t: int, span: int) -> np.ndarray:
    mask = np.zeros(t, dtype=bool)
    for s in starts:
        mask[s:s + span] = True
    return mask


def sample_mask(t: int, cfg: PretrainConfig, rng: np.random.Generator, max_tries: int = 1000) -> MaskPlan:
    """Independent span starts; masks that are empty or cover everything are redrawn."""
    if t <= cfg.mask_span:
        raise ValueError(f"T={t} must exceed the mask span {cfg.mask_span}")
    p = span_start_prob(cfg.mask_target_prob, cfg.mask_span)
    for _ in range(max_tries):
        starts = np.flatnonzero(rng.random(t) < p)
        mask = spans_to_mask(starts, t, cfg.mask_span)
        if mask.any() and not mask.all():
            return MaskPlan(t, starts, mask)
    raise RuntimeError(f"no valid mask after {max_tries} draws (p={p:.3g})")


def sample_batch_mask(batch: int, t: int, cfg: PretrainConfig, rng: np.random.Generator) -> np.ndarray:
    return np.stack([sample_mask(t, cfg, rng).mask for _ in range(batch)])


def apply_mask(projected: Tensor, mask: np.ndarray, mask_token: Tensor) -> Tensor:
    return tn.replace_masked(projected, mask, mask_token)


# ---------------------------------------------------------------- targets and loss


def normalize_steps(x: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    mu = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps)


def teacher_targets(block_outputs: Sequence, k: int) -> np.ndarray:
    """Mean of the per-step normalised outputs of the top ``k`` blocks."""
    n = len(block_outputs)
    if not 1 <= k <= n:
        raise ValueError(f"k={k} outside [1, {n}]")
    arrays = [b.data if isinstance(b, Tensor) else np.asarray(b) for b in block_outputs[n - k:]]
    # averaged as offsets from the first block so identical blocks give it back exactly
    first = normalize_steps(arrays[0])
    if k == 1:
        return first
    offset = np.zeros_like(first)
    for a in arrays[1:]:
        offset = offset + (normalize_steps(a) - first)
    return first + offset / k


def init_regression_head(dim: int, seed: int, dtype=np.float32) -> ParameterSet:
    rng = np.random.default_rng(seed)
    w = np.clip(rng.standard_normal((dim, dim)), -2, 2) * 0.02
    return ParameterSet({"regression_head.weight": Tensor(w, dtype=dtype),
                         "regression_head.bias": Tensor(np.zeros(dim), dtype=dtype)})


def student_loss(student_final: Tensor, head: ParameterSet, y, mask: np.ndarray) -> Tensor:
    """Masked MSE between the regression-head prediction and the teacher targets."""
    mask = np.asarray(mask, dtype=bool)
    if not mask.any(axis=-1).all():
        raise ValueError("every item needs at least one masked step")
    pred = tn.linear(student_final, head["regression_head.weight"], head["regression_head.bias"])
    return tn.mse(pred, y, mask)


# ---------------------------------------------------------------- EMA


def mirrored(params: ParameterSet) -> ParameterSet:
    return params.subset(ENCODER_PREFIXES)


def make_teacher(student: ParameterSet) -> ParameterSet:
    teacher = mirrored(student).copy()
    for _, t in teacher.items():
        t.requires_grad = False
    return teacher


def ema_update(teacher: ParameterSet, student: ParameterSet, tau: float) -> None:
    """``teacher <- tau * teacher + (1 - tau) * student`` over the mirrored parameters."""
    if not 0 <= tau <= 1:
        raise ValueError("tau must lie in [0, 1]")
    names = mirrored(student).names()
    if teacher.names() != names:
        raise ValueError("teacher and student parameter names differ")
    for name in names:
        d, s = teacher[name], student[name]
        if d.shape != s.shape:
            raise ValueError(f"{name}: teacher {d.shape} vs student {s.shape}")
        d.data = tau * d.data + (1.0 - tau) * s.data


def tau_schedule(step: int, cfg: PretrainConfig, total_steps: int | None = None) -> float:
    """Linear ramp from ``tau_start`` to ``tau_end`` over the anneal window, then flat."""
    n = cfg.tau_anneal_steps or total_steps
    if not n or step >= n:
        return cfg.tau_end
    return cfg.tau_start + (cfg.tau_end - cfg.tau_start) * step / n


# ---------------------------------------------------------------- training


def route_inputs(variant: str, clean: np.ndarray, mixed: np.ndarray | None) -> tuple[np.ndarray, np.ndarray]:
    """(student input, teacher input) for a pretraining variant."""
    if variant == "clean":
        return clean, clean
    if mixed is None:
        raise DataError(f"variant {variant!r} needs noise material")
    if variant == "noisy":
        return mixed, mixed
    if variant == "denoising":
        return mixed, clean
    raise ValueError(f"unknown variant {variant!r}")


def check_pretrain_mixes(entries: Sequence[Entry], grid: Sequence[float] = SNR_GRID) -> None:
    for e in entries:
        if e.mix is not None and not e.mix.on_grid(grid):
            raise DataError(f"{e.id}: SNR {e.mix.snr_db} dB is not on the grid {tuple(grid)}")


class Pretrainer:
    """Student, EMA teacher, regression head and optimiser state for one run."""

    def __init__(self, student: KwtModel, cfg: PretrainConfig, seed: int = 0,
                 steps_per_epoch: int = 1):
        self.student = student
        self.cfg = cfg
        self.teacher = make_teacher(student.params)
        self.head = init_regression_head(student.cfg.dim, seed + 1,
                                         dtype=student.params["input_proj.weight"].data.dtype)
        trainable = {n: t for n, t in student.params.items() if not n.startswith(("head.", "final_norm."))}
        trainable.update(dict(self.head.items()))
        self.trainable = ParameterSet(trainable)
        self.optim = OptimState()
        self.steps_per_epoch = steps_per_epoch
        self.total_steps = cfg.epochs * steps_per_epoch
        self.step = 0

    def targets(self, teacher_input: np.ndarray) -> np.ndarray:
        with tn.no_grad():
            outs = encoder_block_outputs(self.teacher, self.student.cfg, teacher_input)
        return teacher_targets(outs, self.cfg.k)

    def loss(self, student_input: np.ndarray, y: np.ndarray, mask: np.ndarray) -> Tensor:
        outs = encoder_block_outputs(self.student.params, self.student.cfg, student_input, mask=mask)
        return student_loss(outs[-1], self.head, y, mask)

    def train_step(self, clean: np.ndarray, mixed: np.ndarray | None, rng: np.random.Generator) -> dict:
        student_in, teacher_in = route_inputs(self.cfg.variant, clean, mixed)
        mask = sample_batch_mask(len(clean), clean.shape[1], self.cfg, rng)
        y = self.targets(teacher_in)
        lr = lr_schedule(self.step, self.steps_per_epoch, self.cfg)
        self.trainable.zero_grads()
        with tn.Tape() as tape:
            loss = self.loss(student_in, y, mask)
            tn.backward(tape, loss)
        if not math.isfinite(loss.item()):
            raise tn.NonFiniteError("non-finite pretraining loss")
        adamw_step(self.trainable, self.optim, lr, self.cfg)
        tau = tau_schedule(self.step, self.cfg, self.total_steps)
        ema_update(self.teacher, self.student.params, tau)
        self.step += 1
        return {"step": self.step, "loss": loss.item(), "tau": tau, "lr": lr}


def run_pretraining(student: KwtModel, clean: np.ndarray, mixed: np.ndarray | None,
                    cfg: PretrainConfig, seed: int = 0) -> tuple[Pretrainer, list[dict]]:
    """Full pretraining loop over precomputed features; returns the trainer and its log rows.

    ``mixed`` holds per-item multistyle features (identical to ``clean`` for
    items without a MixSpec) and is required by the noisy and denoising variants.
    """
    n = len(clean)
    steps_per_epoch = math.ceil(n / cfg.batch_size)
    trainer = Pretrainer(student, cfg, seed, steps_per_epoch)
    rng = np.random.default_rng(seed)
    rows = []
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        for s in range(0, n, cfg.batch_size):
            idx = order[s:s + cfg.batch_size]
            row = trainer.train_step(clean[idx], None if mixed is None else mixed[idx], rng)
            rows.append({"epoch": epoch, **row})
        log.info("pretrain epoch %d loss %.4f tau %.5f", epoch, rows[-1]["loss"], rows[-1]["tau"])
    return trainer, rows
