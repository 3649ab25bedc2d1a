"""Fast property checks behind ``noisykws selfcheck``.

Each check returns (passed, detail). The checks are reduced versions of the
acceptance suite so the command finishes in well under a minute.
"""
from __future__ import annotations

import time
from typing import Callable

import numpy as np

from . import tensor as tn
from .data import SNR_GRID, MixSpec, NoiseClip, measured_snr, mix_at_snr
from .dsp import MfccConfig, Waveform, mfcc_from_power, power_spectrogram
from .evaluate import SuiteRecord, aggregate
from .model import KwtConfig, forward_logits, init_model
from .pretrain import PretrainConfig, Pretrainer, sample_batch_mask, sample_mask, teacher_targets


def check_gradients() -> tuple[bool, str]:
    with tn.precision(np.float64):
        cfg = KwtConfig.variant("kwt-tiny", n_classes=3, dim=8, heads=2, n_blocks=2)
        m = init_model(cfg, 0, dtype=np.float64)
        rng = np.random.default_rng(0)
        x = rng.normal(size=(2, 4, 40))
        ps = m.params.subset(("input_proj.", "block.", "final_norm.", "head."))
        ce = tn.grad_check(lambda: tn.cross_entropy(forward_logits(m, x), np.array([0, 2])), ps)
        tr = Pretrainer(m, PretrainConfig(k=2, epochs=1), 0, 1)
        mask = np.array([[False, True, True, False], [True, False, False, True]])
        y = tr.targets(x)
        d2v = tn.grad_check(lambda: tr.loss(x + 0.1, y, mask), tr.trainable)
    worst = max(ce["max_rel_error"], d2v["max_rel_error"])
    return worst < 1e-4, f"max rel error {worst:.2e}"


def _dft_mfcc(frame: np.ndarray, cfg: MfccConfig) -> np.ndarray:
    n = cfg.n_fft
    i = np.arange(cfg.window_samples)
    padded = np.zeros(n)
    padded[:cfg.window_samples] = frame * (0.5 - 0.5 * np.cos(2 * np.pi * i / cfg.window_samples))
    k = np.arange(n // 2 + 1)[:, None]
    power = np.abs((padded * np.exp(-2j * np.pi * k * np.arange(n) / n)).sum(axis=1)) ** 2
    mel = lambda f: 2595 * np.log10(1 + f / 700)  # noqa: E731
    pts = 700 * (10 ** (np.linspace(mel(cfg.mel_fmin), mel(cfg.mel_fmax), cfg.n_mels + 2) / 2595) - 1)
    f = np.arange(n // 2 + 1) * cfg.sample_rate / n
    fb = np.zeros((cfg.n_mels, f.size))
    for m in range(cfg.n_mels):
        lo, c, hi = pts[m:m + 3]
        fb[m] = np.where((f > lo) & (f <= c), (f - lo) / (c - lo), 0) + np.where((f > c) & (f < hi), (hi - f) / (hi - c), 0)
    logmel = np.log(np.maximum(fb @ power, cfg.log_floor))
    q, j = np.arange(cfg.n_mfcc)[:, None], np.arange(cfg.n_mels)[None, :]
    dct = np.sqrt(np.where(q == 0, 1.0, 2.0) / cfg.n_mels) * np.cos(np.pi * q * (2 * j + 1) / (2 * cfg.n_mels))
    return dct @ logmel


def check_dsp() -> tuple[bool, str]:
    cfg = MfccConfig()
    rng = np.random.default_rng(1)
    worst = 0.0
    for _ in range(10):
        frame = rng.uniform(-1, 1, cfg.window_samples)
        ours = mfcc_from_power(power_spectrogram(frame, cfg), cfg)[0]
        ref = _dft_mfcc(frame, cfg)
        worst = max(worst, float(np.max(np.abs(ours - ref)) / np.max(np.abs(ref))))
    shape = power_spectrogram(np.zeros(16000), cfg).shape[0]
    return worst < 1e-4 and shape == 98, f"max rel deviation {worst:.2e}, frames for 1 s = {shape}"


def check_masks() -> tuple[bool, str]:
    rng = np.random.default_rng(2)
    cfg = PretrainConfig()
    cov = float(np.mean([sample_mask(98, cfg, rng).mask.mean() for _ in range(2000)]))
    batch = sample_batch_mask(4, 98, cfg, rng)
    ok = 0.60 <= cov <= 0.70 and batch.any(axis=1).all() and not batch.all(axis=1).any()
    return ok, f"coverage {cov:.3f}"


def check_snr() -> tuple[bool, str]:
    rng = np.random.default_rng(3)
    worst = 0.0
    for snr in SNR_GRID:
        for _ in range(5):
            clean = Waveform(rng.normal(scale=rng.uniform(0.01, 1), size=16000))
            noise = NoiseClip("SSN", Waveform(rng.normal(scale=rng.uniform(0.01, 1), size=24000)))
            out = mix_at_snr(clean, noise, MixSpec("SSN", snr, int(rng.integers(0, 8000)), 0))
            worst = max(worst, abs(measured_snr(clean.samples, out.samples - clean.samples) - snr))
    return worst < 1e-3, f"max SNR error {worst:.2e} dB"


def check_targets() -> tuple[bool, str]:
    rng = np.random.default_rng(4)
    blocks = [rng.normal(size=(2, 3, 4)) for _ in range(3)]
    ref = np.zeros((2, 3, 4))
    for blk in blocks[1:]:
        for b in range(2):
            for t in range(3):
                v = blk[b, t]
                ref[b, t] += (v - v.mean()) / np.sqrt(v.var() + 1e-5) / 2
    err = float(np.abs(teacher_targets(blocks, 2) - ref).max())
    return err < 1e-6, f"max abs error {err:.2e}"


def check_aggregate() -> tuple[bool, str]:
    row = (0.310, 0.500, 0.665, 0.769, 0.825, 0.854, 0.868)
    recs = [SuiteRecord("clean", None, 0.876, 1)]
    recs += [SuiteRecord(t, s, a, 1) for t in ("BUS", "PED", "STR", "SSN") for s, a in zip(SNR_GRID, row)]
    mean = aggregate(recs, declared_subset=True).seen_mean
    return abs(mean - 0.708) < 1e-3, f"overall seen mean {mean:.5f}"


CHECKS: dict[str, Callable[[], tuple[bool, str]]] = {
    "gradients": check_gradients,
    "dsp-oracle": check_dsp,
    "mask-statistics": check_masks,
    "snr-exactness": check_snr,
    "teacher-targets": check_targets,
    "aggregation": check_aggregate,
}


def run_selfcheck(emit=print) -> bool:
    all_ok = True
    for name, fn in CHECKS.items():
        t0 = time.perf_counter()
        ok, detail = fn()
        all_ok &= ok
        emit(f"{'PASS' if ok else 'FAIL'}  {name:<16} {detail}  ({time.perf_counter() - t0:.1f}s)")
    return all_ok
