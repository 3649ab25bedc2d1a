"""Desk-scale smoke experiment: baseline-clean vs d2v-denoising on the synthetic corpus.

Runs the CLI commands in-process so the experiment exercises exactly what a
user would type, then reads the metric CSVs back.
"""
from __future__ import annotations

import csv
import time
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .cli import main as cli_main


@dataclass
class SmokeSummary:
    run_root: str
    seconds: float
    baseline_loss: tuple[float, float]  # 10-step moving average, first and last window
    pretrain_loss: tuple[float, float]
    finetune_loss: tuple[float, float]
    baseline_clean: float
    baseline_ssn0: float
    denoising_clean: float
    denoising_ssn0: float
    baseline_seen_mean: float
    denoising_seen_mean: float

    def to_dict(self) -> dict:
        return asdict(self)


def moving_average_ends(values, window: int = 10) -> tuple[float, float]:
    v = np.asarray(values, dtype=float)
    if v.size < window:
        raise ValueError(f"need at least {window} values, got {v.size}")
    ma = np.convolve(v, np.ones(window) / window, mode="valid")
    return float(ma[0]), float(ma[-1])


def _column(path: Path, name: str) -> list[float]:
    with open(path, newline="") as fh:
        return [float(r[name]) for r in csv.DictReader(fh)]


def _accuracy(results_csv: Path, noise_type: str, snr: float | None) -> float:
    with open(results_csv, newline="") as fh:
        for r in csv.DictReader(fh):
            row_snr = None if r["snr_db"] == "clean" else float(r["snr_db"])
            if r["noise_type"] == noise_type and row_snr == snr:
                return float(r["accuracy"])
    raise KeyError((noise_type, snr))


def _seen_mean(results_csv: Path) -> float:
    from .evaluate import results_from_csv
    (res,) = results_from_csv(results_csv.read_text()).values()
    return res.seen_mean


def _run(*argv) -> None:
    code = cli_main([str(a) for a in argv])
    if code != 0:
        raise RuntimeError(f"command failed with exit code {code}: {' '.join(map(str, argv))}")


def run_smoke(out_dir, config="configs/desk.toml", seed: int | None = None) -> SmokeSummary:
    root = Path(out_dir)
    t0 = time.perf_counter()
    common = ["--config", config, "--out", root, "--deterministic"]
    if seed is not None:
        common += ["--seed", seed]
    data = root / "data"
    _run("prepare-data", *common, "--run-name", "data")
    _run("train", *common, "--method", "baseline-clean", "--data", data, "--run-name", "baseline")
    _run("pretrain", *common, "--method", "d2v-denoising", "--data", data, "--run-name", "pretrain")
    pre_ckpt = next((root / "pretrain").glob("*.kwsc"))
    _run("train", *common, "--method", "d2v-denoising", "--data", data, "--run-name", "finetune",
         "--init-checkpoint", pre_ckpt)
    for name in ("baseline", "finetune"):
        ckpt = next((root / name).glob("*.kwsc"))
        _run("evaluate", *common, "--data", data, "--checkpoint", ckpt, "--run-name", f"eval-{name}")
    _run("report", root / "eval-baseline", root / "eval-finetune", "--out", root, "--run-name", "report")
    base_csv, ft_csv = root / "eval-baseline" / "results.csv", root / "eval-finetune" / "results.csv"
    return SmokeSummary(
        run_root=str(root),
        seconds=time.perf_counter() - t0,
        baseline_loss=moving_average_ends(_column(root / "baseline" / "train_log.csv", "train_loss")),
        pretrain_loss=moving_average_ends(_column(root / "pretrain" / "pretrain_log.csv", "loss")),
        finetune_loss=moving_average_ends(_column(root / "finetune" / "train_log.csv", "train_loss")),
        baseline_clean=_accuracy(base_csv, "clean", None),
        baseline_ssn0=_accuracy(base_csv, "SSN", 0.0),
        denoising_clean=_accuracy(ft_csv, "clean", None),
        denoising_ssn0=_accuracy(ft_csv, "SSN", 0.0),
        baseline_seen_mean=_seen_mean(base_csv),
        denoising_seen_mean=_seen_mean(ft_csv),
    )
