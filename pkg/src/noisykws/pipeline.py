"""End-to-end experiment steps shared by the CLI and the scripts.

The six training methods map onto (pretraining variant, fine-tuning data):

    baseline-clean    -            clean
    baseline-mtr      -            mtr
    d2v-clean         clean        clean
    d2v-clean+noisy   clean        mtr
    d2v-noisy         noisy        mtr
    d2v-denoising     denoising    mtr
"""
from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .data import (NOISE_TYPES, SAMPLE_RATE, SNR_GRID, AudioStore, DatasetManifest, Entry, NoiseClip,
                   TestSuite, build_mtr_assignments, build_test_suites, featurize, ingest_speech_commands,
                   item_seed, load_noise_dir, split_pretrain_train, synth_corpus, synth_noise_bank)
from .dsp import MfccConfig, Waveform, read_wav, write_wav
from .evaluate import EvalResult, SuiteRecord, accuracy_from_predictions, aggregate
from .model import KwtConfig, KwtModel, init_model, predict, save_checkpoint
from .pretrain import PretrainConfig, check_pretrain_mixes, run_pretraining
from .train import SpecAugmentConfig, TrainConfig, run_supervised, stack_labels

log = logging.getLogger(__name__)

METHODS = {
    "baseline-clean": (None, "clean"),
    "baseline-mtr": (None, "mtr"),
    "d2v-clean": ("clean", "clean"),
    "d2v-clean+noisy": ("clean", "mtr"),
    "d2v-noisy": ("noisy", "mtr"),
    "d2v-denoising": ("denoising", "mtr"),
}


def method_plan(method: str) -> tuple[str | None, str]:
    if method not in METHODS:
        raise ValueError(f"unknown method {method!r}; valid: {', '.join(METHODS)}")
    return METHODS[method]


@dataclass(frozen=True)
class DataConfig:
    source: str = "synthetic"
    path: str | None = None
    noise_dir: str | None = None
    n_classes: int = 10
    n_per_class: int = 210
    n_test_per_class: int = 20
    n_val_per_class: int = 10
    pretrain_fraction: float = 0.8
    noisy_fraction: float = 0.5
    noise_seconds: float = 10.0

    def __post_init__(self):
        if self.source not in ("synthetic", "speech_commands_dir"):
            raise ValueError(f"data source must be 'synthetic' or 'speech_commands_dir', not {self.source!r}")
        if self.source == "speech_commands_dir" and not self.path:
            raise ValueError("data.path is required for source 'speech_commands_dir'")


@dataclass
class PreparedData:
    manifest: DatasetManifest
    store: AudioStore
    train_bank: dict[str, NoiseClip]
    test_bank: dict[str, NoiseClip]
    suites: list[TestSuite]


def prepare_data(dcfg: DataConfig, seed: int) -> PreparedData:
    """Corpus, 80/20 split, multistyle assignments, noise banks and the 42+1 test suites."""
    if dcfg.source == "synthetic":
        manifest, audio = synth_corpus(dcfg.n_classes, dcfg.n_per_class, seed, dcfg.n_test_per_class,
                                       dcfg.n_val_per_class, dcfg.pretrain_fraction)
        # quantise once so in-memory and on-disk runs see the same samples
        audio = {k: Waveform(np.round(w.samples * 32768.0).clip(-32768, 32767) / 32768.0, w.sample_rate)
                 for k, w in audio.items()}
        store = AudioStore(audio=audio)
    else:
        manifest = split_pretrain_train(ingest_speech_commands(dcfg.path), dcfg.pretrain_fraction, seed)
        store = AudioStore(root=dcfg.path)
    if dcfg.noise_dir:
        bank = load_noise_dir(dcfg.noise_dir)
        train_bank = test_bank = bank
    else:
        train_bank = synth_noise_bank(seed, dcfg.noise_seconds)
        test_bank = synth_noise_bank(seed + 1, dcfg.noise_seconds)
    seen = [t for t in ("BUS", "PED", "STR", "SSN") if t in train_bank]
    noise_len = min(len(c.waveform) for c in train_bank.values())
    specs = {}
    for split in ("train", "pretrain"):
        specs.update(build_mtr_assignments(manifest.split(split), dcfg.noisy_fraction, seen, SNR_GRID,
                                           item_seed(seed, "mtr", split), noise_len, SAMPLE_RATE))
    manifest = manifest.with_mix(specs)
    test_len = min(len(c.waveform) for c in test_bank.values())
    types = [t for t in NOISE_TYPES if t in test_bank]
    suites = build_test_suites(manifest.split("test"), types, SNR_GRID, item_seed(seed, "suites"),
                               test_len, SAMPLE_RATE)
    return PreparedData(manifest, store, train_bank, test_bank, suites)


def save_prepared(pd: PreparedData, out_dir) -> None:
    out = Path(out_dir)
    (out / "noise" / "train").mkdir(parents=True, exist_ok=True)
    (out / "noise" / "test").mkdir(parents=True, exist_ok=True)
    pd.manifest.write_jsonl(out / "manifest.jsonl")
    if pd.store.root is None:
        audio_dir = out / "audio"
        for e in pd.manifest.entries:
            p = audio_dir / e.path
            p.parent.mkdir(parents=True, exist_ok=True)
            write_wav(p, pd.store.load(e))
        source = {"audio_root": "audio"}
    else:
        source = {"audio_root": str(pd.store.root)}
    for name, bank in (("train", pd.train_bank), ("test", pd.test_bank)):
        for t, clip in bank.items():
            write_wav(out / "noise" / name / f"{t}.wav", clip.waveform)
    with open(out / "suites.jsonl", "w") as fh:
        for s in pd.suites:
            fh.write(json.dumps({"name": s.name, "noise_type": s.noise_type, "snr_db": s.snr_db,
                                 "items": [[e.id, None if m is None else m.__dict__] for e, m in s.items]},
                                sort_keys=True) + "\n")
    (out / "prepared.json").write_text(json.dumps({**source, "counts": pd.manifest.counts()}, indent=2, sort_keys=True))


def load_prepared(data_dir) -> PreparedData:
    from .data import MixSpec
    root = Path(data_dir)
    info = json.loads((root / "prepared.json").read_text())
    manifest = DatasetManifest.read_jsonl(root / "manifest.jsonl")
    audio_root = Path(info["audio_root"])
    store = AudioStore(root=audio_root if audio_root.is_absolute() else root / audio_root)
    banks = {}
    for name in ("train", "test"):
        banks[name] = {f.stem: NoiseClip(f.stem, read_wav(f)) for f in sorted((root / "noise" / name).glob("*.wav"))}
    by_id = {e.id: e for e in manifest.entries}
    suites = []
    for line in (root / "suites.jsonl").read_text().splitlines():
        d = json.loads(line)
        items = [(by_id[i], None if m is None else MixSpec(**m)) for i, m in d["items"]]
        suites.append(TestSuite(d["name"], d["noise_type"], d["snr_db"], items))
    return PreparedData(manifest, store, banks["train"], banks["test"], suites)


def split_features(pd: PreparedData, split: str, use_mix: bool, mfcc: MfccConfig = MfccConfig()) -> np.ndarray:
    entries = pd.manifest.split(split)
    return featurize([(e, e.mix if use_mix else None) for e in entries], pd.store, pd.train_bank, mfcc)


# ---------------------------------------------------------------- steps


def pretrain_step_run(pd: PreparedData, model_cfg: KwtConfig, pcfg: PretrainConfig, seed: int,
                      mfcc: MfccConfig = MfccConfig()) -> tuple[KwtModel, list[dict]]:
    entries = pd.manifest.split("pretrain")
    check_pretrain_mixes(entries)
    clean = split_features(pd, "pretrain", False, mfcc)
    mixed = split_features(pd, "pretrain", True, mfcc) if pcfg.variant != "clean" else None
    model = init_model(model_cfg, seed)
    trainer, rows = run_pretraining(model, clean, mixed, pcfg, seed)
    return model, rows


def train_step_run(pd: PreparedData, model_cfg: KwtConfig, tcfg: TrainConfig, seed: int,
                   init_checkpoint=None, augment: SpecAugmentConfig = SpecAugmentConfig(),
                   mfcc: MfccConfig = MfccConfig()) -> tuple[KwtModel, list[dict]]:
    train_x = split_features(pd, "train", tcfg.data_policy == "mtr", mfcc)
    train_y = stack_labels(pd.manifest.split("train"))
    val_x = split_features(pd, "validation", False, mfcc)
    val_y = stack_labels(pd.manifest.split("validation"))
    model = init_model(model_cfg, seed)
    return run_supervised(model, train_x, train_y, val_x, val_y, tcfg, seed, augment, init_checkpoint)


def evaluate_all(model: KwtModel, pd: PreparedData, suites: Sequence[TestSuite] | None = None,
                 mfcc: MfccConfig = MfccConfig()) -> EvalResult:
    suites = pd.suites if suites is None else suites
    records = []
    for s in suites:
        x = featurize(s.items, pd.store, pd.test_bank, mfcc)
        acc, n = accuracy_from_predictions(predict(model, x), stack_labels([e for e, _ in s.items]))
        records.append(SuiteRecord(s.noise_type or "clean", s.snr_db, acc, n))
    full = len(suites) == len(pd.suites)
    return aggregate(records, declared_subset=not full or len(pd.test_bank) < len(NOISE_TYPES))


def write_rows(path, rows: list[dict], fields: Sequence[str]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(fields), extrasaction="ignore", lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in r.items()})


def save_model(path, model: KwtModel, meta: dict) -> None:
    save_checkpoint(path, model.params, model.cfg, meta)
