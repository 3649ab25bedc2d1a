"""Dataset bookkeeping, noise mixing at exact SNR, multistyle assignments and test suites."""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .dsp import MfccConfig, Waveform, compute_features, read_wav

SAMPLE_RATE = 16000
SNR_GRID = (-10, -5, 0, 5, 10, 15, 20)
SEEN_TYPES = ("BUS", "PED", "STR", "SSN")
UNSEEN_TYPES = ("BBL", "CAF")
NOISE_TYPES = SEEN_TYPES + UNSEEN_TYPES
SPLITS = ("pretrain", "train", "validation", "test")


class DataError(ValueError):
    pass


def item_seed(*parts) -> int:
    """Stable 63-bit seed from arbitrary parts (independent of PYTHONHASHSEED)."""
    digest = hashlib.blake2b("\x1f".join(map(str, parts)).encode(), digest_size=8).digest()
    return int.from_bytes(digest, "little") >> 1


# ---------------------------------------------------------------- types


@dataclass(frozen=True)
class MixSpec:
    noise_type: str
    snr_db: float
    noise_offset: int
    rng_seed: int

    def __post_init__(self):
        if self.noise_type not in NOISE_TYPES:
            raise DataError(f"unknown noise type {self.noise_type!r}")
        if not np.isfinite(self.snr_db):
            raise DataError("snr_db must be finite")
        if self.noise_offset < 0:
            raise DataError("noise_offset must be non-negative")

    def on_grid(self, grid: Sequence[float] = SNR_GRID) -> bool:
        return self.snr_db in grid


@dataclass(frozen=True)
class Entry:
    id: str
    path: str
    label: int
    split: str
    mix: MixSpec | None = None

    def to_json(self) -> str:
        d = asdict(self)
        if self.mix is None:
            d.pop("mix")
        return json.dumps(d, sort_keys=True)

    @classmethod
    def from_json(cls, line: str) -> "Entry":
        d = json.loads(line)
        mix = d.pop("mix", None)
        return cls(mix=MixSpec(**mix) if mix else None, **d)


@dataclass
class DatasetManifest:
    entries: list[Entry]
    labels: list[str]
    seed: int | None = None

    def __post_init__(self):
        ids = [e.id for e in self.entries]
        if len(set(ids)) != len(ids):
            raise DataError("duplicate utterance ids in manifest")
        for e in self.entries:
            if e.split not in SPLITS:
                raise DataError(f"unknown split {e.split!r}")
            if not 0 <= e.label < len(self.labels):
                raise DataError(f"label {e.label} out of range for {e.id}")

    def split(self, name: str) -> list[Entry]:
        return [e for e in self.entries if e.split == name]

    def counts(self) -> dict[str, int]:
        return {s: sum(e.split == s for e in self.entries) for s in SPLITS}

    def with_mix(self, specs: dict[str, MixSpec | None]) -> "DatasetManifest":
        entries = [replace(e, mix=specs.get(e.id, e.mix)) for e in self.entries]
        return DatasetManifest(entries, list(self.labels), self.seed)

    def write_jsonl(self, path) -> None:
        path = Path(path)
        header = json.dumps({"labels": self.labels, "seed": self.seed}, sort_keys=True)
        path.write_text("\n".join([header] + [e.to_json() for e in self.entries]) + "\n")

    @classmethod
    def read_jsonl(cls, path) -> "DatasetManifest":
        lines = Path(path).read_text().splitlines()
        if not lines:
            raise DataError(f"empty manifest {path}")
        header = json.loads(lines[0])
        return cls([Entry.from_json(l) for l in lines[1:] if l.strip()],
                   header["labels"], header.get("seed"))


@dataclass
class NoiseClip:
    type: str
    waveform: Waveform
    role: str = field(init=False)

    def __post_init__(self):
        if self.type not in NOISE_TYPES:
            raise DataError(f"unknown noise type {self.type!r}")
        self.role = "seen" if self.type in SEEN_TYPES else "unseen"


# ---------------------------------------------------------------- Speech Commands


def ingest_speech_commands(root_dir) -> DatasetManifest:
    """Manifest for a Speech Commands V2 tree.

    Validation/test membership comes from ``validation_list.txt`` and
    ``testing_list.txt``; every other clip lands in the ``train`` pool.
    Folders starting with ``_`` (background noise) are skipped.
    """
    root = Path(root_dir)
    lists = {}
    for split, fname in (("validation", "validation_list.txt"), ("test", "testing_list.txt")):
        f = root / fname
        if not f.is_file():
            raise DataError(f"missing list file {f}")
        lists[split] = {l.strip() for l in f.read_text().splitlines() if l.strip()}
    both = lists["validation"] & lists["test"]
    if both:
        raise DataError(f"{len(both)} files listed in both validation and test, e.g. {sorted(both)[0]}")
    labels = sorted(p.name for p in root.iterdir() if p.is_dir() and not p.name.startswith("_"))
    entries = []
    for li, label in enumerate(labels):
        files = sorted((root / label).glob("*.wav"))
        if not files:
            raise DataError(f"empty keyword folder {label}")
        for f in files:
            rel = f"{label}/{f.name}"
            split = "validation" if rel in lists["validation"] else "test" if rel in lists["test"] else "train"
            entries.append(Entry(rel, rel, li, split))
    return DatasetManifest(entries, labels)


def split_pretrain_train(manifest: DatasetManifest, fraction: float = 0.8, seed: int = 0) -> DatasetManifest:
    """Move ``round(fraction * pool)`` random clips of the train pool into ``pretrain``."""
    if not 0 < fraction < 1:
        raise DataError("fraction must lie strictly between 0 and 1")
    pool = sorted((e.id for e in manifest.entries if e.split in ("train", "pretrain")))
    if not pool:
        raise DataError("empty training pool")
    order = np.random.default_rng(seed).permutation(len(pool))
    n_pre = int(round(fraction * len(pool)))
    pre = {pool[i] for i in order[:n_pre]}
    entries = [replace(e, split="pretrain" if e.id in pre else "train") if e.split in ("train", "pretrain") else e
               for e in manifest.entries]
    return DatasetManifest(entries, list(manifest.labels), seed)


# ---------------------------------------------------------------- mixing


def mean_power(x: np.ndarray) -> float:
    return float(np.mean(np.square(x, dtype=np.float64)))


def measured_snr(clean: np.ndarray, noise_component: np.ndarray) -> float:
    return 10.0 * np.log10(mean_power(clean) / mean_power(noise_component))


def noise_gain(p_signal: float, p_noise: float, snr_db: float) -> float:
    return float(np.sqrt(p_signal / (p_noise * 10.0 ** (snr_db / 10.0))))


def mix_at_snr(clean: Waveform, noise: NoiseClip, spec: MixSpec, peak_normalize: bool = False) -> Waveform:
    """``clean + g * noise[offset:offset+N]`` with ``g`` chosen so the full-clip SNR is exact."""
    n = len(clean)
    if spec.noise_type != noise.type:
        raise DataError(f"spec asks for {spec.noise_type} noise, got {noise.type}")
    if spec.noise_offset + n > len(noise.waveform):
        raise DataError(f"noise offset {spec.noise_offset} leaves fewer than {n} samples")
    seg = noise.waveform.samples[spec.noise_offset:spec.noise_offset + n]
    ps, pn = mean_power(clean.samples), mean_power(seg)
    if ps == 0:
        raise DataError("clean signal has zero power")
    if pn == 0:
        raise DataError("noise segment has zero power")
    out = clean.samples + noise_gain(ps, pn, spec.snr_db) * seg
    if peak_normalize:
        peak = np.max(np.abs(out))
        if peak > 1:
            out = out / peak
    return Waveform(out, clean.sample_rate, {"mix": asdict(spec)})


def _choose_offset(rng: np.random.Generator, noise_length: int, clip_length: int) -> int:
    if noise_length < clip_length:
        raise DataError("noise clip shorter than the speech clip")
    return int(rng.integers(0, noise_length - clip_length + 1))


def build_mtr_assignments(entries: Sequence[Entry], noisy_fraction: float = 0.5,
                          seen_types: Sequence[str] = SEEN_TYPES, snr_grid: Sequence[float] = SNR_GRID,
                          seed: int = 0, noise_length: int = 10 * SAMPLE_RATE,
                          clip_length: int = SAMPLE_RATE) -> dict[str, MixSpec | None]:
    """Assign a MixSpec to exactly ``round(noisy_fraction * n)`` utterances.

    Selection ranks utterances by a seeded hash of their id, so the result
    does not depend on the order of ``entries``.
    """
    if not 0 <= noisy_fraction <= 1:
        raise DataError("noisy_fraction must lie in [0, 1]")
    if not seen_types:
        raise DataError("seen_types is empty")
    ids = [e.id for e in entries]
    k = int(round(noisy_fraction * len(ids)))
    ranked = sorted(ids, key=lambda i: (item_seed(seed, "select", i), i))
    noisy = set(ranked[:k])
    out: dict[str, MixSpec | None] = {}
    for i in ids:
        if i not in noisy:
            out[i] = None
            continue
        s = item_seed(seed, "mix", i)
        rng = np.random.default_rng(s)
        ntype = seen_types[int(rng.integers(len(seen_types)))]
        snr = snr_grid[int(rng.integers(len(snr_grid)))]
        out[i] = MixSpec(ntype, snr, _choose_offset(rng, noise_length, clip_length), s)
    return out


@dataclass
class TestSuite:
    __test__ = False

    name: str
    noise_type: str | None
    snr_db: float | None
    items: list[tuple[Entry, MixSpec | None]]

    def __len__(self) -> int:
        return len(self.items)


def build_test_suites(test_entries: Sequence[Entry], all_types: Sequence[str] = NOISE_TYPES,
                      snr_grid: Sequence[float] = SNR_GRID, seed: int = 0,
                      noise_length: int = 10 * SAMPLE_RATE, clip_length: int = SAMPLE_RATE) -> list[TestSuite]:
    """One suite per (noise type, SNR) pair followed by the clean suite."""
    suites = []
    for ntype in all_types:
        for snr in snr_grid:
            items = []
            for e in test_entries:
                s = item_seed(seed, "test", ntype, snr, e.id)
                rng = np.random.default_rng(s)
                items.append((e, MixSpec(ntype, snr, _choose_offset(rng, noise_length, clip_length), s)))
            suites.append(TestSuite(f"{ntype}_{snr:+g}dB", ntype, snr, items))
    suites.append(TestSuite("clean", None, None, [(e, None) for e in test_entries]))
    return suites


# ---------------------------------------------------------------- synthetic noise


def _shape_spectrum(white: np.ndarray, gain_fn) -> np.ndarray:
    spec = np.fft.rfft(white)
    freqs = np.fft.rfftfreq(white.size, 1.0 / SAMPLE_RATE)
    out = np.fft.irfft(spec * gain_fn(np.maximum(freqs, 1.0)), n=white.size)
    return out


def _normalize(x: np.ndarray, rms: float = 0.1) -> np.ndarray:
    return x * (rms / np.sqrt(mean_power(x)))


def _pink(rng, n):
    return _shape_spectrum(rng.standard_normal(n), lambda f: 1.0 / np.sqrt(f))


def _bursts(rng, n, rate_hz, decay_s, band_gain):
    """Decaying noise bursts at Poisson times, each filtered by ``band_gain``."""
    out = np.zeros(n)
    n_bursts = rng.poisson(rate_hz * n / SAMPLE_RATE) + 1
    length = int(5 * decay_s * SAMPLE_RATE)
    env = np.exp(-np.arange(length) / (decay_s * SAMPLE_RATE))
    for _ in range(n_bursts):
        start = int(rng.integers(0, n))
        burst = _shape_spectrum(rng.standard_normal(length), band_gain) * env * rng.uniform(0.5, 2.0)
        stop = min(n, start + length)
        out[start:stop] += burst[:stop - start]
    return out


def synth_noise(noise_type: str, duration: float = 10.0, seed: int = 0) -> NoiseClip:
    """Deterministic stand-ins for the six noise environments (RMS 0.1, peak below 1)."""
    if noise_type not in NOISE_TYPES:
        raise DataError(f"unknown noise type {noise_type!r}")
    n = int(round(duration * SAMPLE_RATE))
    rng = np.random.default_rng(item_seed("noise", noise_type, seed))
    t = np.arange(n) / SAMPLE_RATE
    if noise_type == "SSN":
        # flat below 500 Hz, -6 dB/octave above
        x = _shape_spectrum(rng.standard_normal(n), lambda f: np.minimum(1.0, 500.0 / f))
    elif noise_type == "BUS":
        rumble = _shape_spectrum(rng.standard_normal(n), lambda f: 1.0 / (1.0 + (f / 150.0) ** 2))
        hum = sum(np.sin(2 * np.pi * k * 55.0 * t + rng.uniform(0, 2 * np.pi)) / k for k in range(1, 5))
        x = _normalize(rumble) + 0.05 * hum * (1 + 0.3 * np.sin(2 * np.pi * 0.3 * t))
    elif noise_type == "STR":
        base = _shape_spectrum(rng.standard_normal(n), lambda f: 1.0 / (1.0 + (f / 600.0)))
        swell = 1.0 + 0.8 * np.sin(2 * np.pi * 0.15 * t + rng.uniform(0, 2 * np.pi)) ** 2
        x = base * swell
    elif noise_type == "PED":
        steps = _bursts(rng, n, 2.0, 0.03, lambda f: np.exp(-((f - 300.0) / 400.0) ** 2))
        x = _normalize(_pink(rng, n)) + 3.0 * _normalize(steps)
    elif noise_type == "CAF":
        clinks = _bursts(rng, n, 4.0, 0.01, lambda f: np.exp(-((f - 3500.0) / 1200.0) ** 2))
        x = _normalize(_pink(rng, n)) + 2.0 * _normalize(clinks)
    else:  # BBL
        x = np.zeros(n)
        for _ in range(8):
            f0 = rng.uniform(90.0, 250.0)
            voiced = sum(np.sin(2 * np.pi * h * f0 * t * (1 + 0.05 * np.sin(2 * np.pi * rng.uniform(0.2, 1.0) * t)))
                         / h for h in range(1, 12) if h * f0 < 4000)
            syllables = np.clip(np.sin(2 * np.pi * rng.uniform(3.0, 6.0) * t + rng.uniform(0, 2 * np.pi)), 0, None)
            x += _normalize(voiced) * syllables
    x = _normalize(x)
    peak = np.max(np.abs(x))
    if peak > 0.99:
        x *= 0.99 / peak
    return NoiseClip(noise_type, Waveform(x, SAMPLE_RATE, {"synthetic": True, "seed": seed}))


def synth_noise_bank(seed: int = 0, duration: float = 10.0, types: Iterable[str] = NOISE_TYPES) -> dict[str, NoiseClip]:
    return {t: synth_noise(t, duration, seed) for t in types}


def load_noise_dir(noise_dir) -> dict[str, NoiseClip]:
    """Noise bank from ``<noise_dir>/<TYPE>.wav`` files (concatenating ``<TYPE>*.wav``)."""
    bank = {}
    root = Path(noise_dir)
    for t in NOISE_TYPES:
        files = sorted(root.glob(f"{t}*.wav"))
        if files:
            parts = [read_wav(f) for f in files]
            bank[t] = NoiseClip(t, Waveform(np.concatenate([p.samples for p in parts]), parts[0].sample_rate))
    if not bank:
        raise DataError(f"no noise files found in {root}")
    return bank


# ---------------------------------------------------------------- synthetic corpus


def fit_length(samples: np.ndarray, n: int = SAMPLE_RATE) -> np.ndarray:
    """Zero-pad or truncate to exactly ``n`` samples."""
    if samples.shape[0] >= n:
        return samples[:n]
    return np.pad(samples, (0, n - samples.shape[0]))


def _motif(label: int, n_classes: int, rng: np.random.Generator) -> np.ndarray:
    base = 250.0 * (3500.0 / 250.0) ** (label / max(1, n_classes - 1))
    f0 = base * rng.uniform(0.97, 1.03)
    dur = 0.5
    t = np.arange(int(dur * SAMPLE_RATE)) / SAMPLE_RATE
    pattern = label % 4
    if pattern == 0:  # rising chirp
        inst = f0 * (1 + 0.12 * t / dur)
    elif pattern == 1:  # falling chirp
        inst = f0 * (1 - 0.12 * t / dur)
    elif pattern == 2:  # vibrato
        inst = f0 * (1 + 0.04 * np.sin(2 * np.pi * 7.0 * t))
    else:  # two-step
        inst = f0 * np.where(t < dur / 2, 1.0, 1.15)
    phase = 2 * np.pi * np.cumsum(inst) / SAMPLE_RATE
    weights = (1.0, 0.5, 0.25) if label % 2 == 0 else (1.0, 0.15, 0.5)
    tone = sum(w * np.sin((h + 1) * phase) for h, w in enumerate(weights) if (h + 1) * f0 < 7000)
    env = np.sin(np.pi * t / dur) ** 2
    return tone * env


def synth_utterance(label: int, n_classes: int, seed: int) -> Waveform:
    rng = np.random.default_rng(seed)
    motif = _motif(label, n_classes, rng) * rng.uniform(0.1, 0.5)
    onset = int(rng.uniform(0.05, 0.45) * SAMPLE_RATE)
    x = np.zeros(SAMPLE_RATE)
    x[onset:onset + motif.size] = motif[:SAMPLE_RATE - onset]
    x += 1e-3 * rng.standard_normal(SAMPLE_RATE)
    return Waveform(x, SAMPLE_RATE)


def synth_corpus(n_classes: int = 10, n_per_class: int = 100, seed: int = 0,
                 n_test_per_class: int | None = None, n_val_per_class: int | None = None,
                 pretrain_fraction: float = 0.8) -> tuple[DatasetManifest, dict[str, Waveform]]:
    """Tone/chirp keyword stand-ins with per-item pitch, level and onset jitter.

    Per class, ``n_test_per_class`` and ``n_val_per_class`` items (10 % each
    by default) go to test/validation; the rest form the pool that
    :func:`split_pretrain_train` divides into pretrain/train.
    """
    if n_classes < 2:
        raise DataError("need at least two classes")
    n_test = n_test_per_class if n_test_per_class is not None else max(1, n_per_class // 10)
    n_val = n_val_per_class if n_val_per_class is not None else max(1, n_per_class // 10)
    if n_test + n_val >= n_per_class:
        raise DataError("test and validation leave no training pool")
    entries, audio = [], {}
    for label in range(n_classes):
        for j in range(n_per_class):
            uid = f"c{label:02d}_{j:04d}"
            split = "test" if j < n_test else "validation" if j < n_test + n_val else "train"
            entries.append(Entry(uid, f"c{label:02d}/{uid}.wav", label, split))
            audio[uid] = synth_utterance(label, n_classes, item_seed(seed, "utt", uid))
    manifest = DatasetManifest(entries, [f"c{k:02d}" for k in range(n_classes)], seed)
    return split_pretrain_train(manifest, pretrain_fraction, seed), audio


# ---------------------------------------------------------------- features


class AudioStore:
    """Waveforms by utterance id, from memory or from WAV files under ``root``."""

    def __init__(self, root=None, audio: dict[str, Waveform] | None = None):
        self.root = Path(root) if root is not None else None
        self._cache: dict[str, Waveform] = dict(audio or {})

    def load(self, entry: Entry) -> Waveform:
        w = self._cache.get(entry.id)
        if w is None:
            if self.root is None:
                raise DataError(f"no audio for {entry.id}")
            w = read_wav(self.root / entry.path)
        return Waveform(fit_length(w.samples), w.sample_rate)


def render(entry: Entry, store: AudioStore, bank: dict[str, NoiseClip] | None,
           mix: MixSpec | None = None) -> Waveform:
    """Clean waveform of ``entry``, mixed per ``mix`` when given."""
    w = store.load(entry)
    if mix is None:
        return w
    if not bank or mix.noise_type not in bank:
        raise DataError(f"no {mix.noise_type} noise material available")
    return mix_at_snr(w, bank[mix.noise_type], mix)


def featurize(items: Sequence[tuple[Entry, MixSpec | None]], store: AudioStore,
              bank: dict[str, NoiseClip] | None = None, cfg=None, chunk: int = 128) -> np.ndarray:
    """MFCC tensor [N, T, 40] (float32) for (entry, optional mix) pairs."""
    cfg = cfg or MfccConfig()
    out = []
    for s in range(0, len(items), chunk):
        batch = np.stack([render(e, store, bank, m).samples for e, m in items[s:s + chunk]])
        out.append(compute_features(batch, cfg).astype(np.float32))
    if not out:
        return np.zeros((0, cfg.frame_count(SAMPLE_RATE), cfg.n_mfcc), dtype=np.float32)
    return np.concatenate(out)
