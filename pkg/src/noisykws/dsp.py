"""WAV decoding and the MFCC front-end (30 ms Hann window, 10 ms hop, 40 coefficients)."""
from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np
import scipy.fft


class WavError(ValueError):
    pass


class UnsupportedCodecError(WavError):
    pass


@dataclass
class Waveform:
    samples: np.ndarray
    sample_rate: int = 16000
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.sample_rate <= 0:
            raise ValueError("sample_rate must be positive")
        if not np.all(np.isfinite(self.samples)):
            raise ValueError("waveform contains non-finite samples")

    def __len__(self) -> int:
        return self.samples.shape[0]

    @property
    def duration(self) -> float:
        return len(self) / self.sample_rate


@dataclass(frozen=True)
class MfccConfig:
    sample_rate: int = 16000
    window_ms: float = 30.0
    hop_ms: float = 10.0
    n_fft: int = 512
    n_mels: int = 64
    n_mfcc: int = 40
    mel_fmin: float = 20.0
    mel_fmax: float = 8000.0
    log_floor: float = 1e-10

    def __post_init__(self):
        if self.window_samples > self.n_fft:
            raise ValueError("window longer than n_fft")
        if self.n_fft & (self.n_fft - 1):
            raise ValueError("n_fft must be a power of two")
        if self.n_mfcc > self.n_mels:
            raise ValueError("n_mfcc must not exceed n_mels")
        if not 0 <= self.mel_fmin < self.mel_fmax <= self.sample_rate / 2:
            raise ValueError("need 0 <= fmin < fmax <= sample_rate/2")

    @property
    def window_samples(self) -> int:
        return int(round(self.sample_rate * self.window_ms / 1000))

    @property
    def hop_samples(self) -> int:
        return int(round(self.sample_rate * self.hop_ms / 1000))

    @property
    def n_bins(self) -> int:
        return self.n_fft // 2 + 1

    def frame_count(self, n_samples: int) -> int:
        if n_samples < self.window_samples:
            raise ValueError(f"signal of {n_samples} samples is shorter than one window")
        return 1 + (n_samples - self.window_samples) // self.hop_samples


# ---------------------------------------------------------------- WAV I/O


def decode_wav(data: bytes) -> Waveform:
    """Decode a RIFF/WAVE PCM-16 file; multi-channel input is averaged to mono."""
    if len(data) < 12 or data[:4] != b"RIFF" or data[8:12] != b"WAVE":
        raise WavError("not a RIFF/WAVE container")
    pos = 12
    fmt = None
    pcm = None
    while pos + 8 <= len(data):
        cid = data[pos:pos + 4]
        size = struct.unpack_from("<I", data, pos + 4)[0]
        body = data[pos + 8:pos + 8 + size]
        if cid == b"fmt ":
            if size < 16:
                raise WavError("fmt chunk too short")
            fmt = struct.unpack_from("<HHIIHH", body, 0)
        elif cid == b"data":
            if len(body) < size:
                raise WavError(f"truncated data chunk: {len(body)} of {size} bytes")
            pcm = body
            break
        pos += 8 + size + (size & 1)
    if fmt is None:
        raise WavError("missing fmt chunk")
    if pcm is None:
        raise WavError("missing data chunk")
    tag, channels, rate, _, block_align, bits = fmt
    if tag == 0xFFFE:
        # WAVE_FORMAT_EXTENSIBLE: accept only when the sub-format is PCM
        sub = _extensible_subformat(data)
        if sub != 1:
            raise UnsupportedCodecError(f"unsupported extensible sub-format {sub}")
    elif tag != 1:
        raise UnsupportedCodecError(f"unsupported format tag {tag} (only PCM is read)")
    if bits != 16:
        raise UnsupportedCodecError(f"unsupported bit depth {bits}")
    if channels < 1 or rate <= 0:
        raise WavError("invalid channel count or sample rate")
    frame_bytes = 2 * channels
    if len(pcm) % frame_bytes:
        raise WavError("data chunk is not a whole number of frames")
    ints = np.frombuffer(pcm, dtype="<i2").reshape(-1, channels).astype(np.float64)
    samples = ints.mean(axis=1) / 32768.0
    meta = {"channels": channels, "resample_needed": rate != 16000}
    return Waveform(samples, rate, meta)


def _extensible_subformat(data: bytes) -> int:
    pos = 12
    while pos + 8 <= len(data):
        cid = data[pos:pos + 4]
        size = struct.unpack_from("<I", data, pos + 4)[0]
        if cid == b"fmt ":
            if size < 26:
                raise WavError("extensible fmt chunk too short")
            return struct.unpack_from("<H", data, pos + 8 + 24)[0]
        pos += 8 + size + (size & 1)
    raise WavError("missing fmt chunk")


def read_wav(path) -> Waveform:
    with open(path, "rb") as fh:
        return decode_wav(fh.read())


def encode_wav(w: Waveform) -> bytes:
    """PCM-16 mono encoding; samples are clipped to the representable range."""
    ints = np.clip(np.round(w.samples * 32768.0), -32768, 32767).astype("<i2")
    payload = ints.tobytes()
    header = struct.pack("<4sI4s4sIHHIIHH4sI", b"RIFF", 36 + len(payload), b"WAVE",
                         b"fmt ", 16, 1, 1, w.sample_rate, w.sample_rate * 2, 2, 16,
                         b"data", len(payload))
    return header + payload


def write_wav(path, w: Waveform) -> None:
    with open(path, "wb") as fh:
        fh.write(encode_wav(w))


# ---------------------------------------------------------------- features


def hann_window(n: int) -> np.ndarray:
    # periodic Hann
    return 0.5 - 0.5 * np.cos(2 * np.pi * np.arange(n) / n)


def frame_signal(samples: np.ndarray, cfg: MfccConfig) -> np.ndarray:
    t = cfg.frame_count(samples.shape[-1])
    idx = np.arange(cfg.window_samples)[None, :] + cfg.hop_samples * np.arange(t)[:, None]
    return samples[..., idx]


def power_spectrogram(w: Waveform | np.ndarray, cfg: MfccConfig = MfccConfig()) -> np.ndarray:
    """|FFT|^2 of Hann-windowed frames zero-padded to ``n_fft``; shape [..., T, n_fft/2+1]."""
    samples = w.samples if isinstance(w, Waveform) else np.asarray(w, dtype=np.float64)
    frames = frame_signal(samples, cfg) * hann_window(cfg.window_samples)
    spec = scipy.fft.rfft(frames, n=cfg.n_fft, axis=-1)
    return spec.real ** 2 + spec.imag ** 2


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(cfg: MfccConfig = MfccConfig()) -> np.ndarray:
    """Triangular HTK-mel filters, shape [n_mels, n_fft/2+1]."""
    edges = mel_to_hz(np.linspace(hz_to_mel(cfg.mel_fmin), hz_to_mel(cfg.mel_fmax), cfg.n_mels + 2))
    freqs = np.arange(cfg.n_bins) * cfg.sample_rate / cfg.n_fft
    lo, mid, hi = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    up = (freqs[None, :] - lo) / (mid - lo)
    down = (hi - freqs[None, :]) / (hi - mid)
    return np.maximum(0.0, np.minimum(up, down))


def mfcc_from_power(power: np.ndarray, cfg: MfccConfig = MfccConfig()) -> np.ndarray:
    if power.shape[-1] != cfg.n_bins:
        raise ValueError(f"power has {power.shape[-1]} bins, config expects {cfg.n_bins}")
    mel = power @ mel_filterbank(cfg).T
    logmel = np.log(np.maximum(mel, cfg.log_floor))
    return scipy.fft.dct(logmel, type=2, norm="ortho", axis=-1)[..., :cfg.n_mfcc]


def compute_features(w: Waveform | np.ndarray, cfg: MfccConfig = MfccConfig()) -> np.ndarray:
    """MFCC matrix [T, n_mfcc] (or [batch, T, n_mfcc] for stacked sample arrays)."""
    if isinstance(w, Waveform) and w.sample_rate != cfg.sample_rate:
        raise ValueError(f"sample rate {w.sample_rate} != {cfg.sample_rate}; resampling is not supported")
    return mfcc_from_power(power_spectrogram(w, cfg), cfg)
