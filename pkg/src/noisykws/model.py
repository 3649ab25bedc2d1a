"""Keyword Transformer: MFCC projection, sinusoidal positions, pre-norm blocks, mean-pool MLP head."""
from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import tensor as tn
from .tensor import ParameterSet, Tensor

ENCODER_PREFIXES = ("input_proj.", "block.")
MAGIC = b"KWSC"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class KwtConfig:
    dim: int = 64
    heads: int = 1
    n_blocks: int = 12
    mlp_ratio: int = 4
    n_classes: int = 35
    input_dim: int = 40
    max_t: int = 98
    name: str = "kwt1"

    def __post_init__(self):
        if self.n_blocks < 1:
            raise ValueError("n_blocks must be >= 1")
        if self.heads < 1 or self.dim % self.heads:
            raise ValueError(f"dim {self.dim} is not divisible by heads {self.heads}")

    @classmethod
    def variant(cls, name: str, **overrides) -> "KwtConfig":
        presets = {
            "kwt1": dict(dim=64, heads=1),
            "kwt2": dict(dim=128, heads=2),
            "kwt3": dict(dim=192, heads=3),
            "kwt-tiny": dict(dim=16, heads=2, n_blocks=2),
        }
        if name not in presets:
            raise ValueError(f"unknown model variant {name!r}; choose from {sorted(presets)}")
        return cls(**{**presets[name], "name": name, **overrides})


@dataclass
class KwtModel:
    cfg: KwtConfig
    params: ParameterSet


def _trunc_normal(rng: np.random.Generator, shape, std=0.02) -> np.ndarray:
    x = rng.standard_normal(shape)
    bad = np.abs(x) > 2
    while bad.any():
        x[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(x) > 2
    return x * std


def init_model(cfg: KwtConfig, seed: int = 0, dtype=np.float32) -> KwtModel:
    """Weights ~ N(0, 0.02) truncated at 2 sigma; biases zero; norm gains one."""
    rng = np.random.default_rng(seed)
    d, hidden = cfg.dim, cfg.dim * cfg.mlp_ratio
    shapes: list[tuple[str, tuple[int, ...], str]] = [
        ("input_proj.weight", (cfg.input_dim, d), "w"),
        ("input_proj.bias", (d,), "zero"),
        ("mask_token", (d,), "w"),
    ]
    for i in range(cfg.n_blocks):
        b = f"block.{i}."
        shapes += [(b + "norm1.weight", (d,), "one"), (b + "norm1.bias", (d,), "zero")]
        for proj in ("q_proj", "k_proj", "v_proj", "out_proj"):
            shapes += [(b + f"attn.{proj}.weight", (d, d), "w"), (b + f"attn.{proj}.bias", (d,), "zero")]
        shapes += [(b + "norm2.weight", (d,), "one"), (b + "norm2.bias", (d,), "zero"),
                   (b + "mlp.fc1.weight", (d, hidden), "w"), (b + "mlp.fc1.bias", (hidden,), "zero"),
                   (b + "mlp.fc2.weight", (hidden, d), "w"), (b + "mlp.fc2.bias", (d,), "zero")]
    shapes += [("final_norm.weight", (d,), "one"), ("final_norm.bias", (d,), "zero"),
               ("head.fc1.weight", (d, d), "w"), ("head.fc1.bias", (d,), "zero"),
               ("head.fc2.weight", (d, cfg.n_classes), "w"), ("head.fc2.bias", (cfg.n_classes,), "zero")]
    params = ParameterSet()
    for name, shape, kind in shapes:
        if kind == "w":
            arr = _trunc_normal(rng, shape)
        else:
            arr = np.full(shape, 1.0 if kind == "one" else 0.0)
        params[name] = Tensor(arr, dtype=dtype)
    return KwtModel(cfg, params)


def init_classifier_head(model: KwtModel, seed: int) -> None:
    """Re-draw ``final_norm`` and ``head`` parameters (used before fine-tuning)."""
    fresh = init_model(model.cfg, seed, dtype=model.params["head.fc1.weight"].data.dtype)
    for name in model.params:
        if name.startswith(("head.", "final_norm.")):
            model.params[name].data = fresh.params[name].data.copy()


def positional_encoding(t: int, d: int) -> np.ndarray:
    """``PE[t, 2i] = sin(t / 10000^(2i/d))``, ``PE[t, 2i+1] = cos(...)``."""
    pos = np.arange(t)[:, None]
    i2 = np.arange(0, d, 2)[None, :]
    angle = pos / 10000.0 ** (i2 / d)
    pe = np.zeros((t, d))
    pe[:, 0::2] = np.sin(angle)
    pe[:, 1::2] = np.cos(angle[:, : d // 2])
    return pe


def param_count(params: ParameterSet | KwtModel, supervised: bool = True) -> int:
    """Scalar parameter count; the pretraining-only mask token is left out when ``supervised``."""
    ps = params.params if isinstance(params, KwtModel) else params
    return ps.numel(exclude=("mask_token", "regression_head") if supervised else ())


# ---------------------------------------------------------------- forward


def _attention(x: Tensor, p: ParameterSet, prefix: str, heads: int, probs_out: list | None = None) -> Tensor:
    b, t, d = x.shape
    dh = d // heads

    def split(name):
        y = tn.linear(x, p[f"{prefix}{name}.weight"], p[f"{prefix}{name}.bias"])
        return tn.transpose(tn.reshape(y, (b, t, heads, dh)), (0, 2, 1, 3))

    q, k, v = split("q_proj"), split("k_proj"), split("v_proj")
    scores = tn.mul(tn.matmul(q, tn.swap_last(k)), 1.0 / math.sqrt(dh))
    probs = tn.softmax(scores)
    if probs_out is not None:
        probs_out.append(probs.data)
    ctx = tn.reshape(tn.transpose(tn.matmul(probs, v), (0, 2, 1, 3)), (b, t, d))
    return tn.linear(ctx, p[f"{prefix}out_proj.weight"], p[f"{prefix}out_proj.bias"])


def _block(x: Tensor, p: ParameterSet, i: int, heads: int, probs_out=None) -> Tensor:
    b = f"block.{i}."
    h = tn.layer_norm(x, p[b + "norm1.weight"], p[b + "norm1.bias"])
    x = tn.add(x, _attention(h, p, b + "attn.", heads, probs_out))
    h = tn.layer_norm(x, p[b + "norm2.weight"], p[b + "norm2.bias"])
    h = tn.gelu(tn.linear(h, p[b + "mlp.fc1.weight"], p[b + "mlp.fc1.bias"]))
    return tn.add(x, tn.linear(h, p[b + "mlp.fc2.weight"], p[b + "mlp.fc2.bias"]))


def embed(params: ParameterSet, cfg: KwtConfig, features, mask=None) -> Tensor:
    """Project MFCCs, swap masked steps for the mask token, then add positions."""
    x = features if isinstance(features, Tensor) else Tensor._wrap(np.asarray(features, dtype=params["input_proj.weight"].data.dtype))
    if x.ndim != 3 or x.shape[-1] != cfg.input_dim:
        raise ValueError(f"features must be [batch, T, {cfg.input_dim}], got {x.shape}")
    t = x.shape[1]
    if t > cfg.max_t:
        raise ValueError(f"T={t} exceeds max_t={cfg.max_t}")
    h = tn.linear(x, params["input_proj.weight"], params["input_proj.bias"])
    if mask is not None:
        h = tn.replace_masked(h, mask, params["mask_token"])
    pe = positional_encoding(t, cfg.dim).astype(h.data.dtype)
    return tn.add(h, pe)


def encoder_block_outputs(params: ParameterSet, cfg: KwtConfig, features, mask=None,
                          attn_probs: list | None = None) -> list[Tensor]:
    """Residual stream after each block, ``n_blocks`` tensors of shape [batch, T, dim]."""
    x = embed(params, cfg, features, mask)
    outs = []
    for i in range(cfg.n_blocks):
        x = _block(x, params, i, cfg.heads, attn_probs)
        outs.append(x)
    return outs


def classify(params: ParameterSet, cfg: KwtConfig, final: Tensor) -> Tensor:
    pooled = tn.mean(final, axis=1)
    h = tn.layer_norm(pooled, params["final_norm.weight"], params["final_norm.bias"])
    h = tn.gelu(tn.linear(h, params["head.fc1.weight"], params["head.fc1.bias"]))
    return tn.linear(h, params["head.fc2.weight"], params["head.fc2.bias"])


def forward_logits(model: KwtModel, features) -> Tensor:
    return classify(model.params, model.cfg, encoder_block_outputs(model.params, model.cfg, features)[-1])


def predict(model: KwtModel, features: np.ndarray, batch_size: int = 256) -> np.ndarray:
    """Argmax class per item; ties resolve to the lowest index."""
    out = []
    with tn.no_grad():
        for s in range(0, len(features), batch_size):
            logits = forward_logits(model, features[s:s + batch_size]).data
            out.append(np.argmax(logits, axis=1))
    return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)


# ---------------------------------------------------------------- checkpoints


def encode_checkpoint(params: ParameterSet, cfg: KwtConfig, meta: dict | None = None) -> bytes:
    """``KWSC`` | u32 version | u32 len + JSON | u32 count | tensors (name, shape, float32 LE)."""
    header = {"config": asdict(cfg), **(meta or {})}
    blob = json.dumps(header, sort_keys=True).encode()
    parts = [MAGIC, struct.pack("<II", FORMAT_VERSION, len(blob)), blob, struct.pack("<I", len(params))]
    for name, t in params.items():
        nb = name.encode()
        parts.append(struct.pack("<H", len(nb)) + nb + struct.pack("<B", t.ndim))
        parts.append(struct.pack(f"<{t.ndim}I", *t.shape))
        parts.append(np.ascontiguousarray(t.data, dtype="<f4").tobytes())
    return b"".join(parts)


def decode_checkpoint(data: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    if data[:4] != MAGIC:
        raise CheckpointError("not a KWSC checkpoint")
    version, n = struct.unpack_from("<II", data, 4)
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    pos = 12
    meta = json.loads(data[pos:pos + n])
    pos += n
    (count,) = struct.unpack_from("<I", data, pos)
    pos += 4
    arrays = {}
    for _ in range(count):
        (ln,) = struct.unpack_from("<H", data, pos)
        name = data[pos + 2:pos + 2 + ln].decode()
        pos += 2 + ln
        (ndim,) = struct.unpack_from("<B", data, pos)
        shape = struct.unpack_from(f"<{ndim}I", data, pos + 1)
        pos += 1 + 4 * ndim
        size = int(np.prod(shape)) * 4
        if pos + size > len(data):
            raise CheckpointError(f"truncated tensor {name}")
        arrays[name] = np.frombuffer(data, dtype="<f4", count=size // 4, offset=pos).reshape(shape).astype(np.float32)
        pos += size
    return meta, arrays


def save_checkpoint(path, params: ParameterSet, cfg: KwtConfig, meta: dict | None = None) -> None:
    Path(path).write_bytes(encode_checkpoint(params, cfg, meta))


def load_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    return decode_checkpoint(Path(path).read_bytes())


def model_from_checkpoint(path) -> tuple[KwtModel, dict]:
    meta, arrays = load_checkpoint(path)
    cfg = KwtConfig(**meta["config"])
    model = init_model(cfg, 0)
    missing = set(model.params.names()) - set(arrays)
    if missing:
        raise CheckpointError(f"checkpoint lacks {sorted(missing)[:3]}...")
    model.params.load_arrays({k: v for k, v in arrays.items() if k in model.params})
    return model, meta
