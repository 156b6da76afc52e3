"""Tubelet embedding and a small pre-norm ViT trunk.

Token order contract: time-major over tubelet groups, then row-major over
the spatial patch grid. Masks are pooled with the same order in
:func:`tokenize_mask`.
"""
from __future__ import annotations

import functools
import math
from dataclasses import dataclass
from typing import Mapping

import numpy as np

from . import tensor as tn
from .tensor import Tensor

TUBELET_T = 2


@dataclass(frozen=True)
class EncoderConfig:
    dim: int = 64
    heads: int = 4
    depth: int = 3
    patch: int = 8
    mlp_ratio: int = 4
    frames: int = 8
    height: int = 32
    width: int = 32
    channels: int = 1

    def __post_init__(self):
        if self.dim % self.heads:
            raise ValueError("dim must be divisible by heads")
        if self.height % self.patch or self.width % self.patch:
            raise ValueError("height and width must be divisible by patch")
        if self.frames % TUBELET_T:
            raise ValueError("frame count must be even")

    @property
    def grid(self) -> tuple[int, int, int]:
        return self.frames // TUBELET_T, self.height // self.patch, self.width // self.patch

    @property
    def n_spatial(self) -> int:
        return self.grid[1] * self.grid[2]

    @property
    def n_tokens(self) -> int:
        g = self.grid
        return g[0] * g[1] * g[2]

    @property
    def tubelet_size(self) -> int:
        return TUBELET_T * self.patch * self.patch * self.channels


def trunc_normal(rng: np.random.Generator, shape, std: float = 0.02) -> np.ndarray:
    out = rng.normal(0.0, std, shape)
    bad = np.abs(out) > 2 * std
    while bad.any():
        out[bad] = rng.normal(0.0, std, int(bad.sum()))
        bad = np.abs(out) > 2 * std
    return out.astype(np.float32)


def init_encoder(cfg: EncoderConfig, rng: np.random.Generator, prefix: str = "encoder") -> dict[str, np.ndarray]:
    d, hidden = cfg.dim, cfg.dim * cfg.mlp_ratio
    p = {f"{prefix}.patch.weight": trunc_normal(rng, (cfg.tubelet_size, d)),
         f"{prefix}.patch.bias": np.zeros(d, np.float32)}
    for i in range(cfg.depth):
        b = f"{prefix}.blocks.{i}"
        for ln in ("ln1", "ln2"):
            p[f"{b}.{ln}.gain"] = np.ones(d, np.float32)
            p[f"{b}.{ln}.bias"] = np.zeros(d, np.float32)
        for proj in ("q", "k", "v", "proj"):
            p[f"{b}.attn.{proj}.weight"] = trunc_normal(rng, (d, d))
            p[f"{b}.attn.{proj}.bias"] = np.zeros(d, np.float32)
        p[f"{b}.mlp.fc1.weight"] = trunc_normal(rng, (d, hidden))
        p[f"{b}.mlp.fc1.bias"] = np.zeros(hidden, np.float32)
        p[f"{b}.mlp.fc2.weight"] = trunc_normal(rng, (hidden, d))
        p[f"{b}.mlp.fc2.bias"] = np.zeros(d, np.float32)
    return p


def tubelets(frames: np.ndarray, patch: int) -> np.ndarray:
    """[B, 2T, H, W, C] -> [B, NT, 2*p*p*C], flattening each tubelet as (t, y, x, c)."""
    b, t, h, w, c = frames.shape
    if t % TUBELET_T or h % patch or w % patch:
        raise ValueError(f"clip {frames.shape[1:]} not divisible into {TUBELET_T}x{patch}x{patch} tubelets")
    x = frames.reshape(b, t // TUBELET_T, TUBELET_T, h // patch, patch, w // patch, patch, c)
    x = x.transpose(0, 1, 3, 5, 2, 4, 6, 7)
    return x.reshape(b, (t // TUBELET_T) * (h // patch) * (w // patch), -1)


def tokenize_mask(masks: np.ndarray, patch: int) -> np.ndarray:
    """Average-pool [B, 2T, H, W] masks over tubelets -> [B, NT] in token order."""
    b, t, h, w = masks.shape
    return tubelets(masks[..., None].astype(np.float32), patch).mean(axis=-1)


@functools.lru_cache(maxsize=16)
def positional_table(n_tokens: int, dim: int) -> np.ndarray:
    """Fixed sinusoid table over the flattened token index, [n_tokens, dim]."""
    pos = np.arange(n_tokens, dtype=np.float64)[:, None]
    i = np.arange(dim // 2, dtype=np.float64)[None, :]
    angle = pos / np.power(10000.0, 2.0 * i / dim)
    table = np.zeros((n_tokens, dim))
    table[:, 0::2] = np.sin(angle)
    table[:, 1::2] = np.cos(angle)
    table = table.astype(np.float32)
    table.flags.writeable = False
    return table


def tubelet_embed(frames: np.ndarray, P: Mapping[str, Tensor], cfg: EncoderConfig,
                  prefix: str = "encoder") -> Tensor:
    x = tubelets(np.asarray(frames, np.float32), cfg.patch)
    return tn.linear(x, P[f"{prefix}.patch.weight"], P[f"{prefix}.patch.bias"])


def add_positional(x, pe: np.ndarray) -> Tensor:
    if x.shape[-2:] != pe.shape:
        raise tn.DimensionError(f"positional table {pe.shape} does not match tokens {x.shape}")
    return tn.add(x, pe)


def attention(x: Tensor, P: Mapping[str, Tensor], prefix: str, heads: int,
              return_weights: bool = False):
    """Multi-head self-attention with the usual softmax over keys."""
    b, n, d = x.shape
    dh = d // heads

    def split(t: Tensor) -> Tensor:
        return t.reshape(b, n, heads, dh).transpose(0, 2, 1, 3)

    q = split(tn.linear(x, P[f"{prefix}.q.weight"], P[f"{prefix}.q.bias"]))
    k = split(tn.linear(x, P[f"{prefix}.k.weight"], P[f"{prefix}.k.bias"]))
    v = split(tn.linear(x, P[f"{prefix}.v.weight"], P[f"{prefix}.v.bias"]))
    weights = tn.softmax_axis((q @ k.swapaxes(-1, -2)) * (1.0 / math.sqrt(dh)), axis=-1)
    out = (weights @ v).transpose(0, 2, 1, 3).reshape(b, n, d)
    out = tn.linear(out, P[f"{prefix}.proj.weight"], P[f"{prefix}.proj.bias"])
    return (out, weights) if return_weights else out


def transformer_block(x: Tensor, P: Mapping[str, Tensor], prefix: str, heads: int) -> Tensor:
    h = tn.layer_norm(x, P[f"{prefix}.ln1.gain"], P[f"{prefix}.ln1.bias"])
    z = x + attention(h, P, f"{prefix}.attn", heads)
    h = tn.layer_norm(z, P[f"{prefix}.ln2.gain"], P[f"{prefix}.ln2.bias"])
    h = tn.gelu(tn.linear(h, P[f"{prefix}.mlp.fc1.weight"], P[f"{prefix}.mlp.fc1.bias"]))
    return z + tn.linear(h, P[f"{prefix}.mlp.fc2.weight"], P[f"{prefix}.mlp.fc2.bias"])


def encode(frames: np.ndarray, P: Mapping[str, Tensor], cfg: EncoderConfig,
           prefix: str = "encoder", tokens: Tensor | None = None) -> Tensor:
    """Clips [B, 2T, H, W, C] -> features [B, NT, D].

    ``tokens`` ([n, D]) are prepended before the positional add, which then
    covers ``n + NT`` rows; the output then has ``n + NT`` rows too.
    """
    frames = np.asarray(frames)
    if frames.ndim == 4:
        frames = frames[None]
    x = tubelet_embed(frames, P, cfg, prefix)
    if tokens is not None:
        lead = tn.broadcast_to(tokens, (x.shape[0],) + tuple(tokens.shape))
        x = tn.concat([lead, x], axis=1)
    x = add_positional(x, positional_table(x.shape[1], cfg.dim))
    for i in range(cfg.depth):
        x = transformer_block(x, P, f"{prefix}.blocks.{i}", cfg.heads)
    return x
