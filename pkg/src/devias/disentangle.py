"""Slot attention with competition over the slot axis.

Each iteration projects layer-normed slots to queries and layer-normed
features to keys/values, softmaxes the key-slot logits across slots (so every
token's mass is split among slots), L2-normalises each slot's column over
keys, pools values with it and applies the residual MLP update
``S <- MLP(S + Z) + S + Z``. All iterations share one set of weights.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from . import tensor as tn
from .tensor import Tensor

L2_EPS = 1e-8


@dataclass(frozen=True)
class SlotConfig:
    num_slots: int = 2
    iters: int = 4
    dim: int = 64
    mlp_hidden: int = 128

    def __post_init__(self):
        if self.iters < 1:
            raise ValueError("iters must be >= 1")
        if self.num_slots < 1:
            raise ValueError("num_slots must be >= 1")


@dataclass
class SlotState:
    slots: Tensor  # [B, K, D]
    attn: Tensor  # [B, NT, K], slot-axis softmax of the last iteration
    history: list[np.ndarray] = field(default_factory=list)


def init_slots(cfg: SlotConfig, rng: np.random.Generator, prefix: str = "disentangle") -> dict[str, np.ndarray]:
    d, hdn = cfg.dim, cfg.mlp_hidden
    std = 1.0 / math.sqrt(d)
    p = {f"{prefix}.slots": rng.normal(0.0, std, (cfg.num_slots, d)).astype(np.float32)}
    for ln in ("ln_slots", "ln_inputs"):
        p[f"{prefix}.{ln}.gain"] = np.ones(d, np.float32)
        p[f"{prefix}.{ln}.bias"] = np.zeros(d, np.float32)
    for proj in ("q", "k", "v"):
        p[f"{prefix}.{proj}.weight"] = rng.normal(0.0, std, (d, d)).astype(np.float32)
    p[f"{prefix}.mlp.fc1.weight"] = rng.normal(0.0, std, (d, hdn)).astype(np.float32)
    p[f"{prefix}.mlp.fc1.bias"] = np.zeros(hdn, np.float32)
    p[f"{prefix}.mlp.fc2.weight"] = rng.normal(0.0, 1.0 / math.sqrt(hdn), (hdn, d)).astype(np.float32)
    p[f"{prefix}.mlp.fc2.bias"] = np.zeros(d, np.float32)
    return p


def _project_inputs(X, P: Mapping[str, Tensor], prefix: str) -> tuple[Tensor, Tensor]:
    h = tn.layer_norm(X, P[f"{prefix}.ln_inputs.gain"], P[f"{prefix}.ln_inputs.bias"])
    return h @ P[f"{prefix}.k.weight"], h @ P[f"{prefix}.v.weight"]


def _iterate(S, keys: Tensor, values: Tensor, P: Mapping[str, Tensor], prefix: str):
    q = tn.layer_norm(S, P[f"{prefix}.ln_slots.gain"], P[f"{prefix}.ln_slots.bias"]) @ P[f"{prefix}.q.weight"]
    logits = (keys @ q.swapaxes(-1, -2)) * (1.0 / math.sqrt(keys.shape[-1]))  # [B, NT, K]
    A = tn.softmax_axis(logits, axis=-1)
    A_hat = tn.l2_normalize_axis(A, axis=-2, eps=L2_EPS)
    Z = A_hat.swapaxes(-1, -2) @ values  # [B, K, Dh]
    U = S + Z
    h = tn.gelu(tn.linear(U, P[f"{prefix}.mlp.fc1.weight"], P[f"{prefix}.mlp.fc1.bias"]))
    return tn.linear(h, P[f"{prefix}.mlp.fc2.weight"], P[f"{prefix}.mlp.fc2.bias"]) + U, A


def slot_iteration(S, X, P: Mapping[str, Tensor], prefix: str = "disentangle") -> tuple[Tensor, Tensor]:
    """One update. ``S`` is [B, K, D] (or [K, D]), ``X`` is [B, NT, D]."""
    keys, values = _project_inputs(X, P, prefix)
    return _iterate(S, keys, values, P, prefix)


def disentangle(X, P: Mapping[str, Tensor], cfg: SlotConfig, prefix: str = "disentangle",
                keep_history: bool = False) -> SlotState:
    """Run ``cfg.iters`` slot iterations from the learned initial slots."""
    X = X if isinstance(X, Tensor) else Tensor(np.asarray(X))
    b = X.shape[0]
    init = P[f"{prefix}.slots"]
    S = tn.broadcast_to(init, (b,) + tuple(init.shape))
    keys, values = _project_inputs(X, P, prefix)
    history = []
    A = None
    for _ in range(cfg.iters):
        S, A = _iterate(S, keys, values, P, prefix)
        if keep_history:
            history.append(A.data.copy())
    return SlotState(S, A, history)
