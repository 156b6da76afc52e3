"""Heads and losses.

All loss functions take batched inputs and return the mean of the per-clip
losses over the batch (reduction in index order).
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping

import numpy as np

from . import tensor as tn
from .encoder import trunc_normal
from .matching import pad_targets
from .tensor import Tensor

BCE_CLAMP = 1e-7
COS_EPS = 1e-8


@dataclass(frozen=True)
class LossWeights:
    alpha: float = 1.0  # attention guidance
    beta: float = 1.0  # mask prediction
    gamma: float = 1.0  # slot cosine

    def __post_init__(self):
        if min(self.alpha, self.beta, self.gamma) < 0:
            raise ValueError("loss weights must be nonnegative")


def init_heads(dim: int, n_actions: int, n_scenes: int, n_spatial: int,
               rng: np.random.Generator) -> dict[str, np.ndarray]:
    hidden = 2 * dim
    return {
        "head.weight": trunc_normal(rng, (dim, n_actions + n_scenes)),
        "head.bias": np.zeros(n_actions + n_scenes, np.float32),
        "mask_head.fc1.weight": trunc_normal(rng, (dim, hidden)),
        "mask_head.fc1.bias": np.zeros(hidden, np.float32),
        "mask_head.fc2.weight": trunc_normal(rng, (hidden, n_spatial)),
        "mask_head.fc2.bias": np.zeros(n_spatial, np.float32),
    }


def unified_head(slots, P: Mapping[str, Tensor], prefix: str = "head") -> Tensor:
    """One affine map shared by every slot: [..., D] -> [..., N_A + N_S]."""
    return tn.linear(slots, P[f"{prefix}.weight"], P[f"{prefix}.bias"])


def mask_head(slot, P: Mapping[str, Tensor], prefix: str = "mask_head") -> Tensor:
    h = tn.gelu(tn.linear(slot, P[f"{prefix}.fc1.weight"], P[f"{prefix}.fc1.bias"]))
    return tn.sigmoid(tn.linear(h, P[f"{prefix}.fc2.weight"], P[f"{prefix}.fc2.bias"]))


def _rows(k, b: int) -> tuple[np.ndarray, np.ndarray]:
    return np.arange(b), np.broadcast_to(np.asarray(k, dtype=np.int64), (b,))


def loss_disentangle(logits: Tensor, k_action, k_scene, y_a, y_s,
                     n_actions: int, n_scenes: int) -> Tensor:
    """Cross-entropy of the action slot against padded ``y_a`` plus the scene
    slot against padded soft ``y_s``. ``logits`` is [B, K, N_A + N_S]."""
    b = logits.shape[0]
    rows, ka = _rows(k_action, b)
    _, ks = _rows(k_scene, b)
    ta, ts = pad_targets(y_a, y_s, n_actions, n_scenes)
    ta = np.broadcast_to(ta, (b, n_actions + n_scenes))
    ts = np.broadcast_to(ts, (b, n_actions + n_scenes))
    per_clip = tn.cross_entropy(logits[rows, ka], ta) + tn.cross_entropy(logits[rows, ks], ts)
    return per_clip.mean()


def loss_attention_guidance(attn: Tensor, k_action, h_hat) -> Tensor:
    """Squared L2 distance between the action slot's attention column and the token mask.

    ``attn`` is [B, NT, K]; ``h_hat`` is [B, NT] in the encoder token order.
    """
    b, nt, _ = attn.shape
    h_hat = np.asarray(h_hat)
    if h_hat.shape[-1] != nt:
        raise tn.DimensionError(f"mask has {h_hat.shape[-1]} tokens, attention has {nt}")
    rows, ka = _rows(k_action, b)
    col = attn[rows, :, ka]  # [B, NT]
    diff = col - h_hat
    return (diff * diff).sum(axis=-1).mean()


def loss_mask_prediction(s_action: Tensor, P: Mapping[str, Tensor], h_tilde) -> Tensor:
    """Binary cross-entropy of the mask head's prediction from the action slot
    against the temporally averaged token mask, averaged over spatial tokens."""
    p = tn.clip(mask_head(s_action, P), BCE_CLAMP, 1.0 - BCE_CLAMP)
    h = np.asarray(h_tilde)
    bce = -(h * tn.log(p) + (1.0 - h) * tn.log(1.0 - p))
    return bce.mean(axis=-1).mean()


def loss_cosine(slots: Tensor) -> Tensor:
    """Mean cosine similarity over unordered slot pairs; ``slots`` is [B, K, D]."""
    k = slots.shape[-2]
    if k < 2:
        raise ValueError("cosine loss needs at least two slots")
    u = tn.l2_normalize_axis(slots, axis=-1, eps=COS_EPS)
    gram = u @ u.swapaxes(-1, -2)
    i, j = np.triu_indices(k, 1)
    return gram[:, i, j].mean(axis=-1).mean()


def temporal_mean(h_hat: np.ndarray, n_spatial: int) -> np.ndarray:
    """[B, NT] token mask -> [B, N] average over temporal token groups."""
    b, nt = h_hat.shape
    return h_hat.reshape(b, nt // n_spatial, n_spatial).mean(axis=1)


def total_loss(parts: Mapping[str, Tensor], weights: LossWeights) -> Tensor:
    """``L_D + alpha * L_AG + beta * L_MP + gamma * L_cos``; absent parts count as zero."""
    total = parts["L_D"]
    for key, w in (("L_AG", weights.alpha), ("L_MP", weights.beta), ("L_cos", weights.gamma)):
        if w and key in parts:
            total = total + parts[key] * w
    return total

