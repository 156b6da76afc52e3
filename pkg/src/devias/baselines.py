"""Token baselines sharing the DEVIAS encoder.

``one_token`` feeds a single learnable token to separate action and scene
heads; ``two_token`` gives each task its own token; ``two_token_unified``
replaces the two heads with one head over the joint label space and trains
it with the padded cross-entropy used by DEVIAS.
"""
from __future__ import annotations

from typing import Mapping

import numpy as np

from . import tensor as tn
from .encoder import encode, trunc_normal
from .objectives import loss_disentangle
from .tensor import Tensor


def n_tokens(variant: str) -> int:
    return 1 if variant == "one_token" else 2


def init_baseline(cfg, rng: np.random.Generator) -> dict[str, np.ndarray]:
    p = {"tokens": trunc_normal(rng, (n_tokens(cfg.variant), cfg.dim))}
    if cfg.variant == "two_token_unified":
        p["head.weight"] = trunc_normal(rng, (cfg.dim, cfg.n_classes))
        p["head.bias"] = np.zeros(cfg.n_classes, np.float32)
    else:
        p["head_action.weight"] = trunc_normal(rng, (cfg.dim, cfg.n_actions))
        p["head_action.bias"] = np.zeros(cfg.n_actions, np.float32)
        p["head_scene.weight"] = trunc_normal(rng, (cfg.dim, cfg.n_scenes))
        p["head_scene.bias"] = np.zeros(cfg.n_scenes, np.float32)
    return p


def _token_features(frames, P: Mapping[str, Tensor], cfg) -> Tensor:
    n = n_tokens(cfg.variant)
    x = encode(frames, P, cfg.encoder, tokens=P["tokens"])
    return x[:, :n]


def forward_two_token(frames, P: Mapping[str, Tensor], cfg) -> tuple[Tensor, Tensor, Tensor]:
    """(action logits, scene logits, token features [B, 2, D]).

    With the unified head both logit tensors are N_A + N_S wide.
    """
    feats = _token_features(frames, P, cfg)
    cls_a, cls_s = feats[:, 0], feats[:, 1]
    if cfg.variant == "two_token_unified":
        w, b = P["head.weight"], P["head.bias"]
        return tn.linear(cls_a, w, b), tn.linear(cls_s, w, b), feats
    return (tn.linear(cls_a, P["head_action.weight"], P["head_action.bias"]),
            tn.linear(cls_s, P["head_scene.weight"], P["head_scene.bias"]), feats)


def forward_one_token(frames, P: Mapping[str, Tensor], cfg) -> tuple[Tensor, Tensor, Tensor]:
    """(action logits, scene logits, token feature [B, D])."""
    tok = _token_features(frames, P, cfg)[:, 0]
    return (tn.linear(tok, P["head_action.weight"], P["head_action.bias"]),
            tn.linear(tok, P["head_scene.weight"], P["head_scene.bias"]), tok)


def baseline_forward(frames, P, cfg):
    if cfg.variant == "one_token":
        return forward_one_token(frames, P, cfg)
    return forward_two_token(frames, P, cfg)


def baseline_loss(action_logits: Tensor, scene_logits: Tensor, actions, soft_scenes, cfg,
                  scene_weight: float = 1.0) -> tuple[Tensor, dict[str, Tensor]]:
    """CE(action) + CE(soft scene), or the padded joint-space version for the unified head."""
    b = action_logits.shape[0]
    if cfg.variant == "two_token_unified":
        stacked = tn.concat([action_logits.reshape(b, 1, -1), scene_logits.reshape(b, 1, -1)], axis=1)
        loss = loss_disentangle(stacked, 0, 1, actions, soft_scenes, cfg.n_actions, cfg.n_scenes)
        return loss, {"L_D": loss}
    onehot = np.eye(cfg.n_actions)[np.asarray(actions)]
    l_a = tn.cross_entropy(action_logits, onehot).mean()
    l_s = tn.cross_entropy(scene_logits, np.asarray(soft_scenes)).mean()
    loss = l_a + l_s * scene_weight if scene_weight != 1.0 else l_a + l_s
    return loss, {"L_D": loss, "L_action": l_a, "L_scene": l_s}


def baseline_predict(frames, P, cfg):
    from .model import Prediction, block_probs

    a_logits, s_logits, feats = baseline_forward(frames, P, cfg)
    a, s = a_logits.data.astype(np.float64), s_logits.data.astype(np.float64)
    if cfg.variant == "two_token_unified":
        a_probs, _ = block_probs(a, cfg.n_actions)
        _, s_probs = block_probs(s, cfg.n_actions)
    else:
        a_probs, _ = block_probs(np.concatenate([a, s], -1), cfg.n_actions)
        _, s_probs = block_probs(np.concatenate([a, s], -1), cfg.n_actions)
    f = feats.data
    if f.ndim == 2:
        return Prediction(a_probs, s_probs, f, f)
    return Prediction(a_probs, s_probs, f[:, 0], f[:, 1])
