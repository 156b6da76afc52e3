"""Model configuration, parameter initialisation and the DEVIAS forward/loss."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Mapping

import numpy as np

from . import tensor as tn
from .disentangle import SlotConfig, SlotState, disentangle, init_slots
from .encoder import EncoderConfig, encode, init_encoder, tokenize_mask
from .matching import assign_infer, build_cost, hungarian
from .objectives import (LossWeights, init_heads, loss_attention_guidance, loss_cosine,
                         loss_disentangle, loss_mask_prediction, temporal_mean, total_loss,
                         unified_head)
from .tensor import Tensor

VARIANTS = ("devias", "one_token", "two_token", "two_token_unified")


@dataclass(frozen=True)
class ModelConfig:
    variant: str = "devias"
    n_actions: int = 4
    n_scenes: int = 4
    frames: int = 8
    height: int = 32
    width: int = 32
    channels: int = 1
    dim: int = 64
    heads: int = 4
    depth: int = 3
    patch: int = 8
    mlp_ratio: int = 4
    num_slots: int = 2
    iters: int = 4
    slot_hidden: int = 128

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown model variant {self.variant!r}; expected one of {VARIANTS}")

    @property
    def encoder(self) -> EncoderConfig:
        return EncoderConfig(dim=self.dim, heads=self.heads, depth=self.depth, patch=self.patch,
                             mlp_ratio=self.mlp_ratio, frames=self.frames, height=self.height,
                             width=self.width, channels=self.channels)

    @property
    def slots(self) -> SlotConfig:
        return SlotConfig(num_slots=self.num_slots, iters=self.iters, dim=self.dim,
                          mlp_hidden=self.slot_hidden)

    @property
    def n_classes(self) -> int:
        return self.n_actions + self.n_scenes

    def to_dict(self) -> dict:
        return asdict(self)


def init_model(cfg: ModelConfig, seed: int) -> dict[str, np.ndarray]:
    rng = np.random.default_rng([seed, 1])
    params = init_encoder(cfg.encoder, rng)
    if cfg.variant == "devias":
        params.update(init_slots(cfg.slots, rng))
        params.update(init_heads(cfg.dim, cfg.n_actions, cfg.n_scenes, cfg.encoder.n_spatial, rng))
    else:
        from .baselines import init_baseline
        params.update(init_baseline(cfg, rng))
    return dict(sorted(params.items()))


@dataclass
class DeviasOutput:
    features: Tensor  # [B, NT, D]
    state: SlotState
    logits: Tensor  # [B, K, N_A + N_S]


def devias_forward(frames, P: Mapping[str, Tensor], cfg: ModelConfig,
                   keep_history: bool = False) -> DeviasOutput:
    x = encode(frames, P, cfg.encoder)
    state = disentangle(x, P, cfg.slots, keep_history=keep_history)
    return DeviasOutput(x, state, unified_head(state.slots, P))


@dataclass
class Targets:
    """Per-batch supervision: action ids, soft scene labels and pseudo-human masks."""

    actions: np.ndarray  # [B]
    soft_scenes: np.ndarray  # [B, N_S]
    masks: np.ndarray  # [B, 2T, H, W]
    h_hat: np.ndarray = field(init=False)

    def tokenize(self, patch: int) -> "Targets":
        self.h_hat = tokenize_mask(self.masks, patch)
        return self


def match_batch(logits: np.ndarray, actions, soft_scenes, n_actions: int, n_scenes: int):
    """Per-clip Hungarian matching; returns (k_action [B], k_scene [B], costs [B, K, 2])."""
    costs = build_cost(logits, actions, soft_scenes, n_actions, n_scenes)
    pairs = [hungarian(c) for c in costs]
    return (np.array([p.k_action for p in pairs]), np.array([p.k_scene for p in pairs]), costs)


def devias_losses(out: DeviasOutput, targets: Targets, P: Mapping[str, Tensor], cfg: ModelConfig,
                  weights: LossWeights) -> tuple[Tensor, dict[str, Tensor], np.ndarray, np.ndarray]:
    """Total loss, its parts, and the matched action / scene slot indices."""
    ka, ks, _ = match_batch(out.logits.data, targets.actions, targets.soft_scenes,
                            cfg.n_actions, cfg.n_scenes)
    b = out.logits.shape[0]
    rows = np.arange(b)
    parts = {"L_D": loss_disentangle(out.logits, ka, ks, targets.actions, targets.soft_scenes,
                                     cfg.n_actions, cfg.n_scenes)}
    if weights.alpha:
        parts["L_AG"] = loss_attention_guidance(out.state.attn, ka, targets.h_hat)
    if weights.beta:
        h_tilde = temporal_mean(targets.h_hat, cfg.encoder.n_spatial)
        parts["L_MP"] = loss_mask_prediction(out.state.slots[rows, ka], P, h_tilde)
    if weights.gamma:
        parts["L_cos"] = loss_cosine(out.state.slots)
    return total_loss(parts, weights), parts, ka, ks


def block_probs(logits: np.ndarray, n_actions: int) -> tuple[np.ndarray, np.ndarray]:
    """Softmax restricted to the action block and to the scene block."""
    z = np.asarray(logits, np.float64)
    a = np.exp(z[..., :n_actions] - z[..., :n_actions].max(-1, keepdims=True))
    s = np.exp(z[..., n_actions:] - z[..., n_actions:].max(-1, keepdims=True))
    return a / a.sum(-1, keepdims=True), s / s.sum(-1, keepdims=True)


@dataclass
class Prediction:
    action_probs: np.ndarray  # [B, N_A]
    scene_probs: np.ndarray  # [B, N_S]
    action_features: np.ndarray  # [B, D]
    scene_features: np.ndarray  # [B, D]
    k_action: np.ndarray | None = None  # [B], DEVIAS only
    k_scene: np.ndarray | None = None
    attention: np.ndarray | None = None  # [B, NT, K]
    history: list = field(default_factory=list)


def predict(frames, params: Mapping[str, np.ndarray], cfg: ModelConfig,
            keep_history: bool = False) -> Prediction:
    """Inference without a tape, for any variant."""
    P = tn.constants(params)
    if cfg.variant != "devias":
        from .baselines import baseline_predict
        return baseline_predict(frames, P, cfg)
    out = devias_forward(frames, P, cfg, keep_history=keep_history)
    logits = out.logits.data.astype(np.float64)
    z = logits - logits.max(-1, keepdims=True)
    probs = np.exp(z) / np.exp(z).sum(-1, keepdims=True)
    pairs = [assign_infer(p, cfg.n_actions) for p in probs]
    ka = np.array([p.k_action for p in pairs])
    ks = np.array([p.k_scene for p in pairs])
    rows = np.arange(len(ka))
    a_probs, _ = block_probs(logits[rows, ka], cfg.n_actions)
    _, s_probs = block_probs(logits[rows, ks], cfg.n_actions)
    slots = out.state.slots.data
    return Prediction(a_probs, s_probs, slots[rows, ka], slots[rows, ks], ka, ks,
                      out.state.attn.data, out.state.history)
