"""Frozen scene teacher that provides soft scene labels.

A reduced-size copy of the encoder, mean-pooled and followed by a linear
classifier, trained on scene-only clips. Once trained it is never updated;
its softmax output is the scene target for every training clip, including
scene-swapped ones.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as tn
from .encoder import EncoderConfig, encode, init_encoder, trunc_normal
from .optim import OptState, adamw_step, cosine_lr
from .world import ClipSet


class UsageError(RuntimeError):
    """An operation was called out of order (e.g. labelling with an untrained teacher)."""


@dataclass(frozen=True)
class TeacherConfig:
    dim: int = 32
    heads: int = 2
    depth: int = 1
    patch: int = 8
    epochs: int = 20
    batch: int = 32
    lr: float = 2e-3
    weight_decay: float = 0.05

    def encoder(self, frames: int, height: int, width: int, channels: int) -> EncoderConfig:
        return EncoderConfig(dim=self.dim, heads=self.heads, depth=self.depth, patch=self.patch,
                             frames=frames, height=height, width=width, channels=channels)


def _logits(frames, P, enc: EncoderConfig) -> tn.Tensor:
    x = encode(frames, P, enc, prefix="teacher")
    x = tn.layer_norm(x, P["teacher.norm.gain"], P["teacher.norm.bias"])
    pooled = x.mean(axis=1)
    return tn.linear(pooled, P["teacher.head.weight"], P["teacher.head.bias"])


@dataclass
class SceneTeacher:
    n_scenes: int
    encoder: EncoderConfig
    params: dict[str, np.ndarray] | None = None
    history: list = field(default_factory=list)

    @property
    def trained(self) -> bool:
        return self.params is not None

    def soft_label(self, frames: np.ndarray, batch: int = 64) -> np.ndarray:
        """Softmax scene probabilities [B, N_S] (float64) for [B, 2T, H, W, C] frames."""
        if not self.trained:
            raise UsageError("the scene teacher must be trained before it can label clips")
        frames = np.asarray(frames, np.float32)
        single = frames.ndim == 4
        if single:
            frames = frames[None]
        P = tn.constants(self.params)
        out = []
        for lo in range(0, len(frames), batch):
            z = _logits(frames[lo:lo + batch], P, self.encoder).data.astype(np.float64)
            z = np.exp(z - z.max(-1, keepdims=True))
            out.append(z / z.sum(-1, keepdims=True))
        probs = np.concatenate(out)
        return probs[0] if single else probs

    def accuracy(self, clips: ClipSet) -> float:
        return float(np.mean(self.soft_label(clips.frames).argmax(-1) == clips.scenes))


def train_scene_teacher(clips: ClipSet, seed: int = 0, cfg: TeacherConfig = TeacherConfig(),
                        log=None) -> SceneTeacher:
    """Fit the teacher on the teacher split with plain cross-entropy."""
    _, t, h, w, c = clips.frames.shape
    enc = cfg.encoder(t, h, w, c)
    rng = np.random.default_rng([seed, 2])
    params = init_encoder(enc, rng, prefix="teacher")
    params["teacher.norm.gain"] = np.ones(enc.dim, np.float32)
    params["teacher.norm.bias"] = np.zeros(enc.dim, np.float32)
    params["teacher.head.weight"] = trunc_normal(rng, (enc.dim, clips.n_scenes))
    params["teacher.head.bias"] = np.zeros(clips.n_scenes, np.float32)
    state = OptState(lr=cfg.lr, weight_decay=cfg.weight_decay,
                     no_decay={k for k, v in params.items() if v.ndim == 1})
    n = len(clips)
    steps_per_epoch = max(1, n // cfg.batch)
    total = cfg.epochs * steps_per_epoch
    warmup = min(steps_per_epoch, total - 1)
    teacher = SceneTeacher(clips.n_scenes, enc)
    eye = np.eye(clips.n_scenes)
    step = 0
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        losses = []
        for s in range(steps_per_epoch):
            idx = order[s * cfg.batch:(s + 1) * cfg.batch]
            tape = tn.Tape()
            P = tape.watch_all(params)
            loss = tn.cross_entropy(_logits(clips.frames[idx], P, enc), eye[clips.scenes[idx]]).mean()
            grads = tape.backward(loss)
            adamw_step(params, grads, state, lr=cosine_lr(step, warmup, total, cfg.lr))
            losses.append(loss.item())
            step += 1
        teacher.history.append({"epoch": epoch, "loss": float(np.mean(losses))})
        if log is not None:
            log(f"teacher epoch {epoch}: loss {np.mean(losses):.4f}")
    teacher.params = params
    return teacher
