"""Scene-diversifying augmentations.

``scene_swap`` pastes the foreground of one clip onto the frames of another,
``apply_batch_aug`` does so for a ``floor(rho * B)`` subset of a batch, and
``be_mix`` blends one frame of a clip into all of its frames (the BE
debiasing baseline).
"""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .world import BE_MIXED, SCENE_SWAPPED, ClipSet, VideoClip

GROUND_TRUTH = "ground_truth"
MOTION_ESTIMATE = "motion_estimate"


@dataclass(frozen=True)
class AugConfig:
    tau: float = 0.3
    rho: float = 0.4
    mask_source: str = GROUND_TRUTH
    be_weight_max: float = 0.3

    def __post_init__(self):
        if not 0.0 < self.tau <= 1.0:
            raise ValueError("tau must lie in (0, 1]")
        if not 0.0 <= self.rho <= 1.0:
            raise ValueError("rho must lie in [0, 1]")
        if self.mask_source not in (GROUND_TRUTH, MOTION_ESTIMATE):
            raise ValueError(f"unknown mask source {self.mask_source!r}")


def motion_score(frames: np.ndarray) -> np.ndarray:
    """Per-voxel motion evidence, [2T, H, W].

    A pixel scores high in frame ``t`` when it differs from both the previous
    and the next frame (end frames use their single neighbour). Requiring both
    keeps the sprite's position at ``t`` and drops the ghosts it leaves at
    ``t - 1`` and ``t + 1``.
    """
    f = np.asarray(frames, np.float64)
    if f.ndim == 4:
        f = f.mean(axis=-1)
    if f.shape[0] < 2:
        raise ValueError("motion needs at least two frames")
    d = np.abs(np.diff(f, axis=0))  # d[t] = |f[t+1] - f[t]|
    score = np.empty_like(f)
    score[0] = d[0]
    score[-1] = d[-1]
    score[1:-1] = np.minimum(d[:-1], d[1:])
    return score


def extract_motion_mask(clip, tau: float) -> np.ndarray:
    """Binary [2T, H, W] mask of the top ``tau`` fraction of voxels by motion score.

    Ranking is global over the clip; equal scores are ordered by flat voxel index.
    """
    frames = clip.frames if isinstance(clip, VideoClip) else clip
    score = motion_score(frames)
    flat = score.reshape(-1)
    k = int(round(tau * flat.size))
    mask = np.zeros(flat.size, np.uint8)
    if k > 0:
        order = np.lexsort((np.arange(flat.size), -flat))
        mask[order[:k]] = 1
    return mask.reshape(score.shape)


def pseudo_masks(clips: ClipSet, cfg: AugConfig) -> np.ndarray:
    """The masks used as pseudo-human masks for every clip in ``clips``."""
    if cfg.mask_source == GROUND_TRUTH:
        return clips.masks
    return np.stack([extract_motion_mask(f, cfg.tau) for f in clips.frames])


def _composite(fg: np.ndarray, bg: np.ndarray, mask: np.ndarray) -> np.ndarray:
    m = mask.astype(bool)[..., None]
    return np.where(m, fg, bg)


def scene_swap(v_i: VideoClip, v_j: VideoClip, mask_i: np.ndarray) -> VideoClip:
    """Foreground of ``v_i`` (under ``mask_i``) over the frames of ``v_j``.

    Keeps the action label and mask of ``v_i``; ``scene_id`` is taken from
    ``v_j`` for bookkeeping, the training target comes from the teacher.
    """
    if v_i.frames.shape != v_j.frames.shape:
        raise ValueError(f"geometry mismatch {v_i.frames.shape} vs {v_j.frames.shape}")
    frames = _composite(v_i.frames, v_j.frames, mask_i)
    return VideoClip(frames, v_i.action_id, v_j.scene_id, np.asarray(mask_i, np.uint8), SCENE_SWAPPED)


def apply_batch_aug(batch: ClipSet, cfg: AugConfig, rng: np.random.Generator,
                    masks: np.ndarray | None = None) -> ClipSet:
    """Scene-swap ``floor(rho * B)`` clips, each with a random distinct partner.

    Partners are drawn from the unaugmented batch. ``masks`` defaults to
    :func:`pseudo_masks`; swapped clips carry their own mask, and every clip in
    the returned batch carries the mask that was used for it.
    """
    b = len(batch)
    n_aug = int(np.floor(cfg.rho * b))
    if n_aug and b < 2:
        raise ValueError("scene swap needs a batch of at least two clips")
    if masks is None:
        masks = pseudo_masks(batch, cfg)
    out = replace(batch, frames=batch.frames.copy(), scenes=batch.scenes.copy(),
                  masks=np.asarray(masks, np.uint8).copy(), provenance=batch.provenance.copy())
    if not n_aug:
        return out
    chosen = np.sort(rng.choice(b, size=n_aug, replace=False))
    partners = (chosen + 1 + rng.integers(0, b - 1, size=n_aug)) % b
    for i, j in zip(chosen, partners):
        out.frames[i] = _composite(batch.frames[i], batch.frames[j], masks[i])
        out.scenes[i] = batch.scenes[j]
        out.provenance[i] = SCENE_SWAPPED
    return out


def be_mix(clip: VideoClip, rng: np.random.Generator, weight_max: float = 0.3,
           weight: float | None = None) -> VideoClip:
    """Blend a random frame of the clip into every frame with weight ``U(0, weight_max)``."""
    lam = rng.uniform(0.0, weight_max) if weight is None else weight
    r = int(rng.integers(0, clip.frames.shape[0]))
    f = clip.frames
    frames = np.clip(f + lam * (f[r][None] - f), 0.0, 1.0).astype(f.dtype)
    return VideoClip(frames, clip.action_id, clip.scene_id, clip.fg_mask, BE_MIXED)


def be_mix_batch(batch: ClipSet, rng: np.random.Generator, weight_max: float = 0.3) -> ClipSet:
    b, t = batch.frames.shape[:2]
    lam = rng.uniform(0.0, weight_max, b).astype(np.float32)[:, None, None, None, None]
    r = rng.integers(0, t, b)
    still = batch.frames[np.arange(b), r][:, None]
    frames = np.clip(batch.frames + lam * (still - batch.frames), 0.0, 1.0).astype(batch.frames.dtype)
    return replace(batch, frames=frames, provenance=np.full(b, BE_MIXED, np.uint8))
