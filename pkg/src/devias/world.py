"""Synthetic video world with known action and scene factors.

A clip is a static background texture (the scene) with one textured square
sprite moving along a trajectory family (the action). Because the sprite is
composited by this module, the foreground mask is exact.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

GENERATED, SCENE_SWAPPED, SCENE_ONLY, BE_MIXED = range(4)
PROVENANCE = ("generated", "scene_swapped", "scene_only", "be_mixed")

SCENE_FAMILIES = ("h_stripes", "checker", "gradient", "blobs", "v_stripes", "rings")
ACTION_FAMILIES = ("h_bounce", "v_bounce", "diagonal", "orbit", "zigzag", "anti_diagonal")

SPRITE = 8
SPEED_RANGE = (2.0, 3.5)  # pixels per frame
# fixed sprite texture; non-periodic so any shift changes pixel values
_SPRITE_TEX = np.random.default_rng(20240607).uniform(0.72, 1.0, (SPRITE, SPRITE))

SPLITS = ("train", "test_in_context", "test_out_of_context", "test_scene_only")
_SPLIT_IDS = {name: i for i, name in enumerate(SPLITS + ("teacher",))}


class FormatError(ValueError):
    """A data or checkpoint file is malformed."""


@dataclass(frozen=True)
class WorldConfig:
    n_actions: int = 4
    n_scenes: int = 4
    frames: int = 8
    height: int = 32
    width: int = 32
    channels: int = 1
    corr: float = 0.9
    n_train: int = 2000
    n_test: int = 400
    n_teacher: int = 800
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.corr <= 1.0:
            raise ValueError("corr must lie in [0, 1]")
        if not 2 <= self.n_actions <= len(ACTION_FAMILIES):
            raise ValueError(f"n_actions must be in [2, {len(ACTION_FAMILIES)}]")
        if not 2 <= self.n_scenes <= len(SCENE_FAMILIES):
            raise ValueError(f"n_scenes must be in [2, {len(SCENE_FAMILIES)}]")
        if self.frames % 2 or self.frames < 2:
            raise ValueError("frames must be even and >= 2")
        if min(self.height, self.width) < SPRITE + 4:
            raise ValueError("frame too small for the sprite")

    @property
    def geometry(self) -> tuple[int, int, int, int]:
        return self.frames, self.height, self.width, self.channels


@dataclass
class VideoClip:
    frames: np.ndarray  # [2T, H, W, C] float32 in [0, 1]
    action_id: int
    scene_id: int
    fg_mask: np.ndarray  # [2T, H, W] uint8
    provenance: int = GENERATED


@dataclass
class ClipSet:
    """A batch or split of clips stored as stacked arrays."""

    frames: np.ndarray  # [B, 2T, H, W, C] float32
    actions: np.ndarray  # [B] int64
    scenes: np.ndarray  # [B] int64
    masks: np.ndarray  # [B, 2T, H, W] uint8
    provenance: np.ndarray  # [B] uint8
    seeds: np.ndarray = field(default_factory=lambda: np.zeros(0, np.int64))
    n_actions: int = 4
    n_scenes: int = 4

    def __len__(self) -> int:
        return len(self.actions)

    def clip(self, i: int) -> VideoClip:
        return VideoClip(self.frames[i], int(self.actions[i]), int(self.scenes[i]),
                         self.masks[i], int(self.provenance[i]))

    def subset(self, idx) -> "ClipSet":
        idx = np.asarray(idx)
        seeds = self.seeds[idx] if len(self.seeds) == len(self) else self.seeds
        return replace(self, frames=self.frames[idx], actions=self.actions[idx],
                       scenes=self.scenes[idx], masks=self.masks[idx],
                       provenance=self.provenance[idx], seeds=seeds)

    @classmethod
    def from_clips(cls, clips, n_actions: int, n_scenes: int, seeds=None) -> "ClipSet":
        clips = list(clips)
        return cls(frames=np.stack([c.frames for c in clips]).astype(np.float32),
                   actions=np.array([c.action_id for c in clips], np.int64),
                   scenes=np.array([c.scene_id for c in clips], np.int64),
                   masks=np.stack([c.fg_mask for c in clips]).astype(np.uint8),
                   provenance=np.array([c.provenance for c in clips], np.uint8),
                   seeds=np.zeros(0, np.int64) if seeds is None else np.asarray(seeds, np.int64),
                   n_actions=n_actions, n_scenes=n_scenes)


# ---------------------------------------------------------------------------
# rendering


def _bilinear_noise(rng, h: int, w: int, cells: int) -> np.ndarray:
    grid = rng.uniform(0, 1, (cells, cells))
    ys = np.linspace(0, cells - 1, h)
    xs = np.linspace(0, cells - 1, w)
    rows = np.stack([np.interp(xs, np.arange(cells), g) for g in grid])
    out = np.stack([np.interp(ys, np.arange(cells), rows[:, j]) for j in range(w)], axis=1)
    return (out - out.min()) / max(out.max() - out.min(), 1e-6)


def render_scene(scene_id: int, h: int, w: int, rng: np.random.Generator) -> np.ndarray:
    """Background texture in roughly [0.02, 0.6], shape [H, W]."""
    y, x = np.mgrid[0:h, 0:w].astype(np.float64)
    lo = rng.uniform(0.02, 0.12)
    amp = rng.uniform(0.3, 0.45)
    family = SCENE_FAMILIES[scene_id]
    if family == "h_stripes":
        period = rng.uniform(5, 9)
        pattern = np.sin(2 * np.pi * y / period + rng.uniform(0, 2 * np.pi)) > 0
    elif family == "v_stripes":
        period = rng.uniform(5, 9)
        pattern = np.sin(2 * np.pi * x / period + rng.uniform(0, 2 * np.pi)) > 0
    elif family == "checker":
        cell = rng.integers(3, 7)
        oy, ox = rng.integers(0, cell, 2)
        pattern = (((y + oy) // cell + (x + ox) // cell) % 2) > 0
    elif family == "gradient":
        theta = rng.uniform(0, 2 * np.pi)
        proj = np.cos(theta) * x / w + np.sin(theta) * y / h
        pattern = (proj - proj.min()) / (proj.max() - proj.min())
    elif family == "blobs":
        pattern = _bilinear_noise(rng, h, w, int(rng.integers(8, 12)))
    elif family == "rings":
        cy, cx = rng.uniform(0.3, 0.7, 2) * (h, w)
        r = np.hypot(y - cy, x - cx)
        pattern = np.sin(2 * np.pi * r / rng.uniform(5, 8)) > 0
    else:  # pragma: no cover
        raise ValueError(family)
    return lo + amp * pattern.astype(np.float64)


def _reflect(p: np.ndarray, limit: float) -> np.ndarray:
    m = np.mod(p, 2 * limit)
    return np.where(m <= limit, m, 2 * limit - m)


def sprite_track(action_id: int, n_frames: int, h: int, w: int,
                 rng: np.random.Generator) -> np.ndarray:
    """Top-left sprite corner per frame, integer array [T, 2] of (row, col)."""
    ly, lx = h - SPRITE, w - SPRITE
    t = np.arange(n_frames, dtype=np.float64)
    family = ACTION_FAMILIES[action_id]
    speed = rng.uniform(*SPEED_RANGE)
    sign = rng.choice([-1.0, 1.0], 2)
    y0, x0 = rng.uniform(0, ly), rng.uniform(0, lx)
    if family == "h_bounce":
        ys, xs = np.full_like(t, y0), _reflect(x0 + sign[1] * speed * t, lx)
    elif family == "v_bounce":
        ys, xs = _reflect(y0 + sign[0] * speed * t, ly), np.full_like(t, x0)
    elif family == "diagonal":
        s = speed / np.sqrt(2) * 1.2
        d = sign[0]
        ys, xs = _reflect(y0 + d * s * t, ly), _reflect(x0 + d * s * t, lx)
    elif family == "anti_diagonal":
        s = speed / np.sqrt(2) * 1.2
        d = sign[0]
        ys, xs = _reflect(y0 + d * s * t, ly), _reflect(x0 - d * s * t, lx)
    elif family == "orbit":
        # small frames cannot hold the full orbit; shrink it to fit
        radius = min(rng.uniform(5.0, 8.0), 0.5 * min(ly, lx))
        omega = sign[0] * rng.uniform(0.55, 0.85)
        phase = rng.uniform(0, 2 * np.pi)
        cy = rng.uniform(radius, ly - radius)
        cx = rng.uniform(radius, lx - radius)
        ys = cy + radius * np.sin(omega * t + phase)
        xs = cx + radius * np.cos(omega * t + phase)
    elif family == "zigzag":
        xs = _reflect(x0 + sign[1] * speed * t, lx)
        y0 = rng.uniform(3, ly - 3)
        ys = y0 + 3.0 * np.where(t % 2 == 0, 1.0, -1.0) * sign[0]
    else:  # pragma: no cover
        raise ValueError(family)
    track = np.stack([np.rint(ys), np.rint(xs)], axis=1).astype(np.int64)
    track[:, 0] = np.clip(track[:, 0], 0, ly)
    track[:, 1] = np.clip(track[:, 1], 0, lx)
    return track


def generate_clip(action_id: int, scene_id: int, seed: int, cfg: WorldConfig = WorldConfig(),
                  scene_only: bool = False) -> VideoClip:
    """Render one clip; bit-identical for identical arguments."""
    if not 0 <= action_id < cfg.n_actions:
        raise ValueError(f"action_id {action_id} out of range [0, {cfg.n_actions})")
    if not 0 <= scene_id < cfg.n_scenes:
        raise ValueError(f"scene_id {scene_id} out of range [0, {cfg.n_scenes})")
    rng = np.random.default_rng(seed)
    n, h, w, c = cfg.geometry
    background = render_scene(scene_id, h, w, rng)
    track = sprite_track(action_id, n, h, w, rng)
    frames = np.repeat(background[None], n, axis=0)
    mask = np.zeros((n, h, w), np.uint8)
    if not scene_only:
        for f, (r, q) in enumerate(track):
            frames[f, r:r + SPRITE, q:q + SPRITE] = _SPRITE_TEX
            mask[f, r:r + SPRITE, q:q + SPRITE] = 1
    frames = np.repeat(frames[..., None], c, axis=-1).astype(np.float32)
    return VideoClip(frames, action_id, scene_id, mask, SCENE_ONLY if scene_only else GENERATED)


# ---------------------------------------------------------------------------
# splits


def clip_seed(world_seed: int, split: str, i: int) -> int:
    """Seed for clip ``i`` of ``split``; distinct across splits by construction."""
    return ((world_seed * 8 + _SPLIT_IDS[split]) << 32) + i


def _labels(rng, n: int, cfg: WorldConfig, mode: str) -> tuple[np.ndarray, np.ndarray]:
    actions = rng.integers(0, cfg.n_actions, n)
    partner = actions % cfg.n_scenes
    # uniform over the n_scenes - 1 non-partner scenes
    other = (partner + 1 + rng.integers(0, cfg.n_scenes - 1, n)) % cfg.n_scenes
    if mode == "correlated":
        keep = rng.uniform(0, 1, n) < cfg.corr
        scenes = np.where(keep, partner, other)
    elif mode == "out_of_context":
        scenes = other
    else:
        scenes = rng.integers(0, cfg.n_scenes, n)
    return actions, scenes


def make_split(cfg: WorldConfig, split: str, n: int | None = None) -> ClipSet:
    mode = {"train": "correlated", "test_in_context": "correlated",
            "test_out_of_context": "out_of_context"}.get(split, "uniform")
    if n is None:
        n = {"train": cfg.n_train, "teacher": cfg.n_teacher}.get(split, cfg.n_test)
    rng = np.random.default_rng([cfg.seed, _SPLIT_IDS[split]])
    actions, scenes = _labels(rng, n, cfg, mode)
    scene_only = split == "test_scene_only"
    seeds = [clip_seed(cfg.seed, split, i) for i in range(n)]
    clips = [generate_clip(int(a), int(s), sd, cfg, scene_only)
             for a, s, sd in zip(actions, scenes, seeds)]
    return ClipSet.from_clips(clips, cfg.n_actions, cfg.n_scenes, seeds)


def make_splits(cfg: WorldConfig) -> dict[str, ClipSet]:
    """Train and the three evaluation splits."""
    return {name: make_split(cfg, name) for name in SPLITS}


def make_teacher_set(cfg: WorldConfig) -> ClipSet:
    """Clips for fitting the scene teacher: a sprite with independently drawn
    action and scene, so the teacher learns to look past the foreground.
    Disjoint from every split."""
    return make_split(cfg, "teacher")


# ---------------------------------------------------------------------------
# DVSW1 files

DVSW_MAGIC = b"DVSW1"
DVSW_VERSION = 1
_DVSW_HEADER = struct.Struct("<IIHHHHHH")


def write_dvsw(path, clips: ClipSet) -> None:
    n, t, h, w, c = clips.frames.shape
    with open(path, "wb") as fh:
        fh.write(DVSW_MAGIC)
        fh.write(_DVSW_HEADER.pack(DVSW_VERSION, n, clips.n_actions, clips.n_scenes, t, h, w, c))
        for i in range(n):
            fh.write(struct.pack("<BBB", int(clips.actions[i]), int(clips.scenes[i]),
                                 int(clips.provenance[i])))
            fh.write(np.ascontiguousarray(clips.frames[i], dtype="<f4").tobytes())
            fh.write(np.packbits(clips.masks[i].reshape(-1) > 0, bitorder="little").tobytes())


def read_dvsw(path) -> ClipSet:
    raw = Path(path).read_bytes()
    if raw[:len(DVSW_MAGIC)] != DVSW_MAGIC:
        raise FormatError(f"{path}: not a DVSW1 file")
    off = len(DVSW_MAGIC)
    if len(raw) < off + _DVSW_HEADER.size:
        raise FormatError(f"{path}: truncated header")
    version, n, n_a, n_s, t, h, w, c = _DVSW_HEADER.unpack_from(raw, off)
    if version != DVSW_VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    off += _DVSW_HEADER.size
    n_frame = t * h * w * c
    n_mask = (t * h * w + 7) // 8
    rec = 3 + 4 * n_frame + n_mask
    if len(raw) != off + n * rec:
        raise FormatError(f"{path}: expected {n} clips, size mismatch")
    body = np.frombuffer(raw, np.uint8, offset=off).reshape(n, rec)
    frames = body[:, 3:3 + 4 * n_frame].copy().view("<f4").reshape(n, t, h, w, c)
    masks = np.unpackbits(body[:, 3 + 4 * n_frame:], axis=1, count=t * h * w, bitorder="little")
    return ClipSet(frames=frames.astype(np.float32), actions=body[:, 0].astype(np.int64),
                   scenes=body[:, 1].astype(np.int64), masks=masks.reshape(n, t, h, w),
                   provenance=body[:, 2].copy(), n_actions=n_a, n_scenes=n_s)
