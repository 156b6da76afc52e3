"""Training loop, inference, and DVCK1 checkpoints."""
from __future__ import annotations

import dataclasses
import json
import struct
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Callable, Mapping

import numpy as np

from . import tensor as tn
from .augmentation import AugConfig, apply_batch_aug, be_mix_batch, pseudo_masks
from .baselines import baseline_forward, baseline_loss
from .model import (ModelConfig, Prediction, Targets, block_probs, devias_forward, devias_losses,
                    init_model, predict)
from .objectives import LossWeights
from .optim import OptState, adamw_step, cosine_lr
from .teacher import SceneTeacher, UsageError
from .world import SCENE_SWAPPED, ClipSet, FormatError, WorldConfig

AUGMENTS = ("auto", "none", "scene_swap", "be")
METRIC_KEYS = ("epoch", "lr", "loss", "L_D", "L_AG", "L_MP", "L_cos",
               "train_action_acc", "train_scene_acc")


class NumericalError(FloatingPointError):
    """Training produced a non-finite loss or gradient.

    ``checkpoint`` holds the last parameters that were finite.
    """

    def __init__(self, message: str, checkpoint: "Checkpoint | None" = None):
        super().__init__(message)
        self.checkpoint = checkpoint


@dataclass(frozen=True)
class TrainConfig:
    """Every knob of a training run, flat so it maps 1:1 onto a ``key = value`` file."""

    model: str = "devias"
    augment: str = "auto"
    # world
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
    world_seed: int = 0
    # architecture
    dim: int = 64
    heads: int = 4
    depth: int = 3
    patch: int = 8
    num_slots: int = 2
    iters: int = 4
    # augmentation
    tau: float = 0.3
    rho: float = 0.4
    mask_source: str = "ground_truth"
    be_weight_max: float = 0.3
    # loss
    alpha: float = 1.0
    beta: float = 1.0
    gamma: float = 1.0
    # optimisation
    epochs: int = 30
    batch: int = 16
    lr: float = 2e-3  # from-scratch training on the synthetic world
    warmup_epochs: int = 3
    weight_decay: float = 0.05
    disentangle_rate: float = 1.0  # 0.1 starves the slot module when training from scratch
    layer_decay: float = 0.75
    layer_decay_on: bool = False  # layer decay assumes a pretrained encoder
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.augment not in AUGMENTS:
            raise ValueError(f"augment must be one of {AUGMENTS}")
        if self.batch < 1 or (self.batch < 2 and self.rho > 0 and self.resolved_augment == "scene_swap"):
            raise ValueError("batch must be >= 2 when scene swapping with rho > 0")
        ModelConfig(variant=self.model)  # validates the variant
        self.aug  # validates tau / rho / mask source

    @property
    def resolved_augment(self) -> str:
        if self.augment != "auto":
            return self.augment
        return "scene_swap" if self.model == "devias" else "none"

    @property
    def world(self) -> WorldConfig:
        return WorldConfig(n_actions=self.n_actions, n_scenes=self.n_scenes, frames=self.frames,
                           height=self.height, width=self.width, channels=self.channels,
                           corr=self.corr, n_train=self.n_train, n_test=self.n_test,
                           n_teacher=self.n_teacher, seed=self.world_seed)

    @property
    def model_config(self) -> ModelConfig:
        return ModelConfig(variant=self.model, n_actions=self.n_actions, n_scenes=self.n_scenes,
                           frames=self.frames, height=self.height, width=self.width,
                           channels=self.channels, dim=self.dim, heads=self.heads,
                           depth=self.depth, patch=self.patch, num_slots=self.num_slots,
                           iters=self.iters)

    @property
    def aug(self) -> AugConfig:
        return AugConfig(tau=self.tau, rho=self.rho, mask_source=self.mask_source,
                         be_weight_max=self.be_weight_max)

    @property
    def weights(self) -> LossWeights:
        return LossWeights(alpha=self.alpha, beta=self.beta, gamma=self.gamma)

    def to_flat(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_flat(cls, values: Mapping[str, object]) -> "TrainConfig":
        """Build from string or typed values; unknown keys raise ``KeyError``."""
        types = {f.name: f.type for f in fields(cls)}
        kwargs = {}
        for key, raw in values.items():
            if key not in types:
                raise KeyError(f"unknown config key {key!r}")
            kwargs[key] = _coerce(raw, types[key])
        return cls(**kwargs)


def _coerce(raw, type_name: str):
    if not isinstance(raw, str):
        return raw
    if type_name == "bool":
        low = raw.strip().lower()
        if low not in ("1", "0", "true", "false", "yes", "no", "on", "off"):
            raise ValueError(f"not a boolean: {raw!r}")
        return low in ("1", "true", "yes", "on")
    return {"int": int, "float": float}.get(type_name, str)(raw.strip())


def parse_config_text(text: str) -> dict[str, str]:
    """Flat ``key = value`` lines; ``#`` starts a comment."""
    out = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {n}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key] = value
    return out


# ---------------------------------------------------------------------------
# parameter groups


def rate_scales(names, cfg: TrainConfig) -> dict[str, float]:
    """Learning-rate multiplier per parameter.

    Disentangle-module parameters get ``disentangle_rate``. With layer decay,
    encoder block ``i`` of ``L`` gets ``layer_decay ** (L - i)`` and the patch
    embedding and prepended tokens ``layer_decay ** (L + 1)``; heads get 1.
    """
    depth = cfg.depth
    scales = {}
    for name in names:
        s = 1.0
        if name.startswith("disentangle."):
            s = cfg.disentangle_rate
        elif cfg.layer_decay_on:
            if name.startswith("encoder.blocks."):
                s = cfg.layer_decay ** (depth - int(name.split(".")[2]))
            elif name.startswith("encoder.patch.") or name == "tokens":
                s = cfg.layer_decay ** (depth + 1)
        scales[name] = s
    return scales


def no_decay_names(params: Mapping[str, np.ndarray]) -> set[str]:
    return {k for k, v in params.items() if v.ndim == 1 or k in ("tokens", "disentangle.slots")}


# ---------------------------------------------------------------------------
# checkpoints


@dataclass
class Checkpoint:
    params: dict[str, np.ndarray]
    config: TrainConfig = field(default_factory=TrainConfig)
    step: int = 0
    rng_state: dict = field(default_factory=dict)

    def predict(self, frames, keep_history: bool = False) -> Prediction:
        return predict(frames, self.params, self.config.model_config, keep_history=keep_history)


DVCK_MAGIC = b"DVCK1"
DVCK_VERSION = 1
_META_PREFIX = "meta."


def _bytes_blob(data: bytes) -> np.ndarray:
    return np.frombuffer(data, np.uint8).astype(np.float32)


def _blob_bytes(blob: np.ndarray) -> bytes:
    return blob.astype(np.uint8).tobytes()


def _canonical_json(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()


def save_blobs(path, blobs: Mapping[str, np.ndarray]) -> None:
    """Write named f32 arrays in DVCK1 layout, sorted by name."""
    out = bytearray(DVCK_MAGIC)
    out += struct.pack("<II", DVCK_VERSION, len(blobs))
    for name in sorted(blobs):
        arr = np.ascontiguousarray(blobs[name], dtype="<f4")
        encoded = name.encode()
        out += struct.pack("<H", len(encoded)) + encoded
        out += struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
        out += arr.tobytes()
    Path(path).write_bytes(bytes(out))


def load_blobs(path) -> dict[str, np.ndarray]:
    raw = Path(path).read_bytes()
    if raw[:len(DVCK_MAGIC)] != DVCK_MAGIC:
        raise FormatError(f"{path}: not a DVCK1 checkpoint")
    off = len(DVCK_MAGIC)

    def take(n: int) -> bytes:
        nonlocal off
        if off + n > len(raw):
            raise FormatError(f"{path}: truncated checkpoint")
        chunk = raw[off:off + n]
        off += n
        return chunk

    version, count = struct.unpack("<II", take(8))
    if version != DVCK_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    blobs = {}
    for _ in range(count):
        (n_name,) = struct.unpack("<H", take(2))
        name = take(n_name).decode()
        (rank,) = struct.unpack("<B", take(1))
        shape = struct.unpack(f"<{rank}I", take(4 * rank))
        size = int(np.prod(shape, dtype=np.int64))
        blobs[name] = np.frombuffer(take(4 * size), "<f4").reshape(shape).astype(np.float32)
    if off != len(raw):
        raise FormatError(f"{path}: trailing bytes after {count} blobs")
    return blobs


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    blobs = dict(ckpt.params)
    blobs[_META_PREFIX + "config"] = _bytes_blob(_canonical_json(ckpt.config.to_flat()))
    blobs[_META_PREFIX + "step"] = _bytes_blob(struct.pack("<q", ckpt.step))
    blobs[_META_PREFIX + "rng"] = _bytes_blob(_canonical_json(ckpt.rng_state))
    save_blobs(path, blobs)


def load_checkpoint(path) -> Checkpoint:
    blobs = load_blobs(path)
    try:
        config = TrainConfig.from_flat(json.loads(_blob_bytes(blobs.pop(_META_PREFIX + "config"))))
        (step,) = struct.unpack("<q", _blob_bytes(blobs.pop(_META_PREFIX + "step")))
        rng_state = json.loads(_blob_bytes(blobs.pop(_META_PREFIX + "rng")))
    except (KeyError, ValueError, struct.error) as exc:
        raise FormatError(f"{path}: bad checkpoint metadata ({exc})") from exc
    return Checkpoint(blobs, config, step, rng_state)


# ---------------------------------------------------------------------------
# training


def _batch_targets(batch: ClipSet, cfg: TrainConfig, teacher: SceneTeacher | None,
                   base_soft: np.ndarray, rng: np.random.Generator) -> tuple[ClipSet, np.ndarray, np.ndarray]:
    """Augment a batch; return it with its soft scene labels and pseudo masks."""
    soft = base_soft.copy()
    mode = cfg.resolved_augment
    if mode == "scene_swap":
        masks = pseudo_masks(batch, cfg.aug)
        batch = apply_batch_aug(batch, cfg.aug, rng, masks=masks)
        swapped = np.flatnonzero(batch.provenance == SCENE_SWAPPED)
        if len(swapped):
            if teacher is None:
                raise UsageError("scene swapping needs a trained teacher for relabelling")
            soft[swapped] = teacher.soft_label(batch.frames[swapped])
        return batch, soft, batch.masks
    if mode == "be":
        batch = be_mix_batch(batch, rng, cfg.be_weight_max)
    return batch, soft, pseudo_masks(batch, cfg.aug)


def _step_loss(frames, P, mcfg: ModelConfig, cfg: TrainConfig, actions, soft, masks):
    """Loss, loss parts, and (action logits, scene logits) of the assigned outputs."""
    if mcfg.variant == "devias":
        targets = Targets(actions, soft, masks).tokenize(mcfg.patch)
        out = devias_forward(frames, P, mcfg)
        if not np.all(np.isfinite(out.logits.data)):
            raise NumericalError("non-finite slot logits")  # matching needs finite costs
        loss, parts, ka, ks = devias_losses(out, targets, P, mcfg, cfg.weights)
        rows = np.arange(len(actions))
        logits = out.logits.data
        return loss, parts, logits[rows, ka], logits[rows, ks]
    a_logits, s_logits, _ = baseline_forward(frames, P, mcfg)
    loss, parts = baseline_loss(a_logits, s_logits, actions, soft, mcfg)
    a, s = a_logits.data, s_logits.data
    if mcfg.variant != "two_token_unified":
        a = np.concatenate([a, s], -1)
        s = a
    return loss, parts, a, s


def train(cfg: TrainConfig, train_set: ClipSet, teacher: SceneTeacher | None = None,
          log: Callable[[str], None] | None = None, metrics_path=None,
          on_step: Callable[[int, dict], None] | None = None) -> tuple[Checkpoint, list[dict]]:
    """Train ``cfg.model`` on ``train_set``; returns the final checkpoint and per-epoch metrics.

    Scene targets are the teacher's soft labels (one-hot ground truth when no
    teacher is given and no clip is scene-swapped).
    """
    mcfg = cfg.model_config
    n = len(train_set)
    if n < cfg.batch:
        raise ValueError(f"training set ({n}) smaller than one batch ({cfg.batch})")
    params = init_model(mcfg, cfg.seed)
    state = OptState(lr=cfg.lr, weight_decay=cfg.weight_decay,
                     rate_scale=rate_scales(params, cfg), no_decay=no_decay_names(params))
    rng = np.random.default_rng([cfg.seed, 3])
    if teacher is not None:
        base_soft = teacher.soft_label(train_set.frames)
    else:
        base_soft = np.eye(train_set.n_scenes)[train_set.scenes]
    steps_per_epoch = n // cfg.batch
    total = cfg.epochs * steps_per_epoch
    warmup = min(cfg.warmup_epochs * steps_per_epoch, total - 1)
    metrics: list[dict] = []
    sink = open(metrics_path, "w") if metrics_path is not None else None
    step = 0
    try:
        for epoch in range(cfg.epochs):
            order = rng.permutation(n)
            sums = dict.fromkeys(("loss", "L_D", "L_AG", "L_MP", "L_cos"), 0.0)
            hits_a = hits_s = 0
            lr = 0.0
            for s in range(steps_per_epoch):
                idx = order[s * cfg.batch:(s + 1) * cfg.batch]
                batch, soft, masks = _batch_targets(train_set.subset(idx), cfg, teacher,
                                                    base_soft[idx], rng)
                tape = tn.Tape()
                P = tape.watch_all(params)
                try:
                    loss, parts, a_logits, s_logits = _step_loss(batch.frames, P, mcfg, cfg,
                                                                 batch.actions, soft, masks)
                    grads = tape.backward(loss)
                    bad = [k for k, g in grads.items() if not np.all(np.isfinite(g))]
                    if not np.isfinite(loss.item()) or bad:
                        raise NumericalError(f"non-finite {f'gradient of {bad[0]}' if bad else 'loss'}")
                except NumericalError as exc:
                    raise NumericalError(
                        f"{exc} at epoch {epoch}, step {step}",
                        Checkpoint({k: v.copy() for k, v in params.items()}, cfg, step,
                                   rng.bit_generator.state)) from None
                if on_step is not None:
                    on_step(step, grads)
                lr = cosine_lr(step, warmup, total, cfg.lr)
                last_good = Checkpoint({k: v.copy() for k, v in params.items()}, cfg, step,
                                       rng.bit_generator.state)
                adamw_step(params, grads, state, lr=lr)
                bad = [k for k, v in params.items() if not np.all(np.isfinite(v))]
                if bad:
                    raise NumericalError(f"update made {bad[0]} non-finite at epoch {epoch}, "
                                         f"step {step}", last_good)
                step += 1
                sums["loss"] += loss.item()
                for key, val in parts.items():
                    if key in sums:
                        sums[key] += val.item()
                pa, _ = block_probs(a_logits, mcfg.n_actions)
                _, ps = block_probs(s_logits, mcfg.n_actions)
                hits_a += int(np.sum(pa.argmax(-1) == batch.actions))
                hits_s += int(np.sum(ps.argmax(-1) == batch.scenes))
            seen = steps_per_epoch * cfg.batch
            row = {"epoch": epoch, "lr": lr}
            row.update({k: v / steps_per_epoch for k, v in sums.items()})
            row["train_action_acc"] = hits_a / seen
            row["train_scene_acc"] = hits_s / seen
            metrics.append(row)
            if sink is not None:
                sink.write(json.dumps(row) + "\n")
                sink.flush()
            if log is not None:
                log(f"epoch {epoch}: loss {row['loss']:.4f} action {row['train_action_acc']:.3f} "
                    f"scene {row['train_scene_acc']:.3f}")
    finally:
        if sink is not None:
            sink.close()
    return Checkpoint(params, cfg, step, rng.bit_generator.state), metrics


# ---------------------------------------------------------------------------
# inference


def infer(clip, ckpt: Checkpoint) -> dict:
    """Single-clip inference: block-renormalised probabilities, slot assignment, attention."""
    frames = clip.frames if hasattr(clip, "frames") else np.asarray(clip)
    pred = ckpt.predict(frames[None] if frames.ndim == 4 else frames)
    out = {"action_probs": pred.action_probs[0], "scene_probs": pred.scene_probs[0]}
    if pred.k_action is not None:
        out.update(k_action=int(pred.k_action[0]), k_scene=int(pred.k_scene[0]),
                   attention=pred.attention[0])
    return out


def predict_set(ckpt: Checkpoint, clips: ClipSet, batch: int = 100,
                keep_history: bool = False) -> Prediction:
    """Chunked :meth:`Checkpoint.predict` over a whole split."""
    parts = [ckpt.predict(clips.frames[lo:lo + batch], keep_history=keep_history)
             for lo in range(0, len(clips), batch)]
    merged = {}
    for f in fields(Prediction):
        vals = [getattr(p, f.name) for p in parts]
        if f.name == "history":
            merged[f.name] = [np.concatenate(h, axis=0) for h in zip(*vals)] if vals[0] else []
        elif vals[0] is None:
            merged[f.name] = None
        else:
            merged[f.name] = np.concatenate(vals, axis=0)
    return Prediction(**merged)


# ---------------------------------------------------------------------------
# teacher persistence


def save_teacher(path, teacher: SceneTeacher) -> None:
    if not teacher.trained:
        raise UsageError("cannot save an untrained teacher")
    enc = teacher.encoder
    meta = {"n_scenes": teacher.n_scenes, **dataclasses.asdict(enc)}
    blobs = dict(teacher.params)
    blobs[_META_PREFIX + "teacher"] = _bytes_blob(_canonical_json(meta))
    save_blobs(path, blobs)


def load_teacher(path) -> SceneTeacher:
    from .encoder import EncoderConfig
    blobs = load_blobs(path)
    try:
        meta = json.loads(_blob_bytes(blobs.pop(_META_PREFIX + "teacher")))
        n_scenes = meta.pop("n_scenes")
        enc = EncoderConfig(**meta)
    except (KeyError, ValueError, TypeError) as exc:
        raise FormatError(f"{path}: not a teacher checkpoint ({exc})") from exc
    return SceneTeacher(n_scenes, enc, blobs)


# ---------------------------------------------------------------------------
# gradient check


GRAD_CHECK_MODEL = ModelConfig(dim=16, heads=2, depth=2, patch=8, mlp_ratio=2, frames=8,
                               height=16, width=16, num_slots=2, iters=2, slot_hidden=32)


def grad_check(seed: int = 0, precision: str = "f64", max_coords: int | None = 6,
               mcfg: ModelConfig = GRAD_CHECK_MODEL, batch: int = 2) -> float:
    """Max relative error between tape and central-difference gradients of the
    complete DEVIAS loss (all four terms, unit weights) on a tiny model."""
    from .world import WorldConfig, generate_clip
    dtype = {"f64": np.float64, "f32": np.float32}[precision]
    rng = np.random.default_rng([seed, 4])
    world = WorldConfig(n_actions=mcfg.n_actions, n_scenes=mcfg.n_scenes, frames=mcfg.frames,
                        height=mcfg.height, width=mcfg.width, channels=mcfg.channels)
    clips = [generate_clip(int(rng.integers(mcfg.n_actions)), int(rng.integers(mcfg.n_scenes)),
                           seed * 1000 + i, world) for i in range(batch)]
    frames = np.stack([c.frames for c in clips]).astype(dtype)
    actions = np.array([c.action_id for c in clips])
    soft = rng.dirichlet(np.ones(mcfg.n_scenes), batch)
    targets = Targets(actions, soft, np.stack([c.fg_mask for c in clips])).tokenize(mcfg.patch)
    params = init_model(mcfg, seed)
    weights = LossWeights()

    def loss_fn(P):
        out = devias_forward(frames, P, mcfg)
        return devias_losses(out, targets, P, mcfg, weights)[0]

    eps = 1e-6 if precision == "f64" else 1e-2
    return tn.finite_diff_check(loss_fn, params, eps=eps, dtype=dtype, max_coords=max_coords,
                                rng=np.random.default_rng([seed, 5]))
