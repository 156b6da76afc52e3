"""Accuracy metrics, the harmonic-mean summary, K-NN feature probes,
slot-assignment audit, and visual exports (PCA scatter CSV, attention PGM)."""
from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .model import Prediction
from .world import ClipSet

KNN_CELLS = ("A-A", "S-S", "A-S", "S-A")


def topk_accuracy(scores, labels, k: int = 1) -> float:
    """Fraction of rows whose true label ranks in the top ``k``.

    Equal scores rank the lower class index first.
    """
    s = np.asarray(scores, np.float64)
    y = np.asarray(labels, np.int64)
    if not 1 <= k <= s.shape[1]:
        raise ValueError(f"k={k} outside [1, {s.shape[1]}]")
    if len(y) == 0:
        return 0.0
    true = s[np.arange(len(y)), y][:, None]
    cls = np.arange(s.shape[1])[None, :]
    rank = np.sum((s > true) | ((s == true) & (cls < y[:, None])), axis=1)
    return float(np.mean(rank < k))


def harmonic_mean(values: Sequence[float]) -> float:
    """``n / sum(1 / v)``; any zero entry makes the result zero."""
    v = np.asarray(values, np.float64)
    if v.size == 0 or np.any(v < 0):
        raise ValueError("harmonic mean needs nonnegative values")
    if np.any(v == 0):
        return 0.0
    return float(v.size / np.sum(1.0 / v))


def _unit(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, np.float64)
    return x / np.maximum(np.linalg.norm(x, axis=1, keepdims=True), 1e-12)


def knn_predict(train_feats, train_labels, test_feats, k: int = 10) -> np.ndarray:
    """Cosine-similarity K-NN majority vote.

    Neighbours are ordered by similarity (ties by training index). A vote tie
    goes to whichever tied label appears first in that order.
    """
    train_labels = np.asarray(train_labels, np.int64)
    if k > len(train_labels):
        raise ValueError(f"k={k} exceeds training set size {len(train_labels)}")
    if k < 1:
        raise ValueError("k must be >= 1")
    sim = _unit(test_feats) @ _unit(train_feats).T
    order = np.argsort(-sim, axis=1, kind="stable")[:, :k]
    neigh = train_labels[order]
    n_cls = int(train_labels.max()) + 1
    out = np.empty(len(neigh), np.int64)
    for i, row in enumerate(neigh):
        counts = np.bincount(row, minlength=n_cls)
        tied = counts == counts.max()
        out[i] = row[np.argmax(tied[row])]
    return out


def knn_protocol(train_feats, train_labels, test_feats, test_labels, k: int = 10) -> float:
    pred = knn_predict(train_feats, train_labels, test_feats, k)
    return float(np.mean(pred == np.asarray(test_labels)))


def knn_table(train: Prediction, train_set: ClipSet, test: Prediction, test_set: ClipSet,
              k: int = 10) -> dict[str, float]:
    """The four ``{train}-{test}`` feature cells.

    The label always follows the training features: ``A-S`` fits on action
    features with action labels and queries with scene features.
    """
    a_tr, s_tr = train.action_features, train.scene_features
    a_te, s_te = test.action_features, test.scene_features
    ya_tr, ys_tr, ya_te, ys_te = train_set.actions, train_set.scenes, test_set.actions, test_set.scenes
    return {
        "A-A": knn_protocol(a_tr, ya_tr, a_te, ya_te, k),
        "S-S": knn_protocol(s_tr, ys_tr, s_te, ys_te, k),
        "A-S": knn_protocol(a_tr, ya_tr, s_te, ya_te, k),
        "S-A": knn_protocol(s_tr, ys_tr, a_te, ys_te, k),
    }


def slot_assignment_frequency(k_action, k_scene, num_slots: int) -> np.ndarray:
    """[K, 2] percentages: how often each slot served as the action / scene slot."""
    ka = np.asarray(k_action, np.int64)
    ks = np.asarray(k_scene, np.int64)
    n = max(len(ka), 1)
    freq = np.zeros((num_slots, 2))
    freq[:, 0] = np.bincount(ka, minlength=num_slots)[:num_slots] * 100.0 / n
    freq[:, 1] = np.bincount(ks, minlength=num_slots)[:num_slots] * 100.0 / n
    return freq


# ---------------------------------------------------------------------------
# report


@dataclass
class EvalReport:
    splits: dict[str, dict[str, float]]
    hm_inputs: dict[str, float]
    harmonic_mean: float
    knn: dict[str, float] = field(default_factory=dict)
    slot_frequency: list[list[float]] = field(default_factory=list)
    topk: int = 1

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "EvalReport":
        return cls(**json.loads(text))


def hm_inputs(splits: Mapping[str, Mapping[str, float]]) -> dict[str, float]:
    """The four summary rates.

    Out-of-context scene accuracy averages the out-of-context and
    scene-only splits, the two test sets with an atypical foreground.
    """
    return {
        "in_context_action": splits["test_in_context"]["action"],
        "out_of_context_action": splits["test_out_of_context"]["action"],
        "in_context_scene": splits["test_in_context"]["scene"],
        "out_of_context_scene": 0.5 * (splits["test_out_of_context"]["scene"]
                                       + splits["test_scene_only"]["scene"]),
    }


def evaluate(predictions: Mapping[str, Prediction], clipsets: Mapping[str, ClipSet],
             topk: int = 1, knn_train: str | None = "train", knn_test: str = "test_in_context",
             k: int = 10, num_slots: int | None = None) -> EvalReport:
    """Build an :class:`EvalReport` from per-split predictions.

    Requires the three test splits; the K-NN table needs ``knn_train`` too.
    """
    splits = {}
    for name, pred in predictions.items():
        cs = clipsets[name]
        splits[name] = {"action": topk_accuracy(pred.action_probs, cs.actions, topk),
                        "scene": topk_accuracy(pred.scene_probs, cs.scenes, topk)}
    inputs = hm_inputs(splits)
    report = EvalReport(splits, inputs, harmonic_mean(list(inputs.values())), topk=topk)
    if knn_train is not None and knn_train in predictions:
        report.knn = knn_table(predictions[knn_train], clipsets[knn_train],
                               predictions[knn_test], clipsets[knn_test], k)
    pred = predictions[knn_test]
    if pred.k_action is not None:
        report.slot_frequency = slot_assignment_frequency(
            pred.k_action, pred.k_scene, num_slots or int(pred.attention.shape[-1])).tolist()
    return report


# ---------------------------------------------------------------------------
# exports


def _top_eigvec(g: np.ndarray, rng: np.random.Generator, iters: int = 2000,
                tol: float = 1e-13) -> tuple[float, np.ndarray]:
    v = rng.normal(size=g.shape[0])
    v /= np.linalg.norm(v)
    lam = 0.0
    for _ in range(iters):
        w = g @ v
        norm = np.linalg.norm(w)
        if norm == 0.0:
            return 0.0, v
        w /= norm
        lam_new = float(w @ g @ w)
        done = abs(lam_new - lam) <= tol * max(1.0, abs(lam_new))
        v, lam = w, lam_new
        if done:
            break
    return lam, v


def pca_coordinates(features) -> np.ndarray:
    """Top-two principal coordinates [N, 2] via power iteration on the centred Gram matrix."""
    x = np.asarray(features, np.float64)
    if x.ndim != 2 or len(x) < 3:
        raise ValueError("PCA export needs at least three feature rows")
    xc = x - x.mean(axis=0)
    g = xc @ xc.T
    rng = np.random.default_rng(0)
    coords = np.zeros((len(x), 2))
    scale = max(float(np.trace(g)), 1e-300)
    for c in range(2):
        lam, v = _top_eigvec(g, rng)
        if lam <= 1e-10 * scale:
            break
        coords[:, c] = v * np.sqrt(lam)
        g = g - lam * np.outer(v, v)
    return coords


def pca_scatter_export(features, labels, path, task="action") -> np.ndarray:
    """Write ``x,y,task,label`` CSV rows; ``task`` is one string or one per row."""
    coords = pca_coordinates(features)
    tasks = [task] * len(coords) if isinstance(task, str) else list(task)
    if len(tasks) != len(coords) or len(labels) != len(coords):
        raise ValueError("one task and label per feature row")
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["x", "y", "task", "label"])
        for (x, y), t, lab in zip(coords, tasks, labels):
            w.writerow([repr(float(x)), repr(float(y)), t, int(lab)])
    return coords


def write_pgm(path, image: np.ndarray) -> None:
    """8-bit binary PGM (P5)."""
    img = np.asarray(image)
    if img.ndim != 2 or img.dtype != np.uint8:
        raise ValueError("PGM export expects a 2-D uint8 image")
    h, w = img.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode() + img.tobytes())


def read_pgm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    parts = raw.split(maxsplit=4)
    if parts[0] != b"P5" or int(parts[3]) != 255:
        raise ValueError(f"{path}: not an 8-bit P5 image")
    w, h = int(parts[1]), int(parts[2])
    return np.frombuffer(parts[4][:w * h], np.uint8).reshape(h, w).copy()


def attention_images(attn, grid: tuple[int, int, int], patch: int = 1) -> np.ndarray:
    """[NT, K] attention -> uint8 images [T', K, gh*patch, gw*patch].

    Each (frame group, slot) map is scaled by its own maximum.
    """
    a = np.asarray(attn, np.float64)
    t, gh, gw = grid
    maps = a.T.reshape(a.shape[1], t, gh, gw).transpose(1, 0, 2, 3)
    peak = maps.max(axis=(2, 3), keepdims=True)
    img = np.where(peak > 0, maps / np.where(peak > 0, peak, 1.0), 0.0)
    img = np.round(img * 255).astype(np.uint8)
    if patch > 1:
        img = img.repeat(patch, axis=2).repeat(patch, axis=3)
    return img


def export_attention(attn, grid, out_dir, patch: int = 1, stem: str = "attn") -> list[Path]:
    """One PGM per (frame group, slot), named ``{stem}_t{t}_slot{k}.pgm``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for t, per_slot in enumerate(attention_images(attn, grid, patch)):
        for k, img in enumerate(per_slot):
            p = out_dir / f"{stem}_t{t}_slot{k}.pgm"
            write_pgm(p, img)
            paths.append(p)
    return paths
