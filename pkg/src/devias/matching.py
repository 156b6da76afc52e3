"""Slot-to-task assignment.

Training uses a minimum-cost bipartite matching between the K slots and the
two supervision tasks (action, scene) with a cross-entropy cost; inference
picks slots by their peak class probability. Both are selectors only; no
gradient flows through the decision.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

ACTION, SCENE = 0, 1


@dataclass(frozen=True)
class SlotAssignment:
    k_action: int
    k_scene: int
    cost_matrix: np.ndarray | None = None

    def __post_init__(self):
        if self.k_action == self.k_scene:
            raise ValueError("action and scene must use different slots")


def linear_assignment(cost) -> np.ndarray:
    """Kuhn-Munkres with row/column potentials for an ``n x m`` matrix, ``n <= m``.

    Returns ``col`` with ``col[i]`` the column matched to row ``i``; the total
    ``sum(cost[i, col[i]])`` is minimal.
    """
    c = np.asarray(cost, dtype=np.float64)
    n, m = c.shape
    if n > m:
        raise ValueError("linear_assignment needs rows <= columns; transpose the input")
    if not np.all(np.isfinite(c)):
        raise ValueError("costs must be finite")
    u = np.zeros(n + 1)
    v = np.zeros(m + 1)
    owner = np.zeros(m + 1, dtype=np.int64)  # row (1-based) owning column j; 0 = free
    way = np.zeros(m + 1, dtype=np.int64)
    for i in range(1, n + 1):
        owner[0] = i
        j0 = 0
        minv = np.full(m + 1, np.inf)
        used = np.zeros(m + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = owner[j0]
            free = ~used[1:]
            reduced = c[i0 - 1] - u[i0] - v[1:]
            better = free & (reduced < minv[1:])
            minv[1:][better] = reduced[better]
            way[1:][better] = j0
            cand = np.where(free, minv[1:], np.inf)
            j1 = int(np.argmin(cand)) + 1
            delta = cand[j1 - 1]
            u[owner[used]] += delta
            v[used] -= delta
            minv[1:][free] -= delta
            j0 = j1
            if owner[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            owner[j0] = owner[j1]
            j0 = j1
    col = np.empty(n, dtype=np.int64)
    for j in range(1, m + 1):
        if owner[j]:
            col[owner[j] - 1] = j - 1
    return col


def brute_force(cost) -> tuple[int, int, float]:
    """Exhaustive minimum over injective (action slot, scene slot) pairs.

    Pairs are scanned with the action slot ascending, then the scene slot;
    the first strict minimum wins.
    """
    c = np.asarray(cost, dtype=np.float64)
    best = None
    for ka, ks in itertools.permutations(range(c.shape[0]), 2):
        total = c[ka, ACTION] + c[ks, SCENE]
        if best is None or total < best[2]:
            best = (ka, ks, total)
    return best


def hungarian(cost) -> SlotAssignment:
    """Minimum-cost injective assignment of the two tasks to ``K >= 2`` slots.

    Among equal-cost optima the lowest action slot wins, then the lowest
    scene slot.
    """
    c = np.asarray(cost, dtype=np.float64)
    if c.ndim != 2 or c.shape[1] != 2:
        raise ValueError(f"cost must be K x 2, got {c.shape}")
    if c.shape[0] < 2:
        raise ValueError("need at least two slots")
    col = linear_assignment(c.T)
    ka, ks = int(col[ACTION]), int(col[SCENE])
    total = c[ka, ACTION] + c[ks, SCENE]
    for a in range(ka + 1):
        for s in range(c.shape[0]):
            if s == a or (a == ka and s >= ks):
                continue
            if c[a, ACTION] + c[s, SCENE] == total:
                return SlotAssignment(a, s, c)
    return SlotAssignment(ka, ks, c)


def pad_targets(y_a, y_s, n_actions: int, n_scenes: int) -> tuple[np.ndarray, np.ndarray]:
    """Zero-pad action (one-hot or int) and scene (soft) labels to ``n_actions + n_scenes``.

    Action labels occupy ``[0, n_actions)``, scene labels ``[n_actions, n_actions + n_scenes)``.
    """
    y_a = np.asarray(y_a)
    y_s = np.asarray(y_s, dtype=np.float64)
    if y_a.ndim == 0 or (y_a.ndim == 1 and y_a.dtype.kind in "iu"):
        y_a = np.eye(n_actions)[y_a]
    if y_a.shape[-1] != n_actions or y_s.shape[-1] != n_scenes:
        raise ValueError(f"label widths {y_a.shape[-1]}/{y_s.shape[-1]} do not match "
                         f"{n_actions}/{n_scenes}")
    lead = y_a.shape[:-1]
    ta = np.zeros(lead + (n_actions + n_scenes,))
    ts = np.zeros(y_s.shape[:-1] + (n_actions + n_scenes,))
    ta[..., :n_actions] = y_a
    ts[..., n_actions:] = y_s
    return ta, ts


def _log_softmax(x: np.ndarray) -> np.ndarray:
    z = x - x.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def build_cost(slot_logits, y_a, y_s, n_actions: int, n_scenes: int) -> np.ndarray:
    """``K x 2`` cross-entropy costs of every slot against the padded action and scene targets.

    Also accepts a leading batch axis (``[B, K, C]`` logits) and returns ``[B, K, 2]``.
    """
    logits = np.asarray(slot_logits, dtype=np.float64)
    if logits.shape[-1] != n_actions + n_scenes:
        raise ValueError(f"logit width {logits.shape[-1]} != {n_actions + n_scenes}")
    ta, ts = pad_targets(y_a, y_s, n_actions, n_scenes)
    logp = _log_softmax(logits)  # [..., K, C]
    cost_a = -(ta[..., None, :] * logp).sum(-1)
    cost_s = -(ts[..., None, :] * logp).sum(-1)
    return np.stack([cost_a, cost_s], axis=-1)


def assign_infer(slot_probs, n_actions: int) -> SlotAssignment:
    """Action slot = highest peak in the action block; scene slot = highest
    scene-block peak among the rest. Exact ties go to the lower index."""
    p = np.asarray(slot_probs)
    k_action = int(np.argmax(p[:, :n_actions].max(axis=1)))
    scene_peak = p[:, n_actions:].max(axis=1).astype(np.float64)
    scene_peak[k_action] = -np.inf
    return SlotAssignment(k_action, int(np.argmax(scene_peak)))
