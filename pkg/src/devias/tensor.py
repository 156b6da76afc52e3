"""Dense tensors with a define-by-run gradient tape.

A :class:`Tensor` wraps a numpy array. Tensors created through
:meth:`Tape.watch` are leaves; every operation whose inputs live on a tape is
recorded on that tape, and :meth:`Tape.backward` replays the records in
reverse to produce a gradient for every watched leaf. Tensors that are not on
a tape are plain values and operations on them record nothing, which is the
inference path.

There is no global state: the tape travels with the tensors.
"""
from __future__ import annotations

import math
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

GELU_COEF = 0.044715
_SQRT_2_OVER_PI = math.sqrt(2.0 / math.pi)


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class TapeError(RuntimeError):
    """The tape was used incorrectly (foreign tensors, double backward)."""


class NonFiniteError(FloatingPointError):
    """A recorded value contains NaN or Inf while debug checks are on."""


class Tape:
    """Ordered record of operations for one forward/backward episode."""

    def __init__(self, dtype=np.float32, check_finite: bool = False):
        self.dtype = np.dtype(dtype)
        self.check_finite = check_finite
        self.consumed = False
        self._parents: list[tuple] = []
        self._backward: list[Callable | None] = []
        self._leaves: dict[str, int] = {}
        self._leaf_shapes: dict[int, tuple] = {}

    def __len__(self) -> int:
        return len(self._parents)

    def watch(self, name: str, array) -> "Tensor":
        if name in self._leaves:
            raise TapeError(f"leaf {name!r} already watched")
        t = self._record(np.array(array, dtype=self.dtype), (), None)
        self._leaves[name] = t.index
        self._leaf_shapes[t.index] = t.shape
        return t

    def watch_all(self, params: Mapping[str, np.ndarray]) -> dict[str, "Tensor"]:
        return {k: self.watch(k, v) for k, v in params.items()}

    def _record(self, data: np.ndarray, parents: tuple, backward) -> "Tensor":
        if self.consumed:
            raise TapeError("tape already consumed by backward")
        if self.check_finite and not np.all(np.isfinite(data)):
            raise NonFiniteError(f"non-finite value produced at node {len(self._parents)}")
        self._parents.append(parents)
        self._backward.append(backward)
        return Tensor(data, self, len(self._parents) - 1)

    def backward(self, loss: "Tensor") -> dict[str, np.ndarray]:
        """Gradient of scalar ``loss`` for every watched leaf.

        Leaves the loss does not depend on get zeros. A tape supports a single
        backward pass.
        """
        if self.consumed:
            raise TapeError("backward called twice on the same tape")
        if loss.tape is not self:
            raise TapeError("loss is not recorded on this tape")
        if loss.data.size != 1:
            raise DimensionError(f"loss must be scalar, got shape {loss.shape}")
        grads: list[np.ndarray | None] = [None] * len(self._parents)
        grads[loss.index] = np.ones_like(loss.data)
        leaf_ids = set(self._leaves.values())
        for i in range(loss.index, -1, -1):
            g = grads[i]
            fn = self._backward[i]
            if g is None or fn is None:
                continue
            for p, pg in zip(self._parents[i], fn(g)):
                if p is None or pg is None:
                    continue
                grads[p] = pg if grads[p] is None else grads[p] + pg
            if i not in leaf_ids:
                grads[i] = None
        self.consumed = True
        out = {}
        for name, idx in self._leaves.items():
            g = grads[idx]
            shape = self._leaf_shapes[idx]
            out[name] = np.zeros(shape, self.dtype) if g is None else np.asarray(g, self.dtype).reshape(shape)
        return out


class Tensor:
    """Array value, optionally attached to a tape node."""

    __slots__ = ("data", "tape", "index")
    __array_priority__ = 100

    def __init__(self, data, tape: Tape | None = None, index: int | None = None):
        self.data = data if isinstance(data, np.ndarray) else np.asarray(data)
        self.tape = tape
        self.index = index

    def __repr__(self) -> str:
        where = "" if self.tape is None else f", node={self.index}"
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}{where})"

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    __add__ = lambda self, o: add(self, o)
    __radd__ = lambda self, o: add(o, self)
    __sub__ = lambda self, o: sub(self, o)
    __rsub__ = lambda self, o: sub(o, self)
    __mul__ = lambda self, o: mul(self, o)
    __rmul__ = lambda self, o: mul(o, self)
    __truediv__ = lambda self, o: div(self, o)
    __rtruediv__ = lambda self, o: div(o, self)
    __matmul__ = lambda self, o: matmul(self, o)
    __rmatmul__ = lambda self, o: matmul(o, self)
    __neg__ = lambda self: mul(self, -1.0)
    __pow__ = lambda self, p: power(self, p)

    def __getitem__(self, idx):
        return index(self, idx)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return mean(self, axis, keepdims)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes) -> "Tensor":
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def swapaxes(self, a: int, b: int) -> "Tensor":
        axes = list(range(self.ndim))
        axes[a], axes[b] = axes[b], axes[a]
        return transpose(self, tuple(axes))


# ---------------------------------------------------------------------------
# plumbing


def _common_tape(*ts) -> Tape | None:
    tape = None
    for t in ts:
        if isinstance(t, Tensor) and t.tape is not None:
            if tape is None:
                tape = t.tape
            elif t.tape is not tape:
                raise TapeError("operands are recorded on different tapes")
    return tape


def _lift(x, like: np.dtype | None) -> Tensor:
    if isinstance(x, Tensor):
        if x.tape is None and like is not None and x.data.dtype != like and x.data.dtype.kind == "f":
            return Tensor(x.data.astype(like))
        return x
    if isinstance(x, (int, float)) and not isinstance(x, bool):
        return Tensor(np.asarray(x, dtype=like or np.float64))
    arr = np.asarray(x)
    if like is not None and arr.dtype != like:
        arr = arr.astype(like)
    return Tensor(arr)


def _lift_all(*xs) -> tuple[Tape | None, list[Tensor]]:
    tape = _common_tape(*xs)
    like = tape.dtype if tape is not None else None
    if like is None:
        for x in xs:
            if isinstance(x, Tensor) and x.data.dtype.kind == "f":
                like = x.data.dtype
                break
    return tape, [_lift(x, like) for x in xs]


def _emit(tape: Tape | None, data: np.ndarray, inputs: Sequence[Tensor], backward) -> Tensor:
    if tape is None:
        return Tensor(data)
    parents = tuple(t.index if t.tape is tape else None for t in inputs)
    if all(p is None for p in parents):
        return Tensor(data)
    return tape._record(data, parents, backward)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    if lead > 0:
        g = g.sum(axis=tuple(range(lead)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _norm_axes(axis, ndim: int) -> tuple:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    out = []
    for a in axis:
        if not -ndim <= a < ndim:
            raise DimensionError(f"axis {a} out of range for rank {ndim}")
        out.append(a % ndim)
    return tuple(out)


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a, b) -> Tensor:
    tape, (a, b) = _lift_all(a, b)
    sa, sb = a.shape, b.shape
    return _emit(tape, a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    tape, (a, b) = _lift_all(a, b)
    sa, sb = a.shape, b.shape
    return _emit(tape, a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    tape, (a, b) = _lift_all(a, b)
    ad, bd = a.data, b.data
    return _emit(tape, ad * bd, (a, b),
                 lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def div(a, b) -> Tensor:
    tape, (a, b) = _lift_all(a, b)
    ad, bd = a.data, b.data
    out = ad / bd
    return _emit(tape, out, (a, b),
                 lambda g: (_unbroadcast(g / bd, ad.shape), _unbroadcast(-g * out / bd, bd.shape)))


def power(a, p: float) -> Tensor:
    tape, (a,) = _lift_all(a)
    ad = a.data
    return _emit(tape, ad ** p, (a,), lambda g: (g * p * ad ** (p - 1),))


def exp(a) -> Tensor:
    tape, (a,) = _lift_all(a)
    out = np.exp(a.data)
    return _emit(tape, out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    tape, (a,) = _lift_all(a)
    ad = a.data
    return _emit(tape, np.log(ad), (a,), lambda g: (g / ad,))


def sqrt(a) -> Tensor:
    tape, (a,) = _lift_all(a)
    out = np.sqrt(a.data)
    return _emit(tape, out, (a,), lambda g: (g * 0.5 / out,))


def clip(a, lo: float, hi: float) -> Tensor:
    """Clamp to ``[lo, hi]``; gradient passes only where the input is inside."""
    tape, (a,) = _lift_all(a)
    ad = a.data
    inside = (ad >= lo) & (ad <= hi)
    return _emit(tape, np.clip(ad, lo, hi), (a,), lambda g: (g * inside,))


def sigmoid(a) -> Tensor:
    tape, (a,) = _lift_all(a)
    out = 1.0 / (1.0 + np.exp(-a.data))
    return _emit(tape, out, (a,), lambda g: (g * out * (1.0 - out),))


def gelu(a) -> Tensor:
    """GELU, tanh approximation."""
    tape, (a,) = _lift_all(a)
    x = a.data
    inner = _SQRT_2_OVER_PI * (x + GELU_COEF * (x * x * x))
    t = np.tanh(inner)
    out = 0.5 * x * (1.0 + t)

    def backward(g):
        d_inner = _SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_COEF * x * x)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * d_inner),)

    return _emit(tape, out, (a,), backward)


# ---------------------------------------------------------------------------
# linear algebra and reductions


def matmul(a, b) -> Tensor:
    tape, (a, b) = _lift_all(a, b)
    ad, bd = a.data, b.data
    if ad.ndim < 2 or bd.ndim < 2:
        raise DimensionError(f"matmul needs rank >= 2 operands, got {ad.shape} and {bd.shape}")
    if ad.shape[-1] != bd.shape[-2]:
        raise DimensionError(f"matmul inner extents differ: {ad.shape} @ {bd.shape}")
    try:
        out = ad @ bd
    except ValueError as exc:
        raise DimensionError(str(exc)) from None

    def backward(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        if bd.ndim == 2 and ad.ndim > 2:
            k = ad.shape[-1]
            gb = ad.reshape(-1, k).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = np.swapaxes(ad, -1, -2) @ g
        return _unbroadcast(ga, ad.shape), _unbroadcast(gb, bd.shape)

    return _emit(tape, out, (a, b), backward)


def sum_(a, axis=None, keepdims: bool = False) -> Tensor:
    tape, (a,) = _lift_all(a)
    shape = a.shape
    axes = _norm_axes(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape),)

    return _emit(tape, out, (a,), backward)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = a if isinstance(a, Tensor) else _lift(a, None)
    axes = _norm_axes(axis, a.ndim)
    n = int(np.prod([a.shape[i] for i in axes])) if axes else 1
    return mul(sum_(a, axes, keepdims), 1.0 / n)


def reshape(a, shape) -> Tensor:
    tape, (a,) = _lift_all(a)
    orig = a.shape
    return _emit(tape, a.data.reshape(shape), (a,), lambda g: (g.reshape(orig),))


def transpose(a, axes=None) -> Tensor:
    tape, (a,) = _lift_all(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))
    return _emit(tape, a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),))


def broadcast_to(a, shape) -> Tensor:
    tape, (a,) = _lift_all(a)
    orig = a.shape
    return _emit(tape, np.broadcast_to(a.data, shape), (a,), lambda g: (_unbroadcast(g, orig),))


def _is_basic_index(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(i, (int, slice)) or i is None or i is Ellipsis for i in items)


def index(a, idx) -> Tensor:
    tape, (a,) = _lift_all(a)
    shape, dtype = a.shape, a.data.dtype
    basic = _is_basic_index(idx)

    def backward(g):
        z = np.zeros(shape, dtype)
        if basic:
            z[idx] += g
        else:
            np.add.at(z, idx, g)
        return (z,)

    return _emit(tape, a.data[idx], (a,), backward)


def concat(ts: Iterable, axis: int = 0) -> Tensor:
    ts = list(ts)
    tape, ts = _lift_all(*ts)
    ax = axis % ts[0].ndim
    sizes = np.cumsum([t.shape[ax] for t in ts])[:-1]
    return _emit(tape, np.concatenate([t.data for t in ts], axis=ax), ts,
                 lambda g: tuple(np.split(g, sizes, axis=ax)))


# ---------------------------------------------------------------------------
# normalizations


def softmax_axis(a, axis: int = -1) -> Tensor:
    """Softmax along ``axis``, stabilised by subtracting the max."""
    tape, (a,) = _lift_all(a)
    _norm_axes(axis, a.ndim)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)
    return _emit(tape, out, (a,),
                 lambda g: (out * (g - (g * out).sum(axis=axis, keepdims=True)),))


def log_softmax(a, axis: int = -1) -> Tensor:
    tape, (a,) = _lift_all(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    out = z - np.log(np.exp(z).sum(axis=axis, keepdims=True))
    return _emit(tape, out, (a,),
                 lambda g: (g - np.exp(out) * g.sum(axis=axis, keepdims=True),))


def l2_normalize_axis(a, axis: int = -1, eps: float = 1e-8) -> Tensor:
    """Divide each fiber along ``axis`` by ``max(norm, eps)``."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    tape, (a,) = _lift_all(a)
    _norm_axes(axis, a.ndim)
    x = a.data
    norm = np.sqrt((x * x).sum(axis=axis, keepdims=True))
    live = norm > eps
    denom = np.where(live, norm, eps)
    out = x / denom

    def backward(g):
        proj = (g * out).sum(axis=axis, keepdims=True)
        return (np.where(live, (g - out * proj) / denom, g / denom),)

    return _emit(tape, out, (a,), backward)


def layer_norm(a, gain, bias, eps: float = 1e-5) -> Tensor:
    """Normalise the last axis to zero mean / unit variance, then affine."""
    tape, (a, gain, bias) = _lift_all(a, gain, bias)
    d = a.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise DimensionError(f"layer_norm expects gain/bias of shape ({d},)")
    x = a.data
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    gd = gain.data
    out = xhat * gd + bias.data

    def backward(g):
        dxhat = g * gd
        dx = rstd * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                     - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        lead = tuple(range(g.ndim - 1))
        return dx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _emit(tape, out, (a, gain, bias), backward)


# ---------------------------------------------------------------------------
# composite helpers


def linear(x, weight, bias=None) -> Tensor:
    y = matmul(x, weight)
    return y if bias is None else add(y, bias)


def cross_entropy(logits, target, axis: int = -1) -> Tensor:
    """``-sum(target * log_softmax(logits))`` along ``axis`` (no reduction)."""
    return mul(sum_(mul(target, log_softmax(logits, axis)), axis), -1.0)


def constants(params: Mapping[str, np.ndarray]) -> dict[str, Tensor]:
    """Wrap arrays as untaped tensors (inference path)."""
    return {k: Tensor(v) for k, v in params.items()}


def backward(loss: Tensor, tape: Tape | None = None) -> dict[str, np.ndarray]:
    tape = tape or loss.tape
    if tape is None:
        raise TapeError("loss is not on a tape")
    return tape.backward(loss)


# ---------------------------------------------------------------------------
# verification oracle


def finite_diff_check(f: Callable[[Mapping[str, Tensor]], Tensor],
                      params: Mapping[str, np.ndarray], eps: float = 1e-6,
                      dtype=np.float64, max_coords: int | None = None,
                      rng: np.random.Generator | None = None) -> float:
    """Max over coordinates of ``|analytic - central difference| / max(1, |analytic|)``.

    ``f`` maps a dict of tensors to a scalar tensor and must be deterministic.
    ``max_coords`` samples that many coordinates per parameter instead of all.
    """
    base = {k: np.array(v, dtype=dtype) for k, v in params.items()}
    tape = Tape(dtype)
    grads = tape.backward(f(tape.watch_all(base)))

    def value(ps) -> float:
        return float(f({k: Tensor(v) for k, v in ps.items()}).data)

    worst = 0.0
    for name, arr in base.items():
        flat = arr.reshape(-1)
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            coords = (rng or np.random.default_rng(0)).choice(flat.size, max_coords, replace=False)
        g = grads[name].reshape(-1)
        for i in coords:
            orig = flat[i]
            flat[i] = orig + eps
            up = value(base)
            flat[i] = orig - eps
            down = value(base)
            flat[i] = orig
            numeric = (up - down) / (2.0 * eps)
            err = abs(g[i] - numeric) / max(1.0, abs(g[i]))
            worst = max(worst, err)
    return worst
