"""Minimal dense-tensor engine with reverse-mode differentiation.

Values are numpy arrays (double precision by default). Operations executed
inside a ``with Tape() as tape:`` block are recorded in execution order;
``tape.backward(loss)`` replays the record in exact reverse order and
accumulates gradients, which makes the accumulation order deterministic.
Outside a tape, the same functions run as plain forward numerics.

Backward closures must treat their incoming gradient as read-only and may
return it unchanged for pass-through ops; the accumulator never mutates
stored arrays in place.

Non-smooth operations (relu, abs, clamp, argmax selection, normalization
guard) report a smoothness margin to the active tape: the distance of the
nearest value to the operation's kink. ``grad_check`` refuses to probe a
point whose margins indicate that a finite-difference step could cross a
kink or flip an argmax selection.
"""

from __future__ import annotations

import itertools
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "Tensor", "Tape", "NonFiniteError", "NonSmoothPointError", "GraphError",
    "add", "sub", "mul", "scale", "relu", "sigmoid", "concat_channels",
    "slice_channels", "matmul", "transpose2d", "conv2d", "avg_pool",
    "upsample_nearest", "channel_mean", "unfold", "fold", "reduce_max_arg",
    "take_per_row", "gather_columns", "softmax_rows", "clamp_unit",
    "reshape", "tensor_sum", "absolute", "l2_normalize_columns",
    "grad_check", "set_default_dtype", "get_default_dtype",
]

_DEFAULT_DTYPE = np.float64


def set_default_dtype(dtype) -> None:
    global _DEFAULT_DTYPE
    dtype = np.dtype(dtype)
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported dtype {dtype}")
    _DEFAULT_DTYPE = dtype.type


def get_default_dtype():
    return _DEFAULT_DTYPE


class NonFiniteError(ArithmeticError):
    """An operation produced NaN or Inf."""


class NonSmoothPointError(ValueError):
    """A finite-difference probe would cross a kink or argmax boundary."""


class GraphError(ValueError):
    """Backward reached a loss that was not recorded on this tape."""


class Tensor:
    """Dense array with an optional tape handle for differentiation."""

    __slots__ = ("data", "requires_grad", "grad", "nid")
    _ids = itertools.count()

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype if dtype is not None else _DEFAULT_DTYPE)
        if not np.all(np.isfinite(arr)):
            raise NonFiniteError("tensor holds non-finite values")
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.nid = next(Tensor._ids)

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype.name})"


_ACTIVE_TAPE: "Tape | None" = None


class Tape:
    """Ordered record of operations; owns the gradient buffers of one pass."""

    def __init__(self):
        self._ops: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []
        self._margins: list[tuple[str, float]] = []
        self._produced: set[int] = set()

    def __enter__(self):
        global _ACTIVE_TAPE
        if _ACTIVE_TAPE is not None:
            raise RuntimeError("a tape is already active on this thread")
        _ACTIVE_TAPE = self
        return self

    def __exit__(self, *exc):
        global _ACTIVE_TAPE
        _ACTIVE_TAPE = None
        return False

    def _add(self, out, inputs, bw, margin=None):
        self._ops.append((out, inputs, bw))
        self._produced.add(out.nid)
        if margin is not None:
            self._margins.append(margin)

    def min_margin(self, kinds: Sequence[str] | None = None) -> float:
        vals = [m for k, m in self._margins if kinds is None or k in kinds]
        return min(vals) if vals else np.inf

    def backward(self, loss: Tensor) -> None:
        """Populate ``.grad`` on every differentiable leaf reachable from loss."""
        if loss.data.shape != ():
            raise GraphError("loss must be a scalar tensor")
        if loss.nid not in self._produced:
            raise GraphError("loss is not a product of this tape (detached graph)")
        grads: dict[int, np.ndarray] = {loss.nid: np.ones((), dtype=loss.data.dtype)}
        leaves: dict[int, Tensor] = {}
        for out, inputs, bw in reversed(self._ops):
            g = grads.pop(out.nid, None)
            if g is None:
                continue
            for t, gi in zip(inputs, bw(g)):
                if gi is None:
                    continue
                acc = grads.get(t.nid)
                grads[t.nid] = gi if acc is None else acc + gi
                if t.requires_grad and t.nid not in self._produced:
                    leaves[t.nid] = t
        for nid, t in leaves.items():
            t.grad = np.ascontiguousarray(grads[nid])


def _emit(data, inputs, bw, margin=None) -> Tensor:
    out = Tensor(data)
    if _ACTIVE_TAPE is not None:
        _ACTIVE_TAPE._add(out, tuple(inputs), bw, margin)
    return out


def _sum_to(g: np.ndarray, shape) -> np.ndarray:
    """Reduce a gradient back onto a broadcast operand's shape."""
    if g.shape == tuple(shape):
        return g
    axes = tuple(i for i, (gs, s) in enumerate(zip(g.shape, shape)) if s == 1 and gs != 1)
    return g.sum(axis=axes, keepdims=True)


def _check_broadcast(a: Tensor, b: Tensor) -> None:
    if a.data.ndim != b.data.ndim:
        raise ValueError(f"rank mismatch: {a.shape} vs {b.shape}")
    for da, db in zip(a.shape, b.shape):
        if da != db and 1 not in (da, db):
            raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")


# ---------------------------------------------------------------------------
# elementwise group


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b)
    return _emit(a.data + b.data, (a, b),
                 lambda g: (_sum_to(g, a.shape), _sum_to(g, b.shape)))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b)
    return _emit(a.data - b.data, (a, b),
                 lambda g: (_sum_to(g, a.shape), _sum_to(-g, b.shape)))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b)
    return _emit(a.data * b.data, (a, b),
                 lambda g: (_sum_to(g * b.data, a.shape), _sum_to(g * a.data, b.shape)))


def scale(a: Tensor, s: float) -> Tensor:
    s = float(s)
    return _emit(a.data * s, (a,), lambda g: (g * s,))


def relu(a: Tensor) -> Tensor:
    margin = ("relu", float(np.min(np.abs(a.data))) if a.size else np.inf)
    mask = a.data > 0
    return _emit(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,), margin)


def sigmoid(a: Tensor) -> Tensor:
    y = 1.0 / (1.0 + np.exp(-a.data))
    return _emit(y, (a,), lambda g: (g * y * (1.0 - y),))


def absolute(a: Tensor) -> Tensor:
    margin = ("abs", float(np.min(np.abs(a.data))) if a.size else np.inf)
    sgn = np.sign(a.data)
    return _emit(np.abs(a.data), (a,), lambda g: (g * sgn,), margin)


def clamp_unit(a: Tensor) -> Tensor:
    """Clamp to [0, 1]; pass-through gradient strictly inside the interval."""
    d = a.data
    margin = ("clamp", float(min(np.min(np.abs(d)), np.min(np.abs(d - 1.0)))) if a.size else np.inf)
    mask = (d > 0.0) & (d < 1.0)
    return _emit(np.clip(d, 0.0, 1.0), (a,), lambda g: (g * mask,), margin)


def concat_channels(parts: Sequence[Tensor]) -> Tensor:
    if not parts:
        raise ValueError("nothing to concatenate")
    ref = parts[0].shape
    for p in parts:
        if p.data.ndim != 4 or p.shape[0] != ref[0] or p.shape[2:] != ref[2:]:
            raise ValueError("concat operands must share N, H, W")
    splits = np.cumsum([p.shape[1] for p in parts])[:-1]

    def bw(g):
        return tuple(np.split(g, splits, axis=1))

    return _emit(np.concatenate([p.data for p in parts], axis=1), tuple(parts), bw)


def slice_channels(a: Tensor, c0: int, c1: int) -> Tensor:
    if not (0 <= c0 < c1 <= a.shape[1]):
        raise ValueError("channel slice out of range")

    def bw(g):
        z = np.zeros_like(a.data)
        z[:, c0:c1] = g
        return (z,)

    return _emit(a.data[:, c0:c1].copy(), (a,), bw)


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    return _emit(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def tensor_sum(a: Tensor) -> Tensor:
    return _emit(a.data.sum(), (a,),
                 lambda g: (np.broadcast_to(g, a.shape),))


# ---------------------------------------------------------------------------
# matrix ops


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul dimension mismatch: {a.shape} x {b.shape}")
    return _emit(a.data @ b.data, (a, b),
                 lambda g: (g @ b.data.T, a.data.T @ g))


def transpose2d(a: Tensor) -> Tensor:
    if a.data.ndim != 2:
        raise ValueError("transpose2d expects a matrix")
    return _emit(np.ascontiguousarray(a.data.T), (a,),
                 lambda g: (np.ascontiguousarray(g.T),))


def softmax_rows(m: Tensor) -> Tensor:
    if m.data.ndim != 2:
        raise ValueError("softmax_rows expects a matrix")
    z = m.data - m.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=1, keepdims=True)

    def bw(g):
        dot = (g * y).sum(axis=1, keepdims=True)
        return ((g - dot) * y,)

    return _emit(y, (m,), bw)


def take_per_row(m: Tensor, idx: np.ndarray, margin: float | None = None) -> Tensor:
    """Select one entry per row; gradient flows only into the selected entries."""
    if m.data.ndim != 2:
        raise ValueError("take_per_row expects a matrix")
    rows = np.arange(m.shape[0])
    idx = np.asarray(idx, dtype=np.intp)
    if idx.shape != (m.shape[0],) or idx.min(initial=0) < 0 or \
            (m.shape[0] and idx.max() >= m.shape[1]):
        raise ValueError("row index vector out of range")
    vals = m.data[rows, idx]
    if margin is None:
        if m.shape[1] >= 2:
            second = np.partition(m.data, -2, axis=1)[:, -2]
            margin = float(np.min(vals - second))
        else:
            margin = np.inf

    def bw(g):
        z = np.zeros_like(m.data)
        z[rows, idx] = g
        return (z,)

    return _emit(vals, (m,), bw, ("argmax", margin))


def reduce_max_arg(m: Tensor) -> tuple[Tensor, np.ndarray]:
    """Per-row maximum and its index; ties resolve to the smallest index."""
    if m.data.ndim != 2 or m.shape[1] < 1:
        raise ValueError("reduce_max_arg expects a matrix with >= 1 column")
    idx = np.argmax(m.data, axis=1)
    return take_per_row(m, idx), idx


def gather_columns(m: Tensor, idx: np.ndarray) -> Tensor:
    if m.data.ndim != 2:
        raise ValueError("gather_columns expects a matrix")
    idx = np.asarray(idx, dtype=np.intp)
    if idx.ndim != 1 or (idx.size and (idx.min() < 0 or idx.max() >= m.shape[1])):
        raise ValueError("column index out of range")

    def bw(g):
        z = np.zeros_like(m.data)
        np.add.at(z, (slice(None), idx), g)
        return (z,)

    return _emit(m.data[:, idx].copy(), (m,), bw)


def l2_normalize_columns(m: Tensor, eps: float = 1e-8) -> Tensor:
    """Divide each column by max(its L2 norm, eps)."""
    if m.data.ndim != 2:
        raise ValueError("l2_normalize_columns expects a matrix")
    norms = np.sqrt((m.data * m.data).sum(axis=0))
    denom = np.maximum(norms, eps)
    y = m.data / denom
    margin = ("normalize", float(np.min(np.abs(norms - eps))) if m.size else np.inf)

    def bw(g):
        gx = g / denom
        active = norms > eps
        if np.any(active):
            dot = (m.data * g).sum(axis=0)
            corr = np.zeros_like(dot)
            corr[active] = dot[active] / (norms[active] * denom[active] ** 2)
            gx = gx - m.data * corr
        return (gx,)

    return _emit(y, (m,), bw, margin)


# ---------------------------------------------------------------------------
# image-grid ops (N x C x H x W)


def _pool_check(x: Tensor, k: int) -> None:
    if x.data.ndim != 4:
        raise ValueError("expected an N x C x H x W tensor")
    if x.shape[2] % k or x.shape[3] % k:
        raise ValueError(f"extents {x.shape[2:]}, not divisible by {k}")


def avg_pool(x: Tensor, k: int) -> Tensor:
    _pool_check(x, k)
    n, c, h, w = x.shape
    y = x.data.reshape(n, c, h // k, k, w // k, k).mean(axis=(3, 5))

    def bw(g):
        gx = np.empty_like(x.data).reshape(n, c, h // k, k, w // k, k)
        gx[:] = (g / (k * k))[:, :, :, None, :, None]
        return (gx.reshape(n, c, h, w),)

    return _emit(y, (x,), bw)


def upsample_nearest(x: Tensor, factor: int) -> Tensor:
    if x.data.ndim != 4:
        raise ValueError("expected an N x C x H x W tensor")
    if factor < 1:
        raise ValueError("factor must be >= 1")
    n, c, h, w = x.shape
    y = np.repeat(np.repeat(x.data, factor, axis=2), factor, axis=3)

    def bw(g):
        return (g.reshape(n, c, h, factor, w, factor).sum(axis=(3, 5)),)

    return _emit(y, (x,), bw)


def channel_mean(x: Tensor) -> Tensor:
    """Global average pooling to N x C x 1 x 1."""
    if x.data.ndim != 4:
        raise ValueError("expected an N x C x H x W tensor")
    n, c, h, w = x.shape
    y = x.data.mean(axis=(2, 3), keepdims=True)

    def bw(g):
        return (np.broadcast_to(g / (h * w), x.shape).copy(),)

    return _emit(y, (x,), bw)


# ---------------------------------------------------------------------------
# convolution and patch arithmetic


def _grid(h: int, w: int, k: int, stride: int, pad: int) -> tuple[int, int]:
    oh, rh = divmod(h + 2 * pad - k, stride)
    ow, rw = divmod(w + 2 * pad - k, stride)
    if rh or rw or oh < 0 or ow < 0:
        raise ValueError(f"non-integral patch grid for {(h, w)}, k={k}, "
                         f"stride={stride}, pad={pad}")
    return oh + 1, ow + 1


def _im2col(x: np.ndarray, k: int, stride: int, pad: int) -> np.ndarray:
    """(C,H,W) -> (C*k*k, L); rows channel-major then kernel row-major,
    columns row-major over patch positions."""
    c, h, w = x.shape
    oh, ow = _grid(h, w, k, stride, pad)
    if pad:
        xp = np.zeros((c, h + 2 * pad, w + 2 * pad), dtype=x.dtype)
        xp[:, pad:pad + h, pad:pad + w] = x
    else:
        xp = np.ascontiguousarray(x)
    s0, s1, s2 = xp.strides
    windows = np.lib.stride_tricks.as_strided(
        xp, (c, k, k, oh, ow), (s0, s1, s2, s1 * stride, s2 * stride))
    return windows.reshape(c * k * k, oh * ow)


def _col2im_sum(cols: np.ndarray, c: int, h: int, w: int,
                k: int, stride: int, pad: int) -> np.ndarray:
    """Adjoint of _im2col: scatter-add patch columns back onto the image."""
    oh, ow = _grid(h, w, k, stride, pad)
    cols = cols.reshape(c, k, k, oh, ow)
    out = np.zeros((c, h + 2 * pad, w + 2 * pad), dtype=cols.dtype)
    for i in range(k):
        for j in range(k):
            out[:, i:i + stride * oh:stride, j:j + stride * ow:stride] += cols[:, i, j]
    return out[:, pad:pad + h, pad:pad + w]


def conv2d(x: Tensor, w: Tensor, b: Tensor, stride: int = 1, pad: int = 0) -> Tensor:
    """Cross-correlation of N x Cin x H x W with Cout x Cin x k x k plus bias."""
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise ValueError("conv2d expects 4-D input and kernel")
    n, cin, h, wd = x.shape
    cout, cin_w, k, k2 = w.shape
    if cin != cin_w or k != k2:
        raise ValueError(f"kernel {w.shape} does not fit input {x.shape}")
    if k % 2 == 0:
        raise ValueError("kernel extent must be odd")
    if b.shape != (cout,):
        raise ValueError("bias must have one entry per output channel")
    oh, ow = _grid(h, wd, k, stride, pad)
    w2 = w.data.reshape(cout, cin * k * k)
    if n == 1:
        cols = _im2col(x.data[0], k, stride, pad)
        y = (w2 @ cols).reshape(1, cout, oh, ow) + b.data[None, :, None, None]
    else:
        cols = np.concatenate([_im2col(x.data[i], k, stride, pad)
                               for i in range(n)], axis=1)
        y = (w2 @ cols).reshape(cout, n, oh * ow).transpose(1, 0, 2) \
            .reshape(n, cout, oh, ow) + b.data[None, :, None, None]

    def bw(g):
        # cols are recomputed rather than cached to keep training memory flat
        if n == 1:
            g2 = g.reshape(cout, oh * ow)
            cols_b = _im2col(x.data[0], k, stride, pad)
            gw = (g2 @ cols_b.T).reshape(w.shape)
            gx = _col2im_sum(w2.T @ g2, cin, h, wd, k, stride, pad)[None]
        else:
            g2 = g.transpose(1, 0, 2, 3).reshape(cout, n * oh * ow)
            cols_b = np.concatenate(
                [_im2col(x.data[i], k, stride, pad) for i in range(n)], axis=1)
            gw = (g2 @ cols_b.T).reshape(w.shape)
            gcols = w2.T @ g2
            gx = np.stack([
                _col2im_sum(gcols[:, i * oh * ow:(i + 1) * oh * ow], cin, h, wd,
                            k, stride, pad)
                for i in range(n)])
        gb = g.sum(axis=(0, 2, 3))
        return (gx, gw, gb)

    return _emit(y, (x, w, b), bw)


def unfold(x: Tensor, k: int, stride: int, pad: int) -> Tensor:
    """Extract sliding k x k patches of a single image into a (C*k*k) x L matrix."""
    if x.data.ndim != 4 or x.shape[0] != 1:
        raise ValueError("unfold expects a 1 x C x H x W tensor")
    _, c, h, w = x.shape
    cols = _im2col(x.data[0], k, stride, pad)

    def bw(g):
        return (_col2im_sum(g, c, h, w, k, stride, pad)[None],)

    return _emit(cols, (x,), bw)


_COVERAGE_CACHE: dict[tuple, np.ndarray] = {}


def _coverage(c: int, h: int, w: int, k: int, stride: int, pad: int) -> np.ndarray:
    key = (c, h, w, k, stride, pad)
    cov = _COVERAGE_CACHE.get(key)
    if cov is None:
        oh, ow = _grid(h, w, k, stride, pad)
        ones = np.ones((c * k * k, oh * ow))
        cov = _col2im_sum(ones, c, h, w, k, stride, pad)
        if np.any(cov == 0):
            raise ValueError("patch grid does not cover the full image")
        _COVERAGE_CACHE[key] = cov
    return cov


def fold(cols: Tensor, out_chw: tuple[int, int, int],
         k: int, stride: int, pad: int) -> Tensor:
    """Overlap-average inverse of unfold: each pixel is the mean of every
    patch entry that lands on it; padding cells are discarded."""
    c, h, w = out_chw
    oh, ow = _grid(h, w, k, stride, pad)
    if cols.shape != (c * k * k, oh * ow):
        raise ValueError(f"patch matrix {cols.shape} does not match "
                         f"{out_chw} with k={k}, stride={stride}, pad={pad}")
    cov = _coverage(c, h, w, k, stride, pad)
    y = (_col2im_sum(cols.data, c, h, w, k, stride, pad) / cov)[None]

    def bw(g):
        return (_im2col(g[0] / cov, k, stride, pad),)

    return _emit(y, (cols,), bw)


# ---------------------------------------------------------------------------
# finite-difference verification


def grad_check(loss_fn: Callable[[], Tensor], leaves: Sequence[Tensor],
               eps: float = 1e-6, max_probes: int = 64,
               rng: np.random.Generator | None = None,
               argmax_margin: float = 1e-3,
               kink_margin: float = 1e-12,
               probe_budget: int | None = None) -> float:
    """Compare tape gradients of ``loss_fn()`` against central differences.

    ``loss_fn`` must rebuild its graph from the current ``.data`` of the
    given leaf tensors on every call. Up to ``max_probes`` coordinates per
    leaf are probed. Returns the maximum relative error
    ``|analytic - fd| / max(1, |analytic|, |fd|)`` over all probes.

    Argmax selections make the loss discontinuous, so their margin must
    clear ``argmax_margin``. Continuous kinks (relu, abs, clamp, the
    normalization guard) only shift a central difference by O(eps) when
    crossed; they are rejected only when a value sits essentially on the
    kink itself, where the subgradient and the straddling secant disagree
    at O(1).
    """
    if not 1e-8 <= eps <= 1e-4:
        raise ValueError("eps must lie in [1e-8, 1e-4]")
    for leaf in leaves:
        if leaf.data.dtype != np.float64:
            raise ValueError("grad_check requires double precision")
        leaf.grad = None
    with Tape() as tape:
        loss = loss_fn()
        if loss.data.shape != ():
            raise GraphError("loss_fn must return a scalar tensor")
        tape.backward(loss)
    m = tape.min_margin(("argmax",))
    if m < argmax_margin:
        raise NonSmoothPointError(
            f"argmax margin {m:.3g} below {argmax_margin:.3g}; "
            "a finite-difference step could flip a selection")
    m = tape.min_margin(("relu", "abs", "clamp", "normalize"))
    if m < kink_margin:
        raise NonSmoothPointError(
            f"a value sits on a kink (margin {m:.3g} < {kink_margin:.3g})")

    rng = rng or np.random.default_rng(0)
    if probe_budget is not None:
        # sample coordinates uniformly over the concatenated leaf space
        sizes = np.array([leaf.data.size for leaf in leaves])
        offsets = np.concatenate([[0], np.cumsum(sizes)])
        total = int(offsets[-1])
        picks = (np.arange(total) if total <= probe_budget
                 else np.sort(rng.choice(total, size=probe_budget, replace=False)))
        plan = [(int(np.searchsorted(offsets, p, side="right")) - 1, p) for p in picks]
        coords_per_leaf = [[] for _ in leaves]
        for li, p in plan:
            coords_per_leaf[li].append(int(p - offsets[li]))
    else:
        coords_per_leaf = []
        for leaf in leaves:
            n = leaf.data.size
            coords_per_leaf.append(
                list(range(n)) if n <= max_probes
                else sorted(int(c) for c in rng.choice(n, size=max_probes,
                                                       replace=False)))
    worst = 0.0
    for leaf, coords in zip(leaves, coords_per_leaf):
        grad = leaf.grad if leaf.grad is not None else np.zeros_like(leaf.data)
        flat = leaf.data.reshape(-1)
        for i in coords:
            orig = flat[i]
            flat[i] = orig + eps
            fp = float(loss_fn().data)
            flat[i] = orig - eps
            fm = float(loss_fn().data)
            flat[i] = orig
            fd = (fp - fm) / (2.0 * eps)
            if not np.isfinite(fd):
                raise NonFiniteError("finite-difference probe returned non-finite loss")
            a = float(grad.reshape(-1)[i])
            err = abs(a - fd) / max(1.0, abs(a), abs(fd))
            if err > worst:
                worst = err
    return worst
