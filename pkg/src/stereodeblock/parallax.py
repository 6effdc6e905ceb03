"""Bi-directional parallax transformer: cosine relevance between 4x-pooled
views, hard-attention patch matching, full-resolution feature transfer, and
confidence maps. Both directions come from a single relevance matrix; the
reverse direction is its transpose. The module holds no learned parameters.

Geometry: queries and keys are 3x3 patches (stride 1, pad 1) on the pooled
grid; values are the aligned 12x12 patches (stride 4, pad 4) at full
resolution, one per pooled position.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

POOL = 4
QK_PATCH = 3
V_PATCH = POOL * QK_PATCH
NORM_EPS = 1e-8


@dataclass
class HardMatch:
    """Per-query best reference index and its relevance value."""
    indices: np.ndarray      # (H/4 * W/4,) ints into the reference grid
    confidence: Tensor       # same length, raw cosine values


@dataclass
class ConvertedFeatures:
    """A view's features re-assembled on the other view's grid."""
    features: Tensor         # 1 x C x H x W
    confidence: Tensor       # 1 x 1 x H x W, clamped to [0, 1]
    match: HardMatch
    grid: tuple[int, int]    # pooled (H/4, W/4)


def _check_pair(f_l: Tensor, f_r: Tensor) -> None:
    if f_l.shape != f_r.shape:
        raise ValueError(f"feature shapes differ: {f_l.shape} vs {f_r.shape}")
    if f_l.data.ndim != 4 or f_l.shape[0] != 1:
        raise ValueError("expected 1 x C x H x W feature maps")
    if f_l.shape[2] % POOL or f_l.shape[3] % POOL:
        raise ValueError(f"extents {f_l.shape[2:]} not divisible by {POOL}")


def build_qkv(f_l: Tensor, f_r: Tensor, direction: str) -> tuple[Tensor, Tensor, Tensor]:
    """Assemble query/key/value for one conversion direction.

    'lr' converts left features onto the right view's grid (queries come
    from the right view); 'rl' is the mirror assignment.
    """
    _check_pair(f_l, f_r)
    if direction == "lr":
        return ad.avg_pool(f_r, POOL), ad.avg_pool(f_l, POOL), f_l
    if direction == "rl":
        return ad.avg_pool(f_l, POOL), ad.avg_pool(f_r, POOL), f_r
    raise ValueError(f"unknown direction {direction!r}")


def normalized_patches(pooled: Tensor) -> Tensor:
    """Unfold a pooled map into 3x3 patch columns and L2-normalize them."""
    return ad.l2_normalize_columns(
        ad.unfold(pooled, QK_PATCH, 1, QK_PATCH // 2), eps=NORM_EPS)


def relevance(q_pooled: Tensor, k_pooled: Tensor) -> Tensor:
    """Cosine relevance between query and key patches.

    Computed as the mean of the product and the transposed reverse product,
    which are equal in exact arithmetic; the symmetric form makes swapping
    the two views an exact transpose at the floating-point level.
    """
    if q_pooled.shape[1] != k_pooled.shape[1]:
        raise ValueError("query and key channel counts differ")
    qb = normalized_patches(q_pooled)
    kb = normalized_patches(k_pooled)
    fwd = ad.matmul(ad.transpose2d(qb), kb)
    rev = ad.transpose2d(ad.matmul(ad.transpose2d(kb), qb))
    return ad.scale(ad.add(fwd, rev), 0.5)


def hard_match(r: Tensor, same_row_only: bool = False,
               grid: tuple[int, int] | None = None) -> HardMatch:
    """Row-wise argmax over the relevance matrix (smallest index on ties).

    With ``same_row_only`` the search is restricted to reference positions
    on the query's pooled row (requires ``grid``).
    """
    if not same_row_only:
        conf, idx = ad.reduce_max_arg(r)
        return HardMatch(idx, conf)
    if grid is None:
        raise ValueError("same-row matching needs the pooled grid shape")
    hl, wl = grid
    if r.shape != (hl * wl, hl * wl):
        raise ValueError("relevance shape does not match the grid")
    rows = np.arange(hl * wl)
    allowed = (rows[:, None] // wl) == (rows[None, :] // wl)
    masked = np.where(allowed, r.data, -np.inf)
    idx = np.argmax(masked, axis=1)
    top = masked[rows, idx]
    runner = np.where(allowed, masked, -np.inf).copy()
    runner[rows, idx] = -np.inf
    margin = float(np.min(top - np.max(runner, axis=1))) if wl > 1 else np.inf
    conf = ad.take_per_row(r, idx, margin=margin)
    return HardMatch(idx, conf)


def transfer(v: Tensor, indices: np.ndarray) -> Tensor:
    """Gather the matched 12x12 value patches and fold them (overlap-average)
    back to a full-resolution map."""
    _, c, h, w = v.shape
    cols = ad.unfold(v, V_PATCH, POOL, V_PATCH // QK_PATCH)
    picked = ad.gather_columns(cols, indices)
    return ad.fold(picked, (c, h, w), V_PATCH, POOL, V_PATCH // QK_PATCH)


def soft_transfer(v: Tensor, r: Tensor, temperature: float = 1.0) -> Tensor:
    """Comparison mode: blend all value patches under row-softmax weights."""
    _, c, h, w = v.shape
    cols = ad.unfold(v, V_PATCH, POOL, V_PATCH // QK_PATCH)
    weights = ad.softmax_rows(ad.scale(r, 1.0 / temperature))
    mixed = ad.matmul(cols, ad.transpose2d(weights))
    return ad.fold(mixed, (c, h, w), V_PATCH, POOL, V_PATCH // QK_PATCH)


def expand_confidence(values: Tensor, grid: tuple[int, int]) -> Tensor:
    """Clamp raw cosine values to [0, 1] and replicate 4x to full resolution."""
    hl, wl = grid
    low = ad.clamp_unit(ad.reshape(values, (1, 1, hl, wl)))
    return ad.upsample_nearest(low, POOL)


def biptm_forward(f_l: Tensor, f_r: Tensor, mode: str = "hard",
                  same_row_only: bool = False,
                  ) -> tuple[ConvertedFeatures, ConvertedFeatures]:
    """Convert each view's features onto the other view's grid.

    Returns (left-to-right, right-to-left) conversions. One relevance matrix
    serves both directions; the reverse direction uses its transpose.
    """
    _check_pair(f_l, f_r)
    if mode not in ("hard", "soft"):
        raise ValueError(f"unknown attention mode {mode!r}")
    grid = (f_l.shape[2] // POOL, f_l.shape[3] // POOL)
    d_l = ad.avg_pool(f_l, POOL)
    d_r = ad.avg_pool(f_r, POOL)
    r_lr = relevance(d_r, d_l)          # queries: right view, keys: left view
    r_rl = ad.transpose2d(r_lr)

    out = []
    for r, v in ((r_lr, f_l), (r_rl, f_r)):
        match = hard_match(r, same_row_only=same_row_only, grid=grid)
        if mode == "hard":
            feats = transfer(v, match.indices)
        else:
            feats = soft_transfer(v, r)
        conf = expand_confidence(match.confidence, grid)
        out.append(ConvertedFeatures(feats, conf, match, grid))
    return out[0], out[1]
