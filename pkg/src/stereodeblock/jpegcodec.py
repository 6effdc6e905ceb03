"""Deterministic JPEG luminance degradation.

The degradation is the DCT + quantization round-trip of a baseline JPEG
encoder with the standard IJG luminance table. Entropy coding is lossless
and therefore omitted; pixel outputs agree with a real encoder up to its
DCT rounding.
"""

from __future__ import annotations

import numpy as np

# Annex-K baseline luminance quantization table.
BASE_LUMA_TABLE = np.array([
    [16, 11, 10, 16, 24, 40, 51, 61],
    [12, 12, 14, 19, 26, 58, 60, 55],
    [14, 13, 16, 24, 40, 57, 69, 56],
    [14, 17, 22, 29, 51, 87, 80, 62],
    [18, 22, 37, 56, 68, 109, 103, 77],
    [24, 35, 55, 64, 81, 104, 113, 92],
    [49, 64, 78, 87, 103, 121, 120, 101],
    [72, 92, 95, 98, 112, 100, 103, 99],
], dtype=np.int64)

_k = np.arange(8)
# orthonormal DCT-II matrix: row u, column x
_DCT_M = np.cos((2 * _k[None, :] + 1) * _k[:, None] * np.pi / 16) * \
    np.where(_k[:, None] == 0, np.sqrt(1.0 / 8.0), 0.5)


def round_half_away(x: np.ndarray) -> np.ndarray:
    """Round to nearest with ties away from zero (not banker's rounding)."""
    return np.copysign(np.floor(np.abs(x) + 0.5), x)


def luma_quant_table(qf: int) -> np.ndarray:
    """8x8 luminance quantization table for a quality factor in 1..100."""
    if not 1 <= int(qf) <= 100:
        raise ValueError(f"quality factor {qf} outside 1..100")
    qf = int(qf)
    scal = 5000 // qf if qf < 50 else 200 - 2 * qf
    return np.clip((BASE_LUMA_TABLE * scal + 50) // 100, 1, 255)


def dct8(block: np.ndarray) -> np.ndarray:
    """Orthonormal 2-D DCT-II of an 8x8 block."""
    block = np.asarray(block, dtype=np.float64)
    if block.shape != (8, 8):
        raise ValueError("dct8 expects an 8x8 block")
    return _DCT_M @ block @ _DCT_M.T


def idct8(coeffs: np.ndarray) -> np.ndarray:
    """Inverse (DCT-III) of dct8."""
    coeffs = np.asarray(coeffs, dtype=np.float64)
    if coeffs.shape != (8, 8):
        raise ValueError("idct8 expects an 8x8 block")
    return _DCT_M.T @ coeffs @ _DCT_M


def degrade(img: np.ndarray, qf: int) -> np.ndarray:
    """JPEG-degrade an 8-bit grayscale image at the given quality factor.

    Pads to a multiple of 8 by edge replication, runs the per-block
    level-shift / DCT / quantize / dequantize / inverse loop, crops, and
    rounds back to uint8 levels.
    """
    img = np.asarray(img)
    if img.ndim != 2 or img.size == 0:
        raise ValueError("degrade expects a non-empty 2-D image")
    h, w = img.shape
    hp, wp = -h % 8, -w % 8
    x = np.pad(img.astype(np.float64), ((0, hp), (0, wp)), mode="edge") - 128.0
    q = luma_quant_table(qf).astype(np.float64)

    # batch all 8x8 tiles through the DCT matrices at once
    bh, bw = x.shape[0] // 8, x.shape[1] // 8
    tiles = x.reshape(bh, 8, bw, 8).transpose(0, 2, 1, 3)
    coeffs = np.einsum("ux,bcxy,vy->bcuv", _DCT_M, tiles, _DCT_M, optimize=True)
    coeffs = round_half_away(coeffs / q) * q
    tiles = np.einsum("xu,bcuv,yv->bcxy", _DCT_M, coeffs, _DCT_M, optimize=True)
    out = tiles.transpose(0, 2, 1, 3).reshape(bh * 8, bw * 8) + 128.0
    return np.clip(round_half_away(out[:h, :w]), 0, 255).astype(np.uint8)


def to_unit(img: np.ndarray) -> np.ndarray:
    """8-bit levels to unit-interval reals."""
    return np.asarray(img, dtype=np.float64) / 255.0


def to_levels(x: np.ndarray) -> np.ndarray:
    """Unit-interval reals to 8-bit levels (round, clamp)."""
    return np.clip(round_half_away(np.asarray(x, dtype=np.float64) * 255.0),
                   0, 255).astype(np.uint8)


def rgb_to_luma(rgb: np.ndarray) -> np.ndarray:
    """BT.601 luminance of an H x W x 3 uint8 image, rounded to levels."""
    rgb = np.asarray(rgb, dtype=np.float64)
    if rgb.ndim != 3 or rgb.shape[2] != 3:
        raise ValueError("expected an H x W x 3 array")
    y = 0.299 * rgb[..., 0] + 0.587 * rgb[..., 1] + 0.114 * rgb[..., 2]
    return np.clip(round_half_away(y), 0, 255).astype(np.uint8)
