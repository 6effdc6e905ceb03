"""Image quality triple: PSNR, SSIM, and PSNR-B (blocking-aware PSNR).

All metrics operate on 8-bit grayscale planes; network outputs are
quantized back to levels before scoring.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

PEAK = 255.0
PSNR_CAP = 100.0  # stands in for +inf when aggregating identical images


@dataclass(frozen=True)
class QualityReport:
    psnr: float
    ssim: float
    psnr_b: float
    scope: str  # "Left" | "PairAverage"

    def cells(self) -> str:
        return f"{self.psnr:.2f}/{self.ssim:.4f}/{self.psnr_b:.2f}"


def _check_planes(ref, test):
    ref = np.asarray(ref, dtype=np.float64)
    test = np.asarray(test, dtype=np.float64)
    if ref.shape != test.shape or ref.ndim != 2:
        raise ValueError(f"plane shapes differ: {ref.shape} vs {test.shape}")
    return ref, test


def psnr(ref, test) -> float:
    """10*log10(255^2 / MSE); +inf for identical planes."""
    ref, test = _check_planes(ref, test)
    mse = float(np.mean((ref - test) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(PEAK * PEAK / mse)


_G = np.exp(-((np.arange(11) - 5) ** 2) / (2 * 1.5 ** 2))
_G /= _G.sum()


def _gauss_valid(x: np.ndarray) -> np.ndarray:
    """Separable 11x11 Gaussian (sigma 1.5) over valid window positions."""
    w = x.shape[1] - 10
    rows = np.zeros((x.shape[0], w))
    for i, g in enumerate(_G):
        rows += g * x[:, i:i + w]
    h = x.shape[0] - 10
    out = np.zeros((h, w))
    for i, g in enumerate(_G):
        out += g * rows[i:i + h, :]
    return out


def ssim(ref, test) -> float:
    """Mean structural similarity over valid (unpadded) 11x11 windows."""
    ref, test = _check_planes(ref, test)
    if min(ref.shape) < 11:
        raise ValueError("image too small for an 11x11 SSIM window")
    c1 = (0.01 * PEAK) ** 2
    c2 = (0.03 * PEAK) ** 2
    mu_x = _gauss_valid(ref)
    mu_y = _gauss_valid(test)
    sxx = _gauss_valid(ref * ref) - mu_x * mu_x
    syy = _gauss_valid(test * test) - mu_y * mu_y
    sxy = _gauss_valid(ref * test) - mu_x * mu_y
    num = (2 * mu_x * mu_y + c1) * (2 * sxy + c2)
    den = (mu_x ** 2 + mu_y ** 2 + c1) * (sxx + syy + c2)
    return float(np.mean(num / den))


def _adjacent_sq_diffs(t: np.ndarray, block: int) -> tuple[np.ndarray, np.ndarray]:
    """Pooled squared differences of adjacent pixel pairs, split into pairs
    straddling a block boundary and the rest."""
    h, w = t.shape
    dh = (t[:, 1:] - t[:, :-1]) ** 2          # pair (j, j+1)
    dv = (t[1:, :] - t[:-1, :]) ** 2          # pair (i, i+1)
    col_b = (np.arange(1, w) % block) == 0
    row_b = (np.arange(1, h) % block) == 0
    boundary = np.concatenate([dh[:, col_b].ravel(), dv[row_b, :].ravel()])
    interior = np.concatenate([dh[:, ~col_b].ravel(), dv[~row_b, :].ravel()])
    return boundary, interior


def psnr_b(ref, test, block: int = 8) -> float:
    """PSNR penalized by the blocking-effect factor of the test image."""
    ref, test = _check_planes(ref, test)
    h, w = test.shape
    if h <= block or w <= block:
        raise ValueError("image no larger than one block")
    mse = float(np.mean((ref - test) ** 2))
    boundary, interior = _adjacent_sq_diffs(test, block)
    d_b = float(boundary.mean())
    d_bc = float(interior.mean())
    if d_b > d_bc:
        eta = math.log2(block) / math.log2(min(h, w))
    else:
        eta = 0.0
    bef = eta * (d_b - d_bc)
    denom = mse + bef
    if denom == 0.0:
        return math.inf
    return 10.0 * math.log10(PEAK * PEAK / denom)


def _capped(v: float) -> float:
    return min(v, PSNR_CAP)


def evaluate_pair(refs, tests) -> tuple[QualityReport, QualityReport]:
    """Score an aligned stereo pair: the left-view report and the
    arithmetic mean of the two views' metrics."""
    (ref_l, ref_r), (test_l, test_r) = refs, tests
    left = QualityReport(_capped(psnr(ref_l, test_l)), ssim(ref_l, test_l),
                         _capped(psnr_b(ref_l, test_l)), "Left")
    right = QualityReport(_capped(psnr(ref_r, test_r)), ssim(ref_r, test_r),
                          _capped(psnr_b(ref_r, test_r)), "Right")
    avg = QualityReport((left.psnr + right.psnr) / 2,
                        (left.ssim + right.ssim) / 2,
                        (left.psnr_b + right.psnr_b) / 2, "PairAverage")
    return left, avg
