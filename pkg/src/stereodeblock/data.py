"""Dataset ingestion, the patch/augmentation/degradation protocol, and a
seeded synthetic stereo-pair generator for desk-scale training and
matching tests.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .jpegcodec import degrade, rgb_to_luma

log = logging.getLogger(__name__)

PATCH_SIZE = (64, 160)
PATCH_STRIDE = 20


@dataclass
class StereoSample:
    """Clean/degraded stereo planes plus the quality factor that links them."""
    name: str
    clean_left: np.ndarray
    clean_right: np.ndarray
    degraded_left: np.ndarray
    degraded_right: np.ndarray
    qf: int


def load_image_plane(path) -> np.ndarray:
    """8-bit grayscale plane from a PNG; color inputs go through BT.601."""
    with Image.open(path) as im:
        if im.mode == "L":
            return np.asarray(im, dtype=np.uint8)
        arr = np.asarray(im.convert("RGB"), dtype=np.uint8)
    return rgb_to_luma(arr)


def load_stereo_dir(path) -> list[tuple[str, np.ndarray, np.ndarray]]:
    """Pair up `<name>_L.png` / `<name>_R.png` files; unmatched files are
    logged and skipped."""
    path = Path(path)
    lefts, rights = {}, {}
    for p in sorted(path.glob("*.png")):
        if p.stem.endswith("_L"):
            lefts[p.stem[:-2]] = p
        elif p.stem.endswith("_R"):
            rights[p.stem[:-2]] = p
        else:
            log.warning("skipping %s: no _L/_R suffix", p.name)
    pairs = []
    for name in sorted(set(lefts) | set(rights)):
        if name not in lefts or name not in rights:
            log.warning("skipping %s: missing %s view", name,
                        "right" if name in lefts else "left")
            continue
        left = load_image_plane(lefts[name])
        right = load_image_plane(rights[name])
        if left.shape != right.shape:
            raise ValueError(f"pair {name}: extents differ "
                             f"{left.shape} vs {right.shape}")
        pairs.append((name, left, right))
    return pairs


def extract_patches(left: np.ndarray, right: np.ndarray,
                    size: tuple[int, int] = PATCH_SIZE,
                    stride: int = PATCH_STRIDE,
                    ) -> list[tuple[np.ndarray, np.ndarray]]:
    """Co-located crops from both views on a regular stride grid."""
    ph, pw = size
    h, w = left.shape
    if h < ph or w < pw:
        raise ValueError(f"image {left.shape} smaller than patch {size}")
    out = []
    for y in range(0, h - ph + 1, stride):
        for x in range(0, w - pw + 1, stride):
            out.append((left[y:y + ph, x:x + pw].copy(),
                        right[y:y + ph, x:x + pw].copy()))
    return out


def augment(left: np.ndarray, right: np.ndarray, rng: np.random.Generator,
            ) -> tuple[np.ndarray, np.ndarray]:
    """Random vertical flip, and random horizontal flip with a left/right
    swap (mirroring alone would reverse the parallax direction)."""
    do_v = rng.random() < 0.5
    do_h = rng.random() < 0.5
    if do_v:
        left, right = np.flipud(left), np.flipud(right)
    if do_h:
        left, right = np.fliplr(right), np.fliplr(left)
    return np.ascontiguousarray(left), np.ascontiguousarray(right)


def degrade_pair(left: np.ndarray, right: np.ndarray, rng: np.random.Generator,
                 qf_range: tuple[int, int] = (10, 30), name: str = "",
                 ) -> StereoSample:
    """Compress both views with one quality factor drawn for the sample."""
    lo, hi = qf_range
    if not 1 <= lo <= hi <= 100:
        raise ValueError(f"bad quality range {qf_range}")
    qf = int(rng.integers(lo, hi + 1))
    return StereoSample(name, left.copy(), right.copy(),
                        degrade(left, qf), degrade(right, qf), qf)


# -- synthetic stereo --------------------------------------------------------


@dataclass(frozen=True)
class SynthSpec:
    """Seeded recipe for a synthetic stereo pair: a sinusoid-plus-noise
    background at zero disparity and textured foreground rectangles shifted
    left in the right view by their disparity."""
    seed: int = 0
    height: int = 96
    width: int = 96
    sinusoids: int = 6
    freq_range: tuple[float, float] = (0.01, 0.1)
    noise_amp: float = 2.0
    rectangles: int = 3
    disparity_range: tuple[int, int] = (4, 20)
    global_disparity: int | None = None  # shift the whole scene instead


@dataclass
class SynthPair:
    left: np.ndarray
    right: np.ndarray
    occluded_left: np.ndarray   # left-view pixels with no right-view match
    occluded_right: np.ndarray  # right-view pixels with no left-view match
    rects: list = field(default_factory=list)  # (x0, y0, w, h, disparity)


def _background(rng: np.random.Generator, h: int, w: int, spec: SynthSpec,
                ) -> np.ndarray:
    y, x = np.mgrid[0:h, 0:w].astype(np.float64)
    img = np.full((h, w), 128.0)
    for _ in range(spec.sinusoids):
        fx, fy = rng.uniform(*spec.freq_range, size=2)
        phase = rng.uniform(0, 2 * np.pi)
        img += rng.uniform(8, 32) * np.sin(2 * np.pi * (fx * x + fy * y) + phase)
    if spec.noise_amp > 0:
        img += rng.normal(0, spec.noise_amp, size=(h, w))
    return img


def synth_stereo(spec: SynthSpec) -> SynthPair:
    """Deterministic stereo pair for the given spec (same seed, same bytes)."""
    rng = np.random.default_rng(spec.seed)
    h, w = spec.height, spec.width

    if spec.global_disparity is not None:
        d = int(spec.global_disparity)
        canvas = _background(rng, h, w + d, spec)
        left = canvas[:, :w]
        right = canvas[:, d:w + d]
        occ = np.zeros((h, w), dtype=bool)
        pair = SynthPair(_to_levels(left), _to_levels(right), occ, occ.copy())
        return pair

    bg = _background(rng, h, w, spec)
    left = bg.copy()
    right = bg.copy()
    occ_l = np.zeros((h, w), dtype=bool)
    occ_r = np.zeros((h, w), dtype=bool)
    rects = []
    for _ in range(spec.rectangles):
        d = int(rng.integers(spec.disparity_range[0], spec.disparity_range[1] + 1))
        rw = int(rng.integers(12, max(13, w // 3)))
        rh = int(rng.integers(12, max(13, h // 3)))
        if d + rw >= w or rh >= h:
            raise ValueError("rectangle does not fit the canvas after shifting")
        x0 = int(rng.integers(d, w - rw + 1))
        y0 = int(rng.integers(0, h - rh + 1))
        level = float(rng.uniform(40, 215))
        fu, fv = rng.uniform(0.05, 0.2, size=2)
        u, v = np.mgrid[0:rh, 0:rw].astype(np.float64)
        tex = level + 12.0 * np.sin(2 * np.pi * fu * u) * np.cos(2 * np.pi * fv * v)
        left[y0:y0 + rh, x0:x0 + rw] = tex
        right[y0:y0 + rh, x0 - d:x0 - d + rw] = tex
        # background strip hidden behind the rectangle in the other view
        occ_l[y0:y0 + rh, x0 - d:x0] = True
        occ_r[y0:y0 + rh, x0 + rw - d:x0 + rw] = True
        rects.append((x0, y0, rw, rh, d))
    return SynthPair(_to_levels(left), _to_levels(right), occ_l, occ_r, rects)


def _to_levels(x: np.ndarray) -> np.ndarray:
    return np.clip(np.floor(x + 0.5), 0, 255).astype(np.uint8)


def make_synth_dataset(count: int, seed: int, rng_qf: np.random.Generator | None = None,
                       qf_range: tuple[int, int] = (10, 30),
                       base_spec: SynthSpec = SynthSpec(),
                       ) -> list[StereoSample]:
    """Generate and degrade `count` synthetic pairs; sample i uses an rng
    seeded by (seed, i) so parallel preparation stays deterministic."""
    samples = []
    for i in range(count):
        pair = synth_stereo(SynthSpec(
            seed=seed + i, height=base_spec.height, width=base_spec.width,
            sinusoids=base_spec.sinusoids, freq_range=base_spec.freq_range,
            noise_amp=base_spec.noise_amp, rectangles=base_spec.rectangles,
            disparity_range=base_spec.disparity_range))
        rng = rng_qf or np.random.default_rng((seed, i))
        samples.append(degrade_pair(pair.left, pair.right, rng,
                                    qf_range=qf_range, name=f"synth{i:04d}"))
    return samples


def save_plane(path, plane: np.ndarray) -> None:
    Image.fromarray(np.asarray(plane, dtype=np.uint8), mode="L").save(path)
