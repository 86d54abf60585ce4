"""Visual-angle geometry, gaze-to-saliency conversion and foveated rendering.

Saliency maps are plain 2-D ``numpy`` arrays (rows = y, columns = x) that are
non-negative and sum to one. Map pixel ``(i, j)`` covers the continuous square
``[j, j+1) x [i, i+1)`` so its centre sits at ``(j + 0.5, i + 0.5)``.
"""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import cv2
import numpy as np

from agil.errors import EmptyGazeError

log = logging.getLogger(__name__)

MAP_SIZE = 84
GAUSSIAN_TRUNCATE = 4.0
# half-resolution eccentricity of the foveation falloff, degrees
FOVEA_E0 = 2.3


@dataclass(frozen=True)
class VisualGeometry:
    screen_width_cm: float
    screen_height_cm: float
    eye_distance_cm: float
    screen_width_px: int
    screen_height_px: int

    def __post_init__(self):
        for name in ("screen_width_cm", "screen_height_cm", "eye_distance_cm",
                     "screen_width_px", "screen_height_px"):
            value = getattr(self, name)
            if not (math.isfinite(value) and value > 0):
                raise ValueError(f"{name} must be strictly positive, got {value!r}")


# 64.6 x 40.0 cm screen viewed from 78.7 cm; Atari-native 160 x 210 frame
DEFAULT_GEOMETRY = VisualGeometry(64.6, 40.0, 78.7, 160, 210)


def visual_degrees(geom: VisualGeometry) -> tuple[float, float]:
    """Full visual angle subtended by the screen, (width, height) in degrees."""
    d = geom.eye_distance_cm
    width = math.degrees(2.0 * math.atan(geom.screen_width_cm / (2.0 * d)))
    height = math.degrees(2.0 * math.atan(geom.screen_height_cm / (2.0 * d)))
    return width, height


def size_for_degrees(degrees: float, eye_distance_cm: float) -> float:
    """Inverse of the visual-angle formula: on-screen extent (cm) for an angle."""
    return 2.0 * eye_distance_cm * math.tan(math.radians(degrees) / 2.0)


def degrees_per_pixel(geom: VisualGeometry, map_width_px: int) -> float:
    if map_width_px <= 0:
        raise ValueError("map_width_px must be positive")
    return visual_degrees(geom)[0] / map_width_px


def gaussian_sigma_px(geom: VisualGeometry, map_width_px: int, sigma_deg: float = 1.0) -> float:
    return sigma_deg / degrees_per_pixel(geom, map_width_px)


def _xy(sample) -> tuple[float, float]:
    if hasattr(sample, "x"):
        return float(sample.x), float(sample.y)
    return float(sample[0]), float(sample[1])


def gaze_to_saliency_map(
    gaze: Iterable,
    geom: VisualGeometry,
    out_w: int = MAP_SIZE,
    out_h: int = MAP_SIZE,
    sigma_deg: float = 1.0,
) -> np.ndarray:
    """Ground-truth saliency map from raw gaze samples.

    Each on-screen sample (in screen/frame pixels) is rescaled to the output
    grid and contributes an isotropic Gaussian with a width of ``sigma_deg``
    visual degrees. Kernels are truncated at 4 sigma and the sum is normalised
    afterwards.
    """
    sx = out_w / geom.screen_width_px
    sy = out_h / geom.screen_height_px
    centres = []
    for sample in gaze:
        x, y = _xy(sample)
        if 0.0 <= x < geom.screen_width_px and 0.0 <= y < geom.screen_height_px:
            centres.append((x * sx, y * sy))
    if not centres:
        raise EmptyGazeError("no on-screen gaze sample to build a saliency map from")

    sigma = gaussian_sigma_px(geom, out_w, sigma_deg)
    radius = GAUSSIAN_TRUNCATE * sigma
    xs = np.arange(out_w) + 0.5
    ys = np.arange(out_h) + 0.5
    out = np.zeros((out_h, out_w), dtype=np.float64)
    # fixed order keeps the result independent of the sample order up to rounding
    for cx, cy in sorted(centres):
        gx = np.exp(-0.5 * ((xs - cx) / sigma) ** 2)
        gy = np.exp(-0.5 * ((ys - cy) / sigma) ** 2)
        kernel = np.outer(gy, gx)
        dist2 = (xs[None, :] - cx) ** 2 + (ys[:, None] - cy) ** 2
        kernel[dist2 > radius * radius] = 0.0
        out += kernel
    total = out.sum()
    if total <= 0.0:
        # every sample sits far outside the grid after truncation
        raise EmptyGazeError("gaze kernels have no mass on the output grid")
    return out / total


def check_saliency_map(values: np.ndarray, atol: float = 1e-6) -> np.ndarray:
    values = np.asarray(values)
    if values.ndim != 2:
        raise ValueError(f"saliency map must be 2-D, got shape {values.shape}")
    if not np.all(np.isfinite(values)) or values.min() < 0:
        raise ValueError("saliency map entries must be finite and non-negative")
    if abs(float(values.sum()) - 1.0) > atol:
        raise ValueError(f"saliency map must sum to 1, sums to {values.sum():.8f}")
    return values


def uniform_map(h: int = MAP_SIZE, w: int = MAP_SIZE) -> np.ndarray:
    return np.full((h, w), 1.0 / (h * w))


def normalize_map(values: np.ndarray) -> np.ndarray:
    """Clip to non-negative and rescale to unit sum; all-zero input maps to uniform."""
    values = np.clip(np.asarray(values, dtype=np.float64), 0.0, None)
    total = values.sum()
    if not np.isfinite(total) or total <= 0.0:
        return uniform_map(*values.shape)
    return values / total


def save_saliency_map(path: str | Path, values: np.ndarray) -> None:
    """Write a map as a ``.npy`` array (float64, shape H x W)."""
    np.save(Path(path), np.asarray(values, dtype=np.float64), allow_pickle=False)


def load_saliency_map(path: str | Path) -> np.ndarray:
    return check_saliency_map(np.load(Path(path), allow_pickle=False))


def render_heatmap(values: np.ndarray, background: np.ndarray | None = None,
                   alpha: float = 0.5) -> np.ndarray:
    """RGB uint8 heat-map of a saliency map, optionally blended over a frame."""
    values = np.asarray(values, dtype=np.float64)
    peak = values.max()
    scaled = values / peak if peak > 0 else values
    heat = cv2.applyColorMap((scaled * 255).astype(np.uint8), cv2.COLORMAP_JET)
    heat = cv2.cvtColor(heat, cv2.COLOR_BGR2RGB)
    if background is None:
        return heat
    bg = np.asarray(background)
    if bg.ndim == 2:
        bg = np.repeat(bg[..., None], 3, axis=2)
    if bg.dtype != np.uint8:
        bg = (np.clip(bg, 0, 1) * 255).astype(np.uint8)
    heat = cv2.resize(heat, (bg.shape[1], bg.shape[0]), interpolation=cv2.INTER_LINEAR)
    return cv2.addWeighted(bg, 1.0 - alpha, heat, alpha, 0.0)


# -- foveation ----------------------------------------------------------------


@dataclass(frozen=True)
class FoveatedFrame:
    image: np.ndarray
    gaze_px: tuple[int, int]


def _blur_levels(img: np.ndarray, n_levels: int) -> list[np.ndarray]:
    """Level k is the image reduced k times by a Gaussian pyramid and expanded back."""
    h, w = img.shape[:2]
    levels = [img]
    reduced = [img]
    for _ in range(1, n_levels):
        prev = reduced[-1]
        if min(prev.shape[:2]) < 2:
            break
        reduced.append(cv2.pyrDown(prev))
    for k in range(1, len(reduced)):
        up = reduced[k]
        for j in range(k, 0, -1):
            target = reduced[j - 1].shape[:2]
            up = cv2.pyrUp(up, dstsize=(target[1], target[0]))
        levels.append(up.reshape(img.shape))
    return levels


def eccentricity_map(shape: Sequence[int], fovea: tuple[int, int],
                     geom: VisualGeometry) -> np.ndarray:
    """Eccentricity (degrees) of every pixel of an image of ``shape`` around ``fovea``."""
    h, w = shape[:2]
    width_deg, height_deg = visual_degrees(geom)
    fx, fy = fovea
    dx = (np.arange(w) - fx) * (width_deg / w)
    dy = (np.arange(h) - fy) * (height_deg / h)
    return np.hypot(dx[None, :], dy[:, None])


def blur_level(ecc_deg: np.ndarray, e0: float = FOVEA_E0) -> np.ndarray:
    return np.log2(1.0 + ecc_deg / e0)


def foveate(image: np.ndarray, gaze_px: tuple[float, float], geom: VisualGeometry,
            e0: float = FOVEA_E0) -> FoveatedFrame:
    """Simulate a foveated retinal image around ``gaze_px`` = (x, y).

    The image is decomposed into a Gaussian blur pyramid; each pixel takes the
    pyramid level ``log2(1 + e/e0)`` for its eccentricity ``e`` in degrees,
    interpolating linearly between neighbouring levels. The fixated pixel keeps
    level 0 exactly, so it is returned unchanged. The screen's visual angle is
    spread over the image, whatever its resolution.
    """
    img = np.asarray(image)
    if img.size == 0:
        raise ValueError("cannot foveate an empty image")
    h, w = img.shape[:2]
    gx, gy = float(gaze_px[0]), float(gaze_px[1])
    fx, fy = int(round(gx)), int(round(gy))
    if not (0 <= fx < w and 0 <= fy < h):
        cx, cy = min(max(fx, 0), w - 1), min(max(fy, 0), h - 1)
        warnings.warn(f"gaze {gaze_px} outside {w}x{h} frame, clamped to ({cx}, {cy})",
                      stacklevel=2)
        fx, fy = cx, cy

    src = img.astype(np.float64)
    ecc = eccentricity_map(img.shape, (fx, fy), geom)
    level = blur_level(ecc, e0)
    n_levels = int(np.ceil(level.max())) + 1
    levels = _blur_levels(src, max(n_levels, 1))
    level = np.minimum(level, len(levels) - 1)
    lo = np.floor(level).astype(int)
    frac = level - lo
    hi = np.minimum(lo + 1, len(levels) - 1)
    if img.ndim == 3:
        frac = frac[..., None]
    stack = np.stack(levels)
    rows, cols = np.indices((h, w))
    out = stack[lo, rows, cols] * (1.0 - frac) + stack[hi, rows, cols] * frac
    # the fixated pixel is level 0 with weight 1; copy it verbatim
    out[fy, fx] = src[fy, fx]
    if img.dtype == np.uint8:
        out = np.clip(np.rint(out), 0, 255).astype(np.uint8)
        out[fy, fx] = img[fy, fx]
    else:
        out = out.astype(img.dtype, copy=False)
    return FoveatedFrame(image=out, gaze_px=(fx, fy))


def windowed_contrast(image: np.ndarray, size: int = 5) -> np.ndarray:
    """Local standard deviation in a ``size`` x ``size`` box window."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 3:
        img = img.mean(axis=2)
    mean = cv2.blur(img, (size, size), borderType=cv2.BORDER_REFLECT)
    sq = cv2.blur(img * img, (size, size), borderType=cv2.BORDER_REFLECT)
    return np.sqrt(np.maximum(sq - mean * mean, 0.0))
