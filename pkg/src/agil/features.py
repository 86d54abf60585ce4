"""Bottom-up feature channels: Itti-Koch saliency, dense optical flow, motion maps."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import cv2
import numpy as np

from agil.data_model import luminance, to_float_image
from agil.retina import MAP_SIZE, normalize_map


@dataclass(frozen=True)
class IttiKochConfig:
    center_levels: tuple[int, ...] = (1, 2, 3)
    surround_deltas: tuple[int, ...] = (2, 3)
    n_orientations: int = 4
    gabor_size: int = 9
    gabor_sigma: float = 2.0
    gabor_wavelength: float = 4.0
    local_max_window: int = 7
    # pixels darker than this fraction of the peak intensity carry no hue
    hue_threshold: float = 0.1


@dataclass(frozen=True)
class FlowConfig:
    """Farneback parameters; ``version`` changes whenever a default changes."""

    pyr_scale: float = 0.5
    levels: int = 3
    winsize: int = 9
    iterations: int = 3
    poly_n: int = 5
    poly_sigma: float = 1.1
    version: int = 1


MIN_ITTI_SIZE = 32
# flow magnitudes below this (px/frame) are estimator noise
MOTION_NOISE_FLOOR = 0.05


@dataclass(frozen=True)
class FlowField:
    dx: np.ndarray
    dy: np.ndarray

    def __post_init__(self):
        if self.dx.shape != self.dy.shape:
            raise ValueError("dx and dy must have the same shape")

    @property
    def magnitude(self) -> np.ndarray:
        return np.hypot(self.dx, self.dy)


# -- Itti-Koch ----------------------------------------------------------------


def _pyramid(img: np.ndarray, depth: int) -> list[np.ndarray]:
    levels = [img]
    for _ in range(depth):
        levels.append(cv2.pyrDown(levels[-1]))
    return levels


def _pyramid_depth(h: int, w: int) -> int:
    return int(np.floor(np.log2(min(h, w))))


def _center_surround(pyr, pairs):
    maps = []
    for c, s in pairs:
        center = pyr[c]
        surround = cv2.resize(pyr[s], (center.shape[1], center.shape[0]),
                              interpolation=cv2.INTER_LINEAR)
        maps.append(np.abs(center - surround))
    return maps


def _normalize_operator(m: np.ndarray, window: int) -> np.ndarray:
    """Itti's N(.): scale to [0, 1] and weight by (1 - mean local max)^2."""
    m = m.astype(np.float64)
    m = m - m.min()
    peak = m.max()
    if peak <= 1e-12:
        return np.zeros_like(m)
    m = m / peak
    dil = cv2.dilate(m, np.ones((window, window), np.uint8))
    local = m[(m == dil) & (m > 0.0) & (m < 1.0)]
    mean_local = local.mean() if local.size else 0.0
    return m * (1.0 - mean_local) ** 2


def _across_scale_sum(maps, window, size=MAP_SIZE):
    out = np.zeros((size, size))
    for m in maps:
        out += cv2.resize(_normalize_operator(m, window), (size, size),
                          interpolation=cv2.INTER_LINEAR)
    return out


def _gabor_kernels(cfg: IttiKochConfig) -> list[np.ndarray]:
    kernels = []
    for k in range(cfg.n_orientations):
        theta = np.pi * k / cfg.n_orientations
        kern = cv2.getGaborKernel((cfg.gabor_size, cfg.gabor_size), cfg.gabor_sigma, theta,
                                  cfg.gabor_wavelength, 1.0, 0.0, ktype=cv2.CV_64F)
        kernels.append(kern - kern.mean())
    return kernels


def itti_koch_saliency(image: np.ndarray, config: IttiKochConfig | None = None,
                       out_size: int = MAP_SIZE) -> np.ndarray:
    """Classic center-surround saliency over intensity, color opponency and orientation.

    Returns an ``out_size`` x ``out_size`` unit-sum map; an image without any
    conspicuity yields the uniform map.
    """
    cfg = config or IttiKochConfig()
    img = to_float_image(image).astype(np.float64)
    if img.ndim == 2:
        img = np.repeat(img[..., None], 3, axis=2)
    h, w = img.shape[:2]
    if min(h, w) < MIN_ITTI_SIZE:
        raise ValueError(f"image must be at least {MIN_ITTI_SIZE}x{MIN_ITTI_SIZE}, got {w}x{h}")

    r, g, b = img[..., 0], img[..., 1], img[..., 2]
    intensity = (r + g + b) / 3.0
    peak = intensity.max()
    if peak > 0:
        scale = np.where(intensity > cfg.hue_threshold * peak, intensity, np.inf)
        r, g, b = r / scale, g / scale, b / scale
    else:
        r = g = b = np.zeros_like(intensity)
    R = r - (g + b) / 2.0
    G = g - (r + b) / 2.0
    B = b - (r + g) / 2.0
    Y = np.maximum((r + g) / 2.0 - np.abs(r - g) / 2.0 - b, 0.0)

    depth = _pyramid_depth(h, w)
    pairs = [(c, c + d) for c in cfg.center_levels for d in cfg.surround_deltas if c + d <= depth]
    if not pairs:
        raise ValueError("image too small for the configured pyramid levels")
    max_level = max(s for _, s in pairs)

    i_pyr = _pyramid(intensity, max_level)
    rg_pyr = _pyramid(R - G, max_level)
    by_pyr = _pyramid(B - Y, max_level)
    win = cfg.local_max_window

    intensity_cs = _across_scale_sum(_center_surround(i_pyr, pairs), win, out_size)
    color_cs = (_across_scale_sum(_center_surround(rg_pyr, pairs), win, out_size)
                + _across_scale_sum(_center_surround(by_pyr, pairs), win, out_size))
    orient_cs = np.zeros((out_size, out_size))
    for kern in _gabor_kernels(cfg):
        o_pyr = [np.abs(cv2.filter2D(level, -1, kern)) for level in i_pyr]
        orient_cs += _normalize_operator(
            _across_scale_sum(_center_surround(o_pyr, pairs), win, out_size), win)

    combined = (_normalize_operator(intensity_cs, win) + _normalize_operator(color_cs, win)
                + _normalize_operator(orient_cs, win)) / 3.0
    return normalize_map(combined)


# -- optical flow -------------------------------------------------------------


def _gray255(frame: np.ndarray) -> np.ndarray:
    arr = np.asarray(frame)
    if arr.ndim == 3:
        arr = luminance(arr)
    else:
        arr = to_float_image(arr)
    return (arr * 255.0).astype(np.float32)


def optical_flow(prev: np.ndarray, next: np.ndarray, config: FlowConfig | None = None) -> FlowField:
    """Dense Farneback flow from ``prev`` to ``next``, in pixels per frame."""
    cfg = config or FlowConfig()
    a, b = np.asarray(prev), np.asarray(next)
    if a.shape[:2] != b.shape[:2]:
        raise ValueError(f"frame dimensions differ: {a.shape[:2]} vs {b.shape[:2]}")
    flow = cv2.calcOpticalFlowFarneback(_gray255(a), _gray255(b), None, cfg.pyr_scale,
                                        cfg.levels, cfg.winsize, cfg.iterations, cfg.poly_n,
                                        cfg.poly_sigma, 0)
    flow = np.nan_to_num(flow, nan=0.0, posinf=0.0, neginf=0.0)
    return FlowField(dx=flow[..., 0], dy=flow[..., 1])


def flow_magnitude_map(flow: FlowField, size: int = MAP_SIZE,
                       noise_floor: float = MOTION_NOISE_FLOOR) -> np.ndarray:
    """Flow magnitude at full resolution, floored, then area-resized to ``size``."""
    mag = flow.magnitude.astype(np.float32)
    mag[mag < noise_floor] = 0.0
    return cv2.resize(mag, (size, size), interpolation=cv2.INTER_AREA)


def motion_saliency(flow: FlowField, size: int = MAP_SIZE) -> np.ndarray:
    return normalize_map(flow_magnitude_map(flow, size))


def config_dict(cfg) -> dict:
    return asdict(cfg)
