"""PSNR, PSNR-B and SSIM on the 0-255 scale."""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from typing import Iterable

import numpy as np

from .imaging import ColorSpace, Image, rgb_to_ycbcr

PEAK = 255.0
PSNR_CAP = 100.0

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03


class ChannelMode(str, enum.Enum):
    Y = "Y-only"
    RGB = "RGB-mean"

    @classmethod
    def parse(cls, value) -> ChannelMode:
        if isinstance(value, cls):
            return value
        key = str(value).strip().lower()
        aliases = {"y": cls.Y, "y-only": cls.Y, "rgb": cls.RGB, "rgb-mean": cls.RGB}
        if key not in aliases:
            raise ValueError(f"unknown channel mode {value!r} (use 'y' or 'rgb')")
        return aliases[key]


@dataclass(frozen=True)
class MetricReport:
    psnr: float
    psnr_b: float
    ssim: float
    channel_mode: ChannelMode


def _pair(ref, test) -> tuple[np.ndarray, np.ndarray]:
    ref = np.asarray(ref, dtype=np.float64)
    test = np.asarray(test, dtype=np.float64)
    if ref.shape != test.shape:
        raise ValueError(f"shape mismatch: {ref.shape} vs {test.shape}")
    if ref.ndim != 2:
        raise ValueError(f"metrics operate on single planes, got shape {ref.shape}")
    return ref, test


def _psnr_from_mse(mse: float) -> float:
    if mse == 0:
        return math.inf
    return 10.0 * math.log10(PEAK * PEAK / mse)


def psnr(ref, test) -> float:
    ref, test = _pair(ref, test)
    return _psnr_from_mse(float(np.mean((ref - test) ** 2)))


def blocking_effect_factor(plane, block: int = 8) -> float:
    """BEF of Yim and Bovik: excess squared jump across block boundaries."""
    plane = np.asarray(plane, dtype=np.float64)
    h, w = plane.shape
    dh = (plane[:, :-1] - plane[:, 1:]) ** 2  # pair (j, j+1)
    dv = (plane[:-1, :] - plane[1:, :]) ** 2
    col_edge = (np.arange(w - 1) % block) == block - 1
    row_edge = (np.arange(h - 1) % block) == block - 1
    n_b = dh[:, col_edge].size + dv[row_edge, :].size
    n_bc = dh[:, ~col_edge].size + dv[~row_edge, :].size
    if n_b == 0 or n_bc == 0:
        return 0.0
    d_b = (dh[:, col_edge].sum() + dv[row_edge, :].sum()) / n_b
    d_bc = (dh[:, ~col_edge].sum() + dv[~row_edge, :].sum()) / n_bc
    if d_b <= d_bc:
        return 0.0
    eta = math.log2(block) / math.log2(min(h, w))
    return float(eta * (d_b - d_bc))


def psnr_b(ref, test, block: int = 8) -> float:
    ref, test = _pair(ref, test)
    if min(ref.shape) < 2 * block:
        raise ValueError(f"PSNR-B needs at least {2 * block} pixels per side, got {ref.shape}")
    mse = float(np.mean((ref - test) ** 2))
    if mse == 0:
        return math.inf
    return _psnr_from_mse(mse + blocking_effect_factor(test, block))


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    """Normalized 1D Gaussian taps; the 2D window is their outer product."""
    x = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(x * x) / (2.0 * sigma * sigma))
    return g / g.sum()


def _filter_valid(plane: np.ndarray, taps: np.ndarray) -> np.ndarray:
    k = taps.size
    rows = np.lib.stride_tricks.sliding_window_view(plane, k, axis=0) @ taps
    return np.lib.stride_tricks.sliding_window_view(rows, k, axis=1) @ taps


def ssim_map(ref, test) -> np.ndarray:
    ref, test = _pair(ref, test)
    if min(ref.shape) < SSIM_WINDOW:
        raise ValueError(f"SSIM needs at least {SSIM_WINDOW} pixels per side, got {ref.shape}")
    taps = gaussian_window()
    c1 = (SSIM_K1 * PEAK) ** 2
    c2 = (SSIM_K2 * PEAK) ** 2
    mu_x = _filter_valid(ref, taps)
    mu_y = _filter_valid(test, taps)
    sxx = _filter_valid(ref * ref, taps) - mu_x * mu_x
    syy = _filter_valid(test * test, taps) - mu_y * mu_y
    sxy = _filter_valid(ref * test, taps) - mu_x * mu_y
    num = (2 * mu_x * mu_y + c1) * (2 * sxy + c2)
    den = (mu_x * mu_x + mu_y * mu_y + c1) * (sxx + syy + c2)
    return num / den


def ssim(ref, test) -> float:
    return float(np.mean(ssim_map(ref, test)))


def _planes(img: Image, mode: ChannelMode) -> list[np.ndarray]:
    if img.space is ColorSpace.GRAY:
        return [img.plane(0)]
    if mode is ChannelMode.Y:
        if img.space is ColorSpace.RGB:
            return [rgb_to_ycbcr(img).plane(0)]
        if img.space is ColorSpace.YCBCR:
            return [img.plane(0)]
    elif img.space is ColorSpace.RGB:
        return [img.plane(i) for i in range(3)]
    raise ValueError(f"cannot evaluate a {img.space.value} image in {mode.value} mode")


def evaluate_planes(ref: np.ndarray, test: np.ndarray) -> tuple[float, float, float]:
    return psnr(ref, test), psnr_b(ref, test), ssim(ref, test)


def evaluate_pair(ref: Image, test: Image, mode="y") -> MetricReport:
    """Metrics on the Y plane, or the mean of per-channel RGB metrics."""
    mode = ChannelMode.parse(mode)
    if (ref.height, ref.width) != (test.height, test.width):
        raise ValueError(f"dimension mismatch: {ref.height}x{ref.width} vs {test.height}x{test.width}")
    scores = [evaluate_planes(r, t) for r, t in zip(_planes(ref, mode), _planes(test, mode))]
    p, pb, s = (float(np.mean(col)) for col in zip(*scores))
    return MetricReport(p, pb, s, mode)


def capped_mean(values: Iterable[float], cap: float = PSNR_CAP) -> float:
    """Dataset mean with infinite PSNR values capped at ``cap`` dB."""
    vals = [min(float(v), cap) for v in values]
    if not vals:
        return math.nan
    return float(np.mean(vals))
