"""Parametric day-to-night image transform and faithfulness metrics.

Images are H x W x 3 float arrays in [0, 1]. The transform runs in a fixed
order: gamma, brightness, colour temperature, light blooms, sensor noise,
clamp. Blooms and noise draw from ``numpy.random.default_rng(seed)``, so the
output is a pure function of (image, params).
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from .errors import DataError, ShapeError

PSNR_CAP_DB = 99.0

# per-channel gains per unit of temp_shift: positive is warmer (orange),
# negative cooler (blue)
_TEMP_GAIN = np.array([0.3, 0.1, -0.3])
_BLOOM_COLOR = np.array([1.0, 0.82, 0.55])


@dataclass(frozen=True)
class NightParams:
    gamma: float = 2.2
    brightness: float = 0.35
    temp_shift: float = -0.25
    bloom_count: int = 3
    bloom_intensity: float = 0.6
    noise_sigma: float = 0.02
    seed: int = 0

    def __post_init__(self):
        if not self.gamma > 0:
            raise DataError("gamma must be > 0")
        if not 0 < self.brightness <= 1:
            raise DataError("brightness must be in (0, 1]")
        if not -1 <= self.temp_shift <= 1:
            raise DataError("temp_shift must be in [-1, 1]")
        if int(self.bloom_count) != self.bloom_count or self.bloom_count < 0:
            raise DataError("bloom_count must be a non-negative integer")
        if not 0 <= self.bloom_intensity <= 1:
            raise DataError("bloom_intensity must be in [0, 1]")
        if not self.noise_sigma >= 0:
            raise DataError("noise_sigma must be >= 0")

    @classmethod
    def identity(cls, seed: int = 0) -> "NightParams":
        return cls(gamma=1.0, brightness=1.0, temp_shift=0.0, bloom_count=0,
                   bloom_intensity=0.0, noise_sigma=0.0, seed=seed)

    def with_seed(self, seed: int) -> "NightParams":
        return NightParams(**{**asdict(self), "seed": int(seed)})


def check_image(img) -> np.ndarray:
    a = np.asarray(img)
    if a.ndim != 3 or a.shape[2] != 3 or a.shape[0] < 1 or a.shape[1] < 1:
        raise ShapeError(f"expected an H x W x 3 image, got shape {a.shape}")
    return a


def night_transform(img, p: NightParams = NightParams()) -> np.ndarray:
    a = check_image(img).astype(np.float64)
    h, w, _ = a.shape
    out = a**p.gamma
    out = out * p.brightness
    if p.temp_shift != 0.0:
        out = out * (1.0 + p.temp_shift * _TEMP_GAIN)
    rng = np.random.default_rng(p.seed)
    if p.bloom_count and p.bloom_intensity > 0:
        yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
        side = min(h, w)
        for _ in range(int(p.bloom_count)):
            cy, cx = rng.uniform(0, h), rng.uniform(0, w)
            radius = rng.uniform(0.04, 0.12) * side
            blob = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * radius**2))
            out = out + p.bloom_intensity * blob[..., None] * _BLOOM_COLOR
    if p.noise_sigma > 0:
        out = out + rng.normal(0.0, p.noise_sigma, out.shape)
    return np.clip(out, 0.0, 1.0)


def _pair(a, b):
    a, b = check_image(a), check_image(b)
    if a.shape != b.shape:
        raise ShapeError(f"image shapes differ: {a.shape} vs {b.shape}")
    return a.astype(np.float64), b.astype(np.float64)


def pixel_l2(a, b) -> float:
    """RMS pixel difference on the 0-255 scale."""
    a, b = _pair(a, b)
    return float(255.0 * math.sqrt(np.mean((a - b) ** 2)))


def psnr_db(a, b) -> float:
    """PSNR with peak 1.0; identical images report the 99 dB cap."""
    a, b = _pair(a, b)
    mse = float(np.mean((a - b) ** 2))
    if mse < 1e-10:
        return PSNR_CAP_DB
    return min(PSNR_CAP_DB, 10.0 * math.log10(1.0 / mse))


def gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    r = (size - 1) / 2
    x = np.arange(size) - r
    g = np.exp(-0.5 * (x / sigma) ** 2)
    return g / g.sum()


def _filter_valid(x: np.ndarray, g: np.ndarray) -> np.ndarray:
    """Separable 'valid' correlation of a 2-D array with 1-D kernel ``g``."""
    k = len(g)
    rows = sum(g[i] * x[i:x.shape[0] - k + 1 + i] for i in range(k))
    return sum(g[j] * rows[:, j:rows.shape[1] - k + 1 + j] for j in range(k))


def ssim(a, b, window: int = 11, sigma: float = 1.5, k1: float = 0.01, k2: float = 0.03,
         data_range: float = 1.0) -> float:
    """Mean SSIM over valid window positions, averaged across channels."""
    a, b = _pair(a, b)
    if min(a.shape[:2]) < window:
        raise ShapeError(f"image side {min(a.shape[:2])} smaller than the {window}px window")
    g = gaussian_window(window, sigma)
    c1, c2 = (k1 * data_range) ** 2, (k2 * data_range) ** 2
    vals = []
    for ch in range(a.shape[2]):
        x, y = a[..., ch], b[..., ch]
        mx, my = _filter_valid(x, g), _filter_valid(y, g)
        sxx = _filter_valid(x * x, g) - mx * mx
        syy = _filter_valid(y * y, g) - my * my
        sxy = _filter_valid(x * y, g) - mx * my
        num = (2 * mx * my + c1) * (2 * sxy + c2)
        den = (mx * mx + my * my + c1) * (sxx + syy + c2)
        vals.append(np.mean(num / den))
    return float(np.mean(vals))


def faithfulness(a, b) -> dict:
    """(L2, PSNR, SSIM) triple for a source/translated pair."""
    out = {"l2": pixel_l2(a, b), "psnr_db": psnr_db(a, b)}
    a_ = check_image(a)
    out["ssim"] = ssim(a, b) if min(a_.shape[:2]) >= 11 else float("nan")
    return out
