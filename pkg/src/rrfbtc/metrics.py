"""Reconstruction-quality metrics."""

from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import gaussian_filter

PSNR_CAP = 100.0


def _pair(truth, estimate):
    truth = np.asarray(truth, dtype=float)
    estimate = np.asarray(estimate, dtype=float)
    if truth.shape != estimate.shape:
        raise ValueError(f"shape mismatch: {truth.shape} vs {estimate.shape}")
    return truth, estimate


def rrse(truth, estimate):
    truth, estimate = _pair(truth, estimate)
    norm = np.linalg.norm(truth)
    if norm == 0:
        raise ValueError("RRSE is undefined for an all-zero ground truth")
    return float(np.linalg.norm(truth - estimate) / norm)


def rmse(truth, estimate):
    truth, estimate = _pair(truth, estimate)
    return float(np.linalg.norm(truth - estimate) / np.sqrt(truth.size))


def psnr(truth, estimate, peak=255.0):
    truth, estimate = _pair(truth, estimate)
    if peak <= 0:
        raise ValueError("peak must be positive")
    mse = float(np.mean((truth - estimate) ** 2))
    if mse == 0:
        return PSNR_CAP
    return float(min(10.0 * np.log10(peak ** 2 / mse), PSNR_CAP))


def _ssim_channel(x, y, peak, sigma):
    c1 = (0.01 * peak) ** 2
    c2 = (0.03 * peak) ** 2
    # truncate=3.5 gives the 11x11 window for sigma=1.5
    blur = lambda a: gaussian_filter(a, sigma=sigma, truncate=3.5, mode="reflect")
    mx, my = blur(x), blur(y)
    vx = blur(x * x) - mx * mx
    vy = blur(y * y) - my * my
    cxy = blur(x * y) - mx * my
    smap = ((2 * mx * my + c1) * (2 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2))
    pad = int(3.5 * sigma + 0.5)
    if min(smap.shape) > 2 * pad:
        smap = smap[pad:-pad, pad:-pad]
    return float(smap.mean())


def ssim(truth, estimate, peak=255.0, sigma=1.5):
    """Mean SSIM with a Gaussian window; trailing axis of a 3-D array is the channel axis."""
    truth, estimate = _pair(truth, estimate)
    if truth.ndim == 2:
        return _ssim_channel(truth, estimate, peak, sigma)
    if truth.ndim == 3:
        return float(np.mean([_ssim_channel(truth[..., c], estimate[..., c], peak, sigma)
                              for c in range(truth.shape[-1])]))
    raise ValueError("SSIM expects a 2-D image or an (H, W, C) array")


@dataclass
class MetricReport:
    """Per-trial metric values with mean/std summaries."""

    trials: dict = field(default_factory=dict)

    def add(self, **values):
        for name, v in values.items():
            self.trials.setdefault(name, []).append(float(v))

    def mean(self, name):
        return float(np.mean(self.trials[name]))

    def std(self, name):
        return float(np.std(self.trials[name]))

    def summary(self):
        return {name: (self.mean(name), self.std(name)) for name in self.trials}
