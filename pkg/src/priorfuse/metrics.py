"""Quality metrics: PSNR, windowed SSIM, the colorization cumulative-error
area metric, and correlation analysis of the fusion map."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.ndimage import convolve

from .imagestack import Image


def _as_grid(a) -> np.ndarray:
    if isinstance(a, Image):
        return a.data.astype(np.float64)
    return np.asarray(a, dtype=np.float64)


def psnr(a, b, peak: float = 1.0) -> float:
    """10 log10(peak^2 / MSE) in dB; identical inputs return math.inf."""
    if peak <= 0:
        raise ValueError("peak must be positive")
    ga, gb = _as_grid(a), _as_grid(b)
    if ga.shape != gb.shape:
        raise ValueError(f"shape mismatch {ga.shape} vs {gb.shape}")
    mse = float(np.mean((ga - gb) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(peak * peak / mse)


def _gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    ax = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-(ax ** 2) / (2.0 * sigma ** 2))
    win = np.outer(g, g)
    return win / win.sum()


def ssim(a, b, peak: float = 1.0) -> float:
    """Windowed structural similarity with an 11x11 Gaussian window
    (sigma 1.5) and the standard stabilizers; mean over valid windows.

    Multi-channel inputs are averaged to a single channel first.
    """
    ga, gb = _as_grid(a), _as_grid(b)
    if ga.shape != gb.shape:
        raise ValueError(f"shape mismatch {ga.shape} vs {gb.shape}")
    if ga.ndim == 3:
        ga, gb = ga.mean(axis=0), gb.mean(axis=0)
    size = 11
    if min(ga.shape) < size:
        raise ValueError(f"image {ga.shape} smaller than {size}x{size} window")
    win = _gaussian_window(size, 1.5)
    c1 = (0.01 * peak) ** 2
    c2 = (0.03 * peak) ** 2

    def filt(img):
        return convolve(img, win, mode="constant")

    half = size // 2
    sl = (slice(half, -half), slice(half, -half))
    mu_a = filt(ga)[sl]
    mu_b = filt(gb)[sl]
    var_a = filt(ga * ga)[sl] - mu_a ** 2
    var_b = filt(gb * gb)[sl] - mu_b ** 2
    cov = filt(ga * gb)[sl] - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


@dataclass
class AuCCurve:
    """Cumulative fraction of pixels whose ab-space l2 error is below each
    integer threshold in [0, 150], and the mean-of-curve area in percent."""

    thresholds: np.ndarray
    cumulative_pct: np.ndarray
    auc: float


N_THRESHOLDS = 151  # inclusive sweep 0..150


def auc_colorization(pred_ab, gt_ab) -> AuCCurve:
    """Colorization accuracy on conventional (unnormalized) ab scales."""
    pa, ga = np.asarray(pred_ab, dtype=np.float64), np.asarray(gt_ab, dtype=np.float64)
    if pa.shape != ga.shape:
        raise ValueError(f"shape mismatch {pa.shape} vs {ga.shape}")
    if pa.ndim != 3 or pa.shape[0] != 2:
        raise ValueError(f"expected (2, H, W) ab grids, got {pa.shape}")
    err = np.sqrt(np.sum((pa - ga) ** 2, axis=0)).ravel()
    thresholds = np.arange(N_THRESHOLDS)
    cumulative = np.array([(err <= t).mean() for t in thresholds])
    auc = 100.0 * float(cumulative.sum()) / N_THRESHOLDS
    return AuCCurve(thresholds, cumulative, auc)


class DegenerateVariance(ValueError):
    pass


def pearson(xs, ys) -> float:
    """Sample Pearson correlation, computed in 64-bit."""
    x = np.asarray(xs, dtype=np.float64).ravel()
    y = np.asarray(ys, dtype=np.float64).ravel()
    if x.size != y.size:
        raise ValueError("lists must have equal length")
    if x.size < 2:
        raise ValueError("need at least two points")
    xc = x - x.mean()
    yc = y - y.mean()
    sx = float(np.sqrt(np.sum(xc ** 2)))
    sy = float(np.sqrt(np.sum(yc ** 2)))
    if sx == 0.0:
        raise DegenerateVariance("first list has zero variance")
    if sy == 0.0:
        raise DegenerateVariance("second list has zero variance")
    return float(np.sum(xc * yc) / (sx * sy))


@dataclass
class PhiAnalysis:
    """Per-image (mean phi, noise sigma, prior PSNR) records and the two
    correlations they support: fusion weight vs noise level, and fusion
    weight vs prior quality."""

    per_image: list
    r_phi_sigma: float
    r_phi_priorpsnr: float


def analyze_phi(records) -> PhiAnalysis:
    """records: iterable of (mean_phi, sigma_n, prior_psnr) triples."""
    recs = [(float(a), float(b), float(c)) for a, b, c in records]
    if len(recs) < 3:
        raise ValueError("need at least 3 records")
    phis = [r[0] for r in recs]
    sigmas = [r[1] for r in recs]
    prior_psnrs = [r[2] for r in recs]
    return PhiAnalysis(recs, pearson(phis, sigmas), pearson(phis, prior_psnrs))
