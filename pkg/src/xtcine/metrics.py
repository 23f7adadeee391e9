"""PSNR, SSIM and NRMSE, and their evaluation on frames and on
spatio-temporal slices of a central region of interest."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.ndimage import correlate1d

PSNR_CAP = 300.0


def psnr(ref: np.ndarray, est: np.ndarray, peak: float | None = None) -> float:
    """``peak`` defaults to ``max(ref)``."""
    peak = float(np.max(ref)) if peak is None else peak
    if not np.any(ref):
        raise ValueError("PSNR of an all-zero reference is undefined")
    mse = float(np.mean((np.asarray(est, float) - ref) ** 2))
    if mse == 0:
        return PSNR_CAP
    return min(PSNR_CAP, 10 * math.log10(peak ** 2 / mse))


def gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2
    g = np.exp(-x ** 2 / (2 * sigma ** 2))
    return g / g.sum()


def ssim_map(ref, est, size=11, sigma=1.5, k1=0.01, k2=0.03, data_range=None):
    ref = np.asarray(ref, float)
    est = np.asarray(est, float)
    if data_range is None:
        data_range = float(ref.max() - ref.min())
    if data_range == 0:
        raise ValueError("SSIM needs a reference with non-zero dynamic range")
    if min(ref.shape) < size:
        raise ValueError(f"image {ref.shape} smaller than the {size}x{size} window")
    g = gaussian_window(size, sigma)
    half = size // 2

    def filt(a):
        a = correlate1d(correlate1d(a, g, axis=0, mode="constant"), g, axis=1, mode="constant")
        return a[half:a.shape[0] - half, half:a.shape[1] - half]

    mu_x, mu_y = filt(ref), filt(est)
    sxx = filt(ref * ref) - mu_x ** 2
    syy = filt(est * est) - mu_y ** 2
    sxy = filt(ref * est) - mu_x * mu_y
    c1, c2 = (k1 * data_range) ** 2, (k2 * data_range) ** 2
    return ((2 * mu_x * mu_y + c1) * (2 * sxy + c2)) / ((mu_x ** 2 + mu_y ** 2 + c1) * (sxx + syy + c2))


def ssim(ref, est, data_range: float | None = None) -> float:
    """Mean SSIM over all positions where the 11x11 window fits.

    ``data_range`` defaults to ``max(ref) - min(ref)``.
    """
    return float(ssim_map(ref, est, data_range=data_range).mean())


def nrmse(ref, est) -> float:
    norm = float(np.linalg.norm(ref))
    if norm == 0:
        raise ValueError("NRMSE of a zero-norm reference is undefined")
    return float(np.linalg.norm(np.asarray(est, float) - ref)) / norm


@dataclass(frozen=True)
class MetricReport:
    psnr_frames: float
    ssim_frames: float
    nrmse_frames: float
    psnr_slices: float
    ssim_slices: float
    nrmse_slices: float
    roi: tuple[int, int]

    HEADER = ("psnr_frames", "ssim_frames", "nrmse_frames", "psnr_slices", "ssim_slices", "nrmse_slices")

    def row(self) -> tuple[float, ...]:
        return tuple(getattr(self, k) for k in self.HEADER)


def crop_roi(volume: np.ndarray, roi: tuple[int, int]) -> np.ndarray:
    nx, ny = volume.shape[:2]
    rx, ry = roi
    if not (0 < rx <= nx and 0 < ry <= ny):
        raise ValueError(f"roi {roi} outside volume {volume.shape}")
    ox, oy = (nx - rx) // 2, (ny - ry) // 2
    return volume[ox:ox + rx, oy:oy + ry]


def frames(volume):
    return [volume[:, :, t] for t in range(volume.shape[2])]


def st_slices(volume):
    """xt slices (fixed y) followed by yt slices (fixed x)."""
    return [volume[:, y, :] for y in range(volume.shape[1])] + [volume[x, :, :] for x in range(volume.shape[0])]


def _mean_metrics(refs, ests, peak, data_range):
    p = [psnr(r, e, peak) for r, e in zip(refs, ests)]
    s = [ssim(r, e, data_range) for r, e in zip(refs, ests)]
    n = [nrmse(r, e) for r, e in zip(refs, ests)]
    return float(np.mean(p)), float(np.mean(s)), float(np.mean(n))


def default_roi(shape) -> tuple[int, int]:
    return shape[0] // 2, shape[1] // 2


def evaluate_volume(ref: np.ndarray, est: np.ndarray, roi: tuple[int, int] | None = None) -> MetricReport:
    """Frame-wise and slice-wise means over the central ``roi`` (full Nt).

    Peak and dynamic range come from the whole cropped reference, so every
    frame and slice is scored on one intensity scale and flat slices stay
    well defined.
    """
    if ref.shape != est.shape:
        raise ValueError(f"shape mismatch {ref.shape} vs {est.shape}")
    roi = tuple(roi) if roi is not None else default_roi(ref.shape)
    r, e = crop_roi(ref, roi), crop_roi(est, roi)
    peak, rng = float(r.max()), float(r.max() - r.min())
    if rng == 0:
        raise ValueError("reference ROI is constant")
    fr = _mean_metrics(frames(r), frames(e), peak, rng)
    sl = _mean_metrics(st_slices(r), st_slices(e), peak, rng)
    return MetricReport(*fr, *sl, roi=roi)
