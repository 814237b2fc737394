"""Image-quality metrics, evaluation masks, and comparison sweeps."""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy import ndimage

SWEEP_COLUMNS = ("method", "I0", "seed", "rmse_hu", "ssim", "runtime_s", "iterations")


def _check_mask(mask, shape) -> np.ndarray:
    m = np.ones(shape, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    if m.shape != tuple(shape):
        raise ValueError(f"mask shape {m.shape} does not match image shape {tuple(shape)}")
    if not m.any():
        raise ValueError("empty ROI mask")
    return m


def rmse_hu(recon, truth, mask=None) -> float:
    """Root mean squared error over the masked pixels (inputs already in HU)."""
    a = np.asarray(recon, dtype=np.float64)
    b = np.asarray(truth, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    m = _check_mask(mask, a.shape)
    d = a[m] - b[m]
    return float(np.sqrt(np.mean(d * d)))


def ssim_map(recon, truth, dynamic_range: float, sigma: float = 1.5, radius: int = 5,
             K1: float = 0.01, K2: float = 0.03) -> np.ndarray:
    """Local SSIM with a truncated Gaussian window (11x11 at the defaults)."""
    if not dynamic_range > 0:
        raise ValueError("dynamic_range must be positive")
    x = np.asarray(recon, dtype=np.float64)
    y = np.asarray(truth, dtype=np.float64)
    if x.shape != y.shape:
        raise ValueError(f"shape mismatch {x.shape} vs {y.shape}")
    blur = lambda im: ndimage.gaussian_filter(im, sigma, mode="reflect", truncate=radius / sigma)
    mx, my = blur(x), blur(y)
    vx = blur(x * x) - mx * mx
    vy = blur(y * y) - my * my
    cxy = blur(x * y) - mx * my
    C1 = (K1 * dynamic_range) ** 2
    C2 = (K2 * dynamic_range) ** 2
    return ((2 * mx * my + C1) * (2 * cxy + C2)) / ((mx * mx + my * my + C1) * (vx + vy + C2))


def ssim(recon, truth, mask=None, dynamic_range: float | None = None) -> float:
    """Mean local SSIM over the mask.

    ``dynamic_range`` defaults to the peak-to-peak range of ``truth``.
    """
    t = np.asarray(truth, dtype=np.float64)
    m = _check_mask(mask, t.shape)
    if dynamic_range is None:
        dynamic_range = float(np.ptp(t)) or 1.0
    return float(np.mean(ssim_map(recon, t, dynamic_range)[m]))


def circle_mask(shape, radius_fraction: float = 1.0) -> np.ndarray:
    """Disk inscribed in the grid, optionally shrunk by ``radius_fraction``."""
    ny, nx = shape
    yy, xx = np.mgrid[:ny, :nx]
    r = radius_fraction * min(nx, ny) / 2
    return (xx + 0.5 - nx / 2) ** 2 + (yy + 0.5 - ny / 2) ** 2 <= r * r


def edge_mask(truth_hu, width: int = 2, threshold: float = 5.0) -> np.ndarray:
    """Pixels within ``width`` of an intensity jump larger than ``threshold`` HU."""
    t = np.asarray(truth_hu, dtype=np.float64)
    jump = np.zeros(t.shape, dtype=bool)
    dx = np.abs(np.diff(t, axis=1)) > threshold
    dy = np.abs(np.diff(t, axis=0)) > threshold
    jump[:, 1:] |= dx
    jump[:, :-1] |= dx
    jump[1:, :] |= dy
    jump[:-1, :] |= dy
    if width > 1:
        jump = ndimage.binary_dilation(jump, iterations=width - 1)
    return jump


def soft_tissue_mask(truth_hu, lo: float = 950.0, hi: float = 1100.0, margin: int = 3) -> np.ndarray:
    """Soft-tissue pixels at least ``margin`` pixels away from any edge."""
    t = np.asarray(truth_hu, dtype=np.float64)
    return (t >= lo) & (t <= hi) & ~edge_mask(t, width=margin + 1)


@dataclass
class ReportConfig:
    methods: list = field(default_factory=list)
    doses: list = field(default_factory=lambda: [1e4])
    seeds: list = field(default_factory=lambda: [0])
    mask: np.ndarray | None = None
    dynamic_range: float | None = None


def sweep(cfg: ReportConfig, runner: Callable) -> str:
    """Run every (method, I0, seed) combination and return a CSV table.

    ``runner(method, I0, seed)`` must return ``(recon_hu, truth_hu, runtime_s, iterations)``.
    """
    buf = io.StringIO()
    out = csv.writer(buf, lineterminator="\n")
    out.writerow(SWEEP_COLUMNS)
    for method in cfg.methods:
        for I0 in cfg.doses:
            for seed in cfg.seeds:
                recon, truth, runtime, iters = runner(method, I0, seed)
                out.writerow([method, f"{I0:g}", seed,
                              f"{rmse_hu(recon, truth, cfg.mask):.6f}",
                              f"{ssim(recon, truth, cfg.mask, cfg.dynamic_range):.6f}",
                              f"{runtime:.3f}", iters])
    return buf.getvalue()
