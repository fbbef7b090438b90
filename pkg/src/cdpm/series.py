"""Window preparation: per-window normalization with statistic transfer,
moving-average trend extraction, and patch-level statistics."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

log = logging.getLogger(__name__)

STD_FLOOR = 1e-5


def _as_matrix(series) -> np.ndarray:
    a = np.asarray(series, dtype=np.float64)
    if a.ndim == 1:
        a = a[:, None]
    if a.ndim != 2:
        raise ValueError(f"expected a (steps, channels) series, got shape {a.shape}")
    return a


@dataclass(frozen=True)
class WindowPair:
    """One sample: a historical window, its target window, and the
    per-channel statistics of the historical window alone."""

    hist: np.ndarray
    target: np.ndarray
    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def from_series(cls, hist, target) -> "WindowPair":
        hist = _as_matrix(hist)
        target = _as_matrix(target)
        if hist.shape[1] != target.shape[1]:
            raise ValueError(
                f"channel mismatch between windows: {hist.shape} vs {target.shape}"
            )
        mean = hist.mean(axis=0)
        std = hist.std(axis=0)
        clamped = std < STD_FLOOR
        if np.any(clamped):
            log.warning(
                "std clamped to %g on %d zero-variance channel(s)",
                STD_FLOOR,
                int(clamped.sum()),
            )
            std = np.where(clamped, STD_FLOOR, std)
        return cls(hist=hist, target=target, mean=mean, std=std)


def instance_normalize(pair: WindowPair) -> WindowPair:
    """Standardize both windows with the historical window's statistics.

    The target is transformed with the same mean/std as the history so the
    two stay aligned; the statistics ride along for later inversion.
    """
    if pair.hist.shape[0] < 2:
        raise ValueError("history must have at least 2 steps to define a std")
    return WindowPair(
        hist=(pair.hist - pair.mean) / pair.std,
        target=(pair.target - pair.mean) / pair.std,
        mean=pair.mean,
        std=pair.std,
    )


def denormalize(series, mean, std) -> np.ndarray:
    """Invert instance normalization: series * std + mean per channel."""
    series = _as_matrix(series)
    mean = np.asarray(mean, dtype=np.float64)
    std = np.asarray(std, dtype=np.float64)
    if mean.shape != (series.shape[1],) or std.shape != (series.shape[1],):
        raise ValueError(
            f"statistics of shape {mean.shape}/{std.shape} do not match "
            f"series with {series.shape[1]} channels"
        )
    return series * std + mean


def moving_average_trend(series, kernel: int) -> np.ndarray:
    """Centered moving average with edge-replication padding.

    Output length equals input length; ``kernel`` must be odd and at most
    2N-1 for an N-step series.
    """
    series = _as_matrix(series)
    n, d = series.shape
    if kernel < 1 or kernel % 2 == 0:
        raise ValueError(f"kernel must be a positive odd integer, got {kernel}")
    if kernel > 2 * n - 1:
        raise ValueError(f"kernel {kernel} too large for a {n}-step series")
    if kernel == 1:
        return series.copy()
    pad = kernel // 2
    padded = np.concatenate(
        [np.repeat(series[:1], pad, axis=0), series, np.repeat(series[-1:], pad, axis=0)],
        axis=0,
    )
    csum = np.vstack([np.zeros((1, d)), np.cumsum(padded, axis=0)])
    return (csum[kernel:] - csum[:-kernel]) / kernel


@dataclass(frozen=True)
class DecomposedWindow:
    """Trend and seasonal parts of a window; their sum reconstructs the
    source exactly because the seasonal part is defined as the residual."""

    trend: np.ndarray
    seasonal: np.ndarray


def decompose(series, kernel: int) -> DecomposedWindow:
    series = _as_matrix(series)
    trend = moving_average_trend(series, kernel)
    return DecomposedWindow(trend=trend, seasonal=series - trend)


@dataclass(frozen=True)
class PatchStatistics:
    """Per-patch, per-channel mean and population variance of a series."""

    means: np.ndarray
    variances: np.ndarray
    patch_len: int

    @property
    def num_patches(self) -> int:
        return self.means.shape[0]


def patch_statistics(series, patch_len: int) -> PatchStatistics:
    """Split a series into consecutive length-``patch_len`` patches and take
    per-patch per-channel statistics.

    A final partial patch is padded by replicating the last step; a patch
    length beyond the series produces one fully padded patch (with a
    warning).
    """
    series = _as_matrix(series)
    n, d = series.shape
    if patch_len < 1:
        raise ValueError(f"patch length must be >= 1, got {patch_len}")
    if patch_len > n:
        log.warning("patch length %d exceeds series length %d; single padded patch", patch_len, n)
    num = math.ceil(n / patch_len)
    padded = np.concatenate(
        [series, np.repeat(series[-1:], num * patch_len - n, axis=0)], axis=0
    )
    patches = padded.reshape(num, patch_len, d)
    means = patches.mean(axis=1)
    variances = patches.var(axis=1)
    # exactness: a constant patch has exactly zero variance
    constant = patches.max(axis=1) == patches.min(axis=1)
    variances = np.where(constant, 0.0, variances)
    return PatchStatistics(means=means, variances=variances, patch_len=patch_len)
