"""Reconstruction quality and sparsity measures."""

from __future__ import annotations

import numpy as np

PSNR_CAP = 300.0


def psnr(recon: np.ndarray, truth: np.ndarray) -> float:
    """PSNR in dB of magnitude images, peak taken from ``truth``.

    Identical images give :data:`PSNR_CAP` instead of infinity.
    """
    recon = np.abs(np.asarray(recon))
    truth = np.abs(np.asarray(truth))
    if recon.shape != truth.shape:
        raise ValueError(f"shape mismatch {recon.shape} vs {truth.shape}")
    peak = float(truth.max())
    if peak == 0.0:
        raise ValueError("truth image is all zero")
    mse = float(np.mean((recon - truth) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return min(10.0 * np.log10(peak ** 2 / mse), PSNR_CAP)


def gini_index(values) -> float:
    """Sparsity Gini index of ``|values|``; 0 for flat, ``1 - 1/N`` for one-hot."""
    c = np.sort(np.abs(np.ravel(values)))
    total = c.sum()
    if total == 0.0:
        return 0.0
    N = c.size
    k = np.arange(1, N + 1)
    # a flat vector can round to -eps
    return max(float(1.0 - 2.0 * np.sum((c / total) * ((N - k + 0.5) / N))), 0.0)


def mean_code_gini(alpha: np.ndarray) -> float:
    """Average Gini index over the nonzero columns (patches) of a code matrix.

    A column with no active atom has no defined Gini index and is skipped
    rather than scored as dense. Returns 0 when every column is zero.
    """
    a = np.sort(np.abs(alpha), axis=0)
    K = a.shape[0]
    totals = a.sum(axis=0)
    weights = (K - np.arange(1, K + 1) + 0.5) / K
    with np.errstate(invalid="ignore", divide="ignore"):
        gi = np.maximum(1.0 - 2.0 * (weights @ a) / totals, 0.0)
    keep = totals > 0
    return float(gi[keep].mean()) if keep.any() else 0.0


def error_map(recon: np.ndarray, truth: np.ndarray, gain: float = 4.0) -> np.ndarray:
    """Amplified absolute magnitude error, clipped to [0, 1]."""
    return np.clip(gain * np.abs(np.abs(recon) - np.abs(truth)), 0.0, 1.0)
