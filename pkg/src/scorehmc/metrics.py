"""Reconstruction metrics and pixelwise posterior uncertainty maps."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .validation import check_positive

__all__ = ["psnr", "UncertaintyMap", "uncertainty_map"]

PSNR_CAP_DB = 160.0


def psnr(reference: np.ndarray, estimate: np.ndarray, peak: float) -> float:
    """Peak signal-to-noise ratio ``10 log10(peak^2 / MSE)`` in dB.

    Capped at 160 dB once the MSE drops below ``peak^2 * 1e-16`` (including
    the exact-match case), so identical images report a finite value.
    """
    reference = np.asarray(reference, dtype=np.float64)
    estimate = np.asarray(estimate, dtype=np.float64)
    if reference.shape != estimate.shape:
        raise ValueError(f"shape mismatch: {reference.shape} vs {estimate.shape}")
    check_positive(peak, "peak")
    mse = float(np.mean((reference - estimate) ** 2))
    if mse < peak * peak * 1e-16:
        return PSNR_CAP_DB
    return float(10.0 * np.log10(peak * peak / mse))


@dataclass(frozen=True)
class UncertaintyMap:
    """Pixelwise mean and (unbiased) standard deviation across posterior samples."""

    mean: np.ndarray
    std: np.ndarray
    n_samples: int


def uncertainty_map(samples) -> UncertaintyMap:
    """Summarize a posterior sample batch pixel by pixel.

    ``samples`` is an array ``(n, *signal_shape)`` or anything exposing a
    ``.samples`` attribute shaped that way (e.g. a PosteriorSampleSet).
    """
    arr = np.asarray(getattr(samples, "samples", samples), dtype=np.float64)
    if arr.shape[0] < 2:
        raise ValueError(f"need at least 2 samples for an uncertainty map, got {arr.shape[0]}")
    return UncertaintyMap(
        mean=arr.mean(axis=0),
        std=arr.std(axis=0, ddof=1),
        n_samples=arr.shape[0],
    )
