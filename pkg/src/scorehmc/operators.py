"""Linear forward operators and their tempered Gaussian likelihood scores.

Operators map a signal ``x`` to measurement space and expose the exact
adjoint; all of them accept a leading batch axis. Complex images travel as
2-channel real arrays ``(H, W, 2)`` and are packed/unpacked at the FFT
boundary only.

For an operator with orthonormal rows, blurring the posterior with
``N(0, sigma^2 I)`` in signal space turns the Gaussian likelihood
``N(y; A x, sigma_n^2 I)`` into ``N(y; A x, (sigma_n^2 + sigma^2) I)``, so the
tempered likelihood score is ``A^T (y - A x) / (sigma_n^2 + sigma^2)``. The
same formula is reused for non-unitary operators (e.g. the blur below) as an
approximation, flagged on the likelihood object.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numerics import (
    RngStream,
    channels_to_complex,
    complex_to_channels,
    fft2,
    ifft2,
)
from .validation import check_in_unit_interval, check_positive

__all__ = [
    "ForwardOperator",
    "IdentityOperator",
    "PixelMaskOperator",
    "MaskedFourierOperator",
    "CircularBlurOperator",
    "CartesianMaskSpec",
    "make_mask",
    "GaussianLikelihood",
    "simulate_measurement",
    "zero_filled",
]


class ForwardOperator:
    """Linear map with adjoint; subclasses set ``is_unitary_rows``."""

    is_unitary_rows: bool = False
    signal_shape: tuple | None = None

    def apply(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def adjoint(self, y: np.ndarray) -> np.ndarray:
        raise NotImplementedError


class IdentityOperator(ForwardOperator):
    """Denoising: measurements live in signal space."""

    is_unitary_rows = True

    def __init__(self, signal_shape):
        self.signal_shape = tuple(signal_shape)

    def apply(self, x):
        return np.asarray(x, dtype=np.float64).copy()

    def adjoint(self, y):
        return np.asarray(y, dtype=np.float64).copy()


class PixelMaskOperator(ForwardOperator):
    """Inpainting: keep observed pixels, zero the rest (mask is 0/1)."""

    is_unitary_rows = True

    def __init__(self, mask: np.ndarray):
        self.mask = np.asarray(mask, dtype=np.float64)
        if not np.all((self.mask == 0) | (self.mask == 1)):
            raise ValueError("pixel mask must be binary")
        self.signal_shape = self.mask.shape

    def apply(self, x):
        return self.mask * np.asarray(x, dtype=np.float64)

    def adjoint(self, y):
        return self.mask * np.asarray(y, dtype=np.float64)


class MaskedFourierOperator(ForwardOperator):
    """Undersampled 2D Fourier measurements of a 2-channel complex image.

    ``apply`` packs ``(..., H, W, 2)`` into complex form, takes the unitary
    FFT, and zeroes the unsampled frequencies; measurements keep the same
    2-channel layout. With a 0/1 mask and the orthonormal FFT the retained
    rows form an orthonormal set, so the tempered likelihood is exact.
    """

    is_unitary_rows = True

    def __init__(self, mask: np.ndarray):
        mask = np.asarray(mask, dtype=np.float64)
        if mask.ndim == 1:
            raise ValueError("mask must be a 2D (H, W) array; broadcast columns first")
        if not np.all((mask == 0) | (mask == 1)):
            raise ValueError("sampling mask must be binary")
        if not np.all(mask == mask[:1, :]):
            raise ValueError("mask must be constant along rows (column sampling)")
        self.mask = mask
        self.signal_shape = (*mask.shape, 2)

    def apply(self, x):
        z = channels_to_complex(np.asarray(x, dtype=np.float64))
        return complex_to_channels(self.mask * fft2(z))

    def adjoint(self, y):
        z = channels_to_complex(np.asarray(y, dtype=np.float64))
        return complex_to_channels(ifft2(self.mask * z))


class CircularBlurOperator(ForwardOperator):
    """Circular convolution with a fixed kernel (deconvolution problems).

    Implemented in Fourier space; rows are not orthonormal, so the tempered
    likelihood built on this operator is approximate.
    """

    is_unitary_rows = False

    def __init__(self, kernel: np.ndarray, signal_shape):
        self.signal_shape = tuple(signal_shape)
        h, w = self.signal_shape
        k = np.asarray(kernel, dtype=np.float64)
        padded = np.zeros((h, w))
        kh, kw = k.shape
        padded[:kh, :kw] = k
        # center the kernel so the blur is phase-neutral
        padded = np.roll(padded, (-(kh // 2), -(kw // 2)), axis=(0, 1))
        self._spectrum = fft2(padded.astype(np.complex128)) * np.sqrt(h * w)

    def apply(self, x):
        z = np.asarray(x, dtype=np.float64).astype(np.complex128)
        return ifft2(fft2(z) * self._spectrum).real

    def adjoint(self, y):
        z = np.asarray(y, dtype=np.float64).astype(np.complex128)
        return ifft2(fft2(z) * np.conj(self._spectrum)).real


@dataclass(frozen=True)
class CartesianMaskSpec:
    """fastMRI-style column sampling: a kept center band plus random columns."""

    acceleration: int = 4
    center_fraction: float = 0.08
    seed: int = 0

    def __post_init__(self):
        if self.acceleration < 1:
            raise ValueError(f"acceleration must be >= 1, got {self.acceleration}")
        if not (0.0 <= self.center_fraction < 1.0):
            raise ValueError(f"center_fraction must lie in [0, 1), got {self.center_fraction}")


def make_mask(spec: CartesianMaskSpec, width: int, rng: RngStream | None = None) -> np.ndarray:
    """Binary column mask of length ``width`` with expected kept fraction 1/acceleration.

    The ``ceil(center_fraction * width)`` central columns are always kept;
    the others are i.i.d. Bernoulli with the probability that makes the total
    expected count ``width / acceleration``. Deterministic under the spec seed.
    """
    if width < 8:
        raise ValueError(f"mask width must be >= 8, got {width}")
    if spec.center_fraction > 1.0 / spec.acceleration:
        raise ValueError(
            f"infeasible mask: center_fraction {spec.center_fraction} exceeds "
            f"1/acceleration = {1.0 / spec.acceleration}"
        )
    if rng is None:
        rng = RngStream(spec.seed)
    n_center = int(np.ceil(spec.center_fraction * width))
    mask = np.zeros(width)
    lo = (width - n_center) // 2
    mask[lo:lo + n_center] = 1.0
    n_rest = width - n_center
    if n_rest > 0:
        p = (width / spec.acceleration - n_center) / n_rest
        p = min(max(p, 0.0), 1.0)
        draws = rng.uniform(width) < p
        mask = np.where(mask == 1.0, 1.0, draws.astype(np.float64))
    return mask


def broadcast_column_mask(column_mask: np.ndarray, height: int) -> np.ndarray:
    """Expand a length-W column mask to a (H, W) array, constant along rows."""
    column_mask = np.asarray(column_mask, dtype=np.float64)
    return np.broadcast_to(column_mask[None, :], (height, column_mask.size)).copy()


class GaussianLikelihood:
    """Tempered Gaussian likelihood score for a linear operator.

    ``score(x, sigma) = adjoint(y - apply(x)) / (sigma_n^2 + sigma^2)``,
    the exact gradient of ``log N(y; apply(x), (sigma_n^2 + sigma^2) I)`` when
    the operator has orthonormal rows; ``tempering_exact`` records whether
    that holds so samplers can surface the approximation in diagnostics.
    """

    def __init__(self, op: ForwardOperator, y: np.ndarray, sigma_n: float):
        self.op = op
        self.y = np.asarray(y, dtype=np.float64)
        self.sigma_n = check_positive(sigma_n, "sigma_n")
        self.tempering_exact = bool(op.is_unitary_rows)

    def residual(self, x: np.ndarray) -> np.ndarray:
        fx = self.op.apply(x)
        if fx.shape[-self.y.ndim:] != self.y.shape or fx.ndim > self.y.ndim + 1:
            raise ValueError(
                f"measurement shape {self.y.shape} does not match forward output "
                f"{fx.shape}"
            )
        y = self.y[None] if fx.ndim == self.y.ndim + 1 else self.y
        return y - fx

    def score(self, x, sigma) -> np.ndarray:
        return self.op.adjoint(self.residual(x)) / (self.sigma_n ** 2 + float(sigma) ** 2)

    def log_density(self, x, sigma=0.0) -> float:
        """Tempered log likelihood up to its x-independent constant."""
        r = self.residual(np.asarray(x, dtype=np.float64))
        return -0.5 * float(np.sum(r * r)) / (self.sigma_n ** 2 + float(sigma) ** 2)


def simulate_measurement(op: ForwardOperator, x_true: np.ndarray, sigma_n: float,
                         rng: RngStream) -> np.ndarray:
    """Noisy forward measurement ``apply(x) + sigma_n * n`` with ``n ~ N(0, I)``.

    For masked operators the noise is only added on the sampled coordinates
    (the measurement keeps the zero-filled layout).
    """
    if sigma_n < 0:
        raise ValueError(f"sigma_n must be >= 0, got {sigma_n}")
    y = op.apply(np.asarray(x_true, dtype=np.float64))
    if sigma_n == 0:
        return y
    noise = sigma_n * rng.normal(y.shape)
    if isinstance(op, MaskedFourierOperator):
        noise = noise * op.mask[..., None]
    elif isinstance(op, PixelMaskOperator):
        noise = noise * op.mask
    return y + noise


def zero_filled(lik: GaussianLikelihood) -> np.ndarray:
    """Adjoint reconstruction ``A^T y`` (the standard naive baseline)."""
    return lik.op.adjoint(lik.y)
