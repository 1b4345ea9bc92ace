"""Shared numeric kernels: reproducible RNG streams, unitary FFTs, quadrature.

Everything here is pure: outputs depend only on explicit inputs, and arrays
are never mutated in place. Each worker or chain is expected to own its
``RngStream`` exclusively; streams with distinct ids are independent.
"""

from __future__ import annotations

import math

import numpy as np

__all__ = [
    "RngStream",
    "gaussian_sample",
    "fft2",
    "ifft2",
    "complex_to_channels",
    "channels_to_complex",
    "simpson_line_integral",
]


class RngStream:
    """Counter-based random stream keyed by ``(seed, stream_id)``.

    Built on the Philox bit generator, so identical keys reproduce the exact
    same sequence on every platform and distinct stream ids give independent
    streams without shared state. Use :meth:`split` to derive per-worker or
    per-chain streams from one master seed.
    """

    def __init__(self, seed: int, stream_id: int = 0):
        self.seed = int(seed)
        self.stream_id = int(stream_id)
        self._gen = np.random.Generator(
            np.random.Philox(key=np.array([self.seed, self.stream_id], dtype=np.uint64))
        )

    def __repr__(self) -> str:
        return f"RngStream(seed={self.seed}, stream_id={self.stream_id})"

    def split(self, stream_id: int) -> "RngStream":
        """Fresh independent stream with the same seed and a new id."""
        return RngStream(self.seed, stream_id)

    def normal(self, shape=None) -> np.ndarray:
        """I.i.d. standard normal draws (float64)."""
        return self._gen.standard_normal(size=shape)

    def uniform(self, shape=None) -> np.ndarray:
        return self._gen.random(size=shape)

    def integers(self, low: int, high: int, size=None) -> np.ndarray:
        return self._gen.integers(low, high, size=size)

    def choice(self, n: int, size=None, p=None) -> np.ndarray:
        return self._gen.choice(n, size=size, p=p)


def gaussian_sample(rng: RngStream, shape) -> np.ndarray:
    """Standard normal tensor of the given shape from the stream."""
    return rng.normal(shape)


def _check_pow2_image(x: np.ndarray) -> None:
    h, w = x.shape[-2], x.shape[-1]
    for n in (h, w):
        if n < 1 or (n & (n - 1)) != 0:
            raise ValueError(
                f"image dimensions must be powers of two, got {h}x{w}"
            )


def fft2(img: np.ndarray) -> np.ndarray:
    """Orthonormal 2D DFT over the trailing two axes of a complex array.

    The 1/sqrt(HW) scaling is applied in both directions so the transform is
    unitary: ``ifft2(fft2(x)) == x`` and Parseval holds exactly (to roundoff).
    Leading axes are treated as batch dimensions.
    """
    img = np.asarray(img)
    _check_pow2_image(img)
    return np.fft.fft2(img, norm="ortho")


def ifft2(img: np.ndarray) -> np.ndarray:
    """Inverse of :func:`fft2` (also unitary)."""
    img = np.asarray(img)
    _check_pow2_image(img)
    return np.fft.ifft2(img, norm="ortho")


def complex_to_channels(z: np.ndarray) -> np.ndarray:
    """Pack a complex array into a real array with a trailing 2-channel axis."""
    z = np.asarray(z, dtype=np.complex128)
    return np.stack([z.real, z.imag], axis=-1)


def channels_to_complex(x: np.ndarray) -> np.ndarray:
    """Inverse of :func:`complex_to_channels` (lossless round trip)."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != 2:
        raise ValueError(f"expected trailing axis of size 2, got shape {x.shape}")
    return x[..., 0] + 1j * x[..., 1]


def simpson_weights(n_points: int) -> np.ndarray:
    """Composite Simpson weights for ``n_points = 2k+1`` equispaced nodes on [0, 1]."""
    if n_points < 3:
        raise ValueError(f"Simpson rule needs at least 3 nodes, got {n_points}")
    if n_points % 2 == 0:
        raise ValueError(f"composite Simpson needs an odd node count, got {n_points}")
    w = np.ones(n_points)
    w[1:-1:2] = 4.0
    w[2:-1:2] = 2.0
    h = 1.0 / (n_points - 1)
    return w * (h / 3.0)


def simpson_line_integral(field, a: np.ndarray, b: np.ndarray, n_points: int = 5) -> float:
    """Line integral of a vector field along the segment from ``a`` to ``b``.

    Evaluates ``integral_0^1 field(a + t (b - a)) . (b - a) dt`` with the
    composite Simpson rule on ``n_points`` nodes (``n_points = 2k+1``). Exact
    whenever the restriction of the integrand to the segment is a polynomial
    of degree <= 3 in t; for a conservative field ``grad g`` the result is
    ``g(b) - g(a)`` up to quadrature error.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"endpoint shapes differ: {a.shape} vs {b.shape}")
    weights = simpson_weights(n_points)
    delta = b - a
    if not np.any(delta):
        return 0.0
    # nodes as convex combinations with mirrored coefficient arrays, and an
    # order-independent final sum: swapping (a, b) then negates the result
    # exactly, which the samplers' acceptance bookkeeping relies on
    ts = np.linspace(0.0, 1.0, n_points)
    cs = ts[::-1]
    terms = [
        w * float(np.sum(np.asarray(field(c * a + t * b)) * delta))
        for t, c, w in zip(ts, cs, weights)
    ]
    return math.fsum(terms)
