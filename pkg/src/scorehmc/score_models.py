"""Noise-conditional score models with exact Gaussian-convolved forms.

A score model evaluates ``score(x, sigma) ~= grad_x log p_sigma(x)`` where
``p_sigma = p * N(0, sigma^2 I)`` is the target density blurred with isotropic
Gaussian noise of scale ``sigma``. The analytic families below stay closed
under that convolution, so they double as exact oracles for the learned
models and for the sampler's Metropolis-Hastings machinery.

Convention: ``x`` may be a single point of shape ``signal_shape`` or a batch
with one extra leading axis; the output always matches the input shape.
``sigma`` is a scalar, or a length-B array for batched input.
"""

from __future__ import annotations

from abc import ABC, abstractmethod

import numpy as np

from .numerics import RngStream

__all__ = [
    "ScoreModel",
    "IsotropicGaussianScore",
    "GaussianMixtureScore",
    "two_moons_mixture",
]


class ScoreModel(ABC):
    """Interface shared by analytic and learned score functions."""

    #: flat signal dimension, or None when only known at call time
    dim: int | None = None

    @abstractmethod
    def score(self, x: np.ndarray, sigma) -> np.ndarray:
        """Score of the sigma-convolved density at ``x``; same shape as ``x``."""


class IsotropicGaussianScore(ScoreModel):
    """Gaussian prior ``N(mean, tau2 I)``; convolution just adds variances.

    ``score(x, sigma) = (mean - x) / (tau2 + sigma^2)`` exactly.
    """

    def __init__(self, mean: np.ndarray, tau2: float):
        self.mean = np.asarray(mean, dtype=np.float64)
        if tau2 <= 0:
            raise ValueError(f"tau2 must be positive, got {tau2}")
        self.tau2 = float(tau2)
        self.dim = self.mean.size

    def score(self, x, sigma):
        x = np.asarray(x, dtype=np.float64)
        sig2 = np.square(np.asarray(sigma, dtype=np.float64))
        if sig2.ndim == 1:  # per-sample scales for batched input
            sig2 = sig2.reshape((-1,) + (1,) * (x.ndim - 1))
        return (self.mean - x) / (self.tau2 + sig2)

    def log_density(self, x, sigma=0.0) -> float:
        x = np.asarray(x, dtype=np.float64)
        v = self.tau2 + float(sigma) ** 2
        d = self.mean.size
        sq = float(np.sum((x - self.mean) ** 2))
        return -0.5 * (d * np.log(2.0 * np.pi * v) + sq / v)

    def sample(self, n: int, rng: RngStream, sigma: float = 0.0) -> np.ndarray:
        std = np.sqrt(self.tau2 + sigma ** 2)
        return self.mean + std * rng.normal((n, *self.mean.shape))


class GaussianMixtureScore(ScoreModel):
    """Mixture of isotropic Gaussians with exact convolved score and density.

    Convolving with ``N(0, sigma^2 I)`` keeps the mixture form and shifts each
    component variance to ``v_k + sigma^2``; the score is the exact gradient
    of the convolved log density, computed with log-sum-exp stabilization so
    it stays finite far from the mass.
    """

    def __init__(self, weights, means, variances):
        self.weights = np.asarray(weights, dtype=np.float64)
        self.means = np.asarray(means, dtype=np.float64)
        self.variances = np.asarray(variances, dtype=np.float64)
        if self.means.ndim != 2:
            raise ValueError("means must be a (K, d) array")
        k = self.means.shape[0]
        if self.weights.shape != (k,) or self.variances.shape != (k,):
            raise ValueError("weights, means and variances must share K")
        if abs(self.weights.sum() - 1.0) > 1e-12:
            raise ValueError(f"weights must sum to 1, got {self.weights.sum()!r}")
        if np.any(self.weights < 0):
            raise ValueError("weights must be nonnegative")
        if np.any(self.variances <= 0):
            raise ValueError("component variances must be positive")
        self.dim = self.means.shape[1]

    def _as_batch(self, x):
        x = np.asarray(x, dtype=np.float64)
        single = x.ndim == 1
        return (x[None, :] if single else x), single

    def _log_terms(self, xb, sigma):
        """Per-component log(w_k N(x; mu_k, (v_k + sigma^2) I)) plus helpers."""
        sig2 = np.square(np.asarray(sigma, dtype=np.float64))
        v = self.variances[None, :] + (sig2[:, None] if sig2.ndim == 1 else sig2)  # (B or 1, K)
        diff = xb[:, None, :] - self.means[None, :, :]  # (B, K, d)
        sq = np.sum(diff * diff, axis=2)  # (B, K)
        logs = np.log(self.weights)[None, :] - 0.5 * (self.dim * np.log(2.0 * np.pi * v) + sq / v)
        return logs, diff, v

    def score(self, x, sigma):
        xb, single = self._as_batch(x)
        logs, diff, v = self._log_terms(xb, sigma)
        m = np.max(logs, axis=1, keepdims=True)
        resp = np.exp(logs - m)
        resp /= np.sum(resp, axis=1, keepdims=True)
        out = np.sum(resp[:, :, None] * (-diff / v[:, :, None]), axis=1)
        return out[0] if single else out

    def log_density(self, x, sigma=0.0):
        """Log of the normalized sigma-convolved mixture density."""
        xb, single = self._as_batch(x)
        logs, _, _ = self._log_terms(xb, sigma)
        m = np.max(logs, axis=1)
        out = m + np.log(np.sum(np.exp(logs - m[:, None]), axis=1))
        return float(out[0]) if single else out

    def sample(self, n: int, rng: RngStream, sigma: float = 0.0) -> np.ndarray:
        """Exact i.i.d. draws from the sigma-convolved mixture."""
        ks = rng.choice(len(self.weights), size=n, p=self.weights)
        std = np.sqrt(self.variances[ks] + sigma ** 2)
        return self.means[ks] + std[:, None] * rng.normal((n, self.dim))


def two_moons_mixture(
    components_per_arc: int = 16,
    radius: float = 1.0,
    noise: float = 0.1,
) -> GaussianMixtureScore:
    """Two-moons density as a Gaussian mixture with closed-form score.

    Component centers sit on two opposing semicircular arcs (the lower arc is
    shifted right by ``radius`` and down to interleave with the upper one),
    each blurred with an isotropic kernel of std ``noise``. Being a mixture,
    the tempered score and log density stay exact at every noise level.
    """
    k = int(components_per_arc)
    if k < 1:
        raise ValueError("need at least one component per arc")
    t = np.linspace(0.0, np.pi, k)
    upper = np.stack([radius * np.cos(t), radius * np.sin(t)], axis=1)
    lower = np.stack([radius - radius * np.cos(t), -radius * np.sin(t) + radius / 2.0], axis=1)
    means = np.concatenate([upper, lower], axis=0)
    weights = np.full(2 * k, 1.0 / (2 * k))
    variances = np.full(2 * k, float(noise) ** 2)
    return GaussianMixtureScore(weights, means, variances)
