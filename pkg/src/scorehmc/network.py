"""Trainable noise-conditional score networks with hand-rolled backprop.

Two desk-scale architectures implement the :class:`~scorehmc.score_models.ScoreModel`
interface: a residual MLP for flat signals and a small residual conv net for
images. Both take the noise scale as an extra input (a column for the MLP, a
constant map channel for the conv net) and divide the raw output by
``max(|sigma|, sigma_floor)``, so the raw network learns the well-scaled
quantity ``sigma * score`` while the exposed score stays correct as sigma
shrinks. Spectral normalization caps each layer's top singular value to keep
the learned score from blowing up in regions the data never visits.

Gradients are computed layer by layer in reverse; :func:`scorehmc.dsm.backprop_check`
validates them against finite differences.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .numerics import RngStream
from .score_models import ScoreModel

__all__ = [
    "DenseLayer",
    "ConvLayer",
    "MlpScoreNetwork",
    "ConvScoreNetwork",
    "spectral_normalize",
    "estimate_spectral_norm",
]


def _silu(z):
    with np.errstate(over="ignore"):  # exp overflow saturates the sigmoid correctly
        s = 1.0 / (1.0 + np.exp(-z))
    return z * s, s


def _silu_grad(z, s):
    return s * (1.0 + z * (1.0 - s))


def estimate_spectral_norm(weight: np.ndarray, iters: int = 10, u: np.ndarray | None = None) -> float:
    """Top singular value via power iteration; ``u`` is warm-start state (updated in place)."""
    if iters < 1:
        raise ValueError(f"power iteration needs iters >= 1, got {iters}")
    w = np.asarray(weight, dtype=np.float64)
    if u is None:
        u = np.ones(w.shape[1]) / np.sqrt(w.shape[1])
    v = None
    for _ in range(iters):
        v = w @ u
        v /= np.linalg.norm(v) + 1e-300
        u_new = w.T @ v
        n = np.linalg.norm(u_new) + 1e-300
        u[...] = u_new / n
    return float(v @ (w @ u))


def spectral_normalize(weight: np.ndarray, target: float, iters: int = 10,
                       u: np.ndarray | None = None) -> np.ndarray:
    """Rescale a matrix so its spectral norm is ``min(current, target)``.

    Matrices already below the target are returned unchanged (up to the power
    iteration estimate). Passing a persistent ``u`` vector warm-starts the
    iteration, which is what the training loop does after every update.
    """
    if target <= 0:
        raise ValueError(f"spectral target must be positive, got {target}")
    w = np.asarray(weight, dtype=np.float64)
    s = estimate_spectral_norm(w, iters=iters, u=u)
    if s > target:
        return w * (target / s)
    return w.copy()


class DenseLayer:
    """Affine map with optional SiLU activation and identity skip."""

    kind = "dense"

    def __init__(self, n_in: int, n_out: int, rng: RngStream,
                 activation: str = "silu", residual: bool = False):
        if activation not in ("silu", "linear"):
            raise ValueError(f"unknown activation {activation!r}")
        if residual and n_in != n_out:
            raise ValueError("residual dense layer needs matching widths")
        self.w = rng.normal((n_in, n_out)) * np.sqrt(2.0 / n_in)
        self.b = np.zeros(n_out)
        self.activation = activation
        self.residual = residual
        self._power_u = rng.normal(n_out)
        self._power_u /= np.linalg.norm(self._power_u)
        self._cache = None

    @property
    def weight_matrix(self) -> np.ndarray:
        return self.w

    def forward(self, x: np.ndarray, train: bool = False) -> np.ndarray:
        z = x @ self.w + self.b
        if self.activation == "silu":
            h, s = _silu(z)
        else:
            h, s = z, None
        if train:
            self._cache = (x, z, s)
        return h + x if self.residual else h

    def backward(self, dout: np.ndarray) -> np.ndarray:
        x, z, s = self._cache
        dz = dout * _silu_grad(z, s) if self.activation == "silu" else dout
        self.grad_w = x.T @ dz
        self.grad_b = dz.sum(axis=0)
        dx = dz @ self.w.T
        return dx + dout if self.residual else dx

    def project_spectral(self, target: float, iters: int) -> None:
        # in place: the optimizer holds references to this array
        s = estimate_spectral_norm(self.w, iters=iters, u=self._power_u)
        if s > target:
            self.w *= target / s


class ConvLayer:
    """3x3 same-padding convolution (NHWC) stored as a (9*C_in, C_out) matrix."""

    kind = "conv"

    def __init__(self, c_in: int, c_out: int, rng: RngStream,
                 activation: str = "silu", residual: bool = False):
        if activation not in ("silu", "linear"):
            raise ValueError(f"unknown activation {activation!r}")
        if residual and c_in != c_out:
            raise ValueError("residual conv layer needs matching channel counts")
        self.c_in, self.c_out = c_in, c_out
        self.w = rng.normal((9 * c_in, c_out)) * np.sqrt(2.0 / (9 * c_in))
        self.b = np.zeros(c_out)
        self.activation = activation
        self.residual = residual
        self._power_u = rng.normal(c_out)
        self._power_u /= np.linalg.norm(self._power_u)
        self._cache = None

    @property
    def weight_matrix(self) -> np.ndarray:
        return self.w

    @staticmethod
    def _cols(x: np.ndarray) -> np.ndarray:
        """im2col: (B, H, W, C) -> (B, H, W, 9C) patches of the padded input."""
        xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
        win = sliding_window_view(xp, (3, 3), axis=(1, 2))  # (B, H, W, C, 3, 3)
        win = win.transpose(0, 1, 2, 4, 5, 3)  # kernel-major to match w layout
        return np.ascontiguousarray(win).reshape(*x.shape[:3], 9 * x.shape[3])

    def forward(self, x: np.ndarray, train: bool = False) -> np.ndarray:
        cols = self._cols(x)
        z = cols @ self.w + self.b
        if self.activation == "silu":
            h, s = _silu(z)
        else:
            h, s = z, None
        if train:
            self._cache = (cols, z, s)
        return h + x if self.residual else h

    def backward(self, dout: np.ndarray) -> np.ndarray:
        cols, z, s = self._cache
        dz = dout * _silu_grad(z, s) if self.activation == "silu" else dout
        self.grad_w = cols.reshape(-1, cols.shape[-1]).T @ dz.reshape(-1, self.c_out)
        self.grad_b = dz.sum(axis=(0, 1, 2))
        # input gradient = dz convolved with the spatially flipped, transposed kernel
        wk = self.w.reshape(3, 3, self.c_in, self.c_out)
        wk = wk[::-1, ::-1].transpose(0, 1, 3, 2).reshape(9 * self.c_out, self.c_in)
        dx = self._cols(dz) @ wk
        return dx + dout if self.residual else dx

    def project_spectral(self, target: float, iters: int) -> None:
        # in place: the optimizer holds references to this array
        s = estimate_spectral_norm(self.w, iters=iters, u=self._power_u)
        if s > target:
            self.w *= target / s


class _LayeredScoreNetwork(ScoreModel):
    """Shared plumbing: parameter access, spectral projection, score scaling."""

    layers: list
    sigma_floor: float
    spectral_target: float
    output_scaling: bool

    def parameters(self) -> list[np.ndarray]:
        out = []
        for layer in self.layers:
            out.extend([layer.w, layer.b])
        return out

    def gradients(self) -> list[np.ndarray]:
        out = []
        for layer in self.layers:
            out.extend([layer.grad_w, layer.grad_b])
        return out

    def set_parameters(self, values) -> None:
        params = self.parameters()
        if len(values) != len(params):
            raise ValueError("parameter count mismatch")
        for layer in self.layers:
            layer.w = np.array(values[0], dtype=np.float64)
            layer.b = np.array(values[1], dtype=np.float64)
            values = values[2:]

    def project_spectral(self, iters: int = 2) -> None:
        for layer in self.layers:
            layer.project_spectral(self.spectral_target, iters)

    def spectral_norms(self) -> list[float]:
        return [float(np.linalg.svd(layer.weight_matrix, compute_uv=False)[0])
                for layer in self.layers]

    def _scale(self, sigmas: np.ndarray) -> np.ndarray:
        if not self.output_scaling:
            return np.ones_like(sigmas)
        return 1.0 / np.maximum(np.abs(sigmas), self.sigma_floor)

    def backward(self, dout: np.ndarray) -> np.ndarray:
        d = dout
        for layer in reversed(self.layers):
            d = layer.backward(d)
        return d


class MlpScoreNetwork(_LayeredScoreNetwork):
    """Residual MLP score network for flat d-dimensional signals.

    Input is ``concat(x, sigma)``; hidden layers are SiLU with identity skips
    on the width-preserving blocks.
    """

    def __init__(self, dim: int, width: int = 128, hidden_layers: int = 4,
                 spectral_target: float = 2.0, sigma_floor: float = 1e-3,
                 output_scaling: bool = True, seed: int = 0):
        if dim < 1 or width < 1 or hidden_layers < 1:
            raise ValueError("dim, width and hidden_layers must be >= 1")
        rng = RngStream(seed, stream_id=0)
        self.dim = int(dim)
        self.width = int(width)
        self.hidden_layers = int(hidden_layers)
        self.spectral_target = float(spectral_target)
        self.sigma_floor = float(sigma_floor)
        self.output_scaling = bool(output_scaling)
        self.layers = [DenseLayer(dim + 1, width, rng)]
        self.layers += [DenseLayer(width, width, rng, residual=True)
                        for _ in range(hidden_layers - 1)]
        self.layers.append(DenseLayer(width, dim, rng, activation="linear"))

    def _as_batch(self, x, sigma):
        x = np.asarray(x, dtype=np.float64)
        single = x.ndim == 1
        xb = x[None, :] if single else x
        sig = np.broadcast_to(np.asarray(sigma, dtype=np.float64), (xb.shape[0],)).copy()
        return xb, sig, single

    def forward_raw(self, x: np.ndarray, sigmas: np.ndarray, train: bool = False) -> np.ndarray:
        """Raw network output (models sigma * score); caches for backward when training."""
        z = np.concatenate([x, sigmas[:, None]], axis=1)
        for layer in self.layers:
            z = layer.forward(z, train=train)
        return z

    def score(self, x, sigma):
        xb, sig, single = self._as_batch(x, sigma)
        out = self.forward_raw(xb, sig) * self._scale(sig)[:, None]
        return out[0] if single else out


class ConvScoreNetwork(_LayeredScoreNetwork):
    """Small residual conv net for (H, W, C) images, fully convolutional.

    The noise scale enters as one constant extra channel; interior layers are
    3x3 SiLU convolutions with identity skips.
    """

    def __init__(self, channels: int = 2, features: int = 24, conv_layers: int = 3,
                 spectral_target: float = 2.0, sigma_floor: float = 1e-3,
                 output_scaling: bool = True, seed: int = 0):
        if channels < 1 or features < 1 or conv_layers < 2:
            raise ValueError("channels, features >= 1 and conv_layers >= 2 required")
        rng = RngStream(seed, stream_id=0)
        self.channels = int(channels)
        self.features = int(features)
        self.conv_layers = int(conv_layers)
        self.spectral_target = float(spectral_target)
        self.sigma_floor = float(sigma_floor)
        self.output_scaling = bool(output_scaling)
        self.dim = None  # fully convolutional: flat size depends on the input
        self.layers = [ConvLayer(channels + 1, features, rng)]
        self.layers += [ConvLayer(features, features, rng, residual=True)
                        for _ in range(conv_layers - 2)]
        self.layers.append(ConvLayer(features, channels, rng, activation="linear"))

    def _as_batch(self, x, sigma):
        x = np.asarray(x, dtype=np.float64)
        if x.ndim == 2:  # single grayscale image
            x = x[:, :, None]
        single = x.ndim == 3
        xb = x[None] if single else x
        if xb.ndim != 4 or xb.shape[-1] != self.channels:
            raise ValueError(
                f"expected (B, H, W, {self.channels}) input, got shape {np.shape(x)}"
            )
        sig = np.broadcast_to(np.asarray(sigma, dtype=np.float64), (xb.shape[0],)).copy()
        return xb, sig, single

    def forward_raw(self, x: np.ndarray, sigmas: np.ndarray, train: bool = False) -> np.ndarray:
        smap = np.broadcast_to(sigmas[:, None, None, None], (*x.shape[:3], 1))
        z = np.concatenate([x, smap], axis=3)
        for layer in self.layers:
            z = layer.forward(z, train=train)
        return z

    def score(self, x, sigma):
        xb, sig, single = self._as_batch(x, sigma)
        out = self.forward_raw(xb, sig) * self._scale(sig)[:, None, None, None]
        return out[0] if single else out
