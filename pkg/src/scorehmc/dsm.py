"""Denoising score matching: loss, training loop, checkpoints, estimator.

The residual objective perturbs each clean sample with Gaussian noise of a
randomly drawn scale (which may be negative, putting the conditioning input
in interpolation rather than extrapolation territory) and penalizes

    || u + sigma_s * r(x + sigma_s u, sigma_s) ||^2

averaged over the batch, where ``r`` is the network's score output. At the
optimum ``r`` equals the score of the noise-convolved data density. Training
uses Adam with a spectral-norm projection of every weight matrix after each
update, and is fully deterministic given the config seed: the randomness for
step ``t`` comes from a dedicated counter-based stream, so checkpoint resume
continues the exact same draw sequence.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError

from .network import ConvLayer, ConvScoreNetwork, DenseLayer, MlpScoreNetwork
from .numerics import RngStream
from .score_models import ScoreModel
from .validation import check_float_array, check_positive

__all__ = [
    "TrainConfig",
    "TrainingDivergedError",
    "dsm_loss",
    "backprop_check",
    "train",
    "save_checkpoint",
    "load_checkpoint",
    "ScoreMatchingEstimator",
]


class TrainingDivergedError(RuntimeError):
    """Raised when the training loss stops being finite."""

    def __init__(self, step: int, losses=None):
        super().__init__(f"training loss became non-finite at step {step}")
        self.step = step
        self.losses = list(losses) if losses else []


@dataclass(frozen=True)
class TrainConfig:
    """Hyperparameters of one training run (all deterministic given ``seed``)."""

    learning_rate: float = 1e-4
    noise_scale: float = 1.0
    batch_size: int = 128
    steps: int = 1000
    beta1: float = 0.9
    beta2: float = 0.999
    adam_epsilon: float = 1e-8
    sigma_floor: float = 1e-3
    seed: int = 0

    def __post_init__(self):
        for name in ("learning_rate", "noise_scale", "adam_epsilon", "sigma_floor"):
            check_positive(getattr(self, name), name)
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.steps < 0:
            raise ValueError(f"steps must be >= 0, got {self.steps}")
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0):
            raise ValueError("Adam betas must lie in [0, 1)")


def _noise_draws(rng: RngStream, batch: np.ndarray, noise_scale: float):
    u = rng.normal(batch.shape)
    sigma_s = rng.normal(batch.shape[0]) * noise_scale
    return u, sigma_s


def _residual_terms(net, batch, u, sigma_s, train: bool):
    """Residual ``u + sigma_s * r_theta`` and the multiplier on the raw output."""
    bshape = (batch.shape[0],) + (1,) * (batch.ndim - 1)
    sig_b = sigma_s.reshape(bshape)
    noisy = batch + sig_b * u
    raw = net.forward_raw(noisy, sigma_s, train=train)
    if net.output_scaling:
        mult = sig_b / np.maximum(np.abs(sig_b), net.sigma_floor)
    else:
        mult = sig_b
    return u + mult * raw, mult


def dsm_loss(net, batch: np.ndarray, rng: RngStream, noise_scale: float,
             compute_grads: bool = True):
    """Monte-Carlo denoising score-matching loss for one batch.

    Draws fresh ``u ~ N(0, I)`` and ``sigma_s ~ N(0, noise_scale^2)`` per
    sample from ``rng`` and returns ``(loss, grads)`` where ``grads`` aligns
    with ``net.parameters()`` (or None when ``compute_grads`` is off).
    """
    batch = np.asarray(batch, dtype=np.float64)
    if batch.shape[0] == 0:
        raise ValueError("batch must be nonempty")
    check_positive(noise_scale, "noise_scale")
    u, sigma_s = _noise_draws(rng, batch, noise_scale)
    with np.errstate(over="ignore", invalid="ignore"):  # divergence is detected, not raised
        res, mult = _residual_terms(net, batch, u, sigma_s, train=compute_grads)
        b = batch.shape[0]
        loss = float(np.sum(res * res) / b)
        if not compute_grads:
            return loss, None
        net.backward(2.0 * mult * res / b)
    return loss, net.gradients()


def backprop_check(net, batch: np.ndarray, rng: RngStream,
                   noise_scale: float = 1.0, h: float = 1e-5) -> float:
    """Max relative gap between analytic and central finite-difference gradients.

    The noise draws are made once and reused for every loss evaluation, so the
    loss is a deterministic function of the parameters during the check.
    """
    batch = np.asarray(batch, dtype=np.float64)
    u, sigma_s = _noise_draws(rng, batch, noise_scale)
    b = batch.shape[0]

    def loss_only():
        res, _ = _residual_terms(net, batch, u, sigma_s, train=False)
        return float(np.sum(res * res) / b)

    res, mult = _residual_terms(net, batch, u, sigma_s, train=True)
    net.backward(2.0 * mult * res / b)
    analytic = [g.copy() for g in net.gradients()]
    g_ref = max(float(np.max(np.abs(g))) for g in analytic)
    denom_floor = max(1e-3 * g_ref, 1e-12)

    worst = 0.0
    for param, grad in zip(net.parameters(), analytic):
        flat = param.reshape(-1)
        gflat = grad.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = loss_only()
            flat[i] = orig - h
            down = loss_only()
            flat[i] = orig
            fd = (up - down) / (2.0 * h)
            gap = abs(gflat[i] - fd) / max(abs(gflat[i]), abs(fd), denom_floor)
            worst = max(worst, gap)
    return worst


class Adam:
    """Plain Adam on a list of parameter arrays, updated in place."""

    def __init__(self, params, lr: float, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8):
        self.params = list(params)
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = [np.zeros_like(p) for p in self.params]
        self.v = [np.zeros_like(p) for p in self.params]
        self.t = 0

    def step(self, grads) -> None:
        self.t += 1
        b1c = 1.0 - self.beta1 ** self.t
        b2c = 1.0 - self.beta2 ** self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p -= self.lr * (m / b1c) / (np.sqrt(v / b2c) + self.eps)


def train(net, dataset: np.ndarray, cfg: TrainConfig, start_step: int = 0,
          spectral_iters: int = 1):
    """Run ``cfg.steps`` Adam updates of the DSM loss; returns ``(net, losses)``.

    The spectral projection runs on every weight after each update (one
    warm-started power iteration per step, with a long final pass to pin the
    bound). Step ``t`` draws its batch and noise from stream ``t``, so two
    runs with the same config are bit-identical and a resumed run continues
    the same sequence.
    """
    dataset = np.asarray(dataset, dtype=np.float64)
    if dataset.shape[0] == 0:
        raise ValueError("dataset must be nonempty")
    net.sigma_floor = cfg.sigma_floor
    losses: list[float] = []
    if cfg.steps == 0:
        return net, losses
    opt = Adam(net.parameters(), cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.adam_epsilon)
    n = dataset.shape[0]
    for t in range(start_step + 1, start_step + cfg.steps + 1):
        stream = RngStream(cfg.seed, stream_id=t)
        idx = stream.integers(0, n, cfg.batch_size)
        loss, grads = dsm_loss(net, dataset[idx], stream, cfg.noise_scale)
        if not np.isfinite(loss):
            raise TrainingDivergedError(t, losses)
        losses.append(loss)
        opt.step(grads)
        net.project_spectral(iters=spectral_iters)
    net.project_spectral(iters=50)
    return net, losses


# --- checkpoint format "DSMC" -------------------------------------------------

CHECKPOINT_MAGIC = b"DSMC"
CHECKPOINT_VERSION = 1

_LAYER_TAGS = {
    ("dense", "linear", False): 0,
    ("dense", "silu", False): 1,
    ("dense", "silu", True): 2,
    ("conv", "linear", False): 16,
    ("conv", "silu", False): 17,
    ("conv", "silu", True): 18,
}
_TAGS_LAYER = {v: k for k, v in _LAYER_TAGS.items()}


def save_checkpoint(path, net, cfg: TrainConfig, step: int) -> None:
    """Serialize network, training config and step counter (little endian)."""
    path = Path(path)
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", CHECKPOINT_VERSION))
        f.write(struct.pack("<I", len(net.layers)))
        for layer in net.layers:
            tag = _LAYER_TAGS[(layer.kind, layer.activation, layer.residual)]
            rows, cols = layer.w.shape
            f.write(struct.pack("<II", rows, cols))
            f.write(layer.w.astype("<f8").tobytes())
            f.write(layer.b.astype("<f8").tobytes())
            f.write(struct.pack("<B", tag))
        f.write(struct.pack("<d?", net.spectral_target, net.output_scaling))
        f.write(struct.pack(
            "<ddQQdddd",
            cfg.learning_rate, cfg.noise_scale, cfg.batch_size, cfg.steps,
            cfg.beta1, cfg.beta2, cfg.adam_epsilon, cfg.sigma_floor,
        ))
        f.write(struct.pack("<Q", cfg.seed))
        f.write(struct.pack("<Q", step))
        f.write(struct.pack("<Q", cfg.seed))  # RNG state: streams are derived per step


def load_checkpoint(path):
    """Rebuild ``(net, cfg, step)`` from a DSMC file."""
    path = Path(path)
    with open(path, "rb") as f:
        if f.read(4) != CHECKPOINT_MAGIC:
            raise ValueError(f"{path}: not a DSMC checkpoint")
        (version,) = struct.unpack("<I", f.read(4))
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {version}")
        (n_layers,) = struct.unpack("<I", f.read(4))
        specs = []
        for _ in range(n_layers):
            rows, cols = struct.unpack("<II", f.read(8))
            w = np.frombuffer(f.read(8 * rows * cols), dtype="<f8").reshape(rows, cols).copy()
            b = np.frombuffer(f.read(8 * cols), dtype="<f8").copy()
            (tag,) = struct.unpack("<B", f.read(1))
            if tag not in _TAGS_LAYER:
                raise ValueError(f"{path}: unknown layer tag {tag}")
            specs.append((w, b, *_TAGS_LAYER[tag]))
        spectral_target, output_scaling = struct.unpack("<d?", f.read(9))
        lr, noise_scale, batch_size, steps, b1, b2, eps, floor = struct.unpack(
            "<ddQQdddd", f.read(64)
        )
        (seed,) = struct.unpack("<Q", f.read(8))
        (step,) = struct.unpack("<Q", f.read(8))
        f.read(8)  # RNG state duplicates the seed
    cfg = TrainConfig(
        learning_rate=lr, noise_scale=noise_scale, batch_size=int(batch_size),
        steps=int(steps), beta1=b1, beta2=b2, adam_epsilon=eps,
        sigma_floor=floor, seed=int(seed),
    )
    kind = specs[0][2]
    if kind == "dense":
        dim = specs[-1][0].shape[1]
        net = MlpScoreNetwork(
            dim=dim, width=specs[0][0].shape[1], hidden_layers=len(specs) - 1,
            spectral_target=spectral_target, sigma_floor=floor,
            output_scaling=output_scaling,
        )
    else:
        channels = specs[0][0].shape[0] // 9 - 1
        net = ConvScoreNetwork(
            channels=channels, features=specs[0][0].shape[1], conv_layers=len(specs),
            spectral_target=spectral_target, sigma_floor=floor,
            output_scaling=output_scaling,
        )
    for layer, (w, b, kind_, act, residual) in zip(net.layers, specs):
        if (layer.kind, layer.activation, layer.residual) != (kind_, act, residual):
            raise ValueError(f"{path}: layer structure does not match any known architecture")
        layer.w, layer.b = w, b
    return net, cfg, int(step)


# --- sklearn-style facade ------------------------------------------------------

class _RescaledScore(ScoreModel):
    """Score of the original-units data for a net trained on data / scale."""

    def __init__(self, net, scale: float):
        self.net = net
        self.scale = float(scale)
        self.dim = net.dim
        self.sigma_floor = net.sigma_floor * self.scale

    def score(self, x, sigma):
        c = self.scale
        return self.net.score(np.asarray(x) / c, np.asarray(sigma) / c) / c


class ScoreMatchingEstimator(BaseEstimator):
    """Learn a noise-conditional score field from samples, sklearn style.

    ``fit(X)`` accepts flat samples ``(N, d)`` (residual MLP) or images
    ``(N, H, W)`` / ``(N, H, W, C)`` (residual conv net). Inputs are rescaled
    to unit max magnitude before training (disable with ``normalize=False``);
    the exposed score is corrected back to original units.

    Parameters mirror :class:`TrainConfig` plus the architecture knobs; the
    trained network lands in ``network_`` after ``fit``.
    """

    def __init__(self, architecture: str = "auto", width: int = 128,
                 hidden_layers: int = 4, features: int = 24, conv_layers: int = 3,
                 spectral_target: float = 2.0, learning_rate: float = 1e-4,
                 noise_scale: float = 1.0, batch_size: int = 128, steps: int = 1000,
                 sigma_floor: float = 1e-3, normalize: bool = True, seed: int = 0):
        self.architecture = architecture
        self.width = width
        self.hidden_layers = hidden_layers
        self.features = features
        self.conv_layers = conv_layers
        self.spectral_target = spectral_target
        self.learning_rate = learning_rate
        self.noise_scale = noise_scale
        self.batch_size = batch_size
        self.steps = steps
        self.sigma_floor = sigma_floor
        self.normalize = normalize
        self.seed = seed

    def _resolve_architecture(self, X: np.ndarray) -> str:
        if self.architecture != "auto":
            return self.architecture
        return "mlp" if X.ndim == 2 else "conv"

    def fit(self, X, y=None):
        X = check_float_array(X, "X", ndim=(2, 3, 4))
        arch = self._resolve_architecture(X)
        if arch == "mlp":
            if X.ndim != 2:
                raise ValueError(f"mlp architecture expects (N, d) data, got {X.shape}")
            net = MlpScoreNetwork(
                dim=X.shape[1], width=self.width, hidden_layers=self.hidden_layers,
                spectral_target=self.spectral_target, sigma_floor=self.sigma_floor,
                seed=self.seed,
            )
            self.n_features_in_ = X.shape[1]
        elif arch == "conv":
            if X.ndim == 3:
                X = X[..., None]
            net = ConvScoreNetwork(
                channels=X.shape[-1], features=self.features, conv_layers=self.conv_layers,
                spectral_target=self.spectral_target, sigma_floor=self.sigma_floor,
                seed=self.seed,
            )
        else:
            raise ValueError(f"unknown architecture {self.architecture!r}")
        scale = float(np.max(np.abs(X))) if self.normalize else 1.0
        self.scale_ = scale if scale > 0 else 1.0
        cfg = TrainConfig(
            learning_rate=self.learning_rate, noise_scale=self.noise_scale,
            batch_size=self.batch_size, steps=self.steps,
            sigma_floor=self.sigma_floor, seed=self.seed,
        )
        net, losses = train(net, X / self.scale_, cfg)
        self.network_ = net
        self.train_config_ = cfg
        self.loss_trace_ = losses
        return self

    def _check_fitted(self):
        if not hasattr(self, "network_"):
            raise NotFittedError("this ScoreMatchingEstimator is not fitted yet")

    def as_score_model(self) -> ScoreModel:
        """The learned score in original data units, for use in samplers."""
        self._check_fitted()
        if self.scale_ == 1.0:
            return self.network_
        return _RescaledScore(self.network_, self.scale_)

    def score_field(self, X, sigma):
        """Evaluate the learned score at the given points and noise scale."""
        self._check_fitted()
        return self.as_score_model().score(np.asarray(X, dtype=np.float64), sigma)

    def denoise(self, X, sigma):
        """Expected denoised sample: ``x + sigma^2 * score(x, sigma)``."""
        X = np.asarray(X, dtype=np.float64)
        return X + float(sigma) ** 2 * self.score_field(X, sigma)
