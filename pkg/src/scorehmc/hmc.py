"""Annealed Hamiltonian Monte Carlo driven purely by score evaluations.

The target is the tempered posterior: prior score at temperature ``sigma``
plus the tempered Gaussian likelihood score. Chains start from a supplied
initializer (usually the zero-filled reconstruction) drowned in noise at
``sigma_init`` and follow a geometric temperature ladder downward, running a
few Metropolis-Hastings-corrected leapfrog proposals per temperature with a
temperature-dependent step size.

Because only scores are available, the MH ratio uses a path-integral estimate
of the log-density difference: integrating the score along the straight
segment between the current state and the proposal recovers
``log p(x*) - log p(x)`` up to quadrature error (exact for Gaussian targets,
where the integrand is linear). Kinetic energy is exact, so acceptance never
needs a normalizing constant.

All chains evolve together as one batch (score models evaluate the whole
batch in one call) while each chain draws from its own counter-based stream;
results are bit-identical however the batch is chunked across workers.
"""

from __future__ import annotations

import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator

from .numerics import RngStream, simpson_line_integral, simpson_weights
from .operators import GaussianLikelihood, zero_filled
from .score_models import ScoreModel
from .validation import check_positive

__all__ = [
    "AnnealingSchedule",
    "ChainState",
    "PosteriorSampleSet",
    "leapfrog",
    "path_integral_logdiff",
    "mh_step",
    "annealed_sample",
    "expected_denoised_sample",
    "AnnealedHMCSampler",
]


@dataclass(frozen=True)
class AnnealingSchedule:
    """Geometric temperature ladder with temperature-dependent step sizes.

    Temperatures follow ``sigma_i = sigma_init * gamma^i`` down to
    ``sigma_final`` (the last rung is clamped to it exactly); the leapfrog
    step size at temperature ``sigma`` is
    ``epsilon * (sigma / sigma_init) ** exponent``. When ``epsilon`` is None
    it defaults to ``0.1 * sigma_init``, i.e. a step a tenth of the initial
    noise scale.
    """

    sigma_init: float
    sigma_final: float = 0.01
    gamma: float = 0.995
    epsilon: float | None = None
    exponent: float = 1.5
    steps_per_temperature: int = 3

    def __post_init__(self):
        check_positive(self.sigma_init, "sigma_init")
        check_positive(self.sigma_final, "sigma_final")
        if not (0.0 < self.gamma < 1.0):
            raise ValueError(f"gamma must lie in (0, 1), got {self.gamma}")
        if self.sigma_final >= self.sigma_init:
            raise ValueError("sigma_final must be below sigma_init")
        if self.epsilon is not None:
            check_positive(self.epsilon, "epsilon")
        if self.steps_per_temperature < 1:
            raise ValueError("steps_per_temperature must be >= 1")

    @property
    def base_step(self) -> float:
        return self.epsilon if self.epsilon is not None else 0.1 * self.sigma_init

    def temperatures(self) -> np.ndarray:
        """Strictly decreasing ladder ending exactly at ``sigma_final``."""
        n = int(np.ceil(np.log(self.sigma_final / self.sigma_init) / np.log(self.gamma)))
        sigmas = self.sigma_init * self.gamma ** np.arange(n + 1)
        sigmas[-1] = self.sigma_final
        return sigmas

    def step_size(self, sigma: float) -> float:
        return self.base_step * (sigma / self.sigma_init) ** self.exponent


@dataclass
class ChainState:
    """One chain: position, momentum, temperature, stream, counters."""

    x: np.ndarray
    momentum: np.ndarray
    sigma: float
    rng: RngStream
    accepted: int = 0
    proposed: int = 0
    divergences: int = 0
    last_energy_change: float = 0.0

    def __post_init__(self):
        if self.x.shape != self.momentum.shape:
            raise ValueError("position and momentum shapes must match")

    @property
    def acceptance_rate(self) -> float:
        return self.accepted / self.proposed if self.proposed else 0.0


@dataclass
class PosteriorSampleSet:
    """Final chain states plus per-chain diagnostics and provenance."""

    samples: np.ndarray  # (n_chains, *signal_shape)
    acceptance_rates: np.ndarray
    divergences: np.ndarray
    final_sigma: float
    provenance: dict = field(default_factory=dict)
    trace: np.ndarray | None = None  # (n_kept, n_chains, *signal_shape)

    def __post_init__(self):
        n = self.samples.shape[0]
        if len(self.acceptance_rates) != n or len(self.divergences) != n:
            raise ValueError("diagnostics length must match the number of chains")

    def diagnostics_text(self) -> str:
        lines = [f"final_sigma = {self.final_sigma!r}"]
        for key in sorted(self.provenance):
            lines.append(f"{key} = {self.provenance[key]!r}")
        for i, (a, d) in enumerate(zip(self.acceptance_rates, self.divergences)):
            lines.append(f"chain {i:03d} acceptance_rate={a:.6f} divergences={int(d)}")
        rate = float(np.mean(self.divergences > 0))
        if rate > 0.5:
            lines.append(f"warning: divergence rate {rate:.2f} exceeds 0.5")
        return "\n".join(lines) + "\n"


def leapfrog(x: np.ndarray, momentum: np.ndarray, score_fn, alpha: float, n_steps: int):
    """``n_steps`` leapfrog iterations with identity mass matrix.

    Each iteration is a half momentum kick along the score, a full position
    drift, and a second half kick at the new position. Volume preserving and
    time reversible: integrating from ``(x*, -m*)`` returns ``(x, -m)``.
    ``score_fn`` maps positions to the score of the (tempered) target; inputs
    may carry a leading batch axis.
    """
    check_positive(alpha, "alpha")
    if n_steps < 1:
        raise ValueError(f"n_steps must be >= 1, got {n_steps}")
    x = np.array(x, dtype=np.float64)
    m = np.array(momentum, dtype=np.float64)
    s = np.asarray(score_fn(x), dtype=np.float64)
    for _ in range(n_steps):
        m += 0.5 * alpha * s
        x += alpha * m
        s = np.asarray(score_fn(x), dtype=np.float64)
        m += 0.5 * alpha * s
    return x, m


def _path_integral_batch(score_fn, x_from, x_to, n_points, s_from=None, s_to=None):
    """Simpson estimate of ``log p(x_to) - log p(x_from)`` per batch element.

    Endpoint scores can be passed in when already known (they always are
    inside the sampler, where the leapfrog computed them).
    """
    weights = simpson_weights(n_points)
    ts = np.linspace(0.0, 1.0, n_points)
    delta = x_to - x_from
    axes = tuple(range(1, x_from.ndim))
    out = np.zeros(x_from.shape[0])
    for i, (t, w) in enumerate(zip(ts, weights)):
        if i == 0 and s_from is not None:
            s = s_from
        elif i == n_points - 1 and s_to is not None:
            s = s_to
        else:
            s = np.asarray(score_fn(x_from + t * delta), dtype=np.float64)
        out += w * np.sum(s * delta, axis=axes)
    return out


def path_integral_logdiff(score_fn, x_from: np.ndarray, x_to: np.ndarray,
                          n_points: int = 5) -> float:
    """Log-density difference recovered by integrating the score along a segment.

    Equals ``log p(x_to) - log p(x_from)`` up to composite-Simpson error
    (exact for targets whose score is affine, e.g. Gaussians), and is exactly
    antisymmetric under swapping the endpoints. Raises if the score is
    non-finite on a quadrature node.
    """
    out = simpson_line_integral(score_fn, x_from, x_to, n_points)
    if not np.isfinite(out):
        raise ValueError("score was non-finite on a quadrature node")
    return out


def _propose_block(xs, scores, score_fn, alpha, n_steps, n_quad, rngs, mh_correction,
                   counters):
    """One MH-corrected leapfrog proposal for a batch of chains.

    ``xs`` and ``scores`` are the current positions and their scores; returns
    the updated pair. ``counters`` is a list of per-chain [accepted, proposed,
    divergences, last_energy_change] rows, mutated in place. Each chain uses
    its own stream for the momentum and the acceptance draw, so results do
    not depend on how chains are grouped into batches.
    """
    b = xs.shape[0]
    axes = tuple(range(1, xs.ndim))
    m0 = np.stack([rng.normal(xs.shape[1:]) for rng in rngs])
    x, m, s = xs.copy(), m0.copy(), scores.copy()
    for _ in range(n_steps):
        m += 0.5 * alpha * s
        x += alpha * m
        s = np.asarray(score_fn(x), dtype=np.float64)
        m += 0.5 * alpha * s
    finite = (
        np.all(np.isfinite(x), axis=axes)
        & np.all(np.isfinite(m), axis=axes)
        & np.all(np.isfinite(s), axis=axes)
    )
    if mh_correction:
        # widen the quadrature when a proposal travels far in normalized units
        displacement = np.sqrt(np.sum((x - xs) ** 2, axis=axes))
        n_quad_eff = 9 if (n_quad < 9 and np.any(displacement[finite] > 1.0)) else n_quad
        with np.errstate(invalid="ignore", over="ignore"):
            log_post = _path_integral_batch(score_fn, xs, x, n_quad_eff, s_from=scores, s_to=s)
            d_kinetic = 0.5 * (np.sum(m * m, axis=axes) - np.sum(m0 * m0, axis=axes))
            log_accept = log_post - d_kinetic
        finite &= np.isfinite(log_accept)
        draws = np.array([rng.uniform() for rng in rngs])
        accept = finite & (np.log(draws) < log_accept)
    else:
        log_accept = np.zeros(b)
        accept = finite
    for i in range(b):
        counters[i][1] += 1
        if accept[i]:
            counters[i][0] += 1
        if not finite[i]:
            counters[i][2] += 1
        counters[i][3] = float(log_accept[i]) if finite[i] else float("nan")
    keep = accept.reshape((-1,) + (1,) * (xs.ndim - 1))
    return np.where(keep, x, xs), np.where(keep, s, scores)


def mh_step(state: ChainState, score_fn, alpha: float, n_steps: int = 5,
            n_quad: int = 5, mh_correction: bool = True) -> ChainState:
    """One Metropolis-Hastings-corrected HMC step for a single chain.

    Draws fresh momentum from the chain's stream, proposes via leapfrog and
    accepts with probability ``min(1, exp(delta_logp - delta_kinetic))`` where
    the log-density change comes from the score path integral. Divergent
    proposals (non-finite anywhere) are rejected and counted separately.
    """
    counters = [[state.accepted, state.proposed, state.divergences, state.last_energy_change]]
    xs, scores = _propose_block(
        state.x[None], np.asarray(score_fn(state.x[None]), dtype=np.float64),
        score_fn, alpha, n_steps, n_quad, [state.rng], mh_correction, counters,
    )
    state.x = xs[0]
    state.accepted, state.proposed, state.divergences = (
        int(counters[0][0]), int(counters[0][1]), int(counters[0][2])
    )
    state.last_energy_change = counters[0][3]
    return state


def expected_denoised_sample(x: np.ndarray, sigma: float, score) -> np.ndarray:
    """One exact denoising step: ``x + sigma^2 * score(x, sigma)``.

    ``score`` may be a ScoreModel or any callable ``(x, sigma) -> array``.
    With the optimal denoiser identity this maps a sample of the
    sigma-blurred density to its conditional mean under the unblurred one.
    """
    if sigma < 0:
        raise ValueError(f"sigma must be >= 0, got {sigma}")
    fn = score.score if isinstance(score, ScoreModel) else score
    return np.asarray(x, dtype=np.float64) + sigma ** 2 * np.asarray(fn(x, sigma))


def _anneal_chunk(xs, rngs, score_at, schedule, sigmas, n_leapfrog, n_quad,
                  mh_correction, final_steps, final_alpha, trace_thin, keep_trace):
    """Anneal one batch of chains through the full ladder; returns finals."""
    counters = [[0, 0, 0, 0.0] for _ in rngs]
    for sigma in sigmas:
        alpha = schedule.step_size(sigma)
        fn = lambda z: score_at(z, sigma)  # noqa: E731 - tight loop closure
        scores = np.asarray(score_at(xs, sigma), dtype=np.float64)
        for _ in range(schedule.steps_per_temperature):
            xs, scores = _propose_block(
                xs, scores, fn, alpha, n_leapfrog, n_quad, rngs, mh_correction, counters
            )
    trace = []
    if final_steps:
        sigma = sigmas[-1]
        alpha = final_alpha if final_alpha is not None else schedule.step_size(sigma)
        fn = lambda z: score_at(z, sigma)  # noqa: E731
        for k in range(final_steps):
            xs, scores = _propose_block(
                xs, scores, fn, alpha, n_leapfrog, n_quad, rngs, mh_correction, counters
            )
            if keep_trace and (k + 1) % trace_thin == 0:
                trace.append(xs.copy())
    return xs, counters, trace


def annealed_sample(
    prior: ScoreModel,
    likelihood: GaussianLikelihood | None,
    schedule: AnnealingSchedule,
    n_chains: int = 8,
    init: np.ndarray | None = None,
    seed: int = 0,
    n_leapfrog: int = 5,
    n_quad: int = 5,
    mh_correction: bool = True,
    final_steps: int = 0,
    final_alpha: float | None = None,
    trace_thin: int = 5,
    keep_final_trace: bool = False,
    workers: int = 1,
) -> PosteriorSampleSet:
    """Sample the (tempered) posterior with annealed HMC.

    Each chain starts at ``init + sigma_init * N(0, I)`` — ``init`` defaults
    to the zero-filled reconstruction when a likelihood is given, else to
    zeros — and owns stream ``seed/chain_index``. Passing ``likelihood=None``
    samples the prior alone (unconditional generation). ``final_steps`` extra
    proposals run at the final temperature, optionally recording every
    ``trace_thin``-th state for moment estimates.

    The returned samples are the raw final states; apply
    :func:`expected_denoised_sample` for the usual last denoising step.
    """
    if n_chains < 1:
        raise ValueError("n_chains must be >= 1")
    sigmas = schedule.temperatures()
    floor = getattr(prior, "sigma_floor", 0.0) or 0.0
    if sigmas[-1] < floor:
        warnings.warn(
            f"schedule reaches sigma={sigmas[-1]:g} below the model floor {floor:g}; "
            "clamping the final temperatures",
            stacklevel=2,
        )
        sigmas = np.maximum(sigmas, floor)
        keep = np.ones(len(sigmas), dtype=bool)
        keep[1:] = np.diff(sigmas) < 0
        sigmas = sigmas[keep]
    if init is None:
        if likelihood is not None:
            init = zero_filled(likelihood)
        elif prior.dim is not None:
            init = np.zeros(prior.dim)
        else:
            raise ValueError("init is required when the prior has no intrinsic shape")
    init = np.asarray(init, dtype=np.float64)

    if likelihood is None:
        def score_at(x, sigma):
            return prior.score(x, sigma)
    else:
        def score_at(x, sigma):
            return prior.score(x, sigma) + likelihood.score(x, sigma)

    rngs = [RngStream(seed, stream_id=i) for i in range(n_chains)]
    xs = np.stack([init + schedule.sigma_init * rng.normal(init.shape) for rng in rngs])

    if workers > 1 and n_chains > 1:
        bounds = np.linspace(0, n_chains, min(workers, n_chains) + 1).astype(int)
        chunks = [(xs[a:b], rngs[a:b]) for a, b in zip(bounds[:-1], bounds[1:]) if b > a]
        with ThreadPoolExecutor(max_workers=len(chunks)) as pool:
            futures = [
                pool.submit(
                    _anneal_chunk, cx, crngs, score_at, schedule, sigmas, n_leapfrog,
                    n_quad, mh_correction, final_steps, final_alpha, trace_thin,
                    keep_final_trace,
                )
                for cx, crngs in chunks
            ]
            parts = [f.result() for f in futures]
        xs = np.concatenate([p[0] for p in parts])
        counters = [row for p in parts for row in p[1]]
        traces = [p[2] for p in parts]
        trace = (
            np.concatenate([np.stack(t) for t in traces], axis=1)
            if keep_final_trace and final_steps and all(len(t) for t in traces)
            else None
        )
    else:
        xs, counters, trace_list = _anneal_chunk(
            xs, rngs, score_at, schedule, sigmas, n_leapfrog, n_quad,
            mh_correction, final_steps, final_alpha, trace_thin, keep_final_trace,
        )
        trace = np.stack(trace_list) if (keep_final_trace and trace_list) else None

    counters = np.asarray(counters, dtype=np.float64)
    provenance = {
        "sigma_init": schedule.sigma_init,
        "sigma_final": float(sigmas[-1]),
        "gamma": schedule.gamma,
        "epsilon": schedule.base_step,
        "exponent": schedule.exponent,
        "steps_per_temperature": schedule.steps_per_temperature,
        "n_temperatures": len(sigmas),
        "n_leapfrog": n_leapfrog,
        "n_quad": n_quad,
        "mh_correction": mh_correction,
        "final_steps": final_steps,
        "final_alpha": final_alpha,
        "seed": seed,
        "n_chains": n_chains,
    }
    return PosteriorSampleSet(
        samples=xs,
        acceptance_rates=counters[:, 0] / np.maximum(counters[:, 1], 1.0),
        divergences=counters[:, 2].astype(np.int64),
        final_sigma=float(sigmas[-1]),
        provenance=provenance,
        trace=trace,
    )


class AnnealedHMCSampler(BaseEstimator):
    """Configurable front end for :func:`annealed_sample` (sklearn-style params)."""

    def __init__(self, sigma_init: float = 1.0, sigma_final: float = 0.01,
                 gamma: float = 0.995, epsilon: float | None = None,
                 exponent: float = 1.5, steps_per_temperature: int = 3,
                 n_leapfrog: int = 5, n_quad: int = 5, mh_correction: bool = True,
                 n_chains: int = 8, final_steps: int = 0,
                 final_alpha: float | None = None, apply_eds: bool = True,
                 seed: int = 0, workers: int = 1):
        self.sigma_init = sigma_init
        self.sigma_final = sigma_final
        self.gamma = gamma
        self.epsilon = epsilon
        self.exponent = exponent
        self.steps_per_temperature = steps_per_temperature
        self.n_leapfrog = n_leapfrog
        self.n_quad = n_quad
        self.mh_correction = mh_correction
        self.n_chains = n_chains
        self.final_steps = final_steps
        self.final_alpha = final_alpha
        self.apply_eds = apply_eds
        self.seed = seed
        self.workers = workers

    def schedule(self) -> AnnealingSchedule:
        return AnnealingSchedule(
            sigma_init=self.sigma_init, sigma_final=self.sigma_final, gamma=self.gamma,
            epsilon=self.epsilon, exponent=self.exponent,
            steps_per_temperature=self.steps_per_temperature,
        )

    def sample(self, prior: ScoreModel, likelihood: GaussianLikelihood | None = None,
               init: np.ndarray | None = None,
               keep_final_trace: bool = False) -> PosteriorSampleSet:
        """Run the annealed chains; applies the final denoising step when
        ``apply_eds`` is set (on the samples, not the kept trace)."""
        result = annealed_sample(
            prior, likelihood, self.schedule(), n_chains=self.n_chains, init=init,
            seed=self.seed, n_leapfrog=self.n_leapfrog, n_quad=self.n_quad,
            mh_correction=self.mh_correction, final_steps=self.final_steps,
            final_alpha=self.final_alpha, keep_final_trace=keep_final_trace,
            workers=self.workers,
        )
        if self.apply_eds:
            if likelihood is None:
                fn = prior.score
            else:
                def fn(x, sigma):
                    return prior.score(x, sigma) + likelihood.score(x, sigma)
            result.samples = expected_denoised_sample(
                result.samples, result.final_sigma, fn
            )
        return result
