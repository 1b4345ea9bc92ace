import numpy as np
import pytest

from scorehmc.hmc import (
    AnnealedHMCSampler,
    AnnealingSchedule,
    ChainState,
    annealed_sample,
    expected_denoised_sample,
    leapfrog,
    mh_step,
    path_integral_logdiff,
)
from scorehmc.numerics import RngStream
from scorehmc.operators import GaussianLikelihood, IdentityOperator
from scorehmc.score_models import (
    GaussianMixtureScore,
    IsotropicGaussianScore,
    two_moons_mixture,
)


class TestAnnealingSchedule:
    def test_ladder_monotone_and_clamped(self):
        s = AnnealingSchedule(sigma_init=1.0, sigma_final=0.05, gamma=0.9)
        temps = s.temperatures()
        assert np.all(np.diff(temps) < 0)
        assert temps[0] == 1.0
        assert temps[-1] == 0.05

    def test_step_sizes_decrease(self):
        s = AnnealingSchedule(sigma_init=2.0, sigma_final=0.1, gamma=0.95, epsilon=0.5)
        alphas = [s.step_size(t) for t in s.temperatures()]
        assert np.all(np.diff(alphas) < 0)
        assert alphas[0] == pytest.approx(0.5)

    def test_default_epsilon_tracks_sigma_init(self):
        assert AnnealingSchedule(sigma_init=4.0).base_step == pytest.approx(0.4)

    def test_validation(self):
        with pytest.raises(ValueError):
            AnnealingSchedule(sigma_init=1.0, gamma=1.0)
        with pytest.raises(ValueError):
            AnnealingSchedule(sigma_init=1.0, sigma_final=2.0)
        with pytest.raises(ValueError):
            AnnealingSchedule(sigma_init=1.0, steps_per_temperature=0)


class TestLeapfrog:
    def test_free_particle(self):
        x = np.array([0.5, -1.0])
        m = np.array([2.0, 1.0])
        zero = lambda z: np.zeros_like(z)
        x1, m1 = leapfrog(x, m, zero, alpha=0.1, n_steps=7)
        assert np.allclose(x1, x + 7 * 0.1 * m, atol=1e-14)
        assert np.allclose(m1, m, atol=1e-14)

    def test_gaussian_single_step_recurrence(self):
        # score -x, x=1, m=0, alpha=0.1: m_half=-0.05, x*=0.995, m*=-0.09975
        x1, m1 = leapfrog(np.array([1.0]), np.array([0.0]), lambda z: -z, 0.1, 1)
        assert x1[0] == pytest.approx(0.995, abs=1e-15)
        assert m1[0] == pytest.approx(-0.09975, abs=1e-15)

    def test_time_reversibility(self):
        moons = two_moons_mixture()
        score = lambda z: moons.score(z, 0.5)
        rng = RngStream(0)
        x, m = rng.normal(2), rng.normal(2)
        xf, mf = leapfrog(x, m, score, alpha=0.05, n_steps=10)
        xb, mb = leapfrog(xf, -mf, score, alpha=0.05, n_steps=10)
        assert np.max(np.abs(xb - x)) < 1e-10
        assert np.max(np.abs(-mb - m)) < 1e-10

    def test_volume_preservation_1d(self):
        # numeric Jacobian of the phase-space map has unit determinant
        mix = GaussianMixtureScore([0.5, 0.5], [[-1.0], [1.0]], [0.3, 0.3])
        score = lambda z: mix.score(z, 0.2)
        h = 1e-6

        def flow(q):
            x1, m1 = leapfrog(q[:1], q[1:], score, alpha=0.3, n_steps=3)
            return np.concatenate([x1, m1])

        q0 = np.array([0.4, -0.2])
        jac = np.zeros((2, 2))
        for j in range(2):
            up, down = q0.copy(), q0.copy()
            up[j] += h
            down[j] -= h
            jac[:, j] = (flow(up) - flow(down)) / (2 * h)
        assert np.linalg.det(jac) == pytest.approx(1.0, abs=1e-6)

    def test_energy_error_scales_quadratically(self):
        # fixed trajectory length, halved step: energy error drops ~4x
        x0 = np.array([1.0, -0.3])
        m0 = np.array([0.5, 0.8])
        energy = lambda x, m: 0.5 * float(x @ x + m @ m)
        e0 = energy(x0, m0)
        errs = []
        for alpha, n in ((0.1, 20), (0.05, 40)):
            x1, m1 = leapfrog(x0, m0, lambda z: -z, alpha, n)
            errs.append(abs(energy(x1, m1) - e0))
        assert 3.5 < errs[0] / errs[1] < 4.5

    def test_invalid_args(self):
        with pytest.raises(ValueError):
            leapfrog(np.zeros(2), np.zeros(2), lambda z: -z, alpha=0.0, n_steps=1)
        with pytest.raises(ValueError):
            leapfrog(np.zeros(2), np.zeros(2), lambda z: -z, alpha=0.1, n_steps=0)


class TestPathIntegral:
    def test_zero_for_equal_endpoints(self):
        a = np.array([0.3, 0.4])
        assert path_integral_logdiff(lambda z: -z, a, a.copy()) == 0.0

    def test_gaussian_exact(self):
        got = path_integral_logdiff(lambda z: -z, np.zeros(2), np.array([2.0, 0.0]), 5)
        assert got == pytest.approx(-2.0, abs=1e-12)

    def test_two_moons_short_steps_accurate(self):
        moons = two_moons_mixture()
        sigma = 0.3
        rng = RngStream(1)
        starts = moons.sample(100, rng, sigma=sigma)
        for a in starts:
            d = rng.normal(2)
            d *= rng.uniform() * 0.5 / np.linalg.norm(d)
            b = a + d
            est = path_integral_logdiff(lambda z: moons.score(z, sigma), a, b, 9)
            exact = moons.log_density(b, sigma) - moons.log_density(a, sigma)
            assert abs(est - exact) < 1e-3

    def test_exact_antisymmetry(self):
        moons = two_moons_mixture()
        score = lambda z: moons.score(z, 0.4)
        rng = RngStream(2)
        for _ in range(20):
            a, b = rng.normal(2), rng.normal(2)
            fwd = path_integral_logdiff(score, a, b, 7)
            bwd = path_integral_logdiff(score, b, a, 7)
            assert fwd == -bwd  # bit-exact, not approximate

    def test_non_finite_score_raises(self):
        def bad(z):
            return np.full_like(z, np.nan)

        with pytest.raises(ValueError, match="non-finite"):
            path_integral_logdiff(bad, np.zeros(2), np.ones(2), 5)


def run_chain(score_fn, x0, rng, n, alpha, n_steps=5, mh=True):
    state = ChainState(x=x0.copy(), momentum=np.zeros_like(x0), sigma=0.0, rng=rng)
    samples = np.empty((n, x0.size))
    for i in range(n):
        state = mh_step(state, score_fn, alpha, n_steps=n_steps, mh_correction=mh)
        samples[i] = state.x
    return samples, state


class TestMhStep:
    def test_gaussian_target_moments(self):
        score = lambda z: -z
        samples, state = run_chain(score, np.zeros(2), RngStream(3), 10_000, alpha=0.8)
        n_eff = len(samples) / 5.0  # conservative correlation allowance
        assert np.all(np.abs(samples.mean(axis=0)) < 3.0 / np.sqrt(n_eff))
        cov = np.cov(samples.T)
        assert np.linalg.norm(cov - np.eye(2)) / np.linalg.norm(np.eye(2)) < 0.10
        assert 0.3 < state.acceptance_rate <= 1.0

    def test_tiny_step_acceptance_near_one(self):
        score = lambda z: -z
        _, state = run_chain(score, np.ones(2), RngStream(4), 200, alpha=1e-4)
        assert state.acceptance_rate > 0.99

    def test_divergent_proposal_rejected_and_counted(self):
        def fragile(z):
            out = -z.copy()
            out[np.abs(z) > 1.5] = np.nan
            return out

        x0 = np.array([1.4, 0.0])
        state = ChainState(x=x0.copy(), momentum=np.zeros(2), sigma=0.0, rng=RngStream(5))
        diverged = False
        for _ in range(50):
            before = state.x.copy()
            prev_div = state.divergences
            state = mh_step(state, fragile, alpha=1.0, n_steps=10)
            if state.divergences > prev_div:
                assert np.array_equal(state.x, before)  # rejected in place
                diverged = True
        assert diverged
        assert np.all(np.isfinite(state.x))

    def test_quadrature_widens_for_long_proposals(self):
        # proposals traveling beyond unit length escalate 5-node Simpson to 9
        calls = {"n": 0}

        def counting_score(z):
            calls["n"] += 1
            return -0.05 * z

        def run(alpha):
            calls["n"] = 0
            state = ChainState(x=np.full(2, 3.0), momentum=np.zeros(2), sigma=0.0,
                               rng=RngStream(12))
            mh_step(state, counting_score, alpha, n_steps=4, n_quad=5)
            return calls["n"]

        short = run(1e-3)  # displacement well under 1
        long = run(1.0)  # displacement above 1
        # 1 initial + 4 leapfrog + (n_quad - 2) interior nodes
        assert short == 1 + 4 + 3
        assert long == 1 + 4 + 7

    def test_score_only_mh_matches_density_oracle(self):
        # identical accept decisions as an oracle that uses closed-form log densities
        target = IsotropicGaussianScore(np.zeros(2), 1.0)
        alpha, n_steps = 0.7, 5

        score_chain, _ = run_chain(
            lambda z: target.score(z, 0.0), np.array([1.0, -0.5]), RngStream(6), 300, alpha
        )

        rng = RngStream(6)  # same stream: same momenta and uniforms
        x = np.array([1.0, -0.5])
        oracle_chain = np.empty((300, 2))
        for i in range(300):
            m0 = rng.normal(x.shape)
            xs, ms = leapfrog(x, m0, lambda z: target.score(z, 0.0), alpha, n_steps)
            log_acc = (
                target.log_density(xs, 0.0)
                - target.log_density(x, 0.0)
                - 0.5 * float(ms @ ms - m0 @ m0)
            )
            if np.log(rng.uniform()) < log_acc:
                x = xs
            oracle_chain[i] = x
        assert np.allclose(score_chain, oracle_chain, atol=1e-9)


class TestEds:
    def test_sigma_zero_is_identity(self):
        g = IsotropicGaussianScore(np.zeros(2), 1.0)
        x = np.array([2.0, -1.0])
        assert np.array_equal(expected_denoised_sample(x, 0.0, g), x)

    def test_gaussian_shrinkage(self):
        g = IsotropicGaussianScore(np.zeros(2), 1.0)
        out = expected_denoised_sample(np.array([2.0, 0.0]), 1.0, g)
        assert np.allclose(out, [1.0, 0.0])

    def test_mode_is_fixed_point(self):
        mean = np.array([0.7, -0.3])
        g = IsotropicGaussianScore(mean, 2.0)
        assert np.allclose(expected_denoised_sample(mean.copy(), 0.8, g), mean)

    def test_accepts_plain_callable(self):
        out = expected_denoised_sample(np.ones(2), 1.0, lambda x, s: -x / 2.0)
        assert np.allclose(out, 0.5)

    def test_negative_sigma_rejected(self):
        with pytest.raises(ValueError):
            expected_denoised_sample(np.ones(2), -0.1, lambda x, s: x)


class TestAnnealedSample:
    def schedule(self, **kw):
        defaults = dict(sigma_init=1.0, sigma_final=0.05, gamma=0.9,
                        steps_per_temperature=2)
        defaults.update(kw)
        return AnnealingSchedule(**defaults)

    def test_deterministic_rerun(self):
        prior = IsotropicGaussianScore(np.zeros(3), 1.0)
        a = annealed_sample(prior, None, self.schedule(), n_chains=2, seed=5)
        b = annealed_sample(prior, None, self.schedule(), n_chains=2, seed=5)
        assert a.samples.tobytes() == b.samples.tobytes()
        assert np.array_equal(a.acceptance_rates, b.acceptance_rates)

    def test_workers_do_not_change_results(self):
        prior = IsotropicGaussianScore(np.zeros(2), 1.0)
        one = annealed_sample(prior, None, self.schedule(), n_chains=4, seed=7, workers=1)
        two = annealed_sample(prior, None, self.schedule(), n_chains=4, seed=7, workers=2)
        assert one.samples.tobytes() == two.samples.tobytes()

    def test_prior_only_tempered_moments(self):
        # final states follow N(mean, (tau2 + sigma_final^2) I); the final
        # block uses a step sized for the stationary target, not the anneal
        prior = IsotropicGaussianScore(np.zeros(2), 1.0)
        out = annealed_sample(
            prior, None, self.schedule(sigma_final=0.1), n_chains=32, seed=1,
            final_steps=200, final_alpha=0.7, trace_thin=4, keep_final_trace=True,
        )
        assert out.trace is not None
        draws = out.trace.reshape(-1, 2)
        n = draws.shape[0]
        target_var = 1.0 + 0.1 ** 2
        se = np.sqrt(target_var / (n / 4))  # allowance for residual correlation
        assert np.all(np.abs(draws.mean(axis=0)) < 4 * se)
        assert draws.var(axis=0) == pytest.approx(target_var, rel=0.15)

    def test_conjugate_posterior_identity_operator(self):
        d = 4
        tau2, sigma_n = 1.0, 0.5
        prior = IsotropicGaussianScore(np.zeros(d), tau2)
        x_true = RngStream(8).normal(d)
        op = IdentityOperator((d,))
        from scorehmc.operators import simulate_measurement
        y = simulate_measurement(op, x_true, sigma_n, RngStream(9))
        lik = GaussianLikelihood(op, y, sigma_n)
        post_var = 1.0 / (1.0 / tau2 + 1.0 / sigma_n ** 2)
        post_mean = post_var * y / sigma_n ** 2
        out = annealed_sample(
            prior, lik, self.schedule(sigma_final=0.02, gamma=0.95), n_chains=16,
            seed=10, final_steps=150, final_alpha=0.3 * np.sqrt(post_var),
            trace_thin=5, keep_final_trace=True,
        )
        draws = out.trace.reshape(-1, d)
        err = np.abs(draws.mean(axis=0) - post_mean)
        se = np.sqrt(post_var / (draws.shape[0] / 4))
        assert np.all(err < 4 * se)

    def test_divergence_free_on_smooth_target(self):
        prior = IsotropicGaussianScore(np.zeros(2), 1.0)
        out = annealed_sample(prior, None, self.schedule(), n_chains=4, seed=2)
        assert np.all(out.divergences == 0)
        assert np.all(out.acceptance_rates > 0.5)

    def test_floor_clamps_and_warns(self):
        prior = IsotropicGaussianScore(np.zeros(2), 1.0)
        prior.sigma_floor = 0.2
        with pytest.warns(UserWarning, match="clamping"):
            out = annealed_sample(prior, None, self.schedule(sigma_final=0.01),
                                  n_chains=2, seed=3)
        assert out.final_sigma == pytest.approx(0.2)

    def test_init_required_without_shape(self):
        class Shapeless:
            dim = None
            sigma_floor = 0.0

            def score(self, x, sigma):
                return -x

        from scorehmc.score_models import ScoreModel
        ScoreModel.register(Shapeless)
        with pytest.raises(ValueError, match="init is required"):
            annealed_sample(Shapeless(), None, self.schedule(), n_chains=2, seed=0)

    def test_diagnostics_text_format(self):
        prior = IsotropicGaussianScore(np.zeros(2), 1.0)
        out = annealed_sample(prior, None, self.schedule(), n_chains=3, seed=4)
        text = out.diagnostics_text()
        assert text.count("acceptance_rate=") == 3
        assert "final_sigma" in text


class TestAnnealedHMCSampler:
    def test_sklearn_params_round_trip(self):
        from sklearn.base import clone
        s = AnnealedHMCSampler(sigma_init=2.0, n_chains=4, seed=3)
        assert clone(s).get_params() == s.get_params()

    def test_eds_applied_when_requested(self):
        prior = IsotropicGaussianScore(np.zeros(2), 1.0)
        raw = AnnealedHMCSampler(sigma_init=1.0, sigma_final=0.3, gamma=0.9,
                                 n_chains=4, seed=6, apply_eds=False).sample(prior)
        eds = AnnealedHMCSampler(sigma_init=1.0, sigma_final=0.3, gamma=0.9,
                                 n_chains=4, seed=6, apply_eds=True).sample(prior)
        expect = expected_denoised_sample(raw.samples, raw.final_sigma, prior)
        assert np.allclose(eds.samples, expect)
