import numpy as np
import pytest

from scorehmc.network import (
    ConvLayer,
    ConvScoreNetwork,
    DenseLayer,
    MlpScoreNetwork,
    estimate_spectral_norm,
    spectral_normalize,
)
from scorehmc.numerics import RngStream


def svd_norm(w):
    return float(np.linalg.svd(w, compute_uv=False)[0])


class TestSpectralNormalize:
    def test_identity_below_target_unchanged(self):
        w = np.eye(3)
        out = spectral_normalize(w, 2.0, iters=20)
        assert np.array_equal(out, w)

    def test_diagonal_rescaled_exactly(self):
        w = np.diag([3.0, 1.0])
        out = spectral_normalize(w, 2.0, iters=50)
        assert np.allclose(out, np.diag([2.0, 2.0 / 3.0]), atol=1e-9)
        assert svd_norm(out) == pytest.approx(2.0, abs=1e-9)

    def test_random_matrix_within_two_percent(self):
        rng = RngStream(3)
        w = rng.normal((16, 8)) * 1.5
        assert svd_norm(w) > 2.0  # make sure the projection actually binds
        out = spectral_normalize(w, 2.0, iters=50)
        assert abs(svd_norm(out) - 2.0) / 2.0 < 0.02

    @pytest.mark.parametrize("seed", [0, 1, 2])
    def test_estimate_matches_svd(self, seed):
        # power iteration approaches the top singular value from below; the
        # projection contract only needs percent-level accuracy
        rng = RngStream(seed)
        w = rng.normal((12, 20))
        est = estimate_spectral_norm(w, iters=60)
        ref = svd_norm(w)
        assert est <= ref * (1 + 1e-12)
        assert est == pytest.approx(ref, rel=1e-3)

    def test_estimate_exact_for_separated_spectrum(self):
        w = np.diag([5.0, 1.0, 0.5])
        assert estimate_spectral_norm(w, iters=40) == pytest.approx(5.0, rel=1e-12)

    def test_bad_args(self):
        with pytest.raises(ValueError):
            spectral_normalize(np.eye(2), 0.0)
        with pytest.raises(ValueError):
            estimate_spectral_norm(np.eye(2), iters=0)


def numeric_input_grad(layer, x, dout, h=1e-6):
    """Finite-difference gradient of sum(forward(x) * dout) wrt x."""
    out = np.zeros_like(x)
    flat, oflat = x.reshape(-1), out.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        up = float(np.sum(layer.forward(x) * dout))
        flat[i] = orig - h
        down = float(np.sum(layer.forward(x) * dout))
        flat[i] = orig
        oflat[i] = (up - down) / (2 * h)
    return out


class TestLayerBackward:
    @pytest.mark.parametrize("activation,residual", [
        ("silu", False), ("silu", True), ("linear", False),
    ])
    def test_dense_input_gradient(self, activation, residual):
        rng = RngStream(1)
        layer = DenseLayer(4, 4, rng, activation=activation, residual=residual)
        x = rng.normal((3, 4))
        dout = rng.normal((3, 4))
        layer.forward(x, train=True)
        dx = layer.backward(dout)
        assert np.allclose(dx, numeric_input_grad(layer, x, dout), atol=1e-7)

    @pytest.mark.parametrize("activation,residual", [
        ("silu", False), ("silu", True), ("linear", False),
    ])
    def test_conv_input_gradient(self, activation, residual):
        rng = RngStream(2)
        layer = ConvLayer(2, 2, rng, activation=activation, residual=residual)
        x = rng.normal((2, 5, 5, 2))
        dout = rng.normal((2, 5, 5, 2))
        layer.forward(x, train=True)
        dx = layer.backward(dout)
        assert np.allclose(dx, numeric_input_grad(layer, x, dout), atol=1e-6)

    def test_residual_requires_matching_shapes(self):
        rng = RngStream(0)
        with pytest.raises(ValueError):
            DenseLayer(3, 4, rng, residual=True)
        with pytest.raises(ValueError):
            ConvLayer(2, 3, rng, residual=True)


class TestScoreNetworks:
    def test_mlp_shapes_and_determinism(self):
        a = MlpScoreNetwork(dim=3, width=8, hidden_layers=3, seed=7)
        b = MlpScoreNetwork(dim=3, width=8, hidden_layers=3, seed=7)
        x = RngStream(0).normal((5, 3))
        assert a.score(x, 0.5).shape == (5, 3)
        assert a.score(x[0], 0.5).shape == (3,)
        assert np.array_equal(a.score(x, 0.5), b.score(x, 0.5))

    def test_conv_shapes(self):
        net = ConvScoreNetwork(channels=2, features=4, conv_layers=3, seed=1)
        x = RngStream(1).normal((2, 8, 8, 2))
        assert net.score(x, 0.3).shape == (2, 8, 8, 2)
        assert net.score(x[0], 0.3).shape == (8, 8, 2)

    def test_conv_grayscale_input_gets_channel_axis(self):
        net = ConvScoreNetwork(channels=1, features=4, conv_layers=3, seed=1)
        x = RngStream(1).normal((8, 8))
        assert net.score(x, 0.5).shape == (8, 8, 1)

    def test_output_scaling_floor(self):
        net = MlpScoreNetwork(dim=2, width=4, hidden_layers=2, sigma_floor=1e-3, seed=0)
        x = np.array([0.2, -0.4])
        raw = net.forward_raw(x[None], np.array([0.0]))[0]
        assert np.allclose(net.score(x, 0.0), raw / 1e-3)

    def test_score_finite_for_huge_inputs(self):
        net = MlpScoreNetwork(dim=2, width=8, hidden_layers=3, seed=3)
        assert np.all(np.isfinite(net.score(np.array([1e6, -1e6]), 0.5)))

    def test_per_sample_sigma_matches_scalar_calls(self):
        net = MlpScoreNetwork(dim=2, width=8, hidden_layers=3, seed=5)
        xs = RngStream(2).normal((3, 2))
        sig = np.array([0.1, 0.5, 1.0])
        batched = net.score(xs, sig)
        for i in range(3):
            assert np.allclose(batched[i], net.score(xs[i], sig[i]))

    def test_project_spectral_bounds_all_layers(self):
        net = MlpScoreNetwork(dim=2, width=16, hidden_layers=3, spectral_target=1.0, seed=2)
        for layer in net.layers:  # inflate weights so the projection must act
            layer.w *= 10.0
        net.project_spectral(iters=50)
        for norm in net.spectral_norms():
            assert norm <= 1.02
