import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from nsf_rom.exceptions import ArchitectureError, ShapeError
from nsf_rom.nn import (
    MLP,
    AdamConfig,
    AdamState,
    Conv1d,
    Encoder,
    Standardizer,
    adam_step,
    conv_output_length,
    elu,
    elu_grad,
    encoder_lengths,
    normalize_dataset,
    xavier_bound,
    xavier_init,
    ParamLayout,
)

FD_H = 1e-6
N_INSTANCES = 100


def rel_err(a, b):
    a, b = np.ravel(a), np.ravel(b)
    scale = max(np.linalg.norm(a), np.linalg.norm(b), 1e-300)
    return np.linalg.norm(a - b) / scale


def central_diff(f, x, h=FD_H):
    x = np.array(x, dtype=float)
    out = np.empty(x.shape)
    for idx in np.ndindex(x.shape):
        xp, xm = x.copy(), x.copy()
        xp[idx] += h
        xm[idx] -= h
        out[idx] = (f(xp) - f(xm)) / (2 * h)
    return out


class TestElu:
    def test_values(self):
        assert elu(0.0) == 0.0
        assert elu(1.0) == 1.0
        assert elu(-1.0) == pytest.approx(-0.6321205588285577, abs=1e-15)
        assert elu(2.5) == 2.5

    def test_derivative_continuous_at_zero(self):
        assert elu_grad(0.0) == 1.0
        assert elu_grad(-1e-12) == pytest.approx(1.0)
        assert elu_grad(1e-12) == 1.0

    def test_array_shape_kept(self, rng):
        x = rng.normal(size=(4, 5))
        np.testing.assert_allclose(elu(x), np.where(x > 0, x, np.exp(x) - 1))

    def test_gradient_fd(self, rng):
        for _ in range(N_INSTANCES):
            x = rng.normal(size=8)
            x = x[np.abs(x) > 1e-3]
            w = rng.normal(size=x.shape)
            fd = central_diff(lambda v: w @ elu(v), x)
            assert rel_err(w * elu_grad(x), fd) < 1e-6


class TestXavier:
    def test_bound(self):
        assert xavier_bound(3, 3) == 1.0

    def test_deterministic_and_bounded(self):
        net = MLP(3, 2, 3, hidden_layers=2, width=5)
        a, b = net.init(7), net.init(7)
        np.testing.assert_array_equal(a, b)
        p = net.layout.views(a)
        assert np.all(p["b0"] == 0) and np.all(p["b2"] == 0)
        assert np.all(np.abs(p["W1"]) <= xavier_bound(5, 5))

    def test_variance(self):
        layout = ParamLayout([("W", (100, 100)), ("b", (100,))])
        theta = xavier_init(layout, {"W": (100, 100)}, seed=3)
        w = layout.views(theta)["W"]
        assert np.var(w) == pytest.approx(2 / 200, rel=0.2)


def small_mlp(rng, hidden_layers=None):
    layers = int(rng.integers(0, 4)) if hidden_layers is None else hidden_layers
    net = MLP(3, int(rng.integers(1, 4)), int(rng.integers(1, 4)), hidden_layers=layers, width=int(rng.integers(2, 9)))
    theta = net.init(int(rng.integers(1 << 30))) + rng.normal(scale=0.1, size=net.layout.size)
    X = rng.normal(size=(int(rng.integers(1, 5)), 3))
    z = rng.normal(size=(int(rng.integers(1, 4)), net.code_dim))
    return net, theta, X, z


class TestMLP:
    def test_zero_weights_give_bias(self):
        net = MLP(3, 2, 3, hidden_layers=2, width=4)
        theta = net.layout.zeros()
        net.layout.views(theta)["b2"][...] = [1.0, 2.0, 3.0]
        out = net.forward(theta, np.ones((5, 3)), np.ones((2, 2)))
        np.testing.assert_array_equal(out, np.broadcast_to([1.0, 2.0, 3.0], (2, 5, 3)))

    def test_linear_mode(self, rng):
        net = MLP(3, 2, 4, hidden_layers=0)
        theta = rng.normal(size=net.layout.size)
        p = net.layout.views(theta)
        X, z = rng.normal(size=(6, 3)), rng.normal(size=(1, 2))
        W = np.vstack([p["W0x"], p["W0z"]])
        inp = np.hstack([X, np.repeat(z, 6, axis=0)])
        np.testing.assert_allclose(net.forward(theta, X, z)[0], inp @ W + p["b0"], rtol=1e-14, atol=1e-14)

    def test_shape_errors(self):
        net = MLP(3, 2, 3, hidden_layers=1, width=4)
        theta = net.init(0)
        with pytest.raises(ShapeError):
            net.forward(theta, np.ones((5, 2)), np.ones((1, 2)))
        with pytest.raises(ShapeError):
            net.forward(theta, np.ones((5, 3)), np.ones((1, 3)))
        with pytest.raises(ShapeError):
            net.forward(theta[:-1], np.ones((5, 3)), np.ones((1, 2)))

    def test_bad_width(self):
        with pytest.raises(ArchitectureError):
            MLP(3, 2, 3, width=0)

    def _loss(self, net, W, theta, X, z):
        return float(np.sum(W * net.forward(theta, X, z)))

    def test_parameter_gradients(self, rng):
        for _ in range(N_INSTANCES):
            net, theta, X, z = small_mlp(rng)
            W = rng.normal(size=(z.shape[0], X.shape[0], net.out_dim))
            _, cache = net.forward(theta, X, z, cache=True)
            g, _, _ = net.backward(theta, cache, W)
            fd = central_diff(lambda t: self._loss(net, W, t, X, z), theta)
            assert rel_err(g, fd) < 1e-6

    def test_input_and_code_gradients(self, rng):
        for _ in range(N_INSTANCES):
            net, theta, X, z = small_mlp(rng)
            W = rng.normal(size=(z.shape[0], X.shape[0], net.out_dim))
            _, cache = net.forward(theta, X, z, cache=True)
            _, gX, gz = net.backward(theta, cache, W)
            assert rel_err(gX, central_diff(lambda v: self._loss(net, W, theta, v, z), X)) < 1e-6
            assert rel_err(gz, central_diff(lambda v: self._loss(net, W, theta, X, v), z)) < 1e-6

    def test_code_jacobian(self, rng):
        for _ in range(N_INSTANCES):
            net, theta, X, z = small_mlp(rng)
            J = net.code_jacobian(theta, X, z[:1])
            fd = np.stack([
                (net.forward(theta, X, z[:1] + FD_H * e)[0] - net.forward(theta, X, z[:1] - FD_H * e)[0]) / (2 * FD_H)
                for e in np.eye(net.code_dim)
            ], axis=-1)
            assert J.shape == (X.shape[0], net.out_dim, net.code_dim)
            assert rel_err(J, fd) < 1e-6

    def test_code_jacobian_matches_backward(self, rng):
        net, theta, X, z = small_mlp(rng, hidden_layers=3)
        J = net.code_jacobian(theta, X, z[:1])
        W = rng.normal(size=(1, X.shape[0], net.out_dim))
        _, cache = net.forward(theta, X, z[:1], cache=True)
        _, _, gz = net.backward(theta, cache, W)
        np.testing.assert_allclose(np.einsum("pd,pdr->r", W[0], J), gz[0], rtol=1e-12)


class TestConv:
    def test_length_example(self):
        assert encoder_lengths(1000) == [1000, 249, 61, 14, 3]
        enc = Encoder(1000, 4)
        assert enc.flat_dim == 9

    @given(st.integers(6, 100000))
    @settings(max_examples=200, deadline=None)
    def test_length_recurrence(self, L):
        assert conv_output_length(L) == (L - 6) // 4 + 1
        lengths = encoder_lengths(L)
        assert lengths[-1] <= 12 and all(x > 12 for x in lengths[:-1])

    def test_too_few_points(self):
        with pytest.raises(ArchitectureError):
            Encoder(5, 3)

    def test_conv_matches_direct_sum(self, rng):
        conv = Conv1d(3, 3)
        W, b = rng.normal(size=(3, 3, 6)), rng.normal(size=3)
        x = rng.normal(size=(2, 3, 30))
        y, _ = conv.forward(W, b, x)
        L_out = conv_output_length(30)
        ref = np.empty((2, 3, L_out))
        for k in range(2):
            for o in range(3):
                for l in range(L_out):
                    ref[k, o, l] = np.sum(W[o] * x[k, :, 4 * l : 4 * l + 6]) + b[o]
        np.testing.assert_allclose(y, ref, rtol=1e-13)

    def test_conv_gradients(self, rng):
        conv = Conv1d(3, 3)
        for _ in range(N_INSTANCES):
            L = int(rng.integers(6, 40))
            W, b = rng.normal(size=(3, 3, 6)), rng.normal(size=3)
            x = rng.normal(size=(int(rng.integers(1, 3)), 3, L))
            y, win = conv.forward(W, b, x)
            G = rng.normal(size=y.shape)
            gW, gb, gx = conv.backward(W, win, L, G)
            assert rel_err(gW, central_diff(lambda v: np.sum(G * conv.forward(v, b, x)[0]), W)) < 1e-6
            assert rel_err(gb, central_diff(lambda v: np.sum(G * conv.forward(W, v, x)[0]), b)) < 1e-6
            assert rel_err(gx, central_diff(lambda v: np.sum(G * conv.forward(W, b, v)[0]), x)) < 1e-6


class TestEncoder:
    def test_zero_input_zero_biases(self, rng):
        enc = Encoder(64, 3)
        theta = enc.init(0)
        np.testing.assert_array_equal(enc.forward(theta, np.zeros((1, 3, 64))), 0.0)

    def test_deterministic(self, rng):
        enc = Encoder(64, 3)
        theta = enc.init(1)
        frame = rng.normal(size=(3, 64))
        np.testing.assert_array_equal(enc.forward(theta, frame), enc.forward(theta, frame))

    def test_shape_error(self):
        enc = Encoder(64, 3)
        with pytest.raises(ShapeError):
            enc.forward(enc.init(0), np.zeros((1, 3, 63)))

    def test_gradients(self, rng):
        for _ in range(N_INSTANCES):
            n = int(rng.integers(6, 80))
            enc = Encoder(n, int(rng.integers(1, 4)), hidden=int(rng.integers(2, 6)))
            theta = enc.init(int(rng.integers(1 << 30))) + rng.normal(scale=0.1, size=enc.layout.size)
            frames = rng.normal(size=(int(rng.integers(1, 3)), 3, n))
            z, cache = enc.forward(theta, frames, cache=True)
            G = rng.normal(size=z.shape)
            g, gf = enc.backward(theta, cache, G)
            assert rel_err(g, central_diff(lambda t: np.sum(G * enc.forward(t, frames)), theta)) < 1e-6
            assert rel_err(gf, central_diff(lambda f: np.sum(G * enc.forward(theta, f)), frames)) < 1e-6


class TestAdam:
    def test_first_step(self):
        theta, state = adam_step(np.zeros(1), np.ones(1), AdamState.zeros(1), 1e-3)
        assert theta[0] == pytest.approx(-1e-3 / (1 + 1e-8), rel=1e-12)
        assert state.t == 1

    def test_zero_gradient(self):
        theta = np.array([0.3, -1.0])
        state = AdamState.zeros(2)
        for _ in range(50):
            new, state = adam_step(theta, np.zeros(2), state, 1e-2)
            np.testing.assert_array_equal(new, theta)

    def test_steady_state_step(self):
        theta, state = np.zeros(2), AdamState.zeros(2)
        g = np.array([0.5, -3.0])
        for _ in range(2000):
            prev = theta
            theta, state = adam_step(theta, g, state, 1e-3)
        np.testing.assert_allclose(theta - prev, -1e-3 * np.sign(g), rtol=1e-6)

    def test_defaults(self):
        cfg = AdamConfig()
        assert (cfg.beta1, cfg.beta2, cfg.eps) == (0.9, 0.999, 1e-8)


class TestStandardizer:
    def test_constant_column(self):
        data = np.column_stack([np.full(5, 3.0), np.arange(5.0)])
        normed, stats = normalize_dataset(data)
        assert stats.mean[0] == 3.0 and stats.std[0] == 1.0
        assert list(stats.degenerate) == [True, False]
        np.testing.assert_array_equal(normed[:, 0], 0.0)

    def test_two_point_column(self):
        normed, stats = normalize_dataset(np.array([[0.0], [2.0]]))
        assert stats.mean[0] == 1.0 and stats.std[0] == 1.0
        np.testing.assert_array_equal(normed[:, 0], [-1.0, 1.0])

    @given(st.integers(0, 2**31 - 1))
    @settings(max_examples=50, deadline=None)
    def test_round_trip(self, seed):
        r = np.random.default_rng(seed)
        data = r.normal(loc=r.normal(scale=10), scale=r.uniform(0.01, 100), size=(20, 4))
        normed, stats = normalize_dataset(data)
        np.testing.assert_allclose(stats.inverse_transform(normed), data, atol=1e-12 * max(1.0, np.abs(data).max()))
        np.testing.assert_allclose(normed.mean(axis=0), 0.0, atol=1e-12)
        np.testing.assert_allclose(normed.std(axis=0), 1.0, rtol=1e-12)

    def test_empty(self):
        with pytest.raises(ValueError):
            Standardizer().fit(np.zeros((0, 3)))
