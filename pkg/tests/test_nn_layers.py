import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fcdcast.data import StructuralError, ValidationError
from fcdcast.nn import (
    ELU,
    BatchNorm,
    Conv2D,
    Dense,
    Flatten,
    LeakyReLU,
    MaxPool2D,
    OutputClamp,
    Sequential,
    gradient_check,
    init_glorot,
    leaky_relu,
    leaky_relu_grad,
    output_clamp,
    output_clamp_grad,
    output_clamp_revive_grad,
)
from fcdcast.nn.gradcheck import GradientCheckError, relative_error


def naive_conv(x, theta, stride, pad):
    b, c, h, w = x.shape
    f, _, r, _ = theta.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    oh = (h + 2 * pad - r) // stride + 1
    ow = (w + 2 * pad - r) // stride + 1
    out = np.zeros((b, f, oh, ow))
    for n in range(b):
        for k in range(f):
            for i in range(oh):
                for j in range(ow):
                    out[n, k, i, j] = np.sum(theta[k] * xp[n, :, i * stride:i * stride + r, j * stride:j * stride + r])
    return out


class TestDense:
    def test_no_bias(self, rng):
        d = Dense(rng.normal(size=(3, 2)))
        np.testing.assert_array_equal(d.forward(np.zeros((4, 3))), np.zeros((4, 2)))

    def test_leading_dims(self, rng):
        theta = rng.normal(size=(3, 2))
        x = rng.normal(size=(4, 5, 3))
        np.testing.assert_allclose(Dense(theta).forward(x), np.einsum("btf,fg->btg", x, theta))

    def test_wrong_width(self, rng):
        with pytest.raises(StructuralError):
            Dense(np.zeros((3, 2))).forward(np.zeros((1, 4)))


class TestConv:
    @pytest.mark.parametrize("stride,pad,size", [(1, 1, 6), (1, 0, 5), (2, 1, 7)])
    def test_matches_naive(self, rng, stride, pad, size):
        x = rng.normal(size=(2, 3, size, size))
        theta = rng.normal(size=(4, 3, 3, 3))
        np.testing.assert_allclose(Conv2D(theta, stride, pad).forward(x), naive_conv(x, theta, stride, pad),
                                   rtol=1e-12, atol=1e-12)

    def test_same_padding_keeps_size(self, rng):
        assert Conv2D(rng.normal(size=(2, 1, 3, 3)), 1, 1).forward(np.ones((1, 1, 8, 8))).shape == (1, 2, 8, 8)

    def test_indivisible_geometry(self):
        with pytest.raises(StructuralError):
            Conv2D(np.zeros((1, 1, 3, 3)), stride=2, pad=0).forward(np.zeros((1, 1, 6, 6)))
        with pytest.raises(StructuralError):
            MaxPool2D(2, 2).forward(np.zeros((1, 1, 5, 5)))

    def test_channel_mismatch(self):
        with pytest.raises(StructuralError):
            Conv2D(np.zeros((1, 2, 3, 3)), 1, 1).forward(np.zeros((1, 3, 4, 4)))


class TestActivations:
    def test_leaky_relu(self):
        x = np.array([-2.0, 0.0, 3.0])
        np.testing.assert_array_equal(leaky_relu(x), [-0.02, 0.0, 3.0])
        np.testing.assert_array_equal(leaky_relu_grad(x), [0.01, 1.0, 1.0])
        layer = LeakyReLU(0.01)
        layer.forward(x)
        np.testing.assert_array_equal(layer.backward(np.ones(3)), [0.01, 1.0, 1.0])

    def test_clamp_subgradient_on_closed_interval(self):
        x = np.array([-0.1, 0.0, 0.5, 1.0, 1.1])
        np.testing.assert_array_equal(output_clamp(x), [0, 0, 0.5, 1, 1])
        np.testing.assert_array_equal(output_clamp_grad(x), [0, 1, 1, 1, 0])
        layer = OutputClamp()
        layer.forward(x)
        np.testing.assert_array_equal(layer.backward(np.full(5, 2.0)), [0, 2, 2, 2, 0])

    def test_revive_surrogate_passes_only_recovering_gradients(self):
        x = np.array([-0.2, -0.2, 0.3, 0.3, 1.4, 1.4])
        dy = np.array([-1.0, 1.0, -1.0, 1.0, -1.0, 1.0])
        # below 0, a negative dy raises x under descent; above 1, a positive dy lowers it
        np.testing.assert_array_equal(output_clamp_revive_grad(x, dy), [-1, 0, -1, 1, 0, 1])
        layer = OutputClamp("revive")
        layer.forward(x)
        np.testing.assert_array_equal(layer.backward(dy), [-1, 0, -1, 1, 0, 1])

    @given(st.lists(st.floats(-0.5, 1.5), min_size=1, max_size=30))
    def test_revive_matches_subgradient_inside(self, xs):
        x = np.array(xs)
        dy = np.linspace(-1, 1, len(xs))
        inside = (x >= 0) & (x <= 1)
        np.testing.assert_array_equal(output_clamp_revive_grad(x, dy)[inside], dy[inside])

    def test_unknown_clamp_mode(self):
        with pytest.raises(ValueError):
            OutputClamp("straight-through")

    def test_elu(self):
        np.testing.assert_allclose(ELU().forward(np.array([-1.0, 2.0])), [np.exp(-1) - 1, 2.0])


class TestBatchNorm:
    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 2**31 - 1), st.floats(0.01, 100), st.floats(-50, 50))
    def test_train_mode_standardizes(self, seed, scale, shift):
        g = np.random.default_rng(seed)
        bn = BatchNorm(6)
        bn.params["gamma"] = g.uniform(0.5, 2.0, 6)
        bn.params["beta"] = g.normal(size=6)
        x = shift + scale * g.normal(size=(50, 6))
        y = bn.forward(x, train=True)
        np.testing.assert_allclose(y.mean(axis=0), bn.params["beta"], rtol=0, atol=1e-10 * max(1, scale))
        # eps keeps the batch std slightly below gamma: exactly gamma * sqrt(var / (var + eps))
        var = x.var(axis=0)
        np.testing.assert_allclose(y.std(axis=0), bn.params["gamma"] * np.sqrt(var / (var + bn.eps)), rtol=1e-9)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 2**31 - 1))
    def test_unit_scale_batches_hit_gamma(self, seed):
        g = np.random.default_rng(seed)
        bn = BatchNorm(6)
        bn.params["gamma"] = g.uniform(0.5, 2.0, 6)
        y = bn.forward(g.normal(size=(50, 6)), train=True)
        np.testing.assert_allclose(y.std(axis=0), bn.params["gamma"], rtol=0, atol=1e-6)

    def test_running_average_weights_every_batch_equally(self, rng):
        bn = BatchNorm(3)
        batches = [rng.normal(loc=i, size=(50, 3)) for i in range(4)]
        for b in batches:
            bn.forward(b, train=True)
        np.testing.assert_allclose(bn.running_mean, np.mean([b.mean(axis=0) for b in batches], axis=0))
        np.testing.assert_allclose(bn.running_var, np.mean([b.var(axis=0) for b in batches], axis=0))
        assert bn.epoch == 4

    def test_inference_uses_unbiased_variance(self, rng):
        bn = BatchNorm(2)
        x = rng.normal(size=(50, 2))
        bn.forward(x, train=True)
        y = bn.forward(x[:3], train=False)
        want = (x[:3] - x.mean(axis=0)) / np.sqrt(x.var(axis=0, ddof=1) + 1e-8)
        np.testing.assert_allclose(y, want, rtol=1e-12)

    def test_momentum_variant(self, rng):
        bn = BatchNorm(2, momentum=0.1)
        a, b = rng.normal(size=(10, 2)), rng.normal(size=(10, 2))
        bn.forward(a, train=True)
        bn.forward(b, train=True)
        np.testing.assert_allclose(bn.running_mean, 0.9 * a.mean(axis=0) + 0.1 * b.mean(axis=0))

    def test_conv_features_on_channel_axis(self, rng):
        bn = BatchNorm(3)
        x = rng.normal(loc=[[[[1.0]], [[5.0]], [[-2.0]]]], size=(4, 3, 5, 5))
        y = bn.forward(x, train=True)
        np.testing.assert_allclose(y.mean(axis=(0, 2, 3)), 0, atol=1e-10)
        np.testing.assert_allclose(bn.running_mean, x.mean(axis=(0, 2, 3)))

    def test_single_value_rejected(self):
        with pytest.raises(ValidationError):
            BatchNorm(2).forward(np.ones((1, 2)), train=True)

    def test_frozen_stats(self, rng):
        bn = BatchNorm(2)
        bn.update_stats = False
        bn.forward(rng.normal(size=(5, 2)), train=True)
        assert bn.epoch == 0 and np.all(bn.running_var == 1)


class TestSequential:
    def test_state_roundtrip_includes_bn_buffers(self, rng):
        def make():
            return Sequential([Dense(init_glorot((4, 3), rng)), LeakyReLU(), BatchNorm(3),
                               Dense(init_glorot((3, 2), rng)), OutputClamp()])
        a, b = make(), make()
        a.forward(rng.normal(size=(20, 4)), train=True)
        b.load_state_dict(a.state_dict())
        x = rng.normal(size=(5, 4))
        np.testing.assert_array_equal(a.predict(x), b.predict(x))
        assert "2.batchnorm.running_mean" in a.state_dict()

    def test_weights_are_the_matrices(self, rng):
        m = Sequential([Dense(np.ones((4, 3))), BatchNorm(3), Dense(np.ones((3, 2)))])
        assert [n for n, _ in m.weights()] == ["0.dense.theta", "2.dense.theta"]
        assert len(m.parameters()) == 4

    def test_shape_mismatch_on_load(self, rng):
        m = Sequential([Dense(np.ones((4, 3)))])
        with pytest.raises(StructuralError):
            m.load_state_dict({"0.dense.theta": np.ones((3, 3))})


def _toy_targets(model, x, rng):
    y = model.forward(x, train=True)
    return np.clip(y + 0.05 * rng.normal(size=y.shape), 0.1, 0.9)


class TestGradientCheck:
    def fnn(self, rng, n_hidden):
        layers, f = [], 4
        for _ in range(n_hidden):
            layers += [Dense(init_glorot((f, 3), rng)), LeakyReLU(), BatchNorm(3)]
            f = 3
        layers += [Dense(0.1 * init_glorot((f, 2), rng)), OutputClamp()]
        model = Sequential(layers)
        for bn in model.batchnorms():
            bn.params["beta"] += 0.5
        return model

    @pytest.mark.parametrize("n_hidden", [1, 3])
    def test_fnn(self, rng, n_hidden):
        model = self.fnn(rng, n_hidden)
        x = rng.normal(size=(7, 4))
        report = gradient_check(model, x, _toy_targets(model, x, rng) + 0.1, l1=1e-3, l2=1e-3)
        assert report.max_rel_error < 1e-5
        assert report.n_checked == sum(layer.params[k].size for _, layer, k in model.parameters())

    def test_conv_pool(self, rng):
        model = Sequential([Conv2D(init_glorot((2, 1, 3, 3), rng), 1, 1), LeakyReLU(), BatchNorm(2),
                            MaxPool2D(2, 2), Flatten(), Dense(0.05 * init_glorot((18, 2), rng)), OutputClamp()])
        model.layers[2].params["beta"] += 1.0
        x = rng.normal(size=(3, 1, 6, 6))
        assert gradient_check(model, x, np.full((3, 2), 0.4)).max_rel_error < 1e-5

    def test_surrogate_clamp_is_checked_against_the_exact_derivative(self, rng):
        # outputs pushed out of range: the check must still see the true gradient
        model = Sequential([Dense(init_glorot((4, 3), rng)), LeakyReLU(), BatchNorm(3),
                            Dense(init_glorot((3, 2), rng)), OutputClamp("revive")])
        model.layers[2].params["beta"] += np.array([0.5, -0.5, 0.2])
        x = rng.normal(size=(9, 4))
        out = model.layers[3].forward(model.layers[2].forward(model.layers[1].forward(
            model.layers[0].forward(x)), train=True))
        assert np.any((out < 0) | (out > 1))
        assert gradient_check(model, x, np.full((9, 2), 0.5)).max_rel_error < 1e-5
        assert model.layers[-1].grad == "revive"

    def test_batchnorm_alone(self, rng):
        model = Sequential([BatchNorm(3)])
        model.layers[0].params["gamma"] = rng.uniform(0.5, 2, 3)
        x = rng.normal(size=(6, 3))
        assert gradient_check(model, x, rng.normal(size=(6, 3))).max_rel_error < 1e-5

    def test_detects_a_wrong_backward(self, rng, monkeypatch):
        model = self.fnn(rng, 1)
        x = rng.normal(size=(7, 4))
        monkeypatch.setattr(LeakyReLU, "backward", lambda self, dy: dy)
        report = gradient_check(model, x, np.full((7, 2), 0.3))
        assert report.max_rel_error > 1e-3

    def test_running_stats_untouched(self, rng):
        model = self.fnn(rng, 1)
        bn = model.batchnorms()[0]
        gradient_check(model, rng.normal(size=(5, 4)), np.full((5, 2), 0.5))
        assert bn.epoch == 0 and bn.update_stats

    def test_non_finite_loss(self, rng):
        model = Sequential([Dense(np.array([[np.inf]]))])
        with pytest.raises(GradientCheckError):
            gradient_check(model, np.ones((2, 1)), np.ones((2, 1)))

    def test_relative_error_floor(self):
        assert relative_error(1e-12, 0.0) == pytest.approx(1e-6)
        assert relative_error(2.0, 1.0) == 0.5
