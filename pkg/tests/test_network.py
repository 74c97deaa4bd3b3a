import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import attach_random_dendrites, random_batch, random_net
from perfbp.activations import ACTIVATIONS, activate, derivative
from perfbp.conv import col2im, conv2d_eval, im2col, maxpool2d, maxpool2d_backward
from perfbp.errors import NonFiniteError, ShapeError
from perfbp.network import (Conv2d, Dense, DendriteRound, Dropout, Flatten, MaxPool2d, Network,
                            forward, param_breakdown, param_count)


def dense_net(weights, bias, activation="identity"):
    w = np.array(weights, dtype=float)
    return Network([Dense(w.shape[0], activation=activation)], (w.shape[1],),
                   params=[{"weight": w, "bias": np.array(bias, dtype=float)}])


def scalar_forward(weights, bias, dendrites, x):
    """Single-neuron evaluator written with plain Python floats.

    ``dendrites`` is a list of (input_weights, sibling_weights, output_weight, fn).
    """
    z = sum(w * v for w, v in zip(weights, x)) + bias
    outs = []
    for inp, sib, ow, fn in dendrites:
        a = sum(w * v for w, v in zip(inp, x)) + sum(s * o for s, o in zip(sib, outs))
        outs.append(fn(a))
        z += ow * outs[-1]
    return z


def naive_conv(x, k, bias, stride, pad):
    H, W = x.shape
    kh, kw = k.shape
    xp = np.zeros((H + 2 * pad, W + 2 * pad))
    xp[pad:pad + H, pad:pad + W] = x
    Ho = (H + 2 * pad - kh) // stride + 1
    Wo = (W + 2 * pad - kw) // stride + 1
    out = np.zeros((Ho, Wo))
    for i in range(Ho):
        for j in range(Wo):
            s = bias
            for a in range(kh):
                for b in range(kw):
                    s += xp[i * stride + a, j * stride + b] * k[a, b]
            out[i, j] = s
    return out


class TestForwardExamples:
    def test_linear_sum(self):
        out, _ = forward(dense_net([[1, 1]], [0]), np.array([[2.0, 3.0]]))
        assert out.tolist() == [[5.0]]

    def test_zero_output_weight_is_inert(self):
        net = dense_net([[1, 1]], [0])
        net.add_dendrite_round(0, DendriteRound(np.array([[0.4, -0.3]]), np.zeros((1, 0)),
                                                np.zeros(1), "tanh"))
        out, _ = forward(net, np.array([[2.0, 3.0]]))
        assert out.tolist() == [[5.0]]

    def test_dendrite_contribution(self):
        net = dense_net([[1, 0]], [0])
        net.add_dendrite_round(0, DendriteRound(np.array([[0.0, 1.0]]), np.zeros((1, 0)),
                                                np.array([2.0]), "identity"))
        out, cache = forward(net, np.array([[3.0, 4.0]]))
        assert out[0, 0] == 11.0
        assert cache.pre[0][0, 0] == 11.0
        assert scalar_forward([1, 0], 0, [([0, 1], [], 2, lambda a: a)], [3, 4]) == 11.0

    def test_siblings_against_scalar_evaluator(self, rng):
        for _ in range(20):
            net = Network([Dense(1, activation="identity")], (3,), seed=int(rng.integers(1e6)))
            attach_random_dendrites(net, rng, rounds=3, activations=("tanh",))
            x = rng.normal(size=3)
            p = net.params[0]
            dends = [(r.input_weights[0], r.sibling_weights[0], r.output_weights[0], np.tanh)
                     for r in net.dendrites[0]]
            expected = scalar_forward(p["weight"][0], p["bias"][0], dends, x)
            out, _ = forward(net, x[None])
            assert out[0, 0] == pytest.approx(expected, rel=1e-12, abs=1e-12)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            forward(dense_net([[1, 1]], [0]), np.zeros((1, 3)))

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_non_finite_output(self):
        with pytest.raises(NonFiniteError):
            forward(dense_net([[1e308, 1e308]], [0]), np.array([[1e308, 1e308]]))

    def test_bad_mode(self):
        with pytest.raises(ValueError):
            forward(dense_net([[1, 1]], [0]), np.zeros((1, 2)), mode="predict")


class TestForwardProperties:
    @pytest.mark.parametrize("seed", range(10))
    def test_determinism(self, seed):
        net = Network([Conv2d(2, (3, 3)), MaxPool2d(2), Dropout(0.3), Flatten(), Dense(4),
                       Dropout(0.5), Dense(3, activation="identity")], (1, 6, 6), seed=seed)
        attach_random_dendrites(net, np.random.default_rng(seed), rounds=2)
        x = random_batch(net, seed)
        a, _ = forward(net, x, "train", rng_seed=7)
        b, _ = forward(net, x, "train", rng_seed=7)
        assert a.tobytes() == b.tobytes()

    @pytest.mark.parametrize("seed", range(10))
    def test_dendrite_inertness(self, seed):
        net = random_net(seed)
        x = random_batch(net, seed)
        plain, _ = forward(net, x)
        attach_random_dendrites(net, np.random.default_rng(seed), rounds=2)
        for rounds in net.dendrites:
            for r in rounds:
                r.output_weights[:] = 0.0
        out, _ = forward(net, x)
        assert out.tobytes() == plain.tobytes()

    def test_dropout_only_in_train(self):
        net = Network([Dropout(0.5), Dense(4, activation="identity")], (20,), seed=0)
        x = np.ones((3, 20))
        e1, _ = forward(net, x, "eval")
        e2, _ = forward(net, x, "eval", rng_seed=99)
        t1, _ = forward(net, x, "train", rng_seed=1)
        t2, _ = forward(net, x, "train", rng_seed=2)
        assert e1.tobytes() == e2.tobytes()
        assert not np.array_equal(t1, t2)

    def test_dendrites_see_post_dropout_inputs(self):
        net = Network([Dropout(0.5), Dense(1, activation="identity", bias=False)], (10,), seed=0)
        net.params[1]["weight"][:] = 0.0
        net.add_dendrite_round(1, DendriteRound(np.ones((1, 10)), np.zeros((1, 0)),
                                                np.ones(1), "identity"))
        x = np.ones((1, 10))
        out, cache = forward(net, x, "train", rng_seed=3)
        assert out[0, 0] == pytest.approx(cache.post[0].sum())

    def test_float32_network(self):
        net = random_net(3)
        net32 = Network(net.layers, net.input_shape, seed=3, dtype="float32")
        x = random_batch(net, 3)
        a, _ = forward(net, x)
        b, _ = forward(net32, x)
        assert b.dtype == np.float32
        np.testing.assert_allclose(a, b, rtol=1e-4, atol=1e-5)


class TestActivations:
    @pytest.mark.parametrize("kind", ACTIVATIONS)
    def test_derivative_matches_slope(self, kind, rng):
        x = rng.normal(size=200) * 3
        x = x[np.abs(x) > 1e-3]
        h = 1e-6
        slope = (activate(kind, x + h) - activate(kind, x - h)) / (2 * h)
        np.testing.assert_allclose(derivative(kind, x), slope, rtol=1e-6, atol=1e-9)

    def test_relu_derivative_at_zero(self):
        assert derivative("relu", np.array([0.0]))[0] == 0.0

    def test_sigmoid_extremes_finite(self):
        y = activate("sigmoid", np.array([-1000.0, 0.0, 1000.0]))
        assert np.all(np.isfinite(y))
        assert y.tolist() == [0.0, 0.5, 1.0]

    def test_unknown(self):
        with pytest.raises(ValueError):
            activate("swish", np.zeros(2))


class TestConv:
    def test_all_ones(self):
        out = conv2d_eval(np.ones((3, 3)), np.ones((2, 2)))
        assert out.shape == (2, 2)
        assert np.all(out == 4.0)

    def test_identity_kernel(self, rng):
        x = rng.normal(size=(5, 7))
        assert np.array_equal(conv2d_eval(x, np.ones((1, 1))), x)

    def test_matches_naive_loop_on_100_instances(self, rng):
        worst = 0.0
        for _ in range(100):
            H, W = rng.integers(3, 8, size=2)
            kh, kw = rng.integers(1, 4, size=2)
            stride = int(rng.integers(1, 3))
            pad = int(rng.integers(0, 2))
            x = rng.normal(size=(H, W))
            k = rng.normal(size=(kh, kw))
            b = float(rng.normal())
            got = conv2d_eval(x, k, b, stride, pad)
            want = naive_conv(x, k, b, stride, pad)
            assert got.shape == want.shape
            assert got.shape == ((H + 2 * pad - kh) // stride + 1, (W + 2 * pad - kw) // stride + 1)
            worst = max(worst, np.abs(got - want).max())
        assert worst < 1e-12

    def test_multichannel_sums_channels(self, rng):
        x = rng.normal(size=(2, 3, 5, 5))
        k = rng.normal(size=(4, 3, 3, 3))
        out = conv2d_eval(x, k, bias=np.arange(4.0))
        for b in range(2):
            for o in range(4):
                want = sum(naive_conv(x[b, c], k[o, c], 0.0, 1, 0) for c in range(3)) + o
                np.testing.assert_allclose(out[b, o], want, atol=1e-12)

    def test_kernel_too_large(self):
        with pytest.raises(ShapeError):
            conv2d_eval(np.ones((2, 2)), np.ones((3, 3)))

    def test_channel_mismatch(self):
        with pytest.raises(ShapeError):
            conv2d_eval(np.ones((2, 4, 4)), np.ones((3, 2, 2)))

    @settings(max_examples=30, deadline=None)
    @given(st.integers(1, 3), st.integers(4, 7), st.integers(1, 3), st.integers(1, 2), st.integers(0, 1))
    def test_col2im_is_adjoint_of_im2col(self, C, H, k, stride, pad):
        rng = np.random.default_rng(C * 100 + H * 10 + k)
        x = rng.normal(size=(2, C, H, H))
        rows = im2col(x, k, k, stride, pad)
        r = rng.normal(size=rows.shape)
        lhs = (rows * r).sum()
        rhs = (x * col2im(r, x.shape, k, k, stride, pad)).sum()
        assert lhs == pytest.approx(rhs, rel=1e-12)
        back_t = col2im(np.ascontiguousarray(r.T), x.shape, k, k, stride, pad, transposed=True)
        np.testing.assert_allclose(back_t, col2im(r, x.shape, k, k, stride, pad), atol=1e-12)

    def test_maxpool_first_max_wins(self, rng):
        x = rng.integers(0, 3, size=(2, 3, 6, 6)).astype(float)
        out, arg = maxpool2d(x, 2)
        for b in range(2):
            for c in range(3):
                for i in range(3):
                    for j in range(3):
                        win = x[b, c, 2 * i:2 * i + 2, 2 * j:2 * j + 2].ravel()
                        assert out[b, c, i, j] == win.max()
                        assert arg[b, c, i, j] == int(np.argmax(win))
        dx = maxpool2d_backward(np.ones_like(out), arg, x.shape, 2)
        assert dx.sum() == out.size
        assert set(np.unique(dx)) <= {0.0, 1.0}


class TestParamCount:
    def test_conv_one_dendrite(self):
        net = Network([Conv2d(1, (3, 3))], (1, 5, 5))
        assert param_count(net) == (10, 0)
        net.add_dendrite_round(0, DendriteRound(np.zeros((1, 1, 3, 3)), np.zeros((1, 0)),
                                                np.zeros(1), "relu"))
        assert param_count(net) == (10, 10)
        node = net.dendrite_node(0, 0, 0)
        # 3x3 inputs to the neuron plus the one dendrite connection
        assert node.input_weights.size + 1 == 3 * 3 + 1

    def test_dense_one_dendrite_per_neuron(self):
        net = Network([Dense(2)], (4,))
        assert param_count(net) == (10, 0)
        net.add_dendrite_round(0, DendriteRound(np.zeros((2, 4)), np.zeros((2, 0)),
                                                np.zeros(2), "relu"))
        assert param_count(net) == (10, 10)

    def test_siblings_and_bias_counted(self):
        net = Network([Dense(2)], (4,))
        for t in range(3):
            net.add_dendrite_round(0, DendriteRound(np.zeros((2, 4)), np.zeros((2, t)),
                                                    np.zeros(2), "relu", bias=np.zeros(2)))
        c = param_breakdown(net)
        assert c["dendrite_siblings"] == 2 * (0 + 1 + 2)
        assert c["dendrite_biases"] == 6
        assert param_count(net)[1] == 3 * 2 * (4 + 1 + 1) + 6

    @pytest.mark.parametrize("seed", range(10))
    def test_first_dendrite_doubles_bias_free_net(self, seed):
        rng = np.random.default_rng(seed)
        layers = [Conv2d(int(rng.integers(1, 4)), (3, 3), bias=False), MaxPool2d(2), Flatten(),
                  Dense(int(rng.integers(2, 6)), bias=False), Dense(3, bias=False)]
        net = Network(layers, (2, 8, 8), seed=seed)
        neuron, _ = param_count(net)
        attach_random_dendrites(net, rng, rounds=1)
        _, dendrite = param_count(net)
        assert dendrite == neuron + net.num_dendrites()

    def test_layer_validation(self):
        with pytest.raises(ValueError):
            Dropout(1.0)
        with pytest.raises(ValueError):
            Conv2d(2, (0, 3))
        with pytest.raises(ShapeError):
            Network([Dense(2)], (4,)).add_dendrite_round(
                0, DendriteRound(np.zeros((2, 3)), np.zeros((2, 0)), np.zeros(2), "relu"))

    def test_incompatible_shapes(self):
        with pytest.raises(ShapeError):
            Network([Conv2d(2, (5, 5))], (1, 3, 3))
        with pytest.raises(ShapeError):
            Network([Dense(2)], (1, 4, 4))

    def test_frozen_inputs_are_read_only(self):
        rnd = DendriteRound(np.zeros((2, 4)), np.zeros((2, 0)), np.zeros(2), "relu")
        with pytest.raises(ValueError):
            rnd.input_weights[0, 0] = 1.0
        rnd.output_weights[0] = 1.0
        copy = Network([Dense(2)], (4,))
        copy.add_dendrite_round(0, rnd)
        assert not copy.copy().dendrites[0][0].input_weights.flags.writeable
