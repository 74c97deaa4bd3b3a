import numpy as np
import pytest

from conftest import attach_random_dendrites, random_batch, random_net
from perfbp.errors import ShapeError
from perfbp.grad import (backprop, backprop_perforated, backprop_standard, finite_diff_check,
                         numeric_gradient)
from perfbp.losses import LOSSES, loss_value, output_delta
from perfbp.network import Dense, DendriteRound, Network, forward


def targets_for(net, loss, n, seed):
    rng = np.random.default_rng(seed)
    width = net.output_shape[0]
    if loss == "mse":
        return rng.normal(size=(n, width))
    return rng.integers(0, width, size=n)


def chain_with_dendrite(seed=0):
    """Dense 3 -> 2 (tanh) -> 1 (tanh) with one dendrite on the output neuron."""
    rng = np.random.default_rng(seed)
    net = Network([Dense(2, activation="tanh"), Dense(1, activation="tanh")], (3,), seed=seed)
    net.add_dendrite_round(1, DendriteRound(rng.uniform(0.5, 1.0, size=(1, 2)), np.zeros((1, 0)),
                                            np.array([0.8]), "tanh"))
    return net


class TestStandard:
    def test_closed_form_single_weight(self):
        w, x, t = 0.7, 1.5, 2.0
        net = Network([Dense(1, activation="identity", bias=False)], (1,),
                      params=[{"weight": np.array([[w]])}])
        out, cache = forward(net, np.array([[x]]))
        buf = backprop_standard(net, cache, output_delta("mse", out, [[t]]))
        assert buf.grads["layers.0.weight"][0, 0] == pytest.approx(2 * (w * x - t) * x, rel=1e-15)

    def test_zero_delta_gives_zero_gradients(self):
        net = random_net(5, dendrite_rounds=1)
        out, cache = forward(net, random_batch(net, 5))
        for mode in ("standard", "perforated", "gd_dendrites"):
            buf = backprop(net, cache, np.zeros_like(out), mode=mode)
            assert all(not np.any(g) for g in buf.grads.values())

    @pytest.mark.parametrize("seed", range(6))
    @pytest.mark.parametrize("loss", LOSSES)
    def test_matches_finite_differences(self, seed, loss):
        net = random_net(seed)
        x = random_batch(net, seed, n=3)
        err = finite_diff_check(net, loss, x, targets_for(net, loss, 3, seed), eps=1e-5)
        assert err < 1e-5

    def test_loss_delta_matches_slope(self, rng):
        out = rng.normal(size=(4, 3))
        for loss in LOSSES:
            t = targets_for(Network([Dense(3)], (1,)), loss, 4, 0)
            d = output_delta(loss, out, t) / 4
            for idx in np.ndindex(out.shape):
                h = np.zeros_like(out)
                h[idx] = 1e-6
                slope = (loss_value(loss, out + h, t) - loss_value(loss, out - h, t)) / 2e-6
                assert d[idx] == pytest.approx(slope, rel=1e-6, abs=1e-10)
            assert loss_value(loss, out, t) >= 0


class TestPerforated:
    @pytest.mark.parametrize("seed", range(5))
    def test_equals_standard_without_dendrites(self, seed):
        net = random_net(seed)
        out, cache = forward(net, random_batch(net, seed))
        dy = np.random.default_rng(seed).normal(size=out.shape)
        a = backprop_standard(net, cache, dy)
        b = backprop_perforated(net, cache, dy)
        assert a.grads.keys() == b.grads.keys()
        for k in a.grads:
            assert a.grads[k].tobytes() == b.grads[k].tobytes()
        for da, db in zip(a.deltas, b.deltas):
            assert (da is None and db is None) or da.tobytes() == db.tobytes()

    @pytest.mark.parametrize("seed", range(5))
    def test_zero_output_weights_match_dendrite_free(self, seed):
        net = random_net(seed)
        x = random_batch(net, seed)
        out, cache = forward(net, x)
        dy = np.random.default_rng(seed).normal(size=out.shape)
        plain = backprop_standard(net, cache, dy)
        attach_random_dendrites(net, np.random.default_rng(seed), rounds=1)
        for rounds in net.dendrites:
            for r in rounds:
                r.output_weights[:] = 0.0
        out2, cache2 = forward(net, x)
        perf = backprop_perforated(net, cache2, dy)
        for k, g in plain.grads.items():
            assert g.tobytes() == perf.grads[k].tobytes()

    def test_chain_layer1_deltas_exclude_dendrite_path(self):
        net = chain_with_dendrite()
        x = np.random.default_rng(1).normal(size=(5, 3))
        t = np.random.default_rng(2).normal(size=(5, 1))
        assert finite_diff_check(net, "mse", x, t, detach_dendrites=True) < 1e-5
        # the standard gradient differs, so the detached check is not vacuous
        out, cache = forward(net, x)
        dy = output_delta("mse", out, t)
        perf = backprop_perforated(net, cache, dy)
        std = backprop_standard(net, cache, dy)
        assert np.abs(perf.deltas[0] - std.deltas[0]).max() > 1e-8
        assert np.abs(perf.grads["layers.0.weight"] - std.grads["layers.0.weight"]).max() > 1e-8

    def test_deltas_of_cc_no_perforation_differ(self):
        net = chain_with_dendrite(3)
        x = np.random.default_rng(4).normal(size=(6, 3))
        out, cache = forward(net, x)
        dy = np.ones_like(out)
        perf = backprop(net, cache, dy, mode="perforated")
        std = backprop(net, cache, dy, mode="standard")
        assert np.all(np.abs(perf.deltas[0] - std.deltas[0]) > 1e-8)
        # and standard mode is the full-graph gradient
        assert finite_diff_check(net, "mse", x, np.zeros((6, 1)), detach_dendrites=False) < 1e-5

    @pytest.mark.parametrize("seed", range(5))
    def test_detached_graph_and_output_weights(self, seed):
        net = random_net(seed, dendrite_rounds=int(np.random.default_rng(seed).integers(1, 4)))
        x = random_batch(net, seed, n=3)
        t = targets_for(net, "cross_entropy_softmax", 3, seed)
        assert finite_diff_check(net, "cross_entropy_softmax", x, t, detach_dendrites=True) < 1e-5
        outs = [n for n, _ in net.named_arrays() if n.endswith(".output")]
        assert finite_diff_check(net, "cross_entropy_softmax", x, t, detach_dendrites=False,
                                 names=outs) < 1e-5

    def test_input_slots_are_zero(self):
        net = random_net(2, dendrite_rounds=2)
        out, cache = forward(net, random_batch(net, 2))
        buf = backprop_perforated(net, cache, np.ones_like(out))
        slots = [k for k in buf.grads if ".dendrites." in k and not k.endswith(".output")]
        assert slots
        assert all(not np.any(buf.grads[k]) for k in slots)
        assert any(np.any(buf.grads[k]) for k in buf.grads if k.endswith(".output"))

    def test_frozen_inputs_cannot_be_written(self):
        net = random_net(2, dendrite_rounds=1)
        i = net.host_layers()[0]
        with pytest.raises(ValueError):
            net.dendrites[i][0].input_weights += 1.0
        assert not any(".input" in k for k in net.trainable())


class TestGdDendrites:
    def test_input_weights_get_own_path_gradient(self):
        """Input-side grads equal those of standard mode; neuron deltas equal perforated mode."""
        rng = np.random.default_rng(0)
        net = random_net(7, dendrite_rounds=2)
        x = random_batch(net, 7)
        out, cache = forward(net, x)
        dy = rng.normal(size=out.shape)
        gd = backprop(net, cache, dy, mode="gd_dendrites")
        std = backprop(net, cache, dy, mode="standard")
        perf = backprop(net, cache, dy, mode="perforated")
        last = net.output_layer()
        for k in gd.grads:
            if k.startswith(f"layers.{last}.dendrites."):
                np.testing.assert_allclose(gd.grads[k], std.grads[k], rtol=1e-12, atol=1e-14)
        for a, b in zip(gd.deltas, perf.deltas):
            if a is not None:
                assert a.tobytes() == b.tobytes()

    def test_input_gradient_matches_finite_difference(self):
        net = chain_with_dendrite(5)
        net.dendrites[1][0].frozen = False
        net.dendrites[1][0].input_weights.flags.writeable = True
        x = np.random.default_rng(5).normal(size=(4, 3))
        t = np.zeros((4, 1))
        out, cache = forward(net, x)
        buf = backprop(net, cache, output_delta("mse", out, t), mode="gd_dendrites")
        for idx in np.ndindex(1, 2):
            num, _ = numeric_gradient(net, "mse", x, t, "layers.1.dendrites.0.input", idx, 1e-5)
            assert buf.grads["layers.1.dendrites.0.input"][idx] / 4 == pytest.approx(num, rel=1e-6)


class TestHarness:
    def test_eps_zero_rejected(self):
        net = random_net(0)
        with pytest.raises(ValueError):
            finite_diff_check(net, "mse", random_batch(net, 0), np.zeros((4, 3)), eps=0.0)

    def test_stale_cache_rejected(self):
        net = random_net(0)
        out, cache = forward(net, random_batch(net, 0))
        attach_random_dendrites(net, np.random.default_rng(0))
        with pytest.raises(ShapeError):
            backprop(net, cache, np.zeros_like(out))

    def test_unknown_mode(self):
        net = random_net(0)
        out, cache = forward(net, random_batch(net, 0))
        with pytest.raises(ValueError):
            backprop(net, cache, out, mode="partial")
