import copy

import numpy as np
import pytest

from evflow.network import (ConfigError, LayerSpec, Network, NetworkConfig, TapeError, build_firenet,
                            build_toy_firenet, conv2d_backward, conv2d_forward, firenet_config, init_bound,
                            init_weights)
from evflow.neurons import SurrogateConfig
from oracles import naive_conv, network_fd, relative_error
from scalar_ad import spiking_network_oracle

SPIKING = ("lif", "alif", "plif", "xlif")


def random_counts(rng, size, K, density=0.5):
    return [rng.poisson(1.0, (2,) + size) * (rng.uniform(size=(2,) + size) < density) for _ in range(K)]


def run(net, counts, coefs, act_coefs=None, ctx=None):
    ctx = ctx or net.new_context()
    value = 0.0
    for k, (x, c) in enumerate(zip(counts, coefs)):
        flow, act = net.forward(x, ctx)
        value += float(np.sum(c * flow))
        if act_coefs is not None:
            value += sum(a * f for a, f in zip(act_coefs[k], act))
    return value, net.backward(coefs, act_coefs, ctx)


class TestConv:
    def test_naive_oracle(self):
        rng = np.random.default_rng(0)
        x, w, b = rng.normal(size=(3, 5, 5)), rng.normal(size=(4, 3, 3, 3)), rng.normal(size=4)
        np.testing.assert_allclose(conv2d_forward(x, w, b), naive_conv(x, w, b), rtol=0, atol=1e-12)

    def test_strided(self):
        rng = np.random.default_rng(1)
        x, w = rng.normal(size=(2, 7, 6)), rng.normal(size=(3, 2, 3, 3))
        np.testing.assert_allclose(conv2d_forward(x, w, stride=2), naive_conv(x, w, stride=2), atol=1e-12)

    def test_identity_kernel(self):
        x = np.random.default_rng(2).normal(size=(1, 5, 5))
        w = np.zeros((1, 1, 3, 3))
        w[0, 0, 1, 1] = 1.0
        np.testing.assert_array_equal(conv2d_forward(x, w), x)

    def test_zero_weights(self):
        assert np.all(conv2d_forward(np.ones((2, 4, 4)), np.zeros((3, 2, 3, 3))) == 0)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            conv2d_forward(np.ones((2, 4, 4)), np.zeros((3, 5, 3, 3)))

    def test_backward_adjoint(self):
        rng = np.random.default_rng(3)
        x, w = rng.normal(size=(2, 5, 6)), rng.normal(size=(3, 2, 3, 3))
        g = rng.normal(size=(3, 3, 3))
        gw, gb, gx = conv2d_backward(g, x, w, stride=2)
        assert np.sum(conv2d_forward(x, w, stride=2) * g) == pytest.approx(np.sum(gx * x), rel=1e-12)
        assert np.sum(conv2d_forward(x, w, stride=2) * g) == pytest.approx(np.sum(gw * w), rel=1e-12)
        np.testing.assert_allclose(gb, g.sum(axis=(1, 2)))


class TestConfig:
    def test_spiking_layer_rejects_bias(self):
        with pytest.raises(ConfigError):
            LayerSpec("conv", 2, 4, activation="spike:lif", bias=True, name="E1").validate()

    def test_prediction_needs_tanh(self):
        with pytest.raises(ConfigError):
            LayerSpec("prediction", 4, 2, 1, activation="relu", name="P").validate()

    def test_unknown_variant(self):
        with pytest.raises(ConfigError):
            firenet_config("gru")

    def test_stateless_has_no_recurrence(self):
        cfg = firenet_config("stateless")
        assert all(not s.kind.startswith("convrnn") for s in cfg.layers)
        bad = NetworkConfig(cfg.layers[:-1] + [LayerSpec("convrnn_ann", 8, 8, name="R9"), cfg.layers[-1]],
                            "stateless", (8, 8))
        with pytest.raises(ConfigError):
            bad.validate()

    def test_round_trip(self):
        cfg = firenet_config("plif", (8, 8), surrogate=SurrogateConfig("superspike", 100), soft_reset=True)
        assert NetworkConfig.from_dict(cfg.to_dict()) == cfg


class TestArchitecture:
    def test_toy_lif_parameter_count(self):
        c = 8
        conv = lambda cin: c * cin * 9
        expected = conv(2) + conv(c) * 2 + conv(c) * 2 + 2 * c + 4 * 2 * c  # weights + (a, theta) per layer
        assert build_toy_firenet("lif", (16, 16)).param_count() == expected

    def test_firenet_scale(self):
        net = build_firenet("lif", (16, 16))
        names = [s.name for s in net.config.layers]
        assert names == ["E1", "E2", "E3", "E4", "E5", "R1", "R2", "P"]
        assert all(s.out_channels == 32 for s in net.config.layers[:-1])

    def test_prediction_is_pointwise(self):
        spec = build_toy_firenet("rnn", (8, 8)).config.layers[-1]
        assert (spec.kernel, spec.out_channels, spec.activation) == (1, 2, "tanh")

    def test_init_bounds(self):
        assert init_bound("ann", 32, 3) == pytest.approx(0.0589, abs=5e-5)
        assert init_bound("snn", 32) == pytest.approx(0.1768, abs=5e-5)
        assert init_bound("snn", 32) / init_bound("snn_prediction", 32) == pytest.approx(17.68, abs=0.01)
        w = init_weights((32, 32, 3, 3), "ann", np.random.default_rng(0))
        assert np.abs(w).max() <= init_bound("ann", 32) and np.abs(w).max() > 0.9 * init_bound("ann", 32)

    def test_network_init_bounds(self):
        net = build_toy_firenet("lif", (8, 8))
        assert np.abs(net.params["P.w"]).max() <= 0.01
        assert np.abs(net.params["E2.w"]).max() <= 1 / np.sqrt(8)
        assert "P.b" not in net.params and "E1.b" not in net.params


class TestForward:
    @pytest.mark.parametrize("variant", SPIKING)
    def test_zero_input(self, variant):
        net = build_toy_firenet(variant, (8, 8))
        flow, act = net.forward(np.zeros((2, 8, 8)))
        assert np.all(flow == 0) and all(a == 0 for a in act)

    @pytest.mark.parametrize("variant", ("stateless", "rnn", "leaky") + SPIKING)
    def test_masking_and_activity_range(self, variant):
        rng = np.random.default_rng(4)
        net = build_toy_firenet(variant, (8, 8))
        x = random_counts(rng, (8, 8), 1, 0.3)[0]
        flow, act = net.forward(x)
        assert np.all(flow[:, x.sum(axis=0) == 0] == 0)
        assert all(0 <= a <= 1 for a in act) and len(act) == len(net.hidden_layer_names)

    @pytest.mark.parametrize("variant", ("rnn", "lif", "xlif"))
    def test_determinism(self, variant):
        rng = np.random.default_rng(5)
        seq = random_counts(rng, (8, 8), 4)
        a, b = build_toy_firenet(variant, (8, 8), seed=3), build_toy_firenet(variant, (8, 8), seed=3)
        for x in seq:
            np.testing.assert_array_equal(a.forward(x)[0], b.forward(x)[0])

    def test_stateless_history_independent(self):
        rng = np.random.default_rng(6)
        seq = random_counts(rng, (8, 8), 4)
        net = build_toy_firenet("stateless", (8, 8))
        first = [net.forward(x, net.new_context())[0] for x in seq]
        ctx = net.new_context()
        shuffled = [net.forward(seq[i], ctx)[0] for i in (3, 1, 0, 2)]
        for i, out in zip((3, 1, 0, 2), shuffled):
            np.testing.assert_array_equal(first[i], out)

    def test_recurrent_state_matters(self):
        rng = np.random.default_rng(7)
        seq = random_counts(rng, (8, 8), 3)
        net = build_toy_firenet("rnn", (8, 8))
        ctx = net.new_context()
        for x in seq[:2]:
            net.forward(x, ctx)
        assert not np.array_equal(net.forward(seq[2], ctx)[0], net.forward(seq[2], net.new_context())[0])


class TestBackwardFD:
    @pytest.mark.parametrize("variant", ["leaky", "rnn", "stateless"])
    def test_full_network(self, variant):
        rng = np.random.default_rng(8)
        net = build_toy_firenet(variant, (8, 8), seed=1, channels=4)
        counts = random_counts(rng, (8, 8), 3)
        coefs = [rng.normal(size=(2, 8, 8)) for _ in range(3)]
        _, grads = run(net, counts, coefs)
        fd = network_fd(net, counts, coefs, max_per_param=12)
        for name, (g, idxs) in fd.items():
            for idx in idxs:
                assert relative_error(grads[name][idx], g[idx]) <= 1e-4, (name, idx)


def spiking_instance(variant, size, channels, soft=False, surrogate=None, seed=0):
    net = build_toy_firenet(variant, size, seed=seed, channels=channels, encoders=1, recurrent=1,
                            soft_reset=soft, surrogate=surrogate)
    for name in net.params:
        if name.endswith(".w") and not name.startswith("P"):
            net.params[name] = net.params[name] * 3.0
    return net


class TestBackwardSpiking:
    @pytest.mark.parametrize("soft", [False, True])
    @pytest.mark.parametrize("variant", SPIKING)
    def test_two_neuron_oracle(self, variant, soft):
        rng = np.random.default_rng(9)
        net = spiking_instance(variant, (1, 2), 1, soft, seed=2)
        counts = random_counts(rng, (1, 2), 3, 0.9)
        coefs = [rng.normal(size=(2, 1, 2)) for _ in range(3)]
        acts = [[0.3, -0.7, 0.0] for _ in range(3)]
        value, grads = run(net, counts, coefs, acts)
        ref_value, ref = spiking_network_oracle(net, counts, coefs, acts)
        assert value == pytest.approx(ref_value, rel=1e-12, abs=1e-14)
        for name in net.params:
            np.testing.assert_allclose(grads[name], ref[name], rtol=1e-12, atol=1e-14, err_msg=name)

    @pytest.mark.parametrize("variant", SPIKING)
    def test_two_channel_grid(self, variant):
        rng = np.random.default_rng(10)
        net = spiking_instance(variant, (2, 2), 2, surrogate=SurrogateConfig("superspike", 10), seed=4)
        counts = random_counts(rng, (2, 2), 3, 0.9)
        coefs = [rng.normal(size=(2, 2, 2)) for _ in range(3)]
        _, grads = run(net, counts, coefs)
        _, ref = spiking_network_oracle(net, counts, coefs)
        for name in net.params:
            np.testing.assert_allclose(grads[name], ref[name], rtol=1e-12, atol=1e-14, err_msg=name)


class TestBackwardProperties:
    @pytest.mark.parametrize("variant", ["rnn", "lif", "plif"])
    def test_zero_loss_gradient(self, variant):
        rng = np.random.default_rng(11)
        net = build_toy_firenet(variant, (6, 6))
        _, grads = run(net, random_counts(rng, (6, 6), 3), [np.zeros((2, 6, 6))] * 3)
        assert all(np.all(g == 0) for g in grads.values())

    def test_frozen_parameters_get_zero(self):
        rng = np.random.default_rng(12)
        net = spiking_instance("lif", (4, 4), 2)
        net.config.learnable["theta"] = False
        _, grads = run(net, random_counts(rng, (4, 4), 3), [rng.normal(size=(2, 4, 4)) for _ in range(3)])
        assert all(np.all(grads[n] == 0) for n in grads if n.endswith(".theta"))
        assert any(np.any(grads[n] != 0) for n in grads if n.endswith(".a"))

    def test_tape_mismatch(self):
        net = build_toy_firenet("rnn", (4, 4))
        net.forward(np.ones((2, 4, 4)))
        with pytest.raises(TapeError):
            net.backward([np.zeros((2, 4, 4))] * 2)

    @pytest.mark.parametrize("variant", ["rnn", "alif"])
    def test_detach_equals_constant_history(self, variant):
        rng = np.random.default_rng(13)
        net = spiking_instance(variant, (4, 4), 2) if variant == "alif" else build_toy_firenet(variant, (4, 4))
        history, window = random_counts(rng, (4, 4), 3), random_counts(rng, (4, 4), 3)
        coefs = [rng.normal(size=(2, 4, 4)) for _ in range(3)]
        ctx = net.new_context()
        for x in history:
            net.forward(x, ctx)
        net.detach_state(ctx)
        frozen = net.new_context()
        frozen.state = copy.deepcopy(ctx.state)
        _, g1 = run(net, window, coefs, ctx=ctx)
        _, g2 = run(net, window, coefs, ctx=frozen)
        for name in g1:
            np.testing.assert_array_equal(g1[name], g2[name])

    def test_detach_idempotent_and_noop_on_zero_state(self):
        net = build_toy_firenet("lif", (4, 4))
        ctx = net.new_context()
        before = copy.deepcopy(ctx.state)
        net.detach_state(ctx)
        net.detach_state(ctx)
        assert ctx.tape == []
        for a, b in zip(before, ctx.state):
            assert repr(a) == repr(b)


class TestCheckpoint:
    @pytest.mark.parametrize("variant", ["rnn", "xlif"])
    def test_bit_exact_round_trip(self, variant, tmp_path):
        net = build_toy_firenet(variant, (8, 8), seed=5)
        path = tmp_path / "net.npz"
        net.save(path)
        loaded = Network.load(path)
        assert loaded.config == net.config
        assert set(loaded.params) == set(net.params)
        for k in net.params:
            assert loaded.params[k].tobytes() == net.params[k].tobytes()
        x = np.random.default_rng(0).poisson(1.0, (2, 8, 8))
        np.testing.assert_array_equal(loaded.forward(x)[0], net.forward(x)[0])
