import numpy as np
import pytest

from evflow.events import partition_fixed_count, synth_translating_scene
from evflow.network import build_toy_firenet
from evflow.train import (OptimState, TrainConfig, TrainingError, adam_step, clip_global_norm, global_norm,
                          log_columns, train_loop)

# (step, m, v, param) for g = 1, -2, 0.5 with lr = 0.1 from param 0, worked by hand
ADAM_TABLE = [
    (1, 0.1, 0.001, -0.09999999900000009),
    (2, -0.11, 0.004999, -0.06338964652792523),
    (3, -0.049, 0.005244001, -0.049720580326178584),
]


def tiny_scenes(n=2, size=(12, 12)):
    return [synth_translating_scene(s, (6.0, -3.0), 2.0, size, n_dots=4) for s in range(n)]


def tiny_config(**kw):
    base = dict(N=40, K=2, lr=1e-3, batch_size=1, epochs=1, max_steps=3, augment=True)
    base.update(kw)
    return TrainConfig(**base)


class TestAdam:
    def test_hand_table(self):
        params = {"w": np.array([0.0])}
        state = OptimState(lr=0.1)
        for (step, m, v, p), g in zip(ADAM_TABLE, (1.0, -2.0, 0.5)):
            params = adam_step(params, {"w": np.array([g])}, state)
            assert state.step == step
            assert state.m["w"][0] == pytest.approx(m, rel=1e-12)
            assert state.v["w"][0] == pytest.approx(v, rel=1e-12)
            assert params["w"][0] == pytest.approx(p, rel=1e-12)

    def test_zero_gradient(self):
        params = {"w": np.array([1.5, -2.0])}
        out = adam_step(params, {"w": np.zeros(2)}, OptimState(lr=0.1))
        np.testing.assert_array_equal(out["w"], params["w"])

    def test_first_step_is_lr(self):
        out = adam_step({"w": np.array([0.0])}, {"w": np.array([1.0])}, OptimState(lr=2e-4))
        assert out["w"][0] == pytest.approx(-2e-4, rel=1e-6)

    def test_nan_aborts(self):
        with pytest.raises(TrainingError, match="non-finite gradient for w"):
            adam_step({"w": np.zeros(1)}, {"w": np.array([np.nan])}, OptimState())


class TestClip:
    def test_scaled(self):
        g = {"a": np.array([120.0]), "b": np.array([160.0])}
        out = clip_global_norm(g, 100)
        np.testing.assert_allclose(out["a"], [60.0])
        assert global_norm(out) == pytest.approx(100.0)

    def test_unchanged(self):
        g = {"a": np.array([30.0, 40.0])}
        np.testing.assert_array_equal(clip_global_norm(g, 100)["a"], g["a"])

    def test_bound_holds(self):
        rng = np.random.default_rng(0)
        for _ in range(50):
            g = {"a": rng.normal(size=5) * rng.uniform(0, 100), "b": rng.normal(size=3) * 50}
            assert global_norm(clip_global_norm(g, 10.0)) <= 10.0 * (1 + 1e-12)


class TestConfig:
    def test_defaults(self):
        c = TrainConfig()
        assert (c.N, c.K, c.lr, c.batch_size, c.epochs, c.clip_norm, c.lam) == (1000, 10, 2e-4, 8, 100, 100.0, 1e-3)

    def test_round_trip(self, tmp_path):
        c = TrainConfig(N=50, K=3, f_desired=0.05)
        c.save(tmp_path / "t.json")
        assert TrainConfig.load(tmp_path / "t.json") == c

    def test_rejects_unknown(self):
        with pytest.raises(ValueError, match="unknown training options"):
            TrainConfig.from_dict({"N": 10, "momentum": 0.9})

    @pytest.mark.parametrize("kw", [{"N": 0}, {"K": 0}, {"lam": -1.0}, {"batch_size": 0}])
    def test_invalid(self, kw):
        with pytest.raises(ValueError):
            TrainConfig(**kw)


class TestLoop:
    def test_one_buffer_one_step(self):
        scenes = tiny_scenes(1)
        cfg = tiny_config(max_steps=None, augment=False)
        parts = partition_fixed_count(scenes[0].events, cfg.N)
        res = train_loop(build_toy_firenet("lif", (12, 12)), scenes, cfg)
        assert res.steps == len(parts) // cfg.K == len(res.log)

    def test_lr_zero_keeps_weights(self):
        net = build_toy_firenet("alif", (12, 12), seed=1)
        before = {k: v.copy() for k, v in net.params.items()}
        train_loop(net, tiny_scenes(), tiny_config(lr=0.0, max_steps=4))
        for k in before:
            assert net.params[k].tobytes() == before[k].tobytes()

    def test_deterministic_logs(self, tmp_path):
        logs = []
        for run in range(2):
            path = tmp_path / f"log{run}.csv"
            train_loop(build_toy_firenet("lif", (12, 12), seed=2), tiny_scenes(), tiny_config(seed=5), log_path=path)
            logs.append(path.read_text())
        assert logs[0] == logs[1]

    def test_log_columns(self):
        net = build_toy_firenet("lif", (12, 12))
        res = train_loop(net, tiny_scenes(), tiny_config(f_desired=0.05))
        assert set(res.log[0]) == set(log_columns(net))
        for row in res.log:
            assert all(np.isfinite(row[f"grad_{layer.name}"]) for layer in net.layers)
            assert all(0 <= row[f"act_{n}"] <= 1 for n in net.hidden_layer_names)

    def test_clamps_hold(self):
        net = build_toy_firenet("alif", (12, 12))
        train_loop(net, tiny_scenes(), tiny_config(lr=0.5, max_steps=3))
        for name, v in net.params.items():
            if name.endswith((".beta0", ".theta")):
                assert v.min() >= 0.01
            if name.endswith(".beta1"):
                assert v.min() >= 0.0

    def test_parameters_move(self):
        net = build_toy_firenet("rnn", (12, 12))
        before = net.params["P.w"].copy()
        train_loop(net, tiny_scenes(), tiny_config())
        assert not np.array_equal(before, net.params["P.w"])

    def test_short_sequence(self):
        with pytest.raises(ValueError, match="shorter than"):
            train_loop(build_toy_firenet("lif", (12, 12)), tiny_scenes(1), tiny_config(N=10 ** 6))

    def test_non_finite_aborts_with_step(self):
        net = build_toy_firenet("rnn", (12, 12))
        net.params["P.w"][:] = np.nan
        with pytest.raises(TrainingError, match="step 1"):
            train_loop(net, tiny_scenes(), tiny_config())

    def test_checkpoint_written(self, tmp_path):
        net = build_toy_firenet("lif", (12, 12))
        train_loop(net, tiny_scenes(), tiny_config(max_steps=1), checkpoint_path=tmp_path / "c.npz")
        assert (tmp_path / "c.npz").stat().st_size > 0
