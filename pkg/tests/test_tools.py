import math

import numpy as np
import pytest

from evflow.events import EventPartition, flip_augment, partition_fixed_count, synth_translating_scene
from evflow.loss import TrainPartition, contrast_fw_bw
from evflow.network import build_toy_firenet
from evflow.tools import (LANDSCAPE_D, LossGrid, activity_report, constant_flow_losses, energy_estimate,
                          estimate_flow_cm, grid_axis, grid_coordinate, loss_landscape, read_flow, synaptic_ops,
                          write_flow)


def scene_partition(seed=0, flow=(40.0, 15.0), size=(32, 32), n=1500, index=1):
    scene = synth_translating_scene(seed, flow, 1.0, size)
    return scene, partition_fixed_count(scene.events, n)[index]


def constant(u, v, size):
    f = np.empty((2,) + size)
    f[0], f[1] = u, v
    return f


class TestGrid:
    def test_coordinates(self):
        assert grid_coordinate(0, 128, 128) == -128
        assert grid_coordinate(64, 128, 128) == 0
        assert grid_axis(16, 65)[0] == -16

    def test_landscape_set(self):
        assert LANDSCAPE_D == (128, 256, 512, 1024)

    def test_batched_matches_loss_module(self):
        _, part = scene_partition()
        flows = np.array([[0.0, 0.0], [1.3, -0.4], [-7.0, 2.5]])
        batched = constant_flow_losses(part, flows, block=2)
        for f, val in zip(flows, batched):
            ref = sum(contrast_fw_bw(TrainPartition([(part, constant(f[0], f[1], (32, 32)))])))
            assert val == pytest.approx(ref, rel=1e-12)

    def test_unscaled_matches_loss_module(self):
        _, part = scene_partition(1)
        val = constant_flow_losses(part, [[2.0, 1.0]], scaled=False)[0]
        ref = sum(contrast_fw_bw(TrainPartition([(part, constant(2.0, 1.0, (32, 32)))]), scaled=False))
        assert val == pytest.approx(ref, rel=1e-12)

    def test_flip_mirrors_grid(self):
        _, part = scene_partition(2)
        samples = 16
        grid = loss_landscape(part, 8, samples)
        flipped, _ = flip_augment(part, None, "horizontal")
        mirror = loss_landscape(flipped, 8, samples)
        # g(i) = -g(samples - i)
        for i in range(1, samples):
            np.testing.assert_allclose(mirror.values[:, samples - i], grid.values[:, i], rtol=1e-12)

    def test_scaled_argmin_near_truth(self):
        scene, part = scene_partition(3)
        gt = scene.gt_flow(part)[:, 0, 0]
        grid = loss_landscape(part, 16, 33)
        u, v = grid.argmin_flow()
        assert abs(u - gt[0]) <= grid.cell and abs(v - gt[1]) <= grid.cell

    def test_csv_round_trip(self, tmp_path):
        _, part = scene_partition(4)
        grid = loss_landscape(part, 4, 9, scaled=False)
        grid.write_csv(tmp_path / "g.csv")
        text = (tmp_path / "g.csv").read_text()
        assert text.startswith("# d: 4.0\n# samples: 9\n# scaled: false\n")
        back = LossGrid.read_csv(tmp_path / "g.csv")
        assert (back.d, back.samples, back.scaled) == (4.0, 9, False)
        np.testing.assert_array_equal(back.values, grid.values)

    def test_boundary_detection(self):
        values = np.ones((5, 5))
        values[2, 2] = 0
        assert not LossGrid(2, 5, True, values).argmin_on_boundary()
        values[0, 3] = -1
        assert LossGrid(2, 5, True, values).argmin_on_boundary()


class TestEstimate:
    @pytest.mark.parametrize("seed,flow", [(0, (60.0, 40.0)), (1, (-50.0, 30.0)), (2, (20.0, -70.0))])
    def test_within_half_pixel(self, seed, flow):
        scene = synth_translating_scene(seed, flow, 0.6, (64, 64))
        ev = scene.events
        t0 = ev.t[np.searchsorted(ev.t, 0.2)]
        sel = (ev.t >= t0) & (ev.t <= t0 + 0.1)
        part = EventPartition(ev.t[sel], ev.x[sel], ev.y[sel], ev.p[sel], (64, 64))
        gt = scene.gt_flow(part)[:, 0, 0]
        est = estimate_flow_cm(part)
        assert not est.degenerate
        assert abs(est.u - gt[0]) <= 0.5 and abs(est.v - gt[1]) <= 0.5

    def test_static_scene(self):
        # a flickering static pattern: every pixel fires repeatedly with its own polarity
        rng = np.random.default_rng(0)
        xs, ys = np.meshgrid(np.arange(6, 26, 3), np.arange(6, 26, 3))
        pol = np.repeat(rng.choice([-1, 1], xs.size), 8)
        xs, ys = np.repeat(xs.ravel(), 8), np.repeat(ys.ravel(), 8)
        order = rng.permutation(xs.size)
        t = np.sort(rng.uniform(0, 1, xs.size))
        part = EventPartition(t, xs[order], ys[order], pol[order], (32, 32))
        est = estimate_flow_cm(part)
        assert abs(est.u) <= 0.5 and abs(est.v) <= 0.5

    def test_never_worse_than_coarse_grid(self):
        _, part = scene_partition(6)
        est = estimate_flow_cm(part, d=16, samples=17, levels=4)
        ax = np.linspace(-16, 16, 17)
        uu, vv = np.meshgrid(ax, ax)
        coarse = constant_flow_losses(part, np.stack([uu.ravel(), vv.ravel()], axis=1))
        assert est.loss <= coarse.min()
        assert [h[3] for h in est.history] == sorted([h[3] for h in est.history], reverse=True)

    def test_degenerate(self):
        part = EventPartition([0.5, 0.5], [1, 2], [1, 1], [1, 1], (4, 4))
        assert estimate_flow_cm(part).degenerate


class TestActivity:
    def test_zero_spike_run(self):
        rep = activity_report([[0.0, 0.0]] * 4, ["E1", "R1"])
        assert np.all(rep.layer_means == 0) and rep.mean_activity == 0.0

    def test_recount(self):
        rng = np.random.default_rng(0)
        net = build_toy_firenet("lif", (8, 8), seed=1)
        for name in net.params:
            if name.endswith(".w") and name != "P.w":
                net.params[name] = net.params[name] * 3
        ctx = net.new_context()
        records, recount = [], []
        for _ in range(6):
            _, act = net.forward(rng.poisson(1.0, (2, 8, 8)), ctx)
            records.append(act)
            counts = []
            for state in ctx.state[:-1]:
                s = state["S"]
                counts.append(sum(1 for v in s.ravel() if v != 0) / s.size)
            recount.append(counts)
        rep = activity_report(records, net.hidden_layer_names)
        np.testing.assert_allclose(rep.layer_means, np.mean(recount, axis=0), rtol=1e-15)
        assert rep.per_step.min() >= 0 and rep.per_step.max() <= 1
        assert rep.layer_means.max() > 0

    def test_flow_magnitude_pairing(self, tmp_path):
        flows = [np.stack([np.full((2, 2), 3.0), np.full((2, 2), 4.0)])]
        masks = [np.array([[1, 0], [0, 0]], dtype=bool)]
        rep = activity_report([[0.5]], ["E1"], flows, masks)
        assert rep.flow_magnitude.tolist() == [5.0]
        rep.write_csv(tmp_path / "a.csv")
        rows = (tmp_path / "a.csv").read_text().splitlines()
        assert rows[0] == "step,E1,flow_magnitude" and rows[-1].startswith("mean,0.5")

    def test_rejects_out_of_range(self):
        with pytest.raises(ValueError):
            activity_report([[1.5]], ["E1"])


class TestEnergy:
    @pytest.mark.parametrize("activity,ratio", [(0.2, 25.0), (1.0, 5.0), (0.5, 10.0)])
    def test_ratio(self, activity, ratio):
        assert energy_estimate(activity, mac_factor=5).efficiency_ratio == ratio

    def test_costs(self):
        rep = energy_estimate([0.2, 0.4], ops=[100, 300], mac_factor=5, ac_unit=2.0)
        assert rep.snn_energy == pytest.approx((0.2 * 100 + 0.4 * 300) * 2)
        assert rep.ann_energy == 400 * 5 * 2
        assert rep.efficiency_ratio == pytest.approx(rep.ann_energy / rep.snn_energy)

    def test_zero_activity_undefined(self, tmp_path):
        rep = energy_estimate([0.0, 0.0])
        assert math.isnan(rep.efficiency_ratio) and not rep.defined
        rep.write_csv(tmp_path / "e.csv")
        assert "efficiency_ratio,undefined" in (tmp_path / "e.csv").read_text()

    def test_synaptic_ops(self):
        net = build_toy_firenet("lif", (4, 4))
        ops = synaptic_ops(net)
        assert ops["E1"] == 16 * 8 * 2 * 9
        assert ops["R1"] == 2 * 16 * 8 * 8 * 9
        assert ops["P"] == 16 * 2 * 8


class TestFlowFile:
    def test_round_trip(self, tmp_path):
        flow = np.random.default_rng(0).normal(size=(2, 3, 4))
        write_flow(tmp_path / "f.csv", flow, {"flow_px_s": "10.0,0.0"})
        back, meta = read_flow(tmp_path / "f.csv")
        np.testing.assert_array_equal(back, flow)
        assert meta == {"flow_px_s": "10.0,0.0"}
        assert "H,W,units\n3,4,px/partition\ny,x,u,v\n" in (tmp_path / "f.csv").read_text()

    def test_not_a_flow_file(self, tmp_path):
        (tmp_path / "x.csv").write_text("a,b\n1,2\n")
        with pytest.raises(ValueError):
            read_flow(tmp_path / "x.csv")
