"""Loss landscapes, direct contrast-maximisation estimates, activity and energy reports."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from .events import EventPartition
from .loss import T_REF_BW, T_REF_FW
from .warp import DEFAULT_WEIGHTING, EPS, bilinear_footprint, normalize_timestamps, reference_timestamps

LANDSCAPE_D = (128, 256, 512, 1024)
DEFAULT_SAMPLES = 128
DEFAULT_MAC_FACTOR = 5.0


# --------------------------------------------------------------------------
# loss landscape
# --------------------------------------------------------------------------


def grid_coordinate(i, d, samples=DEFAULT_SAMPLES):
    """``g(i, d) = 2 i d / samples - d``."""
    return 2.0 * np.asarray(i, dtype=np.float64) * d / samples - d


def grid_axis(d, samples=DEFAULT_SAMPLES) -> np.ndarray:
    return grid_coordinate(np.arange(samples), d, samples)


def constant_flow_losses(partition: EventPartition, flows, scaled=True, weighting=DEFAULT_WEIGHTING,
                         t_refs=(T_REF_FW, T_REF_BW), block=64) -> np.ndarray:
    """Contrast loss (summed over ``t_refs``) of one partition under many constant flows.

    ``flows`` is ``(M, 2)`` in pixels per partition. Equivalent to calling
    the loss module once per flow, but with one scatter per block of flows.
    """
    flows = np.atleast_2d(np.asarray(flows, dtype=np.float64))
    out = np.zeros(len(flows))
    n = len(partition)
    if n == 0:
        return out
    h, w = partition.sensor_size
    hw = h * w
    tau = normalize_timestamps(partition.t)
    pos = partition.p > 0
    x = partition.x.astype(np.float64)
    y = partition.y.astype(np.float64)
    for t_ref in t_refs:
        dt = t_ref - tau
        ts = reference_timestamps(tau, t_ref, weighting)
        for start in range(0, len(flows), block):
            fl = flows[start:start + block]
            m = len(fl)
            xw = x[None, :] + dt[None, :] * fl[:, 0:1]
            yw = y[None, :] + dt[None, :] * fl[:, 1:2]
            fp = bilinear_footprint(xw.ravel(), yw.ravel(), (h, w))
            offset = np.repeat(np.arange(m) * hw, n)[:, None]
            idx = (fp.idx + offset).ravel()
            wts = fp.w
            tsr = np.tile(ts, m)[:, None]
            pr = np.tile(pos, m)[:, None]
            size = m * hw
            num_p = np.bincount(idx, weights=(wts * tsr * pr).ravel(), minlength=size)
            den_p = np.bincount(idx, weights=(wts * pr).ravel(), minlength=size)
            num_n = np.bincount(idx, weights=(wts * tsr * ~pr).ravel(), minlength=size)
            den_n = np.bincount(idx, weights=(wts * ~pr).ravel(), minlength=size)
            t_pos = (num_p / (den_p + EPS)).reshape(m, hw)
            t_neg = (num_n / (den_n + EPS)).reshape(m, hw)
            val = np.sum(t_pos ** 2, axis=1) + np.sum(t_neg ** 2, axis=1)
            if scaled:
                support = np.count_nonzero((den_p + den_n).reshape(m, hw) > 0, axis=1)
                val = val / (support + EPS)
            out[start:start + m] += val
    return out


@dataclass
class LossGrid:
    d: float
    samples: int
    scaled: bool
    values: np.ndarray  # values[j, i]: v = g(j), u = g(i)
    weighting: str = DEFAULT_WEIGHTING

    @property
    def axis(self) -> np.ndarray:
        return grid_axis(self.d, self.samples)

    @property
    def cell(self) -> float:
        return 2.0 * self.d / self.samples

    def argmin(self) -> tuple[int, int]:
        """``(i, j)`` grid indices of the minimum (u index, v index)."""
        j, i = np.unravel_index(int(np.argmin(self.values)), self.values.shape)
        return int(i), int(j)

    def argmin_flow(self) -> tuple[float, float]:
        i, j = self.argmin()
        ax = self.axis
        return float(ax[i]), float(ax[j])

    def argmin_on_boundary(self) -> bool:
        i, j = self.argmin()
        last = self.samples - 1
        return i in (0, last) or j in (0, last)

    def write_csv(self, path):
        ax = self.axis
        with open(path, "w", newline="") as fh:
            fh.write(f"# d: {self.d!r}\n# samples: {self.samples}\n# scaled: {str(self.scaled).lower()}\n")
            fh.write(f"# weighting: {self.weighting}\n")
            writer = csv.writer(fh)
            writer.writerow(["i", "j", "u", "v", "loss"])
            for j in range(self.samples):
                for i in range(self.samples):
                    writer.writerow([i, j, repr(float(ax[i])), repr(float(ax[j])), repr(float(self.values[j, i]))])

    @classmethod
    def read_csv(cls, path) -> "LossGrid":
        meta = {}
        rows = []
        with open(path) as fh:
            for line in fh:
                if line.startswith("#"):
                    key, _, value = line[1:].partition(":")
                    meta[key.strip()] = value.strip()
                    continue
                rows.append(line)
        reader = csv.DictReader(rows)
        samples = int(meta["samples"])
        values = np.zeros((samples, samples))
        for r in reader:
            values[int(r["j"]), int(r["i"])] = float(r["loss"])
        return cls(float(meta["d"]), samples, meta["scaled"] == "true", values,
                   meta.get("weighting", DEFAULT_WEIGHTING))


def loss_landscape(partition: EventPartition, d, samples=DEFAULT_SAMPLES, scaled=True,
                   weighting=DEFAULT_WEIGHTING) -> LossGrid:
    """Forward-plus-backward contrast loss over the constant-flow grid ``[-d, d)^2``."""
    ax = grid_axis(d, samples)
    uu, vv = np.meshgrid(ax, ax)
    flows = np.stack([uu.ravel(), vv.ravel()], axis=1)
    values = constant_flow_losses(partition, flows, scaled, weighting).reshape(samples, samples)
    return LossGrid(float(d), int(samples), bool(scaled), values, weighting)


# --------------------------------------------------------------------------
# direct estimation
# --------------------------------------------------------------------------


@dataclass
class CMEstimate:
    u: float
    v: float
    loss: float
    degenerate: bool = False
    history: list = field(default_factory=list)

    def flow_field(self, sensor_size) -> np.ndarray:
        h, w = sensor_size
        out = np.empty((2, h, w))
        out[0], out[1] = self.u, self.v
        return out


def estimate_flow_cm(partition: EventPartition, d=16.0, samples=33, levels=6, shrink=4.0,
                     weighting=DEFAULT_WEIGHTING) -> CMEstimate:
    """Constant flow minimising the scaled contrast loss, by coarse-to-fine grid search.

    Each level re-centres a ``samples x samples`` grid on the best point so far,
    with a half-width of ``shrink`` cells of the previous level. The best
    sampled point is never discarded.
    """
    if len(partition) == 0 or np.ptp(partition.t) == 0:
        return CMEstimate(0.0, 0.0, float("nan"), degenerate=True)
    center = np.zeros(2)
    half = float(d)
    best_flow, best_loss = None, math.inf
    history = []
    for _ in range(levels):
        ax = np.linspace(-half, half, samples)
        uu, vv = np.meshgrid(center[0] + ax, center[1] + ax)
        flows = np.stack([uu.ravel(), vv.ravel()], axis=1)
        vals = constant_flow_losses(partition, flows, True, weighting)
        k = int(np.argmin(vals))
        if vals[k] < best_loss:
            best_loss, best_flow = float(vals[k]), flows[k].copy()
        history.append((half, float(best_flow[0]), float(best_flow[1]), best_loss))
        center = best_flow
        half = shrink * (2.0 * half / (samples - 1))
    return CMEstimate(float(best_flow[0]), float(best_flow[1]), best_loss, False, history)


# --------------------------------------------------------------------------
# activity and energy
# --------------------------------------------------------------------------


@dataclass
class ActivityReport:
    layers: list
    per_step: np.ndarray  # (steps, layers) fraction of nonzero activations
    flow_magnitude: np.ndarray | None = None  # (steps,) mean |flow| over event pixels

    @property
    def layer_means(self) -> np.ndarray:
        if len(self.per_step) == 0:
            return np.zeros(len(self.layers))
        return self.per_step.mean(axis=0)

    @property
    def mean_activity(self) -> float:
        return float(self.layer_means.mean()) if len(self.layers) else 0.0

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            header = ["step"] + list(self.layers)
            if self.flow_magnitude is not None:
                header.append("flow_magnitude")
            writer.writerow(header)
            for k, row in enumerate(self.per_step):
                out = [k] + [repr(float(v)) for v in row]
                if self.flow_magnitude is not None:
                    out.append(repr(float(self.flow_magnitude[k])))
                writer.writerow(out)
            mean_row = ["mean"] + [repr(float(v)) for v in self.layer_means]
            if self.flow_magnitude is not None:
                fm = self.flow_magnitude
                mean_row.append(repr(float(np.mean(fm))) if len(fm) else "nan")
            writer.writerow(mean_row)


def activity_report(records, layers, flows=None, masks=None) -> ActivityReport:
    """Collect per-step activity fractions (and optionally the mean flow magnitude
    over event pixels, for pairing activity with apparent motion)."""
    per_step = np.array(records, dtype=np.float64).reshape(len(records), len(layers))
    if per_step.size and (per_step.min() < 0 or per_step.max() > 1):
        raise ValueError("activity fractions must lie in [0, 1]")
    mags = None
    if flows is not None:
        mags = []
        for k, f in enumerate(flows):
            f = np.asarray(f, dtype=np.float64)
            mag = np.sqrt(f[0] ** 2 + f[1] ** 2)
            m = np.asarray(masks[k], dtype=bool) if masks is not None else mag > 0
            mags.append(float(mag[m].mean()) if m.any() else 0.0)
        mags = np.array(mags)
    return ActivityReport(list(layers), per_step, mags)


def synaptic_ops(net) -> dict:
    """Multiply-accumulate count per layer and timestep (feedforward, recurrent and output gates)."""
    out = {}
    for layer in net.layers:
        s = layer.spec
        h, w = layer.out_shape
        ops = h * w * s.out_channels * s.in_channels * s.kernel ** 2
        if s.kind in ("convrnn_snn", "convrnn_ann"):
            ops += h * w * s.out_channels * s.out_channels * s.kernel ** 2
        if s.kind == "convrnn_ann":
            ops += h * w * s.out_channels * s.out_channels * s.kernel ** 2
        out[layer.name] = ops
    return out


@dataclass
class EnergyReport:
    layers: list
    activity: np.ndarray
    ops: np.ndarray
    mac_factor: float
    ac_unit: float
    snn_energy: float
    ann_energy: float
    efficiency_ratio: float
    note: str = ("synaptic operations only; memory access, neuron updates and "
                 "hardware overheads are ignored")

    @property
    def defined(self) -> bool:
        return not math.isnan(self.efficiency_ratio)

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            fh.write(f"# {self.note}\n")
            writer = csv.writer(fh)
            writer.writerow(["layer", "activity", "ops", "snn_energy", "ann_energy"])
            for name, a, o in zip(self.layers, self.activity, self.ops):
                writer.writerow([name, repr(float(a)), int(o), repr(float(a * o * self.ac_unit)),
                                 repr(float(o * self.mac_factor * self.ac_unit))])
            ratio = "undefined" if not self.defined else repr(self.efficiency_ratio)
            writer.writerow(["total", "", int(self.ops.sum()), repr(self.snn_energy), repr(self.ann_energy)])
            writer.writerow(["efficiency_ratio", ratio, "", "", ""])


def energy_estimate(activity, ops=None, mac_factor=DEFAULT_MAC_FACTOR, ac_unit=1.0, layers=None) -> EnergyReport:
    """Synaptic-operation energy of an SNN (AC per active input) against an ANN (MAC per input).

    With one layer (or equal activity everywhere) the ratio reduces to
    ``mac_factor / activity``. Zero activity makes the ratio undefined (NaN).
    """
    act = np.atleast_1d(np.asarray(activity, dtype=np.float64))
    ops_arr = np.ones_like(act) if ops is None else np.atleast_1d(np.asarray(ops, dtype=np.float64))
    if act.shape != ops_arr.shape:
        raise ValueError("activity and op counts must have one entry per layer")
    if np.any(act < 0) or np.any(act > 1):
        raise ValueError("activity fractions must lie in [0, 1]")
    names = list(layers) if layers is not None else [f"L{i}" for i in range(len(act))]
    snn = float(np.sum(act * ops_arr) * ac_unit)
    ann = float(np.sum(ops_arr) * mac_factor * ac_unit)
    mean_act = float(np.sum(act * ops_arr) / np.sum(ops_arr))
    ratio = mac_factor / mean_act if mean_act > 0 else float("nan")
    return EnergyReport(names, act, ops_arr, float(mac_factor), float(ac_unit), snn, ann, ratio)


# --------------------------------------------------------------------------
# flow files
# --------------------------------------------------------------------------


def write_flow(path, flow, meta=None):
    """Flow CSV: optional ``# key: value`` lines, an ``H,W,units`` header, then ``y,x,u,v`` rows."""
    flow = np.asarray(flow, dtype=np.float64)
    _, h, w = flow.shape
    with open(path, "w", newline="") as fh:
        for key, value in (meta or {}).items():
            fh.write(f"# {key}: {value}\n")
        writer = csv.writer(fh)
        writer.writerow(["H", "W", "units"])
        writer.writerow([h, w, "px/partition"])
        writer.writerow(["y", "x", "u", "v"])
        for yy in range(h):
            for xx in range(w):
                writer.writerow([yy, xx, repr(float(flow[0, yy, xx])), repr(float(flow[1, yy, xx]))])


def read_flow(path):
    """Returns ``(flow, meta)``."""
    meta = {}
    with open(path) as fh:
        lines = [ln for ln in fh.read().splitlines() if ln.strip()]
    body = []
    for ln in lines:
        if ln.startswith("#"):
            key, _, value = ln[1:].partition(":")
            meta[key.strip()] = value.strip()
        else:
            body.append(ln)
    if len(body) < 3 or body[0].split(",")[:2] != ["H", "W"]:
        raise ValueError(f"{path}: not a flow file")
    h, w, units = body[1].split(",")
    if units.strip() != "px/partition":
        raise ValueError(f"{path}: unsupported flow units {units!r}")
    h, w = int(h), int(w)
    flow = np.zeros((2, h, w))
    for ln in body[3:]:
        yy, xx, u, v = ln.split(",")
        flow[0, int(yy), int(xx)] = float(u)
        flow[1, int(yy), int(xx)] = float(v)
    return flow, meta
