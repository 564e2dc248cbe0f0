"""Buffer-based BPTT training with Adam and global-norm clipping."""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from .events import EventPartition, flip_augment, partition_fixed_count, rasterize_counts
from .loss import (DEFAULT_LAMBDA, TrainPartition, activity_regularizer,
                   activity_regularizer_grad, combine, flow_loss_and_grad)
from .network import Network
from .warp import DEFAULT_WEIGHTING

FLIP_MODES = (None, "horizontal", "vertical", "polarity")


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    N: int = 1000
    K: int = 10
    lr: float = 2e-4
    batch_size: int = 8
    epochs: int = 100
    clip_norm: float = 100.0
    lam: float = DEFAULT_LAMBDA
    f_desired: float | None = None
    seed: int = 0
    max_steps: int | None = None
    augment: bool = True
    scaled: bool = True
    weighting: str = DEFAULT_WEIGHTING

    def __post_init__(self):
        if self.N < 1 or self.K < 1:
            raise ValueError("N and K must be at least 1")
        if self.batch_size < 1:
            raise ValueError("batch size must be at least 1")
        if self.lam < 0:
            raise ValueError("lambda must be non-negative")
        if self.lr < 0:
            raise ValueError("learning rate must be non-negative")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown training options: {', '.join(sorted(unknown))}")
        return cls(**d)

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

    def save(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)


# --------------------------------------------------------------------------
# optimiser
# --------------------------------------------------------------------------


@dataclass
class OptimState:
    lr: float = 2e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: dict, grads: dict, state: OptimState) -> dict:
    """One bias-corrected Adam update; returns new parameter arrays."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise TrainingError(f"non-finite gradient for {name} at optimiser step {state.step + 1}")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    out = {}
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            out[name] = p
            continue
        m = state.m.get(name, np.zeros_like(p))
        v = state.v.get(name, np.zeros_like(p))
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * g * g
        state.m[name], state.v[name] = m, v
        out[name] = p - state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return out


def global_norm(grads: dict) -> float:
    return float(np.sqrt(sum(float(np.sum(g * g)) for g in grads.values())))


def clip_global_norm(grads: dict, c: float) -> dict:
    norm = global_norm(grads)
    if norm > c:
        scale = c / norm
        return {k: g * scale for k, g in grads.items()}
    return dict(grads)


# --------------------------------------------------------------------------
# loop
# --------------------------------------------------------------------------


@dataclass
class TrainResult:
    log: list
    steps: int
    network: Network

    def column(self, key):
        return np.array([row[key] for row in self.log])


def _as_stream(seq) -> EventPartition:
    return seq.events if hasattr(seq, "events") else seq


def layer_grad_means(net: Network, grads: dict) -> dict:
    """Mean absolute gradient over every parameter of each layer."""
    sums, counts = {}, {}
    for name, g in grads.items():
        layer = net.layer_of(name)
        sums[layer] = sums.get(layer, 0.0) + float(np.abs(g).sum())
        counts[layer] = counts.get(layer, 0) + g.size
    return {layer.name: sums.get(layer.name, 0.0) / max(counts.get(layer.name, 1), 1) for layer in net.layers}


def log_columns(net: Network) -> list[str]:
    cols = ["step", "epoch", "contrast_fw", "contrast_bw", "contrast_total", "smoothness",
            "activity_reg", "total", "grad_norm"]
    cols += [f"act_{name}" for name in net.hidden_layer_names]
    cols += [f"grad_{layer.name}" for layer in net.layers]
    return cols


def write_log(rows, columns, path):
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=columns)
        writer.writeheader()
        for row in rows:
            writer.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})


def buffer_step(net: Network, samples, cfg: TrainConfig, contexts):
    """Forward K partitions for every sample, then one BPTT pass.

    ``samples`` is a list (one per batch element) of K-partition lists.
    Returns the batch-mean loss breakdown, gradients and mean activity.
    """
    spiking = net.spiking_layers
    breakdowns, total_grads, activity_sum = [], None, None
    for parts, ctx in zip(samples, contexts):
        tp = TrainPartition()
        activities = []
        for part in parts:
            flow, act = net.forward(rasterize_counts(part), ctx)
            tp.append(part, flow)
            activities.append(act)
        act_arr = np.array(activities)  # (K, hidden layers)
        act_reg, act_grads = 0.0, None
        if cfg.f_desired is not None and spiking:
            spk = act_arr[:, spiking]
            act_reg = activity_regularizer(spk.ravel(), cfg.f_desired)
            g = np.zeros((len(parts), len(net.layers)))
            g[:, spiking] = activity_regularizer_grad(spk, cfg.f_desired)
            act_grads = g.tolist()
        breakdown, flow_grads = flow_loss_and_grad(tp, cfg.lam, cfg.scaled, cfg.weighting, act_reg)
        if not np.isfinite(breakdown.total):
            raise TrainingError("non-finite loss")
        grads = net.backward(list(flow_grads), act_grads, ctx=ctx)
        breakdowns.append(breakdown)
        if total_grads is None:
            total_grads, activity_sum = grads, act_arr.mean(axis=0)
        else:
            for k in total_grads:
                total_grads[k] = total_grads[k] + grads[k]
            activity_sum = activity_sum + act_arr.mean(axis=0)
    n = len(samples)
    grads = {k: g / n for k, g in total_grads.items()}
    return combine(breakdowns), grads, activity_sum / n


def train_loop(net: Network, scenes, cfg: TrainConfig, log_path=None, checkpoint_path=None,
               callback=None) -> TrainResult:
    """Train ``net`` in place on event sequences (streams or synthetic scenes).

    Each sequence is cut into N-event partitions; every K consecutive
    partitions form one buffer that triggers exactly one optimiser step.
    """
    streams = [_as_stream(s) for s in scenes]
    if not streams:
        raise ValueError("no training sequences")
    rng = np.random.default_rng(cfg.seed)
    opt = OptimState(lr=cfg.lr)
    columns = log_columns(net)
    log = []
    step = 0
    done = False
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(streams))
        for start in range(0, len(order), cfg.batch_size):
            batch = []
            for i in order[start:start + cfg.batch_size]:
                stream = streams[i]
                mode = FLIP_MODES[rng.integers(len(FLIP_MODES))] if cfg.augment else None
                if mode is not None:
                    stream, _ = flip_augment(stream, None, mode)
                batch.append(partition_fixed_count(stream, cfg.N))
            cycles = min(len(parts) for parts in batch) // cfg.K
            if cycles == 0:
                raise ValueError(f"sequence shorter than K*N = {cfg.K * cfg.N} events")
            contexts = [net.new_context() for _ in batch]
            for c in range(cycles):
                samples = [parts[c * cfg.K:(c + 1) * cfg.K] for parts in batch]
                try:
                    breakdown, grads, activity = buffer_step(net, samples, cfg, contexts)
                except TrainingError as exc:
                    raise TrainingError(f"{exc} at step {step + 1}") from None
                norm = global_norm(grads)
                grad_means = layer_grad_means(net, grads)
                grads = clip_global_norm(grads, cfg.clip_norm)
                try:
                    net.params = adam_step(net.params, grads, opt)
                except TrainingError as exc:
                    raise TrainingError(f"{exc} (step {step + 1})") from None
                net.clamp()
                for ctx in contexts:
                    net.detach_state(ctx)
                step += 1
                row = {"step": step, "epoch": epoch}
                row.update({k: float(v) for k, v in breakdown.as_dict().items() if k != "event_pixel_count"})
                row["grad_norm"] = norm
                row.update({f"act_{n}": float(a) for n, a in zip(net.hidden_layer_names, activity)})
                row.update({f"grad_{n}": g for n, g in grad_means.items()})
                log.append(row)
                if callback is not None:
                    callback(row)
                if cfg.max_steps is not None and step >= cfg.max_steps:
                    done = True
                    break
            if done:
                break
        if done:
            break
    if log_path is not None:
        write_log(log, columns, log_path)
    if checkpoint_path is not None:
        net.save(checkpoint_path)
    return TrainResult(log, step, net)


def evaluate_flows(net: Network, stream: EventPartition, n: int):
    """Run ``net`` over consecutive n-event partitions; yields ``(partition, flow, activity)``."""
    ctx = net.new_context()
    for part in partition_fixed_count(stream, n):
        flow, act = net.forward(rasterize_counts(part), ctx, record=False)
        yield part, flow, act
