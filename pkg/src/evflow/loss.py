"""Self-supervised flow loss: scaled contrast, smoothness and activity terms.

A :class:`TrainPartition` holds ``K`` consecutive ``(partition, flow)``
tuples. Timestamps are normalised over the union of the K partitions, so
one unit of normalised time spans K partitions and warps are scaled by K.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .events import EventPartition, rasterize_counts
from .warp import (
    DEFAULT_WEIGHTING,
    EPS,
    bilinear_footprint,
    images_from_footprint,
    normalize_timestamps,
    reference_timestamps,
    warp_coordinates,
)

T_REF_BW = 0.0
T_REF_FW = 1.0
CHARBONNIER_DELTA = 1e-3
DEFAULT_LAMBDA = 0.001
DEFAULT_F_DESIRED = 0.05


@dataclass
class LossBreakdown:
    contrast_fw: float
    contrast_bw: float
    contrast_total: float
    smoothness: float
    activity_reg: float
    total: float
    event_pixel_count: int

    def as_dict(self):
        return {
            "contrast_fw": self.contrast_fw,
            "contrast_bw": self.contrast_bw,
            "contrast_total": self.contrast_total,
            "smoothness": self.smoothness,
            "activity_reg": self.activity_reg,
            "total": self.total,
            "event_pixel_count": self.event_pixel_count,
        }


@dataclass
class TrainPartition:
    """Buffer of K ``(EventPartition, flow)`` tuples evaluated jointly."""

    tuples: list = field(default_factory=list)

    def append(self, partition: EventPartition, flow) -> None:
        self.tuples.append((partition, np.asarray(flow, dtype=np.float64)))

    def clear(self) -> None:
        self.tuples.clear()

    @property
    def K(self) -> int:
        return len(self.tuples)

    @property
    def sensor_size(self):
        return self.tuples[0][0].sensor_size

    def flows(self) -> list[np.ndarray]:
        return [f for _, f in self.tuples]

    def masks(self) -> np.ndarray:
        return np.stack([rasterize_counts(p).sum(axis=0) > 0 for p, _ in self.tuples])

    def gather(self):
        """Concatenate all events with their tuple index, sampled flow and tau."""
        parts = [p for p, _ in self.tuples]
        x = np.concatenate([p.x for p in parts])
        y = np.concatenate([p.y for p in parts])
        pol = np.concatenate([p.p for p in parts])
        t = np.concatenate([p.t for p in parts])
        k = np.concatenate([np.full(len(p), i) for i, p in enumerate(parts)]).astype(np.int64)
        u = np.concatenate([f[0, p.y, p.x] for p, f in self.tuples])
        v = np.concatenate([f[1, p.y, p.x] for p, f in self.tuples])
        return {"x": x, "y": y, "p": pol, "tau": normalize_timestamps(t), "k": k, "u": u, "v": v}


def as_train_partition(obj) -> TrainPartition:
    if isinstance(obj, TrainPartition):
        return obj
    if isinstance(obj, tuple) and len(obj) == 2 and isinstance(obj[0], EventPartition):
        return TrainPartition([(obj[0], np.asarray(obj[1], dtype=np.float64))])
    return TrainPartition([(p, np.asarray(f, dtype=np.float64)) for p, f in obj])


def _contrast(tp: TrainPartition, t_ref, scaled, weighting, want_grad):
    ev = tp.gather()
    shape = tp.sensor_size
    K = tp.K
    xw, yw = warp_coordinates(ev["x"], ev["y"], ev["tau"], ev["u"], ev["v"], t_ref, scale=K)
    fp = bilinear_footprint(xw, yw, shape)
    ts = reference_timestamps(ev["tau"], t_ref, weighting)
    res = images_from_footprint(fp, ts, ev["p"])
    support = int(np.count_nonzero(res.count_img > 0))
    numerator = float(np.sum(res.t_img_pos ** 2) + np.sum(res.t_img_neg ** 2))
    norm = (support + EPS) if scaled else 1.0
    value = numerator / norm
    if not want_grad:
        return value, support, None
    h, w = shape
    # dA/dnum = 2T/(den+eps), dA/dden = -2T^2/(den+eps); support count held constant
    g_num = np.empty((2, h * w))
    g_den = np.empty((2, h * w))
    for c, (t_img, den) in enumerate(((res.t_img_pos, res.denom_pos), (res.t_img_neg, res.denom_neg))):
        g_num[c] = (2.0 * t_img / (den + EPS)).ravel()
        g_den[c] = (-2.0 * t_img ** 2 / (den + EPS)).ravel()
    ch = (ev["p"] < 0).astype(np.int64)[:, None]
    dA_dw = g_num[ch, fp.idx] * ts[:, None] + g_den[ch, fp.idx]
    dA_dxw = np.sum(dA_dw * fp.dwdx, axis=1)
    dA_dyw = np.sum(dA_dw * fp.dwdy, axis=1)
    lever = (t_ref - ev["tau"]) * K / norm
    flat = ev["k"] * h * w + ev["y"] * w + ev["x"]
    gu = np.bincount(flat, weights=dA_dxw * lever, minlength=K * h * w).reshape(K, h, w)
    gv = np.bincount(flat, weights=dA_dyw * lever, minlength=K * h * w).reshape(K, h, w)
    return value, support, np.stack([gu, gv], axis=1)


def contrast_loss(train_partition, t_ref, scaled=True, weighting=DEFAULT_WEIGHTING) -> float:
    """Sum of squared average-timestamp images, optionally divided by the
    number of pixels that receive warped events."""
    tp = as_train_partition(train_partition)
    if tp.K == 0 or sum(len(p) for p, _ in tp.tuples) == 0:
        return 0.0
    return _contrast(tp, t_ref, scaled, weighting, False)[0]


def contrast_fw_bw(train_partition, scaled=True, weighting=DEFAULT_WEIGHTING):
    """Contrast loss warped forward (``t_ref=1``) and backward (``t_ref=0``)."""
    tp = as_train_partition(train_partition)
    return (contrast_loss(tp, T_REF_FW, scaled, weighting), contrast_loss(tp, T_REF_BW, scaled, weighting))


def event_pixel_count(train_partition, t_ref=T_REF_FW, weighting=DEFAULT_WEIGHTING) -> int:
    tp = as_train_partition(train_partition)
    if tp.K == 0 or sum(len(p) for p, _ in tp.tuples) == 0:
        return 0
    return _contrast(tp, t_ref, True, weighting, False)[1]


def grad_contrast(train_partition, scaled=True, weighting=DEFAULT_WEIGHTING) -> np.ndarray:
    """Gradient of ``fw + bw`` contrast w.r.t. each tuple's flow, shape ``(K, 2, H, W)``.

    The pixel-support count in the scaled denominator is treated as constant.
    """
    tp = as_train_partition(train_partition)
    h, w = tp.sensor_size
    grad = np.zeros((tp.K, 2, h, w))
    if tp.K == 0 or sum(len(p) for p, _ in tp.tuples) == 0:
        return grad
    for t_ref in (T_REF_FW, T_REF_BW):
        grad += _contrast(tp, t_ref, scaled, weighting, True)[2]
    return grad


def charbonnier(z, delta=CHARBONNIER_DELTA):
    return np.sqrt(z * z + delta * delta)


def _smoothness_pairs(flows, masks):
    flows = np.asarray(flows, dtype=np.float64)
    masks = np.asarray(masks, dtype=bool)
    if flows.ndim == 3:
        flows = flows[None]
        masks = masks[None] if masks.ndim == 2 else masks
    pairs = []
    # (slice a, slice b) along x, y, and time
    pairs.append(((slice(None), slice(None), slice(None, -1)), (slice(None), slice(None), slice(1, None))))
    pairs.append(((slice(None), slice(None, -1), slice(None)), (slice(None), slice(1, None), slice(None))))
    pairs.append(((slice(None, -1), slice(None), slice(None)), (slice(1, None), slice(None), slice(None))))
    return flows, masks, pairs


def charbonnier_smoothness(flows, masks, delta=CHARBONNIER_DELTA, want_grad=False):
    """Mean Charbonnier penalty over masked-in spatial and temporal neighbour pairs.

    ``flows`` is ``(K, 2, H, W)`` (or a single ``(2, H, W)`` field) and
    ``masks`` ``(K, H, W)``. Each valid pair contributes ``rho(du) + rho(dv)``.
    Returns the value, or ``(value, grad)`` with ``want_grad``.
    """
    flows, masks, pairs = _smoothness_pairs(flows, masks)
    grad = np.zeros_like(flows)
    total = 0.0
    n = 0
    for sa, sb in pairs:
        valid = masks[sa] & masks[sb]
        count = int(valid.sum())
        if count == 0:
            continue
        n += count
        for c in range(2):
            fa = flows[:, c][sa]
            fb = flows[:, c][sb]
            diff = fb - fa
            rho = charbonnier(diff, delta)
            total += float(rho[valid].sum())
            d = np.where(valid, diff / rho, 0.0)
            gc = grad[:, c]
            gc[sb] += d
            gc[sa] -= d
    if n == 0:
        return (0.0, grad) if want_grad else 0.0
    value = total / n
    return (value, grad / n) if want_grad else value


def mask_flow(flow, count_grid) -> np.ndarray:
    """Zero the flow wherever neither polarity has an event."""
    flow = np.asarray(flow, dtype=np.float64)
    counts = np.asarray(count_grid)
    active = counts.sum(axis=0) > 0 if counts.ndim == 3 else counts > 0
    if active.shape != flow.shape[-2:]:
        raise ValueError(f"shape mismatch: flow {flow.shape} vs counts {counts.shape}")
    return flow * active


def activity_regularizer(fractions, f_desired=DEFAULT_F_DESIRED) -> float:
    """``sum_l max(0, f_desired - f_l)^2`` over spiking layers."""
    f = np.asarray(fractions, dtype=np.float64)
    return float(np.sum(np.maximum(0.0, f_desired - f) ** 2))


def activity_regularizer_grad(fractions, f_desired=DEFAULT_F_DESIRED) -> np.ndarray:
    f = np.asarray(fractions, dtype=np.float64)
    return -2.0 * np.maximum(0.0, f_desired - f)


def flow_loss_and_grad(train_partition, lam=DEFAULT_LAMBDA, scaled=True,
                       weighting=DEFAULT_WEIGHTING, activity_reg=0.0):
    """Total loss breakdown plus its gradient w.r.t. every tuple's flow."""
    tp = as_train_partition(train_partition)
    fw, bw = contrast_fw_bw(tp, scaled, weighting)
    flows = np.stack(tp.flows())
    smooth, g_smooth = charbonnier_smoothness(flows, tp.masks(), want_grad=True)
    grad = grad_contrast(tp, scaled, weighting) + lam * g_smooth
    breakdown = LossBreakdown(
        contrast_fw=fw,
        contrast_bw=bw,
        contrast_total=fw + bw,
        smoothness=smooth,
        activity_reg=activity_reg,
        total=fw + bw + lam * smooth + activity_reg,
        event_pixel_count=event_pixel_count(tp, weighting=weighting),
    )
    return breakdown, grad


def total_flow_loss(train_partition, lam=DEFAULT_LAMBDA, scaled=True,
                    weighting=DEFAULT_WEIGHTING, activity_reg=0.0) -> LossBreakdown:
    if lam < 0:
        raise ValueError("lambda must be non-negative")
    tp = as_train_partition(train_partition)
    fw, bw = contrast_fw_bw(tp, scaled, weighting)
    smooth = charbonnier_smoothness(np.stack(tp.flows()), tp.masks()) if tp.K else 0.0
    return LossBreakdown(
        contrast_fw=fw,
        contrast_bw=bw,
        contrast_total=fw + bw,
        smoothness=smooth,
        activity_reg=activity_reg,
        total=fw + bw + lam * smooth + activity_reg,
        event_pixel_count=event_pixel_count(tp, weighting=weighting),
    )


def combine(parts: Sequence[LossBreakdown]) -> LossBreakdown:
    """Mean of several breakdowns (batch reduction)."""
    n = len(parts)
    return LossBreakdown(
        *(sum(getattr(b, f) for b in parts) / n for f in
          ("contrast_fw", "contrast_bw", "contrast_total", "smoothness", "activity_reg", "total")),
        event_pixel_count=int(sum(b.event_pixel_count for b in parts)),
    )
