"""Event warping under a flow field and average-timestamp images.

Flow fields are ``(2, H, W)`` arrays (u then v) in pixels per partition.
Warped events are splatted onto the pixel grid with the bilinear kernel
``kappa(a) = max(0, 1 - |a|)``; out-of-frame mass is dropped.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .events import EventPartition

EPS = 1e-9
SNAP_TOL = 1e-9

# Timestamp carried by each event into the image warped to ``t_ref``.
#   proximity: 1 - |t_ref - tau|  (bw image uses 1 - tau, fw image uses tau)
#   elapsed:   |t_ref - tau|      (bw image uses tau, fw image uses 1 - tau)
#   raw:       tau for both references
WEIGHTINGS = ("proximity", "elapsed", "raw")
DEFAULT_WEIGHTING = "proximity"


def kappa(a):
    return np.maximum(0.0, 1.0 - np.abs(a))


def normalize_timestamps(t) -> np.ndarray:
    """Map timestamps linearly onto ``[0, 1]``; a degenerate window maps to 0."""
    t = np.asarray(t, dtype=np.float64)
    if t.size == 0:
        return t.copy()
    lo, hi = t.min(), t.max()
    if hi == lo:
        return np.zeros_like(t)
    return (t - lo) / (hi - lo)


def reference_timestamps(tau, t_ref, weighting=DEFAULT_WEIGHTING) -> np.ndarray:
    tau = np.asarray(tau, dtype=np.float64)
    if weighting == "proximity":
        return 1.0 - np.abs(t_ref - tau)
    if weighting == "elapsed":
        return np.abs(t_ref - tau)
    if weighting == "raw":
        return tau.copy()
    raise ValueError(f"unknown timestamp weighting {weighting!r}")


def sample_flow(flow, x, y):
    """Flow at each event's integer source pixel, as ``(u, v)`` arrays."""
    flow = np.asarray(flow, dtype=np.float64)
    return flow[0, y, x], flow[1, y, x]


def warp_coordinates(x, y, tau, u, v, t_ref, scale=1.0):
    """``x' = x + (t_ref - tau) * scale * u`` (likewise for y)."""
    dt = (t_ref - np.asarray(tau, dtype=np.float64)) * scale
    return x + dt * u, y + dt * v


def warp_events(partition: EventPartition, flow, t_ref, tau=None, scale=1.0):
    """Propagate every event of ``partition`` to ``t_ref`` under ``flow``."""
    if tau is None:
        tau = normalize_timestamps(partition.t)
    u, v = sample_flow(flow, partition.x, partition.y)
    return warp_coordinates(partition.x, partition.y, tau, u, v, t_ref, scale)


@dataclass
class Splat:
    """Bilinear footprint of a set of warped events.

    ``idx`` and ``w`` are ``(n, 4)``: flat pixel index and weight of the four
    surrounding pixels (corner order: (x0,y0), (x0+1,y0), (x0,y0+1), (x0+1,y0+1)).
    Out-of-frame corners carry weight 0 and index 0. ``dwdx``/``dwdy`` are
    the right-sided derivatives of each weight w.r.t. the warped coordinate.
    """

    idx: np.ndarray
    w: np.ndarray
    dwdx: np.ndarray
    dwdy: np.ndarray
    shape: tuple[int, int]


def snap(coord):
    """Round coordinates lying within ``SNAP_TOL`` of an integer onto it, so that
    floating-point roundoff cannot add a near-zero-weight pixel to the support."""
    coord = np.asarray(coord, dtype=np.float64)
    nearest = np.round(coord)
    return np.where(np.abs(coord - nearest) < SNAP_TOL, nearest, coord)


def bilinear_footprint(xw, yw, shape) -> Splat:
    h, w = shape
    xw = snap(xw)
    yw = snap(yw)
    x0 = np.floor(xw)
    y0 = np.floor(yw)
    fx = xw - x0
    fy = yw - y0
    cx = np.stack([x0, x0 + 1, x0, x0 + 1], axis=1)
    cy = np.stack([y0, y0, y0 + 1, y0 + 1], axis=1)
    wx = np.stack([1 - fx, fx, 1 - fx, fx], axis=1)
    wy = np.stack([1 - fy, 1 - fy, fy, fy], axis=1)
    sx = np.array([-1.0, 1.0, -1.0, 1.0])
    sy = np.array([-1.0, -1.0, 1.0, 1.0])
    inside = (cx >= 0) & (cx < w) & (cy >= 0) & (cy < h)
    weights = np.where(inside, wx * wy, 0.0)
    dwdx = np.where(inside, sx * wy, 0.0)
    dwdy = np.where(inside, wx * sy, 0.0)
    idx = np.where(inside, cy * w + cx, 0).astype(np.int64)
    return Splat(idx, weights, dwdx, dwdy, (h, w))


def accumulate(splat: Splat, values=None, select=None) -> np.ndarray:
    """Scatter-add ``weight * value`` over the grid; returns an ``(H, W)`` image."""
    h, w = splat.shape
    weights = splat.w
    if values is not None:
        weights = weights * np.asarray(values, dtype=np.float64)[:, None]
    idx = splat.idx
    if select is not None:
        weights = weights[select]
        idx = idx[select]
    return np.bincount(idx.ravel(), weights=weights.ravel(), minlength=h * w).reshape(h, w)


def splat(xw, yw, values, polarity, p_filter, shape):
    """Bilinear splat of warped events; returns ``(numer, denom, count)``.

    ``numer`` and ``denom`` only include events whose polarity equals
    ``p_filter``; ``count`` includes every event.
    """
    fp = bilinear_footprint(xw, yw, shape)
    sel = np.asarray(polarity) == p_filter
    numer = accumulate(fp, values, sel)
    denom = accumulate(fp, None, sel)
    count = accumulate(fp)
    return numer, denom, count


@dataclass
class WarpResult:
    t_img_pos: np.ndarray
    t_img_neg: np.ndarray
    numer_pos: np.ndarray
    numer_neg: np.ndarray
    denom_pos: np.ndarray
    denom_neg: np.ndarray
    count_img: np.ndarray
    footprint: Splat
    timestamps: np.ndarray
    polarity: np.ndarray

    @property
    def per_event(self):
        """``(pixel indices, weights, timestamp, polarity)`` for each event."""
        return list(zip(self.footprint.idx, self.footprint.w, self.timestamps, self.polarity))


def images_from_footprint(fp: Splat, ts, polarity) -> WarpResult:
    pos = polarity > 0
    neg = ~pos
    numer_pos = accumulate(fp, ts, pos)
    numer_neg = accumulate(fp, ts, neg)
    denom_pos = accumulate(fp, None, pos)
    denom_neg = accumulate(fp, None, neg)
    count = denom_pos + denom_neg
    return WarpResult(
        numer_pos / (denom_pos + EPS),
        numer_neg / (denom_neg + EPS),
        numer_pos,
        numer_neg,
        denom_pos,
        denom_neg,
        count,
        fp,
        ts,
        polarity,
    )


def timestamp_images(partition: EventPartition, flow, t_ref, weighting=DEFAULT_WEIGHTING,
                     tau=None, scale=1.0) -> WarpResult:
    """Per-polarity average-timestamp images of ``partition`` warped to ``t_ref``."""
    if tau is None:
        tau = normalize_timestamps(partition.t)
    xw, yw = warp_events(partition, flow, t_ref, tau=tau, scale=scale)
    fp = bilinear_footprint(xw, yw, partition.sensor_size)
    ts = reference_timestamps(tau, t_ref, weighting)
    return images_from_footprint(fp, ts, partition.p)
