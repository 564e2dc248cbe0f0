"""Event-stream ingestion, fixed-count partitioning and synthetic scenes.

Events are stored column-wise (numpy arrays for t, x, y, p) inside an
:class:`EventPartition`; indexing a partition yields :class:`Event` records.
"""

from __future__ import annotations

import io
import math
from dataclasses import dataclass, field
from typing import Iterable, Iterator, Sequence

import numpy as np


class EventParseError(ValueError):
    """Malformed or non-monotonic line in an event CSV stream."""


class EventRangeError(ValueError):
    """Event coordinate outside the sensor bounds."""


@dataclass(frozen=True)
class Event:
    t: float
    x: int
    y: int
    p: int


@dataclass
class EventPartition:
    """An ordered run of events on a sensor of size ``(H, W)``."""

    t: np.ndarray
    x: np.ndarray
    y: np.ndarray
    p: np.ndarray
    sensor_size: tuple[int, int]

    def __post_init__(self):
        self.t = np.asarray(self.t, dtype=np.float64)
        self.x = np.asarray(self.x, dtype=np.int64)
        self.y = np.asarray(self.y, dtype=np.int64)
        self.p = np.asarray(self.p, dtype=np.int64)
        self.sensor_size = (int(self.sensor_size[0]), int(self.sensor_size[1]))
        n = len(self.t)
        if not (len(self.x) == len(self.y) == len(self.p) == n):
            raise ValueError("event columns have different lengths")

    @classmethod
    def empty(cls, sensor_size):
        z = np.zeros(0)
        return cls(z, z, z, z, sensor_size)

    @classmethod
    def from_events(cls, events: Iterable[Event], sensor_size):
        events = list(events)
        return cls(
            [e.t for e in events],
            [e.x for e in events],
            [e.y for e in events],
            [e.p for e in events],
            sensor_size,
        )

    def __len__(self) -> int:
        return len(self.t)

    def __getitem__(self, i):
        if isinstance(i, slice):
            return EventPartition(self.t[i], self.x[i], self.y[i], self.p[i], self.sensor_size)
        return Event(float(self.t[i]), int(self.x[i]), int(self.y[i]), int(self.p[i]))

    def __iter__(self) -> Iterator[Event]:
        for i in range(len(self)):
            yield self[i]

    @property
    def duration(self) -> float:
        if len(self) == 0:
            return 0.0
        return float(self.t[-1] - self.t[0])

    def copy(self) -> "EventPartition":
        return EventPartition(self.t.copy(), self.x.copy(), self.y.copy(), self.p.copy(), self.sensor_size)

    def equals(self, other: "EventPartition") -> bool:
        return (
            self.sensor_size == other.sensor_size
            and np.array_equal(self.t, other.t)
            and np.array_equal(self.x, other.x)
            and np.array_equal(self.y, other.y)
            and np.array_equal(self.p, other.p)
        )


def concatenate(parts: Sequence[EventPartition]) -> EventPartition:
    if not parts:
        raise ValueError("nothing to concatenate")
    return EventPartition(
        np.concatenate([q.t for q in parts]),
        np.concatenate([q.x for q in parts]),
        np.concatenate([q.y for q in parts]),
        np.concatenate([q.p for q in parts]),
        parts[0].sensor_size,
    )


def parse_events(stream, sensor_size=None) -> EventPartition:
    """Parse ``t,x,y,p`` CSV lines into an :class:`EventPartition`.

    ``stream`` may be a string or a text file object. Lines starting with
    ``#`` are comments; a comment of the form ``# sensor_size: H W`` sets the
    sensor size when none is passed. Polarity 0 maps to -1.

    Raises:
        EventParseError: malformed line or decreasing timestamp (with line number).
        EventRangeError: coordinate outside ``sensor_size``.
    """
    if isinstance(stream, str):
        stream = io.StringIO(stream)
    ts, xs, ys, ps = [], [], [], []
    header_size = None
    last_t = -math.inf
    for lineno, raw in enumerate(stream, start=1):
        line = raw.strip()
        if not line:
            continue
        if line.startswith("#"):
            body = line[1:].strip()
            if body.startswith("sensor_size:"):
                h, w = body.split(":", 1)[1].split()
                header_size = (int(h), int(w))
            continue
        fields = line.split(",")
        if len(fields) != 4:
            raise EventParseError(f"line {lineno}: expected 4 fields 't,x,y,p', got {len(fields)}")
        try:
            t = float(fields[0])
            x = int(fields[1])
            y = int(fields[2])
            p = int(fields[3])
        except ValueError as exc:
            raise EventParseError(f"line {lineno}: {exc}") from None
        if not math.isfinite(t) or t < 0:
            raise EventParseError(f"line {lineno}: invalid timestamp {fields[0]!r}")
        if p not in (-1, 0, 1):
            raise EventParseError(f"line {lineno}: invalid polarity {p}")
        if t < last_t:
            raise EventParseError(f"non-monotonic timestamp at line {lineno}")
        last_t = t
        ts.append(t)
        xs.append(x)
        ys.append(y)
        ps.append(1 if p == 1 else -1)

    size = sensor_size or header_size
    if size is None:
        size = (max(ys, default=-1) + 1, max(xs, default=-1) + 1)
    h, w = size
    for i, (x, y) in enumerate(zip(xs, ys)):
        if not (0 <= x < w and 0 <= y < h):
            raise EventRangeError(f"event {i}: coordinate ({x},{y}) outside sensor {h}x{w}")
    return EventPartition(ts, xs, ys, ps, (h, w))


def format_events(partition: EventPartition) -> str:
    h, w = partition.sensor_size
    lines = [f"# sensor_size: {h} {w}"]
    for i in range(len(partition)):
        lines.append(f"{float(partition.t[i])!r},{int(partition.x[i])},{int(partition.y[i])},{int(partition.p[i])}")
    return "\n".join(lines) + "\n"


def partition_fixed_count(stream: EventPartition, n: int) -> list[EventPartition]:
    """Split into consecutive windows of exactly ``n`` events; the tail is dropped."""
    if n < 1:
        raise ValueError("N must be >= 1")
    return [stream[k * n:(k + 1) * n] for k in range(len(stream) // n)]


def rasterize_counts(partition: EventPartition) -> np.ndarray:
    """Per-pixel, per-polarity event counts, shape ``(2, H, W)``.

    Channel 0 holds positive events and channel 1 negative events.
    """
    h, w = partition.sensor_size
    channel = (partition.p < 0).astype(np.int64)
    flat = channel * h * w + partition.y * w + partition.x
    return np.bincount(flat, minlength=2 * h * w).reshape(2, h, w)


def flip_augment(partition: EventPartition, gt_flow, mode: str):
    """Mirror a partition and its flow.

    ``gt_flow`` may be a ``(2, H, W)`` field, a constant ``(u, v)`` pair or
    ``None``. Horizontal and vertical flips mirror the field spatially and
    negate the matching component; polarity flips leave the flow untouched.
    """
    h, w = partition.sensor_size
    out = partition.copy()
    flow = None if gt_flow is None else np.array(gt_flow, dtype=np.float64)
    if mode == "horizontal":
        out.x = w - 1 - out.x
        if flow is not None:
            if flow.ndim == 3:
                flow = flow[:, :, ::-1].copy()
            flow[0] = -flow[0]
    elif mode == "vertical":
        out.y = h - 1 - out.y
        if flow is not None:
            if flow.ndim == 3:
                flow = flow[:, ::-1, :].copy()
            flow[1] = -flow[1]
    elif mode == "polarity":
        out.p = -out.p
    else:
        raise ValueError(f"unknown flip mode {mode!r}")
    return out, flow


# --------------------------------------------------------------------------
# Synthetic translating scenes
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class Rect:
    """Axis-aligned bright region in pattern coordinates (bounds may be infinite)."""

    x0: float
    x1: float
    y0: float
    y1: float


@dataclass
class SyntheticScene:
    events: EventPartition
    flow_px_s: tuple[float, float]
    seed: int
    duration: float
    pattern: list[Rect] = field(default_factory=list)

    def gt_flow(self, partition: EventPartition) -> np.ndarray:
        """Constant ground-truth flow for ``partition`` in pixels per partition.

        One partition spans its first-to-last event time, matching the
        timestamp normalisation used when warping.
        """
        h, w = partition.sensor_size
        u, v = self.flow_px_s
        d = partition.duration
        flow = np.empty((2, h, w))
        flow[0] = u * d
        flow[1] = v * d
        return flow

    def mean_partition_flow(self, n: int) -> tuple[float, float]:
        """Expected displacement per ``n``-event partition at the scene's mean event rate."""
        if len(self.events) == 0:
            return (0.0, 0.0)
        dt = n * self.duration / len(self.events)
        return (self.flow_px_s[0] * dt, self.flow_px_s[1] * dt)


def _crossing_interval(px, vel, lo, hi):
    """Time interval during which ``px - vel*t`` lies in ``[lo, hi]``."""
    with np.errstate(divide="ignore", invalid="ignore"):
        if vel == 0:
            inside = (px >= lo) & (px < hi)
            start = np.where(inside, -np.inf, np.inf)
            end = np.where(inside, np.inf, -np.inf)
            return start, end
        ta = (px - lo) / vel
        tb = (px - hi) / vel
        return np.minimum(ta, tb), np.maximum(ta, tb)


def random_dot_pattern(rng, flow_px_s, duration, sensor_size, n_dots=10, size_range=(3, 7)):
    """Non-overlapping square dots covering the region swept by the sensor."""
    h, w = sensor_size
    u, v = flow_px_s
    # pattern coords q = p - flow*t; the frame sweeps [-max(u,0)*T, w - min(u,0)*T]
    qx0, qx1 = -max(u, 0.0) * duration - size_range[1], w - min(u, 0.0) * duration + size_range[1]
    qy0, qy1 = -max(v, 0.0) * duration - size_range[1], h - min(v, 0.0) * duration + size_range[1]
    area_ratio = (qx1 - qx0) * (qy1 - qy0) / float(h * w)
    target = max(1, int(round(n_dots * area_ratio)))
    rects: list[Rect] = []
    tries = 0
    while len(rects) < target and tries < 200 * target:
        tries += 1
        s = rng.integers(size_range[0], size_range[1] + 1)
        # +0.25 offsets keep dot borders off pixel centres for stationary axes
        x0 = np.floor(rng.uniform(qx0, qx1 - s)) + 0.25
        y0 = np.floor(rng.uniform(qy0, qy1 - s)) + 0.25
        cand = Rect(x0, x0 + s, y0, y0 + s)
        if any(
            cand.x0 < r.x1 + 1 and r.x0 < cand.x1 + 1 and cand.y0 < r.y1 + 1 and r.y0 < cand.y1 + 1
            for r in rects
        ):
            continue
        rects.append(cand)
    return rects


def simulate_pattern_events(pattern, flow_px_s, duration, sensor_size, events_per_edge=1):
    """Exact events of an ideal camera watching ``pattern`` translate at ``flow_px_s``.

    The pixel centre ``(x, y)`` sees pattern point ``(x - u t, y - v t)``.
    Entering a rect emits ``+1``, leaving emits ``-1``. Rects must not overlap.
    """
    h, w = sensor_size
    u, v = flow_px_s
    ys, xs = np.mgrid[0:h, 0:w]
    xs = xs.ravel().astype(np.float64)
    ys = ys.ravel().astype(np.float64)
    t_all, x_all, y_all, p_all = [], [], [], []
    for r in pattern:
        sx, ex = _crossing_interval(xs, u, r.x0, r.x1)
        sy, ey = _crossing_interval(ys, v, r.y0, r.y1)
        start = np.maximum(sx, sy)
        end = np.minimum(ex, ey)
        valid = start < end
        for times, pol in ((start, 1), (end, -1)):
            sel = valid & (times >= 0) & (times < duration)
            t_all.append(times[sel])
            x_all.append(xs[sel])
            y_all.append(ys[sel])
            p_all.append(np.full(sel.sum(), pol))
    t = np.concatenate(t_all) if t_all else np.zeros(0)
    x = np.concatenate(x_all).astype(np.int64) if x_all else np.zeros(0, np.int64)
    y = np.concatenate(y_all).astype(np.int64) if y_all else np.zeros(0, np.int64)
    p = np.concatenate(p_all).astype(np.int64) if p_all else np.zeros(0, np.int64)
    if events_per_edge > 1:
        t, x, y, p = (np.repeat(a, events_per_edge) for a in (t, x, y, p))
    order = np.lexsort((p, x, y, t))
    return EventPartition(t[order], x[order], y[order], p[order], (h, w))


def synth_translating_scene(
    pattern_seed: int,
    flow,
    duration: float,
    sensor_size=(32, 32),
    events_per_edge: int = 1,
    n_dots: int = 10,
    pattern: list[Rect] | None = None,
) -> SyntheticScene:
    """Random binary dot pattern translating at constant ``flow`` (px/s).

    Zero flow yields an empty stream. Passing ``pattern`` bypasses the random
    dot generator (the seed is then only recorded).
    """
    if duration <= 0:
        raise ValueError("duration must be positive")
    flow = (float(flow[0]), float(flow[1]))
    if pattern is None:
        rng = np.random.default_rng(pattern_seed)
        pattern = random_dot_pattern(rng, flow, duration, sensor_size, n_dots=n_dots)
    if flow == (0.0, 0.0):
        events = EventPartition.empty(sensor_size)
    else:
        events = simulate_pattern_events(pattern, flow, duration, sensor_size, events_per_edge)
    return SyntheticScene(events, flow, pattern_seed, duration, list(pattern))
