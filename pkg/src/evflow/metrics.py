"""Flow quality metrics: AEE / outliers against ground truth, FWL and RSAT without."""

from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass

import numpy as np

from .events import EventPartition, rasterize_counts
from .loss import T_REF_FW, TrainPartition, contrast_loss
from .warp import DEFAULT_WEIGHTING, accumulate, bilinear_footprint, warp_events

OUTLIER_PX = 3.0
OUTLIER_REL = 0.05
RSAT_N = 15000


def scale_flow(flow, dt_gt, dt_input):
    """Rescale flow predicted over ``dt_input`` to the ground-truth interval."""
    return np.asarray(flow, dtype=np.float64) * (dt_gt / dt_input)


def is_undefined(value) -> bool:
    return value is None or (isinstance(value, float) and math.isnan(value))


def endpoint_error(pred, gt):
    d = np.asarray(pred, dtype=np.float64) - np.asarray(gt, dtype=np.float64)
    return np.sqrt(d[0] ** 2 + d[1] ** 2)


def aee(flow_pred, flow_gt, mask):
    """Average endpoint error and outlier percentage over ``mask``.

    A pixel is an outlier when its error exceeds both 3 px and 5% of the
    ground-truth magnitude. An empty mask gives ``(nan, nan)``.
    """
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        return float("nan"), float("nan")
    ee = endpoint_error(flow_pred, flow_gt)[mask]
    gt = np.asarray(flow_gt, dtype=np.float64)
    mag = np.sqrt(gt[0] ** 2 + gt[1] ** 2)[mask]
    outliers = (ee > OUTLIER_PX) & (ee > OUTLIER_REL * mag)
    return float(ee.mean()), float(100.0 * outliers.mean())


def count_image(partition: EventPartition, flow=None, t_ref=T_REF_FW) -> np.ndarray:
    """Bilinear count image (both polarities) of events warped to ``t_ref``."""
    h, w = partition.sensor_size
    if len(partition) == 0:
        return np.zeros((h, w))
    if flow is None:
        xw, yw = partition.x.astype(np.float64), partition.y.astype(np.float64)
    else:
        xw, yw = warp_events(partition, flow, t_ref)
    return accumulate(bilinear_footprint(xw, yw, (h, w)))


def fwl(partition: EventPartition, flow, t_ref=T_REF_FW) -> float:
    """Variance of the warped count image over that of the unwarped one."""
    base = np.var(count_image(partition))
    if base == 0:
        return float("nan")
    return float(np.var(count_image(partition, flow, t_ref)) / base)


def rsat(partition: EventPartition, flow, weighting=DEFAULT_WEIGHTING) -> float:
    """Scaled forward contrast under ``flow`` over its zero-flow value."""
    zero = np.zeros((2,) + tuple(partition.sensor_size))
    den = contrast_loss(TrainPartition([(partition, zero)]), T_REF_FW, True, weighting)
    if den == 0:
        return float("nan")
    num = contrast_loss(TrainPartition([(partition, np.asarray(flow, dtype=np.float64))]),
                        T_REF_FW, True, weighting)
    return float(num / den)


@dataclass
class EvalReport:
    index: int
    aee: float
    outlier_pct: float
    fwl: float
    rsat: float
    valid_pixel_count: int

    def as_dict(self):
        return asdict(self)


def evaluate_partition(index, partition: EventPartition, flow_pred, flow_gt=None, gt_valid=None,
                       dt_gt=None, dt_input=None) -> EvalReport:
    """All metrics for one partition; AEE fields are NaN without ground truth."""
    pred = np.asarray(flow_pred, dtype=np.float64)
    if dt_gt is not None and dt_input is not None:
        pred_gt = scale_flow(pred, dt_gt, dt_input)
    else:
        pred_gt = pred
    mask = rasterize_counts(partition).sum(axis=0) > 0
    if flow_gt is not None and gt_valid is not None:
        mask &= np.asarray(gt_valid, dtype=bool)
    if flow_gt is not None:
        err, out = aee(pred_gt, flow_gt, mask)
        n = int(mask.sum())
    else:
        err, out, n = float("nan"), float("nan"), 0
    return EvalReport(index, err, out, fwl(partition, pred), rsat(partition, pred), n)


def summarize(reports) -> dict:
    """Mean of each metric over the partitions where it is defined."""
    out = {}
    for key in ("aee", "outlier_pct", "fwl", "rsat"):
        vals = [getattr(r, key) for r in reports if not is_undefined(getattr(r, key))]
        out[key] = float(np.mean(vals)) if vals else float("nan")
    out["valid_pixel_count"] = int(sum(r.valid_pixel_count for r in reports))
    out["partitions"] = len(reports)
    return out


def write_reports(reports, path):
    cols = ["index", "aee", "outlier_pct", "fwl", "rsat", "valid_pixel_count"]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(cols)
        for r in reports:
            writer.writerow([_fmt(getattr(r, c)) for c in cols])


def _fmt(v):
    if isinstance(v, float):
        return "undefined" if math.isnan(v) else repr(v)
    return v
