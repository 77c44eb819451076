"""Distance error metrics and per-range breakdowns.

``abs_rel``, ``sq_rel``, ``rmse`` and ``rmse_log`` follow the usual depth
metrics; ``sq_rel`` divides by the ground truth (not its square), so it is
in meters. Threshold metrics report the share of objects whose relative error
is below 5, 10 and 15 percent. Non-positive predictions are floored at 1 m
inside the log and always count as threshold misses.
"""

from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np

from ..records import InputError

THRESHOLDS = (0.05, 0.10, 0.15)
LOG_FLOOR_M = 1.0
METRIC_FIELDS = ("n", "pct_under_5", "pct_under_10", "pct_under_15", "abs_rel", "sq_rel", "rmse", "rmse_log")


@dataclass(frozen=True)
class MetricsReport:
    n: int
    pct_under_5: Optional[float]
    pct_under_10: Optional[float]
    pct_under_15: Optional[float]
    abs_rel: Optional[float]
    sq_rel: Optional[float]
    rmse: Optional[float]
    rmse_log: Optional[float]

    @classmethod
    def empty(cls):
        return cls(0, None, None, None, None, None, None, None)

    def as_dict(self):
        return asdict(self)

    def summary(self):
        if self.n == 0:
            return "n=0"
        return (
            f"n={self.n} <5%={self.pct_under_5:.2f} <10%={self.pct_under_10:.2f} "
            f"<15%={self.pct_under_15:.2f} abs_rel={self.abs_rel:.5f} sq_rel={self.sq_rel:.5f} "
            f"rmse={self.rmse:.4f} rmse_log={self.rmse_log:.5f}"
        )


def compute_metrics(pred, gt):
    """Metrics for predicted distances ``pred`` against ground truth ``gt``."""
    d = np.asarray(pred, dtype=np.float64).reshape(-1)
    g = np.asarray(gt, dtype=np.float64).reshape(-1)
    if d.size != g.size:
        raise InputError(f"{d.size} predictions for {g.size} ground-truth distances")
    if d.size == 0:
        raise InputError("no predictions to score")
    if np.any(~np.isfinite(g)) or np.any(g <= 0):
        raise InputError("ground-truth distances must be positive and finite")
    if np.any(~np.isfinite(d)):
        raise InputError("predictions must be finite")
    err = d - g
    rel = np.abs(err) / g
    valid = d > 0
    log_err = np.log(np.maximum(d, LOG_FLOOR_M)) - np.log(g)
    pct = [100.0 * float(np.mean((rel < t) & valid)) for t in THRESHOLDS]
    return MetricsReport(
        n=int(d.size),
        pct_under_5=pct[0],
        pct_under_10=pct[1],
        pct_under_15=pct[2],
        abs_rel=float(np.mean(rel)),
        sq_rel=float(np.mean(err * err / g)),
        rmse=float(np.sqrt(np.mean(err * err))),
        rmse_log=float(np.sqrt(np.mean(log_err * log_err))),
    )


@dataclass
class RangeBucketReport:
    edges: list
    reports: list  # one MetricsReport per (edges[i], edges[i + 1]] bucket

    def rows(self):
        for lo, hi, rep in zip(self.edges[:-1], self.edges[1:], self.reports):
            yield f"({lo:g},{hi:g}]", rep


def assign_buckets(gt, edges):
    """Index of the right-closed bucket ``(edges[i], edges[i+1]]`` holding each value."""
    edges = np.asarray(edges, dtype=np.float64)
    if edges.size < 2 or np.any(np.diff(edges) <= 0):
        raise InputError("bucket edges must be strictly ascending with at least two entries")
    g = np.asarray(gt, dtype=np.float64)
    idx = np.searchsorted(edges, g, side="left") - 1
    bad = (idx < 0) | (idx >= edges.size - 1)
    if np.any(bad):
        first = g[np.flatnonzero(bad)[0]]
        raise InputError(f"ground truth {first} m lies outside every bucket ({edges[0]}, {edges[-1]}]")
    return idx


def per_range_breakdown(pred, gt, edges):
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    idx = assign_buckets(gt, edges)
    reports = []
    for k in range(len(edges) - 1):
        mask = idx == k
        reports.append(compute_metrics(pred[mask], gt[mask]) if mask.any() else MetricsReport.empty())
    return RangeBucketReport([float(e) for e in edges], reports)
