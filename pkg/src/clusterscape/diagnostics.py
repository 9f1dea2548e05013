"""Distribution clustering and bivariate outlier analysis for one workload.

Per-GPU metric histograms are compared with the square root of the base-2
Jensen-Shannon divergence; timelines with length-normalized Euclidean
distance or 1 - Pearson correlation. Agglomerative clustering with average
linkage and a pinned tie-break keeps results reproducible. Bivariate
outliers are scored by squared Mahalanobis distance against the closed-form
chi-squared cutoff at two degrees of freedom.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Any, Optional, Sequence

import numpy as np

from .model import (
    Histogram,
    InsufficientDataError,
    MetricSeries,
    ValidationError,
)

# Distance threshold used when no explicit cut is given; tuned for sqrt-JSD.
DEFAULT_JSD_CUT = 0.3

# Ridge factor applied to a near-singular sample covariance.
RIDGE_EPS = 1e-9

# Resampled grid length cap for timeline distances.
MAX_GRID = 512

CLUSTER_PALETTE = (
    "#4e79a7", "#f28e2b", "#e15759", "#76b7b2", "#59a14f", "#edc948",
    "#b07aa1", "#ff9da7", "#9c755f", "#bab0ac", "#86bcb6", "#d37295",
)
OVERFLOW_COLOR = "#666666"


@dataclass
class DistanceMatrix:
    labels: list[str]
    d: np.ndarray  # symmetric, zero diagonal, finite
    method: str  # jsd | euclidean | correlation

    def validate(self) -> None:
        n = len(self.labels)
        if self.d.shape != (n, n):
            raise ValidationError("distance matrix shape mismatch")
        if not np.all(np.isfinite(self.d)):
            raise ValidationError("distance matrix has non-finite entries")
        if not np.allclose(self.d, self.d.T, atol=0.0):
            raise ValidationError("distance matrix not symmetric")
        if np.any(np.diagonal(self.d) != 0.0):
            raise ValidationError("distance matrix diagonal must be zero")
        if np.any(self.d < 0.0):
            raise ValidationError("distances must be non-negative")

    def to_json(self) -> dict[str, Any]:
        return {
            "labels": self.labels,
            "method": self.method,
            "d": [[float(v) for v in row] for row in self.d],
        }


@dataclass
class ClusterAssignment:
    labels: list[str]
    cluster_of: dict[str, int]  # label -> 0-based id, ordered by first member
    linkage: str = "average"
    cut_threshold: Optional[float] = None
    cut_k: Optional[int] = None

    def n_clusters(self) -> int:
        return len(set(self.cluster_of.values())) if self.cluster_of else 0

    def to_json(self) -> dict[str, Any]:
        return {
            "labels": self.labels,
            "cluster_of": self.cluster_of,
            "linkage": self.linkage,
            "cut_threshold": self.cut_threshold,
            "cut_k": self.cut_k,
        }


@dataclass
class OutlierPoint:
    timestamp: int
    x: float
    y: float
    d2: float
    flagged: bool
    gpu_uid: str = ""

    def to_json(self) -> dict[str, Any]:
        return {
            "timestamp": self.timestamp,
            "x": self.x,
            "y": self.y,
            "d2": self.d2,
            "flagged": self.flagged,
            "gpu_uid": self.gpu_uid,
        }


@dataclass
class OutlierReport:
    metric_x: str
    metric_y: str
    alpha: float
    cutoff: float
    points: list[OutlierPoint] = field(default_factory=list)

    def to_json(self) -> dict[str, Any]:
        return {
            "metric_x": self.metric_x,
            "metric_y": self.metric_y,
            "alpha": self.alpha,
            "cutoff": self.cutoff,
            "points": [p.to_json() for p in self.points],
        }


# -- distances ---------------------------------------------------------------


def jsd_distance(p_hist: Histogram, q_hist: Histogram) -> Optional[float]:
    """sqrt of the base-2 Jensen-Shannon divergence, in [0, 1].

    Returns None (not evaluable) when either histogram is empty. The bin
    grids must match exactly.
    """
    if p_hist.bin_edges != q_hist.bin_edges:
        raise ValidationError("histograms have different bin edges")
    if p_hist.empty or q_hist.empty:
        return None
    p = np.asarray(p_hist.mass, dtype=float)
    q = np.asarray(q_hist.mass, dtype=float)
    m = (p + q) / 2.0
    jsd = 0.5 * _kl_base2(p, m) + 0.5 * _kl_base2(q, m)
    return math.sqrt(min(max(jsd, 0.0), 1.0))


def _kl_base2(p: np.ndarray, m: np.ndarray) -> float:
    mask = p > 0.0
    return float(np.sum(p[mask] * np.log2(p[mask] / m[mask])))


def series_distance(
    a: MetricSeries, b: MetricSeries, method: str
) -> Optional[float]:
    """Distance between two timelines after linear resampling to a shared
    uniform grid over their intersection window.

    euclidean: l2 norm of the difference divided by sqrt(grid length).
    correlation: 1 - Pearson r; not evaluable when either side is constant.
    """
    if method not in ("euclidean", "correlation"):
        raise ValidationError(f"unknown series distance {method!r}")
    grid = _shared_grid([a, b])
    if grid is None:
        return None
    va = _resample(a, grid)
    vb = _resample(b, grid)
    if method == "euclidean":
        return float(np.linalg.norm(va - vb) / math.sqrt(len(grid)))
    sa = np.std(va)
    sb = np.std(vb)
    if sa == 0.0 or sb == 0.0:
        return None
    r = float(np.corrcoef(va, vb)[0, 1])
    return max(1.0 - r, 0.0)


def _shared_grid(series_list: Sequence[MetricSeries]) -> Optional[np.ndarray]:
    active = [s for s in series_list if len(s) >= 2]
    if len(active) != len(series_list) or not active:
        return None
    t0 = max(s.timestamps[0] for s in active)
    t1 = min(s.timestamps[-1] for s in active)
    if t0 >= t1:
        return None
    n = min(min(len(s) for s in active), MAX_GRID)
    if n < 2:
        return None
    return np.linspace(t0, t1, n)


def _resample(series: MetricSeries, grid: np.ndarray) -> np.ndarray:
    return np.interp(grid, np.asarray(series.timestamps, dtype=float), series.values)


def histogram_distance_matrix(
    histograms: dict[str, Histogram]
) -> tuple[DistanceMatrix, list[str]]:
    """JSD distance matrix over the evaluable histograms; returns the matrix
    and the labels that were skipped as not evaluable."""
    labels = [g for g in histograms if not histograms[g].empty]
    skipped = [g for g in histograms if histograms[g].empty]
    n = len(labels)
    d = np.zeros((n, n))
    for i in range(n):
        for j in range(i + 1, n):
            val = jsd_distance(histograms[labels[i]], histograms[labels[j]])
            assert val is not None
            d[i, j] = d[j, i] = val
    matrix = DistanceMatrix(labels=labels, d=d, method="jsd")
    matrix.validate()
    return matrix, skipped


def timeline_distance_matrix(
    series_map: dict[str, MetricSeries], method: str
) -> tuple[DistanceMatrix, list[str]]:
    """Series distance matrix on one common grid; constant or too-short
    series are skipped as not evaluable."""
    candidates = [g for g in series_map if len(series_map[g]) >= 2]
    grid = _shared_grid([series_map[g] for g in candidates]) if candidates else None
    if grid is None and candidates:
        # No common window across all; fall back to pairwise evaluation being
        # impossible, so report everything skipped.
        candidates = []
    resampled: dict[str, np.ndarray] = {}
    labels = []
    skipped = [g for g in series_map if g not in candidates]
    for g in candidates:
        v = _resample(series_map[g], grid)  # type: ignore[arg-type]
        if method == "correlation" and np.std(v) == 0.0:
            skipped.append(g)
            continue
        resampled[g] = v
        labels.append(g)
    n = len(labels)
    d = np.zeros((n, n))
    for i in range(n):
        vi = resampled[labels[i]]
        for j in range(i + 1, n):
            vj = resampled[labels[j]]
            if method == "euclidean":
                val = float(np.linalg.norm(vi - vj) / math.sqrt(len(vi)))
            else:
                val = 1.0 - float(np.corrcoef(vi, vj)[0, 1])
                val = max(val, 0.0)
            d[i, j] = d[j, i] = val
    matrix = DistanceMatrix(labels=labels, d=d, method=method)
    matrix.validate()
    return matrix, skipped


# -- clustering ---------------------------------------------------------------


def agglomerative_cluster(
    matrix: DistanceMatrix,
    threshold: Optional[float] = None,
    k: Optional[int] = None,
) -> ClusterAssignment:
    """Average-linkage agglomerative clustering with deterministic ties.

    At every step the pair with minimal average linkage is merged; ties break
    on the smallest (i, j) pair of first-member label indices. Stops at k
    clusters when k is given, otherwise when the minimal linkage exceeds the
    threshold (default tuned for sqrt-JSD distances).
    """
    n = len(matrix.labels)
    if threshold is None and k is None:
        threshold = DEFAULT_JSD_CUT
    if k is not None and not 1 <= k <= max(n, 1):
        raise ValidationError(f"k must be in [1, {n}]")
    if n == 0:
        return ClusterAssignment(
            labels=[], cluster_of={}, cut_threshold=threshold, cut_k=k
        )
    # Cluster state: representative = smallest member index; sizes for the
    # Lance-Williams average-linkage update.
    members: dict[int, list[int]] = {i: [i] for i in range(n)}
    dist: dict[tuple[int, int], float] = {}
    for i in range(n):
        for j in range(i + 1, n):
            dist[(i, j)] = float(matrix.d[i, j])
    while len(members) > 1:
        if k is not None and len(members) <= k:
            break
        best_pair = min(dist, key=lambda p: (dist[p], p))
        if k is None and threshold is not None and dist[best_pair] > threshold:
            break
        i, j = best_pair  # i < j by construction
        ni, nj = len(members[i]), len(members[j])
        for other in list(members):
            if other in (i, j):
                continue
            a = (min(i, other), max(i, other))
            b = (min(j, other), max(j, other))
            dist[a] = (ni * dist[a] + nj * dist[b]) / (ni + nj)
            del dist[b]
        del dist[best_pair]
        members[i] = members[i] + members[j]
        del members[j]
    reps = sorted(members)
    cluster_of: dict[str, int] = {}
    for cid, rep in enumerate(reps):
        for idx in members[rep]:
            cluster_of[matrix.labels[idx]] = cid
    return ClusterAssignment(
        labels=list(matrix.labels),
        cluster_of=cluster_of,
        cut_threshold=threshold,
        cut_k=k,
    )


def cluster_colors(
    assignment: ClusterAssignment, palette: Sequence[str] = CLUSTER_PALETTE
) -> dict[int, str]:
    """Stable cluster_id -> color mapping; ids beyond the palette share the
    overflow color."""
    ids = sorted(set(assignment.cluster_of.values()))
    return {
        cid: palette[cid] if cid < len(palette) else OVERFLOW_COLOR for cid in ids
    }


# -- outliers -----------------------------------------------------------------


def chi2_cutoff_df2(alpha: float) -> float:
    """Closed-form chi-squared quantile at 1 - alpha with 2 degrees of
    freedom: -2 ln(alpha)."""
    return -2.0 * math.log(alpha)


def mahalanobis_outliers(
    points: Sequence[tuple[int, float, float]],
    alpha: float,
    metric_x: str = "x",
    metric_y: str = "y",
    gpu_uids: Optional[Sequence[str]] = None,
    ridge: float = RIDGE_EPS,
) -> OutlierReport:
    """Squared Mahalanobis distance per point against the sample mean and
    covariance; a point is flagged when d2 exceeds the chi-squared cutoff.
    A near-singular covariance gets a ridge proportional to its trace."""
    if not 0.0 < alpha <= 0.5:
        raise ValidationError(f"alpha must be in (0, 0.5], got {alpha}")
    if len(points) < 3:
        raise InsufficientDataError(
            f"need >= 3 points for outlier scoring, got {len(points)}"
        )
    xy = np.array([[p[1], p[2]] for p in points], dtype=float)
    mu = xy.mean(axis=0)
    diff = xy - mu
    cutoff = chi2_cutoff_df2(alpha)
    report = OutlierReport(
        metric_x=metric_x, metric_y=metric_y, alpha=alpha, cutoff=cutoff
    )
    trace = float(np.var(xy[:, 0], ddof=1) + np.var(xy[:, 1], ddof=1))
    if trace == 0.0:
        d2s = np.zeros(len(points))
    else:
        cov = np.cov(xy, rowvar=False, ddof=1)
        if abs(float(np.linalg.det(cov))) < 1e-12 and ridge > 0.0:
            cov = cov + (ridge * trace / 2.0) * np.eye(2)
        solved = np.linalg.solve(cov, diff.T)
        d2s = np.einsum("ij,ji->i", diff, solved)
    uids = list(gpu_uids) if gpu_uids is not None else [""] * len(points)
    for (ts, x, y), d2, uid in zip(points, d2s, uids):
        d2f = float(d2)
        report.points.append(
            OutlierPoint(
                timestamp=int(ts),
                x=float(x),
                y=float(y),
                d2=d2f,
                flagged=d2f > cutoff,
                gpu_uid=uid,
            )
        )
    return report


def outlier_timestamps(
    report: OutlierReport, selected: Sequence[OutlierPoint]
) -> list[int]:
    """Unique timestamps of the brushed points, ascending."""
    known = {id(p) for p in report.points}
    keyset = {(p.timestamp, p.x, p.y) for p in report.points}
    for p in selected:
        if id(p) not in known and (p.timestamp, p.x, p.y) not in keyset:
            raise ValidationError("selected point not in report")
    return sorted({p.timestamp for p in selected})
