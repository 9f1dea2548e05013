"""In-memory metric store fed by exporter-style NDJSON lines.

One logical writer appends; readers take consistent snapshots under a lock.
Each (gpu, metric) series is a pair of parallel lists kept strictly ordered
by timestamp. Late samples within a 60 s window are inserted in place; older
ones are rejected. A duration-based ring evicts points beyond the retention
horizon, and an optional spill file keeps an append-only NDJSON copy.
"""

from __future__ import annotations

import bisect
import json
import math
import threading
from dataclasses import dataclass
from typing import IO, Any, Optional

import numpy as np

from .model import (
    METRIC_BOUNDS,
    EmptySeriesError,
    Histogram,
    MetricSample,
    MetricSeries,
    NotFoundError,
    ParseError,
    StatisticType,
    UnknownMetricError,
    ValidationError,
)

# Exporter scrape jitter tolerance: late samples older than this are dropped.
OUT_OF_ORDER_WINDOW_MS = 60_000

# Ring retention, simulated time (7 days).
DEFAULT_RETENTION_MS = 7 * 24 * 3600 * 1000

SAMPLE_KEYS = frozenset({"ts", "gpu", "metric", "value"})

# Default histogram domain per metric; None means data-driven [min, max].
FIXED_DOMAINS: dict[str, Optional[tuple[float, float]]] = {
    "utilization_pct": (0.0, 100.0),
}


def _reject_constant(token: str) -> float:
    raise ValueError(f"non-finite token {token!r} not allowed")


def parse_sample_line(line: str, offset: int = 0) -> MetricSample:
    """Parse one exporter line; `offset` is the byte offset used in errors.
    NaN/Infinity tokens are malformed (strict JSON)."""
    try:
        obj = json.loads(line, parse_constant=_reject_constant)
    except (json.JSONDecodeError, ValueError) as exc:
        msg = getattr(exc, "msg", str(exc))
        raise ParseError(f"invalid JSON: {msg}", offset) from exc
    if not isinstance(obj, dict):
        raise ParseError("record is not a JSON object", offset)
    if set(obj) != SAMPLE_KEYS:
        raise ParseError(
            f"record keys must be exactly ts, gpu, metric, value; got "
            f"{sorted(obj)}",
            offset,
        )
    ts, gpu, metric, value = obj["ts"], obj["gpu"], obj["metric"], obj["value"]
    if not isinstance(ts, int) or isinstance(ts, bool):
        raise ParseError("ts must be an integer", offset)
    if not isinstance(gpu, str) or not isinstance(metric, str):
        raise ParseError("gpu and metric must be strings", offset)
    if not isinstance(value, (int, float)) or isinstance(value, bool):
        raise ParseError("value must be a number", offset)
    return MetricSample(timestamp=ts, gpu_uid=gpu, metric=metric, value=float(value))


@dataclass
class _Series:
    timestamps: list[int]
    values: list[float]


class MetricStore:
    def __init__(
        self,
        retention_ms: int = DEFAULT_RETENTION_MS,
        spill: Optional[IO[str]] = None,
    ):
        self._series: dict[tuple[str, str], _Series] = {}
        self._gpus: set[str] = set()
        self._lock = threading.Lock()
        self._retention_ms = retention_ms
        self._spill = spill
        self.latest_ts: int = 0

    # -- ingestion ---------------------------------------------------------

    def ingest_sample(self, line: str, offset: int = 0) -> None:
        """Ingest one exporter line. Raises ParseError / ValidationError."""
        sample = parse_sample_line(line, offset)
        sample.validate()
        self.append(sample)

    def append(self, sample: MetricSample) -> None:
        sample.validate()
        key = (sample.gpu_uid, sample.metric)
        with self._lock:
            ser = self._series.get(key)
            if ser is None:
                ser = _Series([], [])
                self._series[key] = ser
            ts = sample.timestamp
            if ser.timestamps and ts <= ser.timestamps[-1]:
                if ts <= ser.timestamps[-1] - OUT_OF_ORDER_WINDOW_MS:
                    raise ValidationError(
                        f"sample for {key} at {ts} older than the "
                        f"{OUT_OF_ORDER_WINDOW_MS} ms reorder window"
                    )
                i = bisect.bisect_left(ser.timestamps, ts)
                if i < len(ser.timestamps) and ser.timestamps[i] == ts:
                    raise ValidationError(f"duplicate timestamp {ts} for {key}")
                ser.timestamps.insert(i, ts)
                ser.values.insert(i, sample.value)
            else:
                ser.timestamps.append(ts)
                ser.values.append(sample.value)
            self._gpus.add(sample.gpu_uid)
            if ts > self.latest_ts:
                self.latest_ts = ts
            self._evict(ser)
        if self._spill is not None:
            self._spill.write(sample.to_line() + "\n")

    def _evict(self, ser: _Series) -> None:
        horizon = ser.timestamps[-1] - self._retention_ms
        if ser.timestamps[0] >= horizon:
            return
        i = bisect.bisect_left(ser.timestamps, horizon)
        del ser.timestamps[:i]
        del ser.values[:i]

    # -- queries -----------------------------------------------------------

    def gpu_uids(self) -> list[str]:
        with self._lock:
            return sorted(self._gpus)

    def has_gpu(self, gpu_uid: str) -> bool:
        with self._lock:
            return gpu_uid in self._gpus

    def query_series(
        self, gpu_uid: str, metric: str, t_start: int, t_end: int
    ) -> MetricSeries:
        """All points with t_start <= ts <= t_end, in order."""
        if t_start > t_end:
            raise ValidationError(f"t_start {t_start} > t_end {t_end}")
        if metric not in METRIC_BOUNDS:
            raise UnknownMetricError(f"unknown metric {metric!r}")
        with self._lock:
            if gpu_uid not in self._gpus:
                raise NotFoundError(f"unknown gpu_uid {gpu_uid!r}")
            ser = self._series.get((gpu_uid, metric))
            if ser is None:
                return MetricSeries(gpu_uid, metric)
            lo = bisect.bisect_left(ser.timestamps, t_start)
            hi = bisect.bisect_right(ser.timestamps, t_end)
            return MetricSeries(
                gpu_uid, metric, ser.timestamps[lo:hi], ser.values[lo:hi]
            )


def compute_statistic(series: MetricSeries, stat: StatisticType) -> float:
    """min/max/mean exact; percentile by linear interpolation between the
    closest ranks at position p/100 * (n-1); median == percentile(50)."""
    if len(series) == 0:
        raise EmptySeriesError(f"{series.gpu_uid}/{series.metric}: empty series")
    vals = series.values
    if stat.kind == "min":
        return min(vals)
    if stat.kind == "max":
        return max(vals)
    if stat.kind == "mean":
        return float(np.mean(vals))
    p = 50.0 if stat.kind == "median" else float(stat.p)  # type: ignore[arg-type]
    return float(np.percentile(vals, p, method="linear"))


def build_histogram(
    series: MetricSeries,
    bins: int,
    domain: Optional[tuple[float, float]] = None,
) -> Histogram:
    """Equal-width bins; the last bin's right edge is inclusive. Values
    outside an explicit domain are dropped before normalization."""
    if bins < 1:
        raise ValidationError(f"bins must be >= 1, got {bins}")
    if domain is None:
        domain = FIXED_DOMAINS.get(series.metric)
    if domain is None:
        if len(series) == 0:
            return Histogram(bin_edges=[], mass=[], empty=True)
        domain = (min(series.values), max(series.values))
    lo, hi = float(domain[0]), float(domain[1])
    if not (lo < hi):
        # Degenerate domain (constant series): widen by a symmetric epsilon
        # so a single bin still captures the point mass.
        span = max(abs(lo), 1.0) * 1e-9
        lo, hi = lo - span, hi + span
    edges = np.linspace(lo, hi, bins + 1)
    if len(series) == 0:
        return Histogram(bin_edges=edges.tolist(), mass=[0.0] * bins, empty=True)
    counts, _ = np.histogram(series.values, bins=edges)
    total = int(counts.sum())
    if total == 0:
        return Histogram(bin_edges=edges.tolist(), mass=[0.0] * bins, empty=True)
    mass = counts / total
    return Histogram(bin_edges=edges.tolist(), mass=mass.tolist(), empty=False)


def downsample(series: MetricSeries, max_points: int) -> MetricSeries:
    """Min/max-per-bucket downsampling that keeps endpoints and spikes.

    Interior points are split into index buckets; each bucket contributes its
    minimum and maximum. A series with <= max_points points is returned
    unchanged, which also makes the operation idempotent.
    """
    if max_points < 4:
        raise ValidationError(f"max_points must be >= 4, got {max_points}")
    n = len(series)
    if n <= max_points:
        return series
    n_buckets = (max_points - 2) // 2
    keep: set[int] = {0, n - 1}
    interior = n - 2
    vals = series.values
    for b in range(n_buckets):
        start = 1 + b * interior // n_buckets
        stop = 1 + (b + 1) * interior // n_buckets
        if start >= stop:
            continue
        lo_i = start
        hi_i = start
        lo_v = vals[start]
        hi_v = vals[start]
        for i in range(start + 1, stop):
            v = vals[i]
            if v < lo_v:
                lo_v, lo_i = v, i
            if v > hi_v:
                hi_v, hi_i = v, i
        keep.add(lo_i)
        keep.add(hi_i)
    idx = sorted(keep)
    return MetricSeries(
        series.gpu_uid,
        series.metric,
        [series.timestamps[i] for i in idx],
        [vals[i] for i in idx],
    )


def shared_domain(
    series_list: list[MetricSeries], metric: str
) -> Optional[tuple[float, float]]:
    """Domain covering every series, so histograms are comparable for
    distribution distances. Falls back to the metric's fixed domain."""
    fixed = FIXED_DOMAINS.get(metric)
    if fixed is not None:
        return fixed
    los = [min(s.values) for s in series_list if len(s)]
    his = [max(s.values) for s in series_list if len(s)]
    if not los:
        return None
    lo, hi = min(los), max(his)
    if not math.isfinite(lo) or not math.isfinite(hi):
        return None
    return (lo, hi)


def series_to_json(series: MetricSeries) -> dict[str, Any]:
    return series.to_json()
