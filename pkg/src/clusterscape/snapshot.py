"""Snapshot assembly and analysis payloads over a store + registry pair.

Both the HTTP service and the CLI build their responses here, so a replayed
trace produces byte-identical artifacts through either front door. Time is
data-driven: "now" is the latest ingested timestamp or registry event.
"""

from __future__ import annotations

from typing import Any, Optional

from .diagnostics import (
    agglomerative_cluster,
    cluster_colors,
    histogram_distance_matrix,
    mahalanobis_outliers,
    timeline_distance_matrix,
)
from .layout import (
    ColorScaleSpec,
    FilterPredicate,
    LayoutSpec,
    UnitRecord,
    apply_filters,
    build_hierarchy,
    compute_layout,
    resolve_colors,
)
from .model import (
    KNOWN_METRICS,
    InsufficientDataError,
    MetricSeries,
    ValidationError,
)
from .registry import Registry
from .rules import (
    RuleHitMatrix,
    RuleSet,
    evaluate_rule,
    evaluate_ruleset,
    summarize_group,
)
from .store import MetricStore, build_histogram, downsample, shared_domain

DEFAULT_HIST_BINS = 20
DEFAULT_TIMELINE_POINTS = 300
NO_WORKLOAD = "-"


def current_time(store: MetricStore, registry: Registry) -> int:
    return max(store.latest_ts, registry.latest_event_time, 1)


def latest_value(store: MetricStore, gpu_uid: str, metric: str, now: int) -> float:
    if not store.has_gpu(gpu_uid):
        return 0.0
    series = store.query_series(gpu_uid, metric, 1, now)
    return series.values[-1] if len(series) else 0.0


def build_units(
    store: MetricStore,
    registry: Registry,
    ruleset: RuleSet,
    now: int,
) -> list[UnitRecord]:
    """One unit per GPU in topology order, carrying system-level attributes,
    application-level attributes of the running workload, current metric
    values, and per-rule hit flags."""
    topo = registry.topology
    if topo is None:
        return []
    parts = topo.partition_by_id()
    alloc = registry.gpu_allocation()
    matrix = evaluate_ruleset(
        ruleset.enabled(), registry.running_workloads(), store, now
    )
    units: list[UnitRecord] = []
    for node in topo.nodes:
        part = parts[node.partition_id]
        for j, uid in enumerate(node.gpu_uids):
            wl = alloc.get(uid)
            attrs: dict[str, Any] = {
                "partition": node.partition_id,
                "node": node.node_id,
                "gpu_index": j,
                "machine_type": part.machine_type,
                "workload_id": wl.workload_id if wl else NO_WORKLOAD,
                "workload_state": wl.state if wl else NO_WORKLOAD,
                "user": wl.user if wl else NO_WORKLOAD,
                "project": wl.project if wl else NO_WORKLOAD,
                "wait_seconds": (
                    (wl.start_time - wl.submit_time) / 1000.0
                    if wl and wl.start_time is not None
                    else 0.0
                ),
            }
            for metric in KNOWN_METRICS:
                attrs[metric] = latest_value(store, uid, metric, now)
            any_hit = False
            for rule in ruleset.enabled():
                hit = matrix.fired.get(uid, {}).get(rule.rule_id, False)
                attrs[f"rule:{rule.rule_id}"] = hit
                any_hit = any_hit or hit
            attrs["any_rule_hit"] = any_hit
            units.append(UnitRecord(gpu_uid=uid, attributes=attrs))
    return units


def build_snapshot_payload(
    store: MetricStore,
    registry: Registry,
    ruleset: RuleSet,
    snapshot_id: int,
    now: Optional[int] = None,
) -> dict[str, Any]:
    now = current_time(store, registry) if now is None else now
    units = build_units(store, registry, ruleset, now)
    workloads = []
    queue_pos = {
        w.workload_id: i + 1 for i, w in enumerate(registry.waiting_queue())
    }
    for wl in registry.workloads_in_order():
        row = wl.to_json()
        row["queue_position"] = queue_pos.get(wl.workload_id)
        workloads.append(row)
    topo = registry.topology
    digest = (
        {
            "partitions": len(topo.partitions),
            "nodes": len(topo.nodes),
            "gpus": len(topo.gpu_uids),
        }
        if topo is not None
        else {"partitions": 0, "nodes": 0, "gpus": 0}
    )
    return {
        "snapshot_id": snapshot_id,
        "now": now,
        "units": [u.to_json() for u in units],
        "workloads": workloads,
        "topology": digest,
    }


def build_violations_payload(
    store: MetricStore,
    registry: Registry,
    ruleset: RuleSet,
    group_by: str = "node",
    now: Optional[int] = None,
) -> dict[str, Any]:
    now = current_time(store, registry) if now is None else now
    matrix = evaluate_ruleset(
        ruleset.enabled(), registry.running_workloads(), store, now
    )
    membership = _membership(registry, matrix, group_by)
    summaries = summarize_group(matrix, membership)
    return {
        "now": now,
        "group_by": group_by,
        "matrix": matrix.to_json(),
        "groups": [s.to_json() for s in summaries],
    }


def _membership(
    registry: Registry, matrix: RuleHitMatrix, group_by: str
) -> dict[str, list[str]]:
    topo = registry.topology
    gpu_node = topo.gpu_to_node() if topo is not None else {}
    parts = topo.partition_by_id() if topo is not None else {}
    membership: dict[str, list[str]] = {}
    for uid in matrix.gpu_uids:
        if group_by == "node":
            key = gpu_node[uid].node_id if uid in gpu_node else "unknown"
        elif group_by == "partition":
            key = gpu_node[uid].partition_id if uid in gpu_node else "unknown"
        elif group_by == "machine_type":
            key = (
                parts[gpu_node[uid].partition_id].machine_type
                if uid in gpu_node
                else "unknown"
            )
        elif group_by == "workload":
            key = matrix.workload_by_gpu[uid]
        else:
            raise ValidationError(
                f"group_by must be node, partition, machine_type, or workload; "
                f"got {group_by!r}"
            )
        membership.setdefault(key, []).append(uid)
    return membership


def _workload_gpu_rows(registry: Registry, workload_id: str) -> list[dict[str, Any]]:
    """Allocated GPUs in physical order (node order, then index within node)."""
    wl = registry.get_workload(workload_id)
    if not wl.allocated_gpu_uids:
        raise ValidationError(f"workload {workload_id} has no allocated GPUs")
    topo = registry.topology
    gpu_node = topo.gpu_to_node() if topo is not None else {}
    node_order = (
        {n.node_id: i for i, n in enumerate(topo.nodes)} if topo is not None else {}
    )
    rows = []
    for uid in wl.allocated_gpu_uids:
        node = gpu_node.get(uid)
        rows.append(
            {
                "gpu_uid": uid,
                "node_id": node.node_id if node else "unknown",
                "gpu_index": node.gpu_uids.index(uid) if node else 0,
                "_order": (
                    node_order.get(node.node_id, 0) if node else 0,
                    node.gpu_uids.index(uid) if node else 0,
                ),
            }
        )
    rows.sort(key=lambda r: r["_order"])
    for r in rows:
        del r["_order"]
    return rows


def _rule_ordinals_for_gpu(
    store: MetricStore, registry: Registry, ruleset: RuleSet, wl_id: str, now: int
) -> dict[str, list[int]]:
    """gpu -> ordinals of fired rules, for the indicator dots beside each
    small multiple."""
    wl = registry.get_workload(wl_id)
    out: dict[str, list[int]] = {uid: [] for uid in wl.allocated_gpu_uids}
    for rule in ruleset.enabled():
        for hit in evaluate_rule(rule, wl, store, now):
            if hit.fired:
                out[hit.gpu_uid].append(rule.ordinal)
    return {g: sorted(v) for g, v in out.items()}


def build_diagnostics_payload(
    store: MetricStore,
    registry: Registry,
    ruleset: RuleSet,
    workload_id: str,
    metric: str = "utilization_pct",
    plot: str = "hist",
    bins: int = DEFAULT_HIST_BINS,
    cut_threshold: Optional[float] = None,
    cut_k: Optional[int] = None,
    distance: Optional[str] = None,
    max_points: int = DEFAULT_TIMELINE_POINTS,
    now: Optional[int] = None,
    include_matrix: bool = False,
    window: Optional[tuple[int, int]] = None,
) -> dict[str, Any]:
    """Small-multiples payload: per-GPU histogram or downsampled timeline,
    cluster id and color, and fired-rule ordinals, in physical GPU order."""
    if plot not in ("hist", "timeline"):
        raise ValidationError(f"plot must be hist or timeline, got {plot!r}")
    if metric not in KNOWN_METRICS:
        raise ValidationError(f"unknown metric {metric!r}")
    now = current_time(store, registry) if now is None else now
    wl = registry.get_workload(workload_id)
    if wl.start_time is None:
        raise ValidationError(f"workload {workload_id} has not started")
    w_start = wl.start_time
    w_end = now if wl.end_time is None else min(now, wl.end_time)
    if window is not None:
        w_start = max(w_start, window[0])
        w_end = min(w_end, window[1])
        if w_start > w_end:
            raise ValidationError("window does not intersect workload lifetime")
    rows = _workload_gpu_rows(registry, workload_id)
    series_map = {}
    for r in rows:
        uid = r["gpu_uid"]
        if store.has_gpu(uid):
            series_map[uid] = store.query_series(uid, metric, w_start, w_end)
        else:
            series_map[uid] = MetricSeries(uid, metric)
    normalized = False
    if plot == "hist":
        domain = shared_domain(list(series_map.values()), metric)
        hists = {
            uid: build_histogram(s, bins, domain) for uid, s in series_map.items()
        }
        matrix, skipped = histogram_distance_matrix(hists)
        method = "jsd"
    else:
        method = distance or "euclidean"
        matrix, skipped = timeline_distance_matrix(series_map, method)
        if method == "euclidean" and cut_threshold is None and cut_k is None:
            # Scale-free default cut: normalize to the largest distance.
            top = float(matrix.d.max()) if matrix.d.size else 0.0
            if top > 0:
                matrix.d = matrix.d / top
                normalized = True
    assignment = agglomerative_cluster(matrix, threshold=cut_threshold, k=cut_k)
    colors = cluster_colors(assignment)
    ordinals = _rule_ordinals_for_gpu(store, registry, ruleset, workload_id, now)
    gpus = []
    for r in rows:
        uid = r["gpu_uid"]
        cid = assignment.cluster_of.get(uid)
        entry: dict[str, Any] = {
            "gpu_uid": uid,
            "node_id": r["node_id"],
            "gpu_index": r["gpu_index"],
            "cluster_id": cid,
            "color": colors.get(cid) if cid is not None else None,
            "rule_ordinals": ordinals.get(uid, []),
            "evaluable": uid not in skipped,
        }
        if plot == "hist":
            entry["histogram"] = hists[uid].to_json()
        else:
            ds = downsample(series_map[uid], max_points) if len(
                series_map[uid]
            ) else series_map[uid]
            entry["points"] = [[t, v] for t, v in ds.points]
        gpus.append(entry)
    payload: dict[str, Any] = {
        "workload_id": workload_id,
        "metric": metric,
        "plot": plot,
        "method": method,
        "window": [w_start, w_end],
        "bins": bins if plot == "hist" else None,
        "cut": {
            "threshold": assignment.cut_threshold,
            "k": assignment.cut_k,
            "normalized": normalized,
        },
        "cluster_count": assignment.n_clusters(),
        "cluster_colors": {str(c): col for c, col in colors.items()},
        "gpus": gpus,
        "skipped": sorted(skipped),
    }
    if include_matrix:
        payload["matrix"] = matrix.to_json()
    return payload


def build_timeline_payload(
    store: MetricStore,
    registry: Registry,
    workload_id: str,
    metric: str = "utilization_pct",
    t_from: Optional[int] = None,
    t_to: Optional[int] = None,
    max_points: int = DEFAULT_TIMELINE_POINTS,
    now: Optional[int] = None,
) -> dict[str, Any]:
    if metric not in KNOWN_METRICS:
        raise ValidationError(f"unknown metric {metric!r}")
    now = current_time(store, registry) if now is None else now
    wl = registry.get_workload(workload_id)
    if wl.start_time is None:
        raise ValidationError(f"workload {workload_id} has not started")
    lo = wl.start_time if t_from is None else t_from
    hi = (now if wl.end_time is None else min(now, wl.end_time)) if t_to is None else t_to
    if lo > hi:
        raise ValidationError("from must be <= to")
    rows = _workload_gpu_rows(registry, workload_id)
    series = []
    for r in rows:
        uid = r["gpu_uid"]
        if store.has_gpu(uid):
            s = downsample(store.query_series(uid, metric, lo, hi), max_points)
        else:
            s = MetricSeries(uid, metric)
        series.append(
            {"gpu_uid": uid, "node_id": r["node_id"],
             "points": [[t, v] for t, v in s.points]}
        )
    return {
        "workload_id": workload_id,
        "metric": metric,
        "from": lo,
        "to": hi,
        "max_points": max_points,
        "series": series,
    }


def build_outliers_payload(
    store: MetricStore,
    registry: Registry,
    workload_id: str,
    metric_x: str = "utilization_pct",
    metric_y: str = "power_watts",
    alpha: float = 0.01,
    now: Optional[int] = None,
) -> dict[str, Any]:
    """Bivariate outlier report over (x, y) values pooled across the
    workload's GPUs at matching timestamps."""
    for m in (metric_x, metric_y):
        if m not in KNOWN_METRICS:
            raise ValidationError(f"unknown metric {m!r}")
    now = current_time(store, registry) if now is None else now
    wl = registry.get_workload(workload_id)
    if wl.start_time is None:
        raise ValidationError(f"workload {workload_id} has not started")
    w_end = now if wl.end_time is None else min(now, wl.end_time)
    points: list[tuple[int, float, float]] = []
    uids: list[str] = []
    for r in _workload_gpu_rows(registry, workload_id):
        uid = r["gpu_uid"]
        if not store.has_gpu(uid):
            continue
        xs = store.query_series(uid, metric_x, wl.start_time, w_end)
        ys = store.query_series(uid, metric_y, wl.start_time, w_end)
        y_at = dict(ys.points)
        for t, x in xs.points:
            y = y_at.get(t)
            if y is not None:
                points.append((t, x, y))
                uids.append(uid)
    if len(points) < 3:
        raise InsufficientDataError(
            f"workload {workload_id}: {len(points)} joint points; need >= 3"
        )
    report = mahalanobis_outliers(
        points, alpha, metric_x=metric_x, metric_y=metric_y, gpu_uids=uids
    )
    payload = report.to_json()
    payload["workload_id"] = workload_id
    return payload


def build_layout_payload(
    store: MetricStore,
    registry: Registry,
    ruleset: RuleSet,
    spec: LayoutSpec,
    color_spec: Optional["ColorScaleSpec"] = None,
    filters: tuple["FilterPredicate", ...] = (),
    now: Optional[int] = None,
) -> dict[str, Any]:
    """Geometry for the current snapshot; with a color spec the payload also
    carries resolved per-unit colors and the filter-retained set, so the UI
    never computes a scale itself."""
    now = current_time(store, registry) if now is None else now
    units = build_units(store, registry, ruleset, now)
    tree = build_hierarchy(units, spec)
    geometry = compute_layout(tree, spec)
    payload = geometry.to_json()
    if color_spec is not None:
        payload["colors"] = resolve_colors(units, color_spec, filters)
    if filters:
        payload["retained"] = sorted(
            u.gpu_uid for u in apply_filters(units, filters)
        )
    return payload
