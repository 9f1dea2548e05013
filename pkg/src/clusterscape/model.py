"""Core domain types shared by every subsystem.

Everything here is a plain dataclass plus the canonical JSON helpers used by
the API, the CLI, and the trace files. Keeping serialization in one place is
what makes CLI artifacts byte-identical to API responses.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Any, Iterator, Optional


# Known per-GPU metrics and their validation bounds (lo, hi); hi=None means
# unbounded above. All values must be finite and non-negative.
METRIC_BOUNDS: dict[str, tuple[float, Optional[float]]] = {
    "utilization_pct": (0.0, 100.0),
    "memory_used_mib": (0.0, None),
    "power_watts": (0.0, None),
    "temperature_c": (0.0, None),
    "nvlink_tx_mibps": (0.0, None),
    "nvlink_rx_mibps": (0.0, None),
}

KNOWN_METRICS = tuple(METRIC_BOUNDS)

WORKLOAD_STATES = ("waiting", "running", "finished", "failed")


class ClusterscapeError(Exception):
    """Base class for every error this package raises on purpose."""


class ParseError(ClusterscapeError):
    """Malformed ingestion line; carries the byte offset of the bad record."""

    def __init__(self, message: str, offset: int = 0):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


class ValidationError(ClusterscapeError):
    """Well-formed input that violates a domain invariant."""


class UnknownMetricError(ValidationError):
    pass


class NotFoundError(ClusterscapeError):
    """Lookup of an id that does not exist."""


class EmptySeriesError(ClusterscapeError):
    """Statistic requested over an empty series; callers treat the
    surrounding computation as not evaluable."""


class LayoutSpecError(ClusterscapeError):
    """Invalid layout, color, or filter specification."""


class DegenerateLayoutError(ClusterscapeError):
    """Viewport cannot fit every unit at the 1 px minimum size."""


class InsufficientDataError(ClusterscapeError):
    """Analysis needs more points than were provided."""


@dataclass(frozen=True)
class MetricSample:
    timestamp: int  # ms since epoch, > 0
    gpu_uid: str
    metric: str
    value: float

    def validate(self) -> None:
        if self.timestamp <= 0:
            raise ValidationError(f"timestamp must be positive, got {self.timestamp}")
        if self.metric not in METRIC_BOUNDS:
            raise UnknownMetricError(f"unknown metric {self.metric!r}")
        if not math.isfinite(self.value):
            raise ValidationError(f"non-finite value for {self.metric}")
        lo, hi = METRIC_BOUNDS[self.metric]
        if self.value < lo or (hi is not None and self.value > hi):
            raise ValidationError(
                f"value {self.value} out of range for {self.metric}"
            )

    def to_line(self) -> str:
        """Serialize to the exporter line format (no trailing newline)."""
        return json.dumps(
            {"ts": self.timestamp, "gpu": self.gpu_uid, "metric": self.metric,
             "value": self.value},
            separators=(",", ":"),
        )


@dataclass
class MetricSeries:
    """Time-ordered samples for one (gpu, metric) pair.

    Timestamps are strictly increasing and values finite; the store enforces
    both at ingest time.
    """

    gpu_uid: str
    metric: str
    timestamps: list[int] = field(default_factory=list)
    values: list[float] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.timestamps)

    @property
    def points(self) -> Iterator[tuple[int, float]]:
        return zip(self.timestamps, self.values)

    def to_json(self) -> dict[str, Any]:
        return {
            "gpu_uid": self.gpu_uid,
            "metric": self.metric,
            "points": [[t, v] for t, v in self.points],
        }


@dataclass
class Histogram:
    """Normalized equal-width histogram; `empty` flags a zero-sample input."""

    bin_edges: list[float]
    mass: list[float]
    empty: bool = False

    def to_json(self) -> dict[str, Any]:
        return {"bin_edges": self.bin_edges, "mass": self.mass, "empty": self.empty}


@dataclass(frozen=True)
class StatisticType:
    """min / max / mean / median / percentile(p); median == percentile(50)."""

    kind: str
    p: Optional[float] = None

    _KINDS = ("min", "max", "mean", "median", "percentile")

    def __post_init__(self) -> None:
        if self.kind not in self._KINDS:
            raise ValidationError(f"unknown statistic kind {self.kind!r}")
        if self.kind == "percentile":
            if self.p is None or not (0.0 < self.p < 100.0):
                raise ValidationError("percentile requires p in (0, 100)")
        elif self.p is not None:
            raise ValidationError(f"p only valid for percentile, not {self.kind}")

    def to_json(self) -> dict[str, Any]:
        out: dict[str, Any] = {"kind": self.kind}
        if self.p is not None:
            out["p"] = self.p
        return out

    @staticmethod
    def from_json(obj: dict[str, Any]) -> "StatisticType":
        return StatisticType(kind=obj["kind"], p=obj.get("p"))


@dataclass(frozen=True)
class Partition:
    partition_id: str
    machine_type: str
    # None means no per-workload GPU ceiling (the "large" partition).
    allowed_max_gpus_per_workload: Optional[int] = None

    def to_json(self) -> dict[str, Any]:
        return {
            "partition_id": self.partition_id,
            "machine_type": self.machine_type,
            "allowed_max_gpus_per_workload": self.allowed_max_gpus_per_workload,
        }


@dataclass(frozen=True)
class Node:
    node_id: str
    partition_id: str
    gpu_uids: tuple[str, ...]

    def to_json(self) -> dict[str, Any]:
        return {
            "node_id": self.node_id,
            "partition_id": self.partition_id,
            "gpu_uids": list(self.gpu_uids),
        }


@dataclass
class ClusterTopology:
    partitions: list[Partition]
    nodes: list[Node]

    def validate(self) -> None:
        part_ids = [p.partition_id for p in self.partitions]
        if len(set(part_ids)) != len(part_ids):
            raise ValidationError("duplicate partition_id")
        part_set = set(part_ids)
        seen_gpus: set[str] = set()
        node_ids: set[str] = set()
        for node in self.nodes:
            if node.node_id in node_ids:
                raise ValidationError(f"duplicate node_id {node.node_id}")
            node_ids.add(node.node_id)
            if node.partition_id not in part_set:
                raise ValidationError(
                    f"node {node.node_id} references unknown partition "
                    f"{node.partition_id}"
                )
            for uid in node.gpu_uids:
                if uid in seen_gpus:
                    raise ValidationError(f"gpu {uid} appears in more than one node")
                seen_gpus.add(uid)

    def gpu_to_node(self) -> dict[str, Node]:
        return {uid: node for node in self.nodes for uid in node.gpu_uids}

    def partition_by_id(self) -> dict[str, Partition]:
        return {p.partition_id: p for p in self.partitions}

    @property
    def gpu_uids(self) -> list[str]:
        return [uid for node in self.nodes for uid in node.gpu_uids]

    def to_json(self) -> dict[str, Any]:
        return {
            "partitions": [p.to_json() for p in self.partitions],
            "nodes": [n.to_json() for n in self.nodes],
        }

    @staticmethod
    def from_json(obj: dict[str, Any]) -> "ClusterTopology":
        topo = ClusterTopology(
            partitions=[
                Partition(
                    partition_id=p["partition_id"],
                    machine_type=p["machine_type"],
                    allowed_max_gpus_per_workload=p.get(
                        "allowed_max_gpus_per_workload"
                    ),
                )
                for p in obj["partitions"]
            ],
            nodes=[
                Node(
                    node_id=n["node_id"],
                    partition_id=n["partition_id"],
                    gpu_uids=tuple(n["gpu_uids"]),
                )
                for n in obj["nodes"]
            ],
        )
        topo.validate()
        return topo


@dataclass
class Workload:
    workload_id: str
    user: str
    project: str
    machine_type: str
    gpu_count: int
    state: str = "waiting"
    submit_time: int = 0
    start_time: Optional[int] = None
    end_time: Optional[int] = None
    priority_score: float = 0.0
    allocated_gpu_uids: list[str] = field(default_factory=list)
    master_gpu_uid: Optional[str] = None

    @property
    def resource_type(self) -> str:
        return f"{self.machine_type}-{self.gpu_count}"

    def validate(self) -> None:
        if self.state not in WORKLOAD_STATES:
            raise ValidationError(f"unknown workload state {self.state!r}")
        if self.state in ("running", "finished") and self.allocated_gpu_uids:
            if len(self.allocated_gpu_uids) != self.gpu_count:
                raise ValidationError(
                    f"workload {self.workload_id}: allocated "
                    f"{len(self.allocated_gpu_uids)} GPUs, requested {self.gpu_count}"
                )
        if self.start_time is not None and self.submit_time > self.start_time:
            raise ValidationError("submit_time after start_time")
        if (
            self.start_time is not None
            and self.end_time is not None
            and self.start_time > self.end_time
        ):
            raise ValidationError("start_time after end_time")
        if self.end_time is not None and self.submit_time > self.end_time:
            raise ValidationError("submit_time after end_time")

    def to_json(self) -> dict[str, Any]:
        return {
            "workload_id": self.workload_id,
            "user": self.user,
            "project": self.project,
            "machine_type": self.machine_type,
            "gpu_count": self.gpu_count,
            "resource_type": self.resource_type,
            "state": self.state,
            "submit_time": self.submit_time,
            "start_time": self.start_time,
            "end_time": self.end_time,
            "priority_score": self.priority_score,
            "allocated_gpu_uids": list(self.allocated_gpu_uids),
            "master_gpu_uid": self.master_gpu_uid,
        }


def dump_json(payload: Any) -> str:
    """Canonical JSON used for every artifact and API body.

    Sorted keys and compact separators so identical payloads serialize to
    identical bytes everywhere.
    """
    return json.dumps(payload, sort_keys=True, separators=(",", ":"), allow_nan=False)


def dump_json_bytes(payload: Any) -> bytes:
    return dump_json(payload).encode("utf-8")
