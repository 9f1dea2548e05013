"""Seeded discrete-event simulator for a shared GPU cluster.

Phase 1 draws the workload arrival trace (times, sizes, durations) from the
seed alone, so two runs with different scheduling policies see identical
demand. Phase 2 replays the events through the placement and queue policies
under gang semantics. Every decision is deterministic: ties always fall to
the lowest node index, so a fixed seed yields a byte-identical event stream.
"""

from __future__ import annotations

import heapq
import math
import random
from dataclasses import dataclass, field
from typing import Any, Iterator, Optional

from .model import (
    ClusterTopology,
    Node,
    Partition,
    ValidationError,
    Workload,
)

PLACEMENT_POLICIES = ("Spread", "MostAllocated")
QUEUE_POLICIES = ("FCFS", "PrioritySize")

DEFAULT_TDP = {"A100": 400.0, "V100": 300.0}

_USERS = tuple(f"u{i:02d}" for i in range(1, 13))
_PROJECTS = ("asr", "llm", "vision", "recsys", "mt", "bio")


@dataclass(frozen=True)
class PartitionConfig:
    partition_id: str
    machine_type: str
    nodes: int
    allowed_max_gpus_per_workload: Optional[int] = None


@dataclass
class SimConfig:
    seed: int = 0
    start_time_ms: int = 1_600_000_000_000
    duration_hours: float = 24.0
    gpus_per_node: int = 8
    machine_tdp: dict[str, float] = field(default_factory=lambda: dict(DEFAULT_TDP))
    partitions: list[PartitionConfig] = field(default_factory=list)
    # resource type ("A100-8") -> arrivals per hour
    arrival_rate_per_hour: dict[str, float] = field(default_factory=dict)
    # resource type -> (median_minutes, sigma) of a log-normal duration
    duration_lognorm: dict[str, tuple[float, float]] = field(default_factory=dict)
    placement_policy: str = "MostAllocated"
    queue_policy: str = "FCFS"
    scrape_interval_s: int = 5
    frag_sample_minutes: float = 60.0

    def validate(self) -> None:
        if self.placement_policy not in PLACEMENT_POLICIES:
            raise ValidationError(f"unknown placement policy {self.placement_policy!r}")
        if self.queue_policy not in QUEUE_POLICIES:
            raise ValidationError(f"unknown queue policy {self.queue_policy!r}")
        if not self.partitions:
            raise ValidationError("at least one partition required")
        if self.gpus_per_node < 1:
            raise ValidationError("gpus_per_node must be >= 1")
        for rtype in self.arrival_rate_per_hour:
            machine, count = parse_resource_type(rtype)
            if machine not in self.machine_tdp:
                raise ValidationError(f"{rtype}: unknown machine type")
            if count > self.gpus_per_node and count % self.gpus_per_node != 0:
                raise ValidationError(
                    f"{rtype}: multi-node sizes must be whole nodes "
                    f"({self.gpus_per_node} GPUs each)"
                )
            if rtype not in self.duration_lognorm:
                raise ValidationError(f"{rtype}: missing duration distribution")
            if self.arrival_rate_per_hour[rtype] <= 0:
                raise ValidationError(f"{rtype}: arrival rate must be positive")

    def to_json(self) -> dict[str, Any]:
        return {
            "seed": self.seed,
            "start_time_ms": self.start_time_ms,
            "duration_hours": self.duration_hours,
            "gpus_per_node": self.gpus_per_node,
            "machine_tdp": self.machine_tdp,
            "partitions": [
                {
                    "partition_id": p.partition_id,
                    "machine_type": p.machine_type,
                    "nodes": p.nodes,
                    "allowed_max_gpus_per_workload": p.allowed_max_gpus_per_workload,
                }
                for p in self.partitions
            ],
            "arrival_rate_per_hour": self.arrival_rate_per_hour,
            "duration_lognorm": {
                k: list(v) for k, v in self.duration_lognorm.items()
            },
            "placement_policy": self.placement_policy,
            "queue_policy": self.queue_policy,
            "scrape_interval_s": self.scrape_interval_s,
            "frag_sample_minutes": self.frag_sample_minutes,
        }

    @staticmethod
    def from_json(obj: dict[str, Any]) -> "SimConfig":
        cfg = SimConfig(
            seed=int(obj.get("seed", 0)),
            start_time_ms=int(obj.get("start_time_ms", 1_600_000_000_000)),
            duration_hours=float(obj.get("duration_hours", 24.0)),
            gpus_per_node=int(obj.get("gpus_per_node", 8)),
            machine_tdp={
                k: float(v)
                for k, v in obj.get("machine_tdp", dict(DEFAULT_TDP)).items()
            },
            partitions=[
                PartitionConfig(
                    partition_id=p["partition_id"],
                    machine_type=p["machine_type"],
                    nodes=int(p["nodes"]),
                    allowed_max_gpus_per_workload=p.get(
                        "allowed_max_gpus_per_workload"
                    ),
                )
                for p in obj.get("partitions", [])
            ],
            arrival_rate_per_hour={
                k: float(v)
                for k, v in obj.get("arrival_rate_per_hour", {}).items()
            },
            duration_lognorm={
                k: (float(v[0]), float(v[1]))
                for k, v in obj.get("duration_lognorm", {}).items()
            },
            placement_policy=obj.get("placement_policy", "MostAllocated"),
            queue_policy=obj.get("queue_policy", "FCFS"),
            scrape_interval_s=int(obj.get("scrape_interval_s", 5)),
            frag_sample_minutes=float(obj.get("frag_sample_minutes", 60.0)),
        )
        cfg.validate()
        return cfg


def parse_resource_type(rtype: str) -> tuple[str, int]:
    machine, _, count = rtype.rpartition("-")
    if not machine or not count.isdigit() or int(count) < 1:
        raise ValidationError(f"bad resource type {rtype!r}; expected MACHINE-COUNT")
    return machine, int(count)


def generate_topology(config: SimConfig) -> ClusterTopology:
    """Node ids n1..nN run globally across partitions in listed order; GPU
    uids are n<i>g0..n<i>g7."""
    partitions = [
        Partition(
            partition_id=p.partition_id,
            machine_type=p.machine_type,
            allowed_max_gpus_per_workload=p.allowed_max_gpus_per_workload,
        )
        for p in config.partitions
    ]
    nodes: list[Node] = []
    node_no = 1
    for p in config.partitions:
        for _ in range(p.nodes):
            node_id = f"n{node_no}"
            gpu_uids = tuple(
                f"{node_id}g{j}" for j in range(config.gpus_per_node)
            )
            nodes.append(Node(node_id=node_id, partition_id=p.partition_id,
                              gpu_uids=gpu_uids))
            node_no += 1
    topo = ClusterTopology(partitions=partitions, nodes=nodes)
    topo.validate()
    return topo


@dataclass
class SimEvent:
    time: int
    kind: str  # submit | allocate | start | end | reject
    payload: dict[str, Any]


@dataclass
class FragMetrics:
    fully_free_nodes: int
    max_allocatable_8gpu_jobs: int
    waiting_by_type: dict[str, int]
    mean_wait_by_type: dict[str, float]  # seconds

    def to_json(self) -> dict[str, Any]:
        return {
            "fully_free_nodes": self.fully_free_nodes,
            "max_allocatable_8gpu_jobs": self.max_allocatable_8gpu_jobs,
            "waiting_by_type": self.waiting_by_type,
            "mean_wait_by_type": self.mean_wait_by_type,
        }


@dataclass
class SimState:
    config: SimConfig
    topology: ClusterTopology
    time: int = 0
    workloads: dict[str, Workload] = field(default_factory=dict)
    pool: list[str] = field(default_factory=list)  # waiting workload ids
    alloc: dict[str, str] = field(default_factory=dict)  # gpu_uid -> workload_id
    _node_index: dict[str, int] = field(default_factory=dict)
    _submit_seq: dict[str, int] = field(default_factory=dict)

    def __post_init__(self) -> None:
        self._node_index = {
            n.node_id: i for i, n in enumerate(self.topology.nodes)
        }

    def free_gpus(self, node: Node) -> list[str]:
        return [u for u in node.gpu_uids if u not in self.alloc]

    def check_conservation(self) -> None:
        running = [w for w in self.workloads.values() if w.state == "running"]
        expect = sum(w.gpu_count for w in running)
        if expect != len(self.alloc):
            raise ValidationError(
                f"conservation violated: {len(self.alloc)} allocated vs "
                f"{expect} requested by running workloads"
            )
        for w in running:
            for uid in w.allocated_gpu_uids:
                if self.alloc.get(uid) != w.workload_id:
                    raise ValidationError(f"gpu {uid} not owned by {w.workload_id}")


def target_partition(
    config: SimConfig, topology: ClusterTopology, machine_type: str, gpu_count: int
) -> Optional[Partition]:
    """The feasible partition with the tightest GPU ceiling; first listed
    wins ties. None when the request exceeds every ceiling."""
    best: Optional[Partition] = None
    best_cap = math.inf
    for p in topology.partitions:
        if p.machine_type != machine_type:
            continue
        cap = (
            math.inf
            if p.allowed_max_gpus_per_workload is None
            else p.allowed_max_gpus_per_workload
        )
        if gpu_count <= cap and (best is None or cap < best_cap):
            best = p
            best_cap = cap
    return best


def select_placement(
    state: SimState, workload: Workload
) -> Optional[list[str]]:
    """GPU uids for a feasible placement under the configured policy, or
    None when nothing fits right now. Gang semantics: single-node jobs fit
    in one node's free GPUs; whole-node jobs need fully free nodes."""
    config = state.config
    part = target_partition(
        config, state.topology, workload.machine_type, workload.gpu_count
    )
    if part is None:
        return None
    nodes = [n for n in state.topology.nodes if n.partition_id == part.partition_id]
    per_node = config.gpus_per_node
    if workload.gpu_count <= per_node:
        feasible = [
            (n, state.free_gpus(n))
            for n in nodes
            if len(state.free_gpus(n)) >= workload.gpu_count
        ]
        if not feasible:
            return None
        if config.placement_policy == "Spread":
            chosen = max(
                feasible,
                key=lambda nf: (len(nf[1]), -state._node_index[nf[0].node_id]),
            )
        else:  # MostAllocated: fewest free GPUs first
            chosen = min(
                feasible,
                key=lambda nf: (len(nf[1]), state._node_index[nf[0].node_id]),
            )
        return chosen[1][: workload.gpu_count]
    k = workload.gpu_count // per_node
    free_nodes = [n for n in nodes if len(state.free_gpus(n)) == per_node]
    if len(free_nodes) < k:
        return None
    picked = sorted(free_nodes, key=lambda n: state._node_index[n.node_id])[:k]
    out: list[str] = []
    for n in picked:
        out.extend(n.gpu_uids)
    return out


def _pool_order(state: SimState) -> list[str]:
    if state.config.queue_policy == "PrioritySize":
        return sorted(
            state.pool,
            key=lambda wid: (
                -state.workloads[wid].priority_score,
                state.workloads[wid].submit_time,
                state._submit_seq[wid],
            ),
        )
    return sorted(
        state.pool,
        key=lambda wid: (state.workloads[wid].submit_time, state._submit_seq[wid]),
    )


def schedule_pass(state: SimState, now: int) -> list[SimEvent]:
    """Scan the waiting pool in policy order and allocate everything that
    fits. No backfill reservations: infeasible workloads are skipped."""
    emitted: list[SimEvent] = []
    placed = True
    while placed:
        placed = False
        for wid in _pool_order(state):
            wl = state.workloads[wid]
            gpus = select_placement(state, wl)
            if gpus is None:
                continue
            state.pool.remove(wid)
            for uid in gpus:
                state.alloc[uid] = wid
            wl.state = "running"
            wl.start_time = now
            wl.allocated_gpu_uids = list(gpus)
            wl.master_gpu_uid = gpus[0]
            emitted.append(
                SimEvent(now, "allocate", {"workload_id": wid, "gpu_uids": list(gpus)})
            )
            emitted.append(
                SimEvent(
                    now,
                    "start",
                    {
                        "workload_id": wid,
                        "gpu_uids": list(gpus),
                        "master_gpu_uid": wl.master_gpu_uid,
                    },
                )
            )
            placed = True
            break  # re-derive pool order after every allocation
    return emitted


def schedule_step(state: SimState, event: SimEvent) -> list[SimEvent]:
    """Apply one external event (submit or end) and run a scheduling pass."""
    if event.time < state.time:
        raise ValidationError("events must arrive in non-decreasing time order")
    state.time = event.time
    emitted: list[SimEvent] = [event]
    if event.kind == "submit":
        wid = event.payload["workload_id"]
        wl = state.workloads[wid]
        part = target_partition(
            state.config, state.topology, wl.machine_type, wl.gpu_count
        )
        if part is None:
            wl.state = "failed"
            wl.end_time = event.time
            emitted.append(
                SimEvent(
                    event.time,
                    "reject",
                    {
                        "workload_id": wid,
                        "reason": "no partition admits this resource type",
                    },
                )
            )
            return emitted
        state.pool.append(wid)
    elif event.kind == "end":
        wid = event.payload["workload_id"]
        wl = state.workloads[wid]
        if wl.state == "running":
            for uid in wl.allocated_gpu_uids:
                del state.alloc[uid]
            wl.state = "finished"
            wl.end_time = event.time
    else:
        raise ValidationError(f"schedule_step cannot apply {event.kind!r}")
    emitted.extend(schedule_pass(state, event.time))
    return emitted


def fragmentation_metrics(state: SimState) -> FragMetrics:
    per_node = state.config.gpus_per_node
    fully_free = 0
    free_in_8_partitions = 0
    for node in state.topology.nodes:
        if len(state.free_gpus(node)) == per_node:
            fully_free += 1
            part = state.topology.partition_by_id()[node.partition_id]
            cap = part.allowed_max_gpus_per_workload
            if cap is None or cap >= per_node:
                free_in_8_partitions += 1
    waiting: dict[str, int] = {}
    for wid in state.pool:
        rt = state.workloads[wid].resource_type
        waiting[rt] = waiting.get(rt, 0) + 1
    waits: dict[str, list[float]] = {}
    for wl in state.workloads.values():
        if wl.start_time is not None:
            waits.setdefault(wl.resource_type, []).append(
                (wl.start_time - wl.submit_time) / 1000.0
            )
    mean_wait = {
        rt: sum(vals) / len(vals) for rt, vals in sorted(waits.items())
    }
    return FragMetrics(
        fully_free_nodes=fully_free,
        max_allocatable_8gpu_jobs=free_in_8_partitions,
        waiting_by_type=dict(sorted(waiting.items())),
        mean_wait_by_type=mean_wait,
    )


@dataclass
class SimResult:
    config: SimConfig
    topology: ClusterTopology
    events: list[SimEvent]
    workloads: dict[str, Workload]
    frag_series: list[tuple[int, FragMetrics]]
    final_state: SimState

    def summary_json(self) -> dict[str, Any]:
        started = [w for w in self.workloads.values() if w.start_time is not None]
        return {
            "seed": self.config.seed,
            "placement_policy": self.config.placement_policy,
            "queue_policy": self.config.queue_policy,
            "workloads_total": len(self.workloads),
            "workloads_started": len(started),
            "frag_series": [
                {"time": t, **m.to_json()} for t, m in self.frag_series
            ],
            "final": fragmentation_metrics(self.final_state).to_json(),
        }


def generate_arrivals(
    config: SimConfig,
) -> list[tuple[int, str, int, str, str, float]]:
    """(submit_ms, resource_type, duration_ms, user, project, priority).

    Each resource type draws from its own seeded substream, so the arrival
    trace is identical under every scheduling policy.
    """
    horizon = config.start_time_ms + int(config.duration_hours * 3600_000)
    rows: list[tuple[int, str, int, str, str, float]] = []
    for rtype in sorted(config.arrival_rate_per_hour):
        rate = config.arrival_rate_per_hour[rtype]
        median_min, sigma = config.duration_lognorm[rtype]
        rng = random.Random(f"{config.seed}:arrivals:{rtype}")
        _, count = parse_resource_type(rtype)
        t = float(config.start_time_ms)
        while True:
            t += rng.expovariate(rate) * 3600_000.0
            if t >= horizon:
                break
            duration_ms = int(
                rng.lognormvariate(math.log(median_min * 60_000.0), sigma)
            )
            duration_ms = max(duration_ms, 60_000)
            user = rng.choice(_USERS)
            project = rng.choice(_PROJECTS)
            priority = float(count) if config.queue_policy == "PrioritySize" else 0.0
            rows.append((int(t), rtype, duration_ms, user, project, priority))
    rows.sort(key=lambda r: (r[0], r[1]))
    return rows


def run_simulation(config: SimConfig) -> SimResult:
    config.validate()
    topology = generate_topology(config)
    state = SimState(config=config, topology=topology, time=config.start_time_ms)
    duration_of: dict[str, int] = {}
    heap: list[tuple[int, int, str, dict[str, Any]]] = []
    seq = 0
    for i, (t, rtype, duration_ms, user, project, priority) in enumerate(
        generate_arrivals(config)
    ):
        wid = f"w{i + 1:05d}"
        machine, count = parse_resource_type(rtype)
        state.workloads[wid] = Workload(
            workload_id=wid,
            user=user,
            project=project,
            machine_type=machine,
            gpu_count=count,
            state="waiting",
            submit_time=t,
            priority_score=priority,
        )
        state._submit_seq[wid] = i
        duration_of[wid] = duration_ms
        heapq.heappush(heap, (t, seq, "submit", {"workload_id": wid}))
        seq += 1
    horizon = config.start_time_ms + int(config.duration_hours * 3600_000)
    frag_interval = max(int(config.frag_sample_minutes * 60_000), 1)
    next_frag = config.start_time_ms + frag_interval
    events: list[SimEvent] = []
    frag_series: list[tuple[int, FragMetrics]] = []
    while heap:
        t, _, kind, payload = heapq.heappop(heap)
        if t > horizon:
            break
        while next_frag <= t:
            frag_series.append((next_frag, fragmentation_metrics(state)))
            next_frag += frag_interval
        emitted = schedule_step(state, SimEvent(t, kind, payload))
        events.extend(emitted)
        for ev in emitted:
            if ev.kind == "start":
                wid = ev.payload["workload_id"]
                heapq.heappush(
                    heap,
                    (t + duration_of[wid], seq, "end", {"workload_id": wid}),
                )
                seq += 1
        state.check_conservation()
    while next_frag <= horizon:
        frag_series.append((next_frag, fragmentation_metrics(state)))
        next_frag += frag_interval
    return SimResult(
        config=config,
        topology=topology,
        events=events,
        workloads=state.workloads,
        frag_series=frag_series,
        final_state=state,
    )


def trace_events(result: SimResult) -> Iterator[dict[str, Any]]:
    """Registry-format NDJSON records for a finished run: the topology line
    followed by workload submit/start/end events in simulation order."""
    yield {"event": "topology", **result.topology.to_json()}
    for ev in result.events:
        wid = ev.payload.get("workload_id", "")
        wl = result.workloads[wid]
        if ev.kind == "submit":
            yield {
                "event": "workload_submit",
                "time": ev.time,
                "workload_id": wid,
                "user": wl.user,
                "project": wl.project,
                "machine_type": wl.machine_type,
                "gpu_count": wl.gpu_count,
                "priority_score": wl.priority_score,
            }
        elif ev.kind == "start":
            yield {
                "event": "workload_start",
                "time": ev.time,
                "workload_id": wid,
                "allocated_gpu_uids": ev.payload["gpu_uids"],
                "master_gpu_uid": ev.payload["master_gpu_uid"],
            }
        elif ev.kind == "end":
            if result.workloads[wid].state == "finished":
                yield {
                    "event": "workload_end",
                    "time": ev.time,
                    "workload_id": wid,
                    "final_state": "finished",
                }
        elif ev.kind == "reject":
            yield {
                "event": "workload_end",
                "time": ev.time,
                "workload_id": wid,
                "final_state": "failed",
            }
