"""Synthetic per-GPU metric streams with injectable pathologies.

Four shapes: healthy training (high utilization with brief validation dips),
stalled training (busy GPUs drawing low power), distributed imbalance (one
hot master GPU per node, left-skewed workers with zero-utilization
synchronization gaps), and idle. Streams are seeded per (seed, workload,
gpu), so a trace is reproducible regardless of generation order.
"""

from __future__ import annotations

import random
from dataclasses import dataclass
from typing import Any, Iterator, Optional

from .model import KNOWN_METRICS, MetricSample, ValidationError, Workload
from .registry import Registry
from .sim import DEFAULT_TDP, PartitionConfig, SimConfig, generate_topology
from .store import MetricStore

SCENARIO_KINDS = ("healthy", "stalled", "imbalance", "idle")


@dataclass
class ScenarioConfig:
    kind: str
    seed: int = 0
    gpus: int = 16
    gpus_per_node: int = 8
    machine_type: str = "A100"
    tdp_watts: float = 400.0
    duration_s: int = 3600
    scrape_interval_s: int = 5
    start_time_ms: int = 1_600_000_000_000
    # stalled scenarios carry a healthy control workload of the same size
    with_healthy_control: bool = True
    metrics: tuple[str, ...] = tuple(KNOWN_METRICS)

    def validate(self) -> None:
        if self.kind not in SCENARIO_KINDS:
            raise ValidationError(f"unknown scenario kind {self.kind!r}")
        if self.gpus < 1 or self.gpus % self.gpus_per_node != 0:
            raise ValidationError(
                f"scenario gpus must be a multiple of {self.gpus_per_node}"
            )
        for m in self.metrics:
            if m not in KNOWN_METRICS:
                raise ValidationError(f"unknown metric {m!r}")


def _clip(v: float, lo: float, hi: float) -> float:
    return min(max(v, lo), hi)


class _GpuStream:
    """One GPU's sample generator; profile selected by scenario role."""

    def __init__(self, role: str, rng: random.Random, tdp: float):
        self.role = role
        self.rng = rng
        self.tdp = tdp
        self.dip_left = 0
        self.gap_left = 0

    def sample(self, idx: int) -> dict[str, float]:
        rng = self.rng
        tdp = self.tdp
        if self.role == "healthy":
            if self.dip_left == 0 and idx > 0 and idx % 120 == 0:
                self.dip_left = 6  # brief validation dip every ~10 min
            if self.dip_left > 0:
                self.dip_left -= 1
                util = _clip(rng.gauss(30.0, 5.0), 0.0, 100.0)
                power = _clip(rng.gauss(0.35 * tdp, 0.05 * tdp), 0.0, tdp)
            else:
                util = _clip(rng.gauss(93.0, 2.5), 0.0, 100.0)
                power = _clip(rng.gauss(0.78 * tdp, 0.03 * tdp), 0.0, tdp)
            return {
                "utilization_pct": util,
                "power_watts": power,
                "memory_used_mib": max(rng.gauss(60_000.0, 300.0), 0.0),
                "temperature_c": max(rng.gauss(66.0, 3.0), 0.0),
                "nvlink_tx_mibps": max(rng.gauss(8_000.0, 1_500.0), 0.0),
                "nvlink_rx_mibps": max(rng.gauss(8_000.0, 1_500.0), 0.0),
            }
        if self.role == "stalled":
            util = _clip(rng.gauss(96.0, 1.5), 85.0, 100.0)
            power = _clip(rng.gauss(0.45 * tdp, 0.04 * tdp), 0.1 * tdp, 0.6 * tdp)
            return {
                "utilization_pct": util,
                "power_watts": power,
                "memory_used_mib": max(rng.gauss(60_000.0, 300.0), 0.0),
                "temperature_c": max(rng.gauss(55.0, 2.0), 0.0),
                "nvlink_tx_mibps": max(rng.gauss(50.0, 20.0), 0.0),
                "nvlink_rx_mibps": max(rng.gauss(50.0, 20.0), 0.0),
            }
        if self.role == "master":
            util = _clip(rng.gauss(88.0, 4.0), 0.0, 100.0)
            return {
                "utilization_pct": util,
                "power_watts": _clip(rng.gauss(0.75 * tdp, 0.04 * tdp), 0.0, tdp),
                "memory_used_mib": max(rng.gauss(64_000.0, 400.0), 0.0),
                "temperature_c": max(rng.gauss(70.0, 3.0), 0.0),
                "nvlink_tx_mibps": max(rng.gauss(12_000.0, 2_000.0), 0.0),
                "nvlink_rx_mibps": max(rng.gauss(12_000.0, 2_000.0), 0.0),
            }
        if self.role == "worker":
            # Left-skewed low utilization with zero-valued sync gap bursts.
            if self.gap_left > 0:
                self.gap_left -= 1
                util = 0.0
            elif self.rng.random() < 0.02:
                self.gap_left = rng.randint(4, 10)
                util = 0.0
            elif rng.random() < 0.28:
                util = _clip(rng.gauss(8.0, 3.0), 0.0, 20.0)
            else:
                util = _clip(rng.gauss(38.0, 7.0), 0.0, 100.0)
            power = _clip(
                (0.25 + 0.5 * util / 100.0) * tdp + rng.gauss(0.0, 0.02 * tdp),
                0.0,
                tdp,
            )
            return {
                "utilization_pct": util,
                "power_watts": power,
                "memory_used_mib": max(rng.gauss(60_000.0, 400.0), 0.0),
                "temperature_c": max(rng.gauss(50.0, 4.0), 0.0),
                "nvlink_tx_mibps": max(rng.gauss(3_000.0, 800.0), 0.0),
                "nvlink_rx_mibps": max(rng.gauss(3_000.0, 800.0), 0.0),
            }
        # idle
        return {
            "utilization_pct": _clip(abs(rng.gauss(0.0, 0.2)), 0.0, 0.9),
            "power_watts": max(rng.gauss(0.12 * tdp, 0.01 * tdp), 0.0),
            "memory_used_mib": max(rng.gauss(1_000.0, 50.0), 0.0),
            "temperature_c": max(rng.gauss(35.0, 2.0), 0.0),
            "nvlink_tx_mibps": max(rng.gauss(1.0, 0.5), 0.0),
            "nvlink_rx_mibps": max(rng.gauss(1.0, 0.5), 0.0),
        }


def _workload_roles(
    cfg: ScenarioConfig, kind: str, gpu_uids: list[str]
) -> dict[str, str]:
    """Role per GPU; imbalance marks the first GPU of each node as master."""
    if kind != "imbalance":
        role = {"healthy": "healthy", "stalled": "stalled", "idle": "idle"}[kind]
        return {uid: role for uid in gpu_uids}
    roles = {}
    for i, uid in enumerate(gpu_uids):
        roles[uid] = "master" if i % cfg.gpus_per_node == 0 else "worker"
    return roles


def scenario_records(cfg: ScenarioConfig) -> Iterator[Any]:
    """Registry event dicts followed by MetricSample batches in time order.

    The stalled scenario also carries a healthy control workload of the same
    size so detection quality can be judged against a clean baseline.
    """
    cfg.validate()
    workload_kinds = [cfg.kind]
    if cfg.kind == "stalled" and cfg.with_healthy_control:
        workload_kinds.append("healthy")
    n_nodes_per_wl = cfg.gpus // cfg.gpus_per_node
    sim_cfg = SimConfig(
        seed=cfg.seed,
        start_time_ms=cfg.start_time_ms,
        gpus_per_node=cfg.gpus_per_node,
        machine_tdp={cfg.machine_type: cfg.tdp_watts},
        partitions=[
            PartitionConfig(
                partition_id=f"{cfg.machine_type.lower()}-large",
                machine_type=cfg.machine_type,
                nodes=n_nodes_per_wl * len(workload_kinds),
                allowed_max_gpus_per_workload=None,
            )
        ],
    )
    topology = generate_topology(sim_cfg)
    yield {"event": "topology", **topology.to_json()}
    t_submit = cfg.start_time_ms
    t_start = cfg.start_time_ms + 60_000
    streams: dict[tuple[str, str], _GpuStream] = {}
    workloads: list[tuple[str, list[str]]] = []
    for w_i, kind in enumerate(workload_kinds):
        wid = f"{kind}-{w_i + 1}"
        nodes = topology.nodes[w_i * n_nodes_per_wl: (w_i + 1) * n_nodes_per_wl]
        gpu_uids = [u for n in nodes for u in n.gpu_uids]
        yield {
            "event": "workload_submit",
            "time": t_submit,
            "workload_id": wid,
            "user": f"u{w_i + 1:02d}",
            "project": kind,
            "machine_type": cfg.machine_type,
            "gpu_count": len(gpu_uids),
            "priority_score": 0.0,
        }
        yield {
            "event": "workload_start",
            "time": t_start,
            "workload_id": wid,
            "allocated_gpu_uids": gpu_uids,
            "master_gpu_uid": gpu_uids[0],
        }
        roles = _workload_roles(cfg, kind, gpu_uids)
        for uid in gpu_uids:
            rng = random.Random(f"{cfg.seed}:{wid}:{uid}")
            streams[(wid, uid)] = _GpuStream(roles[uid], rng, cfg.tdp_watts)
        workloads.append((wid, gpu_uids))
    n_samples = cfg.duration_s // cfg.scrape_interval_s
    step_ms = cfg.scrape_interval_s * 1000
    for idx in range(n_samples):
        ts = t_start + (idx + 1) * step_ms
        for wid, gpu_uids in workloads:
            for uid in gpu_uids:
                values = streams[(wid, uid)].sample(idx)
                for metric in cfg.metrics:
                    yield MetricSample(
                        timestamp=ts, gpu_uid=uid, metric=metric,
                        value=values[metric],
                    )


def load_records(
    records: Iterator[Any],
    store: Optional[MetricStore] = None,
    registry: Optional[Registry] = None,
) -> tuple[MetricStore, Registry]:
    """Feed scenario or trace records straight into a store and registry."""
    store = store if store is not None else MetricStore()
    registry = registry if registry is not None else Registry()
    for rec in records:
        if isinstance(rec, MetricSample):
            store.append(rec)
        else:
            registry.apply_event(rec)
    return store, registry


def scenario_workload(cfg: ScenarioConfig, registry: Registry) -> Workload:
    """The pathological workload of a generated scenario (first one)."""
    wid = f"{cfg.kind}-1"
    return registry.get_workload(wid)
