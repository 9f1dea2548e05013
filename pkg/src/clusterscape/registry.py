"""System- and application-level registries fed by NDJSON event lines.

Event kinds:
  {"event":"topology", "partitions":[...], "nodes":[...]}
  {"event":"workload_submit", "time":ms, "workload_id":..., "user":...,
   "project":..., "machine_type":..., "gpu_count":..., "priority_score":...}
  {"event":"workload_start", "time":ms, "workload_id":...,
   "allocated_gpu_uids":[...], "master_gpu_uid":...}
  {"event":"workload_end", "time":ms, "workload_id":...,
   "final_state":"finished"|"failed"}

The simulator emits exactly these lines, so a trace file can be replayed
into a live service or rebuilt into a local registry.
"""

from __future__ import annotations

import json
import threading
from typing import Any, Optional

from .model import (
    ClusterTopology,
    NotFoundError,
    ParseError,
    ValidationError,
    Workload,
)

EVENT_KINDS = ("topology", "workload_submit", "workload_start", "workload_end")


class Registry:
    def __init__(self) -> None:
        self.topology: Optional[ClusterTopology] = None
        self.workloads: dict[str, Workload] = {}
        self._order: list[str] = []  # submission order
        self._lock = threading.Lock()
        self.latest_event_time: int = 0

    # -- event ingestion ----------------------------------------------------

    def apply_line(self, line: str, offset: int = 0) -> None:
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ParseError(f"invalid JSON: {exc.msg}", offset) from exc
        if not isinstance(obj, dict) or "event" not in obj:
            raise ParseError("registry record must be an object with 'event'", offset)
        self.apply_event(obj)

    def apply_event(self, obj: dict[str, Any]) -> None:
        kind = obj.get("event")
        if kind not in EVENT_KINDS:
            raise ValidationError(f"unknown event kind {kind!r}")
        with self._lock:
            if kind == "topology":
                self.topology = ClusterTopology.from_json(obj)
                return
            t = obj.get("time")
            if not isinstance(t, int) or t <= 0:
                raise ValidationError(f"{kind}: time must be a positive integer")
            if t > self.latest_event_time:
                self.latest_event_time = t
            wid = obj.get("workload_id")
            if not isinstance(wid, str) or not wid:
                raise ValidationError(f"{kind}: workload_id required")
            if kind == "workload_submit":
                self._apply_submit(obj, wid, t)
            elif kind == "workload_start":
                self._apply_start(obj, wid, t)
            else:
                self._apply_end(obj, wid, t)

    def _apply_submit(self, obj: dict[str, Any], wid: str, t: int) -> None:
        if wid in self.workloads:
            raise ValidationError(f"workload {wid} already submitted")
        wl = Workload(
            workload_id=wid,
            user=obj.get("user", ""),
            project=obj.get("project", ""),
            machine_type=obj["machine_type"],
            gpu_count=int(obj["gpu_count"]),
            state="waiting",
            submit_time=t,
            priority_score=float(obj.get("priority_score", 0.0)),
        )
        if wl.gpu_count < 1:
            raise ValidationError(f"workload {wid}: gpu_count must be >= 1")
        self.workloads[wid] = wl
        self._order.append(wid)

    def _apply_start(self, obj: dict[str, Any], wid: str, t: int) -> None:
        wl = self.workloads.get(wid)
        if wl is None:
            raise NotFoundError(f"workload_start for unknown workload {wid}")
        if wl.state != "waiting":
            raise ValidationError(f"workload {wid} started twice")
        allocated = list(obj.get("allocated_gpu_uids", []))
        if len(allocated) != wl.gpu_count:
            raise ValidationError(
                f"workload {wid}: allocated {len(allocated)} GPUs, "
                f"requested {wl.gpu_count}"
            )
        if self.topology is not None:
            known = set(self.topology.gpu_uids)
            missing = [u for u in allocated if u not in known]
            if missing:
                raise ValidationError(
                    f"workload {wid}: unknown gpus {missing[:3]}"
                )
        master = obj.get("master_gpu_uid")
        if master is not None and master not in allocated:
            raise ValidationError(f"workload {wid}: master gpu not in allocation")
        wl.state = "running"
        wl.start_time = t
        wl.allocated_gpu_uids = allocated
        wl.master_gpu_uid = master
        wl.validate()

    def _apply_end(self, obj: dict[str, Any], wid: str, t: int) -> None:
        wl = self.workloads.get(wid)
        if wl is None:
            raise NotFoundError(f"workload_end for unknown workload {wid}")
        final = obj.get("final_state", "finished")
        if final not in ("finished", "failed"):
            raise ValidationError(f"workload {wid}: bad final_state {final!r}")
        # A waiting workload may fail (e.g. rejected request) without starting.
        if wl.state != "running" and not (wl.state == "waiting" and final == "failed"):
            raise ValidationError(f"workload {wid} ended while {wl.state}")
        wl.state = final
        wl.end_time = t
        wl.validate()

    # -- views ---------------------------------------------------------------

    def get_workload(self, workload_id: str) -> Workload:
        with self._lock:
            wl = self.workloads.get(workload_id)
            if wl is None:
                raise NotFoundError(f"unknown workload {workload_id!r}")
            return wl

    def workloads_in_order(self) -> list[Workload]:
        with self._lock:
            return [self.workloads[w] for w in self._order]

    def running_workloads(self) -> list[Workload]:
        return [w for w in self.workloads_in_order() if w.state == "running"]

    def waiting_queue(self) -> list[Workload]:
        """Waiting pool in submission order; positions are dense from 1."""
        return [w for w in self.workloads_in_order() if w.state == "waiting"]

    def gpu_allocation(self) -> dict[str, Workload]:
        """gpu_uid -> workload currently running on it."""
        out: dict[str, Workload] = {}
        for wl in self.running_workloads():
            for uid in wl.allocated_gpu_uids:
                out[uid] = wl
        return out
