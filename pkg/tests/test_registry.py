"""Registry event streams: topology and workload lifecycle."""

import pytest

from clusterscape.model import NotFoundError, ParseError, ValidationError
from clusterscape.registry import Registry

TOPOLOGY = {
    "event": "topology",
    "partitions": [
        {"partition_id": "p1", "machine_type": "A100",
         "allowed_max_gpus_per_workload": 8},
    ],
    "nodes": [
        {"node_id": "n1", "partition_id": "p1",
         "gpu_uids": [f"n1g{j}" for j in range(8)]},
        {"node_id": "n2", "partition_id": "p1",
         "gpu_uids": [f"n2g{j}" for j in range(8)]},
    ],
}


def submit(wid, t=1000, count=2):
    return {
        "event": "workload_submit", "time": t, "workload_id": wid,
        "user": "u01", "project": "llm", "machine_type": "A100",
        "gpu_count": count, "priority_score": 0.0,
    }


def start(wid, t=2000, gpus=("n1g0", "n1g1")):
    return {
        "event": "workload_start", "time": t, "workload_id": wid,
        "allocated_gpu_uids": list(gpus), "master_gpu_uid": gpus[0],
    }


def make_registry():
    reg = Registry()
    reg.apply_event(TOPOLOGY)
    return reg


class TestLifecycle:
    def test_submit_start_end(self):
        reg = make_registry()
        reg.apply_event(submit("w1"))
        assert reg.get_workload("w1").state == "waiting"
        reg.apply_event(start("w1"))
        wl = reg.get_workload("w1")
        assert wl.state == "running"
        assert wl.allocated_gpu_uids == ["n1g0", "n1g1"]
        reg.apply_event({"event": "workload_end", "time": 9000,
                         "workload_id": "w1", "final_state": "finished"})
        assert reg.get_workload("w1").state == "finished"

    def test_waiting_can_fail(self):
        reg = make_registry()
        reg.apply_event(submit("w1"))
        reg.apply_event({"event": "workload_end", "time": 1500,
                         "workload_id": "w1", "final_state": "failed"})
        assert reg.get_workload("w1").state == "failed"

    def test_waiting_cannot_finish(self):
        reg = make_registry()
        reg.apply_event(submit("w1"))
        with pytest.raises(ValidationError):
            reg.apply_event({"event": "workload_end", "time": 1500,
                             "workload_id": "w1", "final_state": "finished"})

    def test_allocation_count_must_match(self):
        reg = make_registry()
        reg.apply_event(submit("w1", count=4))
        with pytest.raises(ValidationError):
            reg.apply_event(start("w1", gpus=("n1g0", "n1g1")))

    def test_unknown_gpu_rejected(self):
        reg = make_registry()
        reg.apply_event(submit("w1"))
        with pytest.raises(ValidationError):
            reg.apply_event(start("w1", gpus=("n9g0", "n9g1")))

    def test_unknown_workload_events(self):
        reg = make_registry()
        with pytest.raises(NotFoundError):
            reg.apply_event(start("ghost"))
        with pytest.raises(NotFoundError):
            reg.apply_event({"event": "workload_end", "time": 1,
                             "workload_id": "ghost"})

    def test_double_submit_rejected(self):
        reg = make_registry()
        reg.apply_event(submit("w1"))
        with pytest.raises(ValidationError):
            reg.apply_event(submit("w1"))

    def test_malformed_line(self):
        with pytest.raises(ParseError):
            Registry().apply_line("{oops", offset=12)

    def test_line_without_event_key(self):
        with pytest.raises(ParseError):
            Registry().apply_line('{"ts": 1}')


class TestViews:
    def test_waiting_queue_in_submit_order(self):
        reg = make_registry()
        reg.apply_event(submit("w1", t=1000))
        reg.apply_event(submit("w2", t=1200))
        reg.apply_event(submit("w3", t=1100))
        assert [w.workload_id for w in reg.waiting_queue()] == ["w1", "w2", "w3"]

    def test_gpu_allocation_map(self):
        reg = make_registry()
        reg.apply_event(submit("w1"))
        reg.apply_event(start("w1"))
        alloc = reg.gpu_allocation()
        assert alloc["n1g0"].workload_id == "w1"
        assert "n2g0" not in alloc

    def test_topology_invariants_enforced(self):
        bad = dict(TOPOLOGY)
        bad["nodes"] = TOPOLOGY["nodes"] + [
            {"node_id": "n3", "partition_id": "p1", "gpu_uids": ["n1g0"]}
        ]
        with pytest.raises(ValidationError, match="more than one node"):
            Registry().apply_event(bad)
