"""HTTP service contract: endpoints, error mapping, stream ticks."""

import json

import pytest
from fastapi.testclient import TestClient

from clusterscape.api import ServiceState, create_app
from clusterscape.model import dump_json
from clusterscape.rules import RuleSet
from clusterscape.scenarios import ScenarioConfig, scenario_records
from clusterscape.snapshot import build_diagnostics_payload
from clusterscape.traceio import record_to_line


def make_rule(rid, ordinal, metric="utilization_pct", kind="median", op="<",
              threshold=50.0, enabled=True):
    stat = {"kind": kind} if kind != "percentile" else {"kind": kind, "p": 95}
    return {
        "rule_id": rid,
        "display_name": rid,
        "conditions": [
            {"metric": metric, "stat": stat, "op": op, "threshold": threshold}
        ],
        "enabled": enabled,
        "ordinal": ordinal,
    }


@pytest.fixture()
def client():
    return TestClient(create_app(ServiceState()))


@pytest.fixture()
def loaded_client():
    """Service pre-loaded with the 64-GPU imbalance scenario."""
    state = ServiceState()
    cfg = ScenarioConfig(kind="imbalance", seed=3, gpus=64, duration_s=600)
    body = "\n".join(record_to_line(r) for r in scenario_records(cfg)) + "\n"
    client = TestClient(create_app(state))
    resp = client.post("/v1/ingest", content=body.encode())
    assert resp.status_code == 200
    assert resp.json()["errors"] == []
    return client, state, cfg


class TestSnapshot:
    def test_empty_system_snapshot_zero(self, client):
        resp = client.get("/v1/snapshot")
        assert resp.status_code == 200
        body = resp.json()
        assert body["snapshot_id"] == 0
        assert body["units"] == []

    def test_snapshot_after_ingest(self, loaded_client):
        client, state, _ = loaded_client
        body = client.get("/v1/snapshot").json()
        assert body["snapshot_id"] == 1
        assert len(body["units"]) == 64
        assert body["topology"]["nodes"] == 8
        unit = body["units"][0]
        assert unit["attributes"]["workload_id"] == "imbalance-1"
        assert unit["attributes"]["utilization_pct"] > 0

    def test_snapshot_id_monotone(self, loaded_client):
        client, state, cfg = loaded_client
        first = client.get("/v1/snapshot").json()["snapshot_id"]
        client.post("/v1/rules", json=make_rule("r1", 1))
        second = client.get("/v1/snapshot").json()["snapshot_id"]
        assert second > first

    def test_idempotent_reads(self, loaded_client):
        client, _, _ = loaded_client
        a = client.get("/v1/snapshot")
        b = client.get("/v1/snapshot")
        assert a.content == b.content


class TestIngest:
    def test_bad_lines_reported_with_offsets(self, client):
        good = '{"ts":1000,"gpu":"g","metric":"power_watts","value":5}'
        bad = '{"ts":1000,"gpu":"g","metric":"nope","value":5}'
        body = f"{good}\n{bad}\n"
        resp = client.post("/v1/ingest", content=body.encode())
        assert resp.status_code == 200
        out = resp.json()
        assert out["accepted"] == 1
        assert len(out["errors"]) == 1
        assert out["errors"][0]["offset"] == len(good) + 1

    def test_registry_and_samples_in_one_stream(self, client):
        lines = [
            dump_json({
                "event": "topology",
                "partitions": [{"partition_id": "p", "machine_type": "A100",
                                "allowed_max_gpus_per_workload": None}],
                "nodes": [{"node_id": "n1", "partition_id": "p",
                           "gpu_uids": ["n1g0"]}],
            }),
            '{"ts":5000,"gpu":"n1g0","metric":"utilization_pct","value":42}',
        ]
        resp = client.post("/v1/ingest", content="\n".join(lines).encode())
        assert resp.json()["accepted"] == 2
        snap = client.get("/v1/snapshot").json()
        assert snap["units"][0]["attributes"]["utilization_pct"] == 42


class TestRules:
    def test_crud_and_limit(self, client):
        for i in range(5):
            resp = client.post("/v1/rules", json=make_rule(f"r{i}", i + 1))
            assert resp.status_code == 201
        sixth = client.post("/v1/rules", json=make_rule("r5", 5))
        assert sixth.status_code == 409
        assert "rule limit" in sixth.json()["error"]
        listed = client.get("/v1/rules").json()
        assert [r["rule_id"] for r in listed] == [f"r{i}" for i in range(5)]
        gone = client.delete("/v1/rules/r0")
        assert gone.status_code == 200
        assert len(client.get("/v1/rules").json()) == 4
        missing = client.delete("/v1/rules/nope")
        assert missing.status_code == 404

    def test_rules_persist_to_file(self, tmp_path):
        path = tmp_path / "rules.json"
        state = ServiceState(rules_path=path)
        client = TestClient(create_app(state))
        client.post("/v1/rules", json=make_rule("keep", 1))
        reloaded = ServiceState(rules_path=path)
        assert [r.rule_id for r in reloaded.ruleset.rules] == ["keep"]

    def test_malformed_rule_body_is_400(self, client):
        resp = client.post("/v1/rules", json={"rule_id": "x"})
        assert resp.status_code == 400


class TestViolations:
    def test_group_summaries(self, loaded_client):
        client, _, _ = loaded_client
        client.post("/v1/rules", json=make_rule(
            "R1", 1, kind="percentile", op="<", threshold=80.0))
        body = client.get("/v1/violations", params={"group_by": "node"}).json()
        assert body["group_by"] == "node"
        assert len(body["groups"]) == 8
        for group in body["groups"]:
            # 7 of 8 GPUs per node are workers under the imbalance profile
            row = group["per_rule"][0]
            assert row["matching_unit_count"] == 7
            assert row["proportion"] == pytest.approx(0.875)

    def test_stale_snapshot_param_404(self, loaded_client):
        client, state, _ = loaded_client
        ok = client.get("/v1/violations", params={"snapshot": state.snapshot_id})
        assert ok.status_code == 200
        stale = client.get("/v1/violations", params={"snapshot": 999})
        assert stale.status_code == 404

    def test_bad_group_by_400(self, loaded_client):
        client, _, _ = loaded_client
        assert client.get("/v1/violations",
                          params={"group_by": "color"}).status_code == 400


class TestDiagnostics:
    def test_matches_engine_byte_for_byte(self, loaded_client):
        client, state, _ = loaded_client
        resp = client.get(
            "/v1/workloads/imbalance-1/diagnostics",
            params={"metric": "utilization_pct", "plot": "hist", "bins": 20},
        )
        assert resp.status_code == 200
        direct = build_diagnostics_payload(
            state.store, state.registry, state.ruleset, "imbalance-1",
            metric="utilization_pct", plot="hist", bins=20,
        )
        assert resp.content == dump_json(direct).encode()

    def test_two_clusters_masters_together(self, loaded_client):
        client, _, _ = loaded_client
        body = client.get("/v1/workloads/imbalance-1/diagnostics").json()
        assert body["cluster_count"] == 2
        masters = {g["cluster_id"] for g in body["gpus"] if g["gpu_index"] == 0}
        workers = {g["cluster_id"] for g in body["gpus"] if g["gpu_index"] != 0}
        assert len(masters) == 1 and masters.isdisjoint(workers)

    def test_timeline_plot(self, loaded_client):
        client, _, _ = loaded_client
        body = client.get(
            "/v1/workloads/imbalance-1/diagnostics",
            params={"plot": "timeline", "max_points": 50},
        ).json()
        assert body["plot"] == "timeline"
        assert all(len(g["points"]) <= 50 for g in body["gpus"])

    def test_unknown_workload_404(self, loaded_client):
        client, _, _ = loaded_client
        assert client.get("/v1/workloads/ghost/diagnostics").status_code == 404

    def test_verbose_includes_matrix(self, loaded_client):
        client, _, _ = loaded_client
        body = client.get(
            "/v1/workloads/imbalance-1/diagnostics",
            params={"verbose": "true"},
        ).json()
        assert "matrix" in body
        assert len(body["matrix"]["labels"]) == 64
        lean = client.get("/v1/workloads/imbalance-1/diagnostics").json()
        assert "matrix" not in lean


class TestTimelineAndOutliers:
    def test_timeline_window_and_budget(self, loaded_client):
        client, state, cfg = loaded_client
        wl = state.registry.get_workload("imbalance-1")
        body = client.get(
            "/v1/workloads/imbalance-1/timeline",
            params={"metric": "power_watts", "from": wl.start_time,
                    "to": wl.start_time + 100_000, "max_points": 10},
        ).json()
        assert body["metric"] == "power_watts"
        assert len(body["series"]) == 64
        for s in body["series"]:
            assert len(s["points"]) <= 10
            for t, _ in s["points"]:
                assert wl.start_time <= t <= wl.start_time + 100_000

    def test_outliers_flags_match_cutoff(self, loaded_client):
        client, _, _ = loaded_client
        body = client.get(
            "/v1/workloads/imbalance-1/outliers",
            params={"x": "utilization_pct", "y": "power_watts", "alpha": 0.01},
        ).json()
        assert body["cutoff"] == pytest.approx(9.21034037197618)
        assert body["points"]
        for p in body["points"]:
            assert p["flagged"] == (p["d2"] > body["cutoff"])

    def test_bad_alpha_400(self, loaded_client):
        client, _, _ = loaded_client
        resp = client.get("/v1/workloads/imbalance-1/outliers",
                          params={"alpha": 0.9})
        assert resp.status_code == 400


class TestLayoutEndpoint:
    def test_layout_round_trip(self, loaded_client):
        client, _, _ = loaded_client
        spec = {
            "viewport": {"width": 1200, "height": 800},
            "layers": [
                {"group_by": "partition", "operator": "ListX", "sizing": "Count"},
                {"group_by": "node", "operator": "Pack", "sizing": "Uniform"},
            ],
            "unit_operator": {"operator": "Pack", "sizing": "Uniform"},
        }
        resp = client.post("/v1/layout", json=spec)
        assert resp.status_code == 200
        body = resp.json()
        assert len(body["unit_rects"]) == 64
        resp2 = client.post("/v1/layout", json=spec)
        assert resp.content == resp2.content

    def test_invalid_spec_400(self, loaded_client):
        client, _, _ = loaded_client
        resp = client.post("/v1/layout", json={"layers": [{"group_by": "nope"}]})
        assert resp.status_code == 400


class TestStream:
    def test_stream_emits_snapshot_tick(self, loaded_client):
        client, state, _ = loaded_client
        resp = client.get("/v1/stream", params={"max_events": 1})
        assert resp.status_code == 200
        assert resp.headers["content-type"].startswith("text/event-stream")
        data_lines = [l for l in resp.text.splitlines() if l.startswith("data:")]
        assert json.loads(data_lines[0].removeprefix("data:")) == {
            "snapshot_id": state.snapshot_id
        }

    def test_stream_ticks_again_after_mutation(self, loaded_client):
        client, state, _ = loaded_client
        import threading

        ticks = []

        def reader():
            r = client.get("/v1/stream", params={"max_events": 2})
            ticks.extend(
                json.loads(l.removeprefix("data:"))["snapshot_id"]
                for l in r.text.splitlines()
                if l.startswith("data:")
            )

        t = threading.Thread(target=reader)
        t.start()
        import time

        time.sleep(0.5)
        client.post("/v1/rules", json=make_rule("tick", 1))
        t.join(timeout=20)
        assert not t.is_alive()
        assert len(ticks) == 2
        assert ticks[0] < ticks[1]
