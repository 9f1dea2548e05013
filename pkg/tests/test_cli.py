"""CLI subcommands, artifact files, and the exit-code contract."""

import json
from pathlib import Path

import pytest

from clusterscape.cli import main
from clusterscape.model import dump_json


def sim_config(tmp_path: Path) -> Path:
    cfg = {
        "seed": 7,
        "duration_hours": 4.0,
        "partitions": [
            {"partition_id": "a100-small", "machine_type": "A100", "nodes": 6,
             "allowed_max_gpus_per_workload": 8},
        ],
        "arrival_rate_per_hour": {"A100-1": 4.0, "A100-8": 1.0},
        "duration_lognorm": {"A100-1": [40.0, 0.6], "A100-8": [60.0, 0.6]},
        "placement_policy": "MostAllocated",
        "queue_policy": "FCFS",
    }
    path = tmp_path / "config.json"
    path.write_text(dump_json(cfg))
    return path


def stall_rules(tmp_path: Path, tdp=400.0) -> Path:
    rules = [
        {
            "rule_id": "stall",
            "display_name": "busy but cold",
            "conditions": [
                {"metric": "utilization_pct", "stat": {"kind": "percentile", "p": 95},
                 "op": ">", "threshold": 90.0},
                {"metric": "power_watts", "stat": {"kind": "median"},
                 "op": "<", "threshold": 0.7 * tdp},
            ],
            "enabled": True,
            "ordinal": 1,
        }
    ]
    path = tmp_path / "rules.json"
    path.write_text(dump_json(rules))
    return path


class TestSimulate:
    def test_config_mode_byte_identical_across_runs(self, tmp_path):
        cfg = sim_config(tmp_path)
        out1, out2 = tmp_path / "a.ndjson", tmp_path / "b.ndjson"
        assert main(["simulate", "--config", str(cfg), "--out", str(out1)]) == 0
        assert main(["simulate", "--config", str(cfg), "--out", str(out2)]) == 0
        assert out1.read_bytes() == out2.read_bytes()
        summary = json.loads((tmp_path / "a.ndjson.summary.json").read_text())
        assert summary["mode"] == "schedule"
        assert summary["frag_series"]

    def test_seed_override_changes_trace(self, tmp_path):
        cfg = sim_config(tmp_path)
        out1, out2 = tmp_path / "a.ndjson", tmp_path / "b.ndjson"
        main(["simulate", "--config", str(cfg), "--out", str(out1)])
        main(["simulate", "--config", str(cfg), "--seed", "99",
              "--out", str(out2)])
        assert out1.read_bytes() != out2.read_bytes()

    def test_scenario_mode(self, tmp_path):
        out = tmp_path / "stalled.ndjson"
        code = main(["simulate", "--scenario", "stalled", "--seed", "3",
                     "--gpus", "16", "--duration-s", "600", "--out", str(out)])
        assert code == 0
        lines = out.read_text().splitlines()
        assert json.loads(lines[0])["event"] == "topology"
        assert any('"workload_start"' in l for l in lines[:6])

    def test_needs_exactly_one_mode(self, tmp_path):
        assert main(["simulate", "--out", str(tmp_path / "x")]) == 1


class TestRules:
    def test_add_list_and_limit(self, tmp_path):
        collection = tmp_path / "rules.json"
        for i in range(5):
            rule_file = tmp_path / f"r{i}.json"
            rule_file.write_text(dump_json({
                "rule_id": f"r{i}", "display_name": f"r{i}",
                "conditions": [{"metric": "power_watts",
                                "stat": {"kind": "mean"},
                                "op": ">", "threshold": 0.0}],
                "enabled": True, "ordinal": i + 1,
            }))
            assert main(["rules", "add", str(rule_file),
                         "--rules", str(collection)]) == 0
        sixth = tmp_path / "r5.json"
        sixth.write_text(dump_json({
            "rule_id": "r5", "display_name": "r5",
            "conditions": [{"metric": "power_watts", "stat": {"kind": "mean"},
                            "op": ">", "threshold": 0.0}],
            "enabled": True, "ordinal": 5,
        }))
        assert main(["rules", "add", str(sixth), "--rules", str(collection)]) == 1

    def test_eval_stalled_scenario_fires_all(self, tmp_path, capsys):
        trace = tmp_path / "stalled.ndjson"
        main(["simulate", "--scenario", "stalled", "--seed", "2",
              "--gpus", "16", "--duration-s", "900", "--out", str(trace)])
        rules = stall_rules(tmp_path)
        out_file = tmp_path / "violations.json"
        code = main(["rules", "eval", "--rules", str(rules),
                     "--trace", str(trace), "--out", str(out_file)])
        assert code == 0
        payload = json.loads(out_file.read_text())
        fired = {
            g["gpu_uid"]: g["fired"]["stall"] for g in payload["matrix"]["gpus"]
        }
        by_wl = {}
        for g in payload["matrix"]["gpus"]:
            by_wl.setdefault(g["workload_id"], []).append(g["fired"]["stall"])
        assert all(by_wl["stalled-1"])
        assert not any(by_wl["healthy-2"])

    def test_eval_table_format(self, tmp_path, capsys):
        trace = tmp_path / "t.ndjson"
        main(["simulate", "--scenario", "idle", "--seed", "1", "--gpus", "8",
              "--duration-s", "300", "--out", str(trace)])
        rules = stall_rules(tmp_path)
        assert main(["rules", "eval", "--rules", str(rules),
                     "--trace", str(trace), "--format", "table"]) == 0
        out = capsys.readouterr().out
        assert "gpu_uid" in out and "stall" in out


class TestDiagnose:
    def test_imbalance_masters_cluster_together(self, tmp_path):
        trace = tmp_path / "imb.ndjson"
        main(["simulate", "--scenario", "imbalance", "--seed", "5",
              "--gpus", "64", "--duration-s", "900", "--out", str(trace)])
        out_prefix = tmp_path / "diag"
        code = main(["diagnose", "--trace", str(trace),
                     "--workload", "imbalance-1",
                     "--metric", "utilization_pct", "--plot", "hist",
                     "--out", str(out_prefix)])
        assert code == 0
        diag = json.loads((tmp_path / "diag.diagnostics.json").read_text())
        assert diag["cluster_count"] == 2
        masters = {g["cluster_id"] for g in diag["gpus"] if g["gpu_index"] == 0}
        workers = {g["cluster_id"] for g in diag["gpus"] if g["gpu_index"] != 0}
        assert len(masters) == 1 and masters.isdisjoint(workers)
        outl = json.loads((tmp_path / "diag.outliers.json").read_text())
        assert outl["metric_x"] == "utilization_pct"
        assert outl["points"]

    def test_unknown_workload_fails_validation(self, tmp_path):
        trace = tmp_path / "t.ndjson"
        main(["simulate", "--scenario", "idle", "--seed", "1", "--gpus", "8",
              "--duration-s", "300", "--out", str(trace)])
        assert main(["diagnose", "--trace", str(trace), "--workload", "ghost",
                     "--out", str(tmp_path / "x")]) == 1


class TestLayoutCommand:
    def test_layout_artifact_round_trips(self, tmp_path):
        trace = tmp_path / "t.ndjson"
        main(["simulate", "--scenario", "imbalance", "--seed", "5",
              "--gpus", "32", "--duration-s", "300", "--out", str(trace)])
        spec = tmp_path / "spec.json"
        spec.write_text(dump_json({
            "viewport": {"width": 1000, "height": 700},
            "layers": [{"group_by": "node", "operator": "Pack",
                        "sizing": "Count"}],
            "unit_operator": {"operator": "Pack", "sizing": "Uniform"},
        }))
        out = tmp_path / "geometry.json"
        assert main(["layout", "--spec", str(spec), "--trace", str(trace),
                     "--out", str(out)]) == 0
        payload = json.loads(out.read_text())
        assert len(payload["unit_rects"]) == 32
        # artifact round-trip: parse + canonical re-serialize is identity
        assert dump_json(payload).encode() == out.read_bytes()


class TestReportAndIngest:
    def test_report_summary(self, tmp_path, capsys):
        trace = tmp_path / "t.ndjson"
        main(["simulate", "--scenario", "stalled", "--seed", "2", "--gpus", "8",
              "--duration-s", "300", "--out", str(trace)])
        assert main(["report", "--trace", str(trace)]) == 0
        payload = json.loads(capsys.readouterr().out)
        assert payload["topology"]["gpus"] == 16
        assert payload["workloads_by_state"]["running"] == 2

    def test_local_ingest_validates(self, tmp_path, capsys):
        trace = tmp_path / "t.ndjson"
        main(["simulate", "--scenario", "idle", "--seed", "1", "--gpus", "8",
              "--duration-s", "300", "--out", str(trace)])
        assert main(["ingest", "--trace", str(trace)]) == 0
        out = json.loads(capsys.readouterr().out)
        assert out["gpus"] == 8 and out["workloads"] == 1


class TestExitCodes:
    def test_unknown_flag_is_usage_error(self, capsys):
        assert main(["simulate", "--bogus"]) == 1
        assert "Usage" in capsys.readouterr().err

    def test_unreadable_file_is_runtime_error(self, tmp_path):
        assert main(["simulate", "--config", str(tmp_path / "missing.json"),
                     "--out", str(tmp_path / "x")]) == 2

    def test_invalid_json_config_is_validation_error(self, tmp_path):
        bad = tmp_path / "bad.json"
        bad.write_text("{nope")
        assert main(["simulate", "--config", str(bad),
                     "--out", str(tmp_path / "x")]) == 1

    def test_help_exits_clean(self, capsys):
        assert main(["--help"]) == 0
        assert "simulate" in capsys.readouterr().out
