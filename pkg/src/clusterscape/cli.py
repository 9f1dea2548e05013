"""Operator CLI: run simulations, replay traces, serve the API, evaluate
rules, and emit diagnostics and layout artifacts as files.

Exit codes: 0 success, 1 validation/usage error, 2 runtime error (e.g.
unreadable files). JSON artifacts use the canonical writer, so they are
byte-identical to the API responses for the same state.
"""

from __future__ import annotations

import json
import os
import sys
from pathlib import Path
from typing import Any, Optional

import click

from .api import run_server
from .model import ClusterscapeError, ValidationError, dump_json
from .registry import Registry
from .rules import RuleSet, ViolationRule
from .scenarios import SCENARIO_KINDS, ScenarioConfig, scenario_records
from .sim import SimConfig, run_simulation, trace_events
from .snapshot import (
    build_diagnostics_payload,
    build_layout_payload,
    build_outliers_payload,
    build_snapshot_payload,
    build_violations_payload,
)
from .store import MetricStore
from .layout import LayoutSpec
from .traceio import load_trace_file, write_trace

ADDR_ENV = "CLUSTERSCAPE_ADDR"


def _default_addr() -> str:
    return os.environ.get(ADDR_ENV, "http://127.0.0.1:8787")


def _write_artifact(path: Optional[Path], payload: Any) -> None:
    text = dump_json(payload)
    if path is None:
        click.echo(text)
    else:
        path.write_bytes(text.encode("utf-8"))


def _read_json_file(path: Path) -> Any:
    try:
        return json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ValidationError(f"{path}: invalid JSON: {exc.msg}") from exc


def _local_state(
    trace: Path, rules: Optional[Path]
) -> tuple[MetricStore, Registry, RuleSet]:
    store, registry = load_trace_file(trace)
    ruleset = (
        RuleSet.from_json(_read_json_file(rules)) if rules is not None else RuleSet()
    )
    return store, registry, ruleset


@click.group()
def cli() -> None:
    """Shared GPU cluster observability toolkit."""


@cli.command()
@click.option("--config", "config_path", type=click.Path(path_type=Path),
              help="Scheduling simulation config JSON.")
@click.option("--scenario", type=click.Choice(SCENARIO_KINDS),
              help="Generate a canned metric scenario instead.")
@click.option("--seed", type=int, default=None, help="Seed override.")
@click.option("--out", "out_path", type=click.Path(path_type=Path), required=True)
@click.option("--summary", "summary_path", type=click.Path(path_type=Path),
              help="Summary JSON path (default: <out>.summary.json).")
@click.option("--gpus", type=int, default=16, help="Scenario GPU count.")
@click.option("--duration-s", type=int, default=3600, help="Scenario length.")
@click.option("--scrape-interval-s", type=int, default=5)
@click.option("--control/--no-control", default=True,
              help="Add a healthy control workload to stalled scenarios.")
def simulate(
    config_path: Optional[Path],
    scenario: Optional[str],
    seed: Optional[int],
    out_path: Path,
    summary_path: Optional[Path],
    gpus: int,
    duration_s: int,
    scrape_interval_s: int,
    control: bool,
) -> None:
    """Run the cluster simulator and write a replayable NDJSON trace."""
    if (config_path is None) == (scenario is None):
        raise click.UsageError("pass exactly one of --config or --scenario")
    if summary_path is None:
        summary_path = out_path.with_suffix(out_path.suffix + ".summary.json")
    if scenario is not None:
        cfg = ScenarioConfig(
            kind=scenario,
            seed=seed if seed is not None else 0,
            gpus=gpus,
            duration_s=duration_s,
            scrape_interval_s=scrape_interval_s,
            with_healthy_control=control,
        )
        count = write_trace(scenario_records(cfg), out_path)
        summary = {
            "mode": "scenario",
            "kind": scenario,
            "seed": cfg.seed,
            "gpus": gpus,
            "duration_s": duration_s,
            "records": count,
        }
    else:
        sim_cfg = SimConfig.from_json(_read_json_file(config_path))
        if seed is not None:
            sim_cfg.seed = seed
        result = run_simulation(sim_cfg)
        count = write_trace(trace_events(result), out_path)
        summary = {"mode": "schedule", "records": count, **result.summary_json()}
    _write_artifact(summary_path, summary)
    click.echo(f"wrote {count} records to {out_path}", err=True)


@cli.command()
@click.option("--host", default="127.0.0.1")
@click.option("--port", type=int, default=8787)
@click.option("--rules", "rules_path", type=click.Path(path_type=Path),
              help="Rules file persisted across restarts.")
def serve(host: str, port: int, rules_path: Optional[Path]) -> None:
    """Run the HTTP API service."""
    run_server(host, port, rules_path)


@cli.command()
@click.option("--trace", "trace_path", type=click.Path(path_type=Path),
              required=True)
@click.option("--addr", default=None,
              help=f"Server address (default ${ADDR_ENV} or local replay).")
def ingest(trace_path: Path, addr: Optional[str]) -> None:
    """Replay a trace into a server (--addr) or validate it locally."""
    if addr is None and ADDR_ENV in os.environ:
        addr = os.environ[ADDR_ENV]
    if addr is not None:
        import httpx

        body = trace_path.read_bytes()
        resp = httpx.post(f"{addr}/v1/ingest", content=body, timeout=120.0)
        click.echo(resp.text)
        if resp.status_code >= 400:
            raise ClusterscapeError(f"server returned {resp.status_code}")
        return
    store, registry = load_trace_file(trace_path)
    click.echo(
        dump_json(
            {
                "gpus": len(store.gpu_uids()),
                "workloads": len(registry.workloads_in_order()),
            }
        )
    )


@cli.group()
def rules() -> None:
    """Manage and evaluate violation rules."""


@rules.command("add")
@click.argument("rule_file", type=click.Path(path_type=Path))
@click.option("--rules", "rules_path", type=click.Path(path_type=Path),
              required=True, help="Rules collection file to update.")
def rules_add(rule_file: Path, rules_path: Path) -> None:
    """Add one rule (JSON file) to a rules collection."""
    ruleset = (
        RuleSet.from_json(_read_json_file(rules_path))
        if rules_path.exists()
        else RuleSet()
    )
    ruleset.add(ViolationRule.from_json(_read_json_file(rule_file)))
    rules_path.write_bytes(dump_json(ruleset.to_json()).encode("utf-8"))
    click.echo(f"{len(ruleset.rules)} rules in {rules_path}", err=True)


@rules.command("list")
@click.option("--rules", "rules_path", type=click.Path(path_type=Path),
              required=True)
def rules_list(rules_path: Path) -> None:
    """Print the rules collection."""
    click.echo(dump_json(_read_json_file(rules_path)))


@rules.command("eval")
@click.option("--rules", "rules_path", type=click.Path(path_type=Path),
              required=True)
@click.option("--trace", "trace_path", type=click.Path(path_type=Path),
              required=True)
@click.option("--group-by", default="node",
              type=click.Choice(["node", "partition", "machine_type", "workload"]))
@click.option("--format", "fmt", default="json",
              type=click.Choice(["json", "table"]))
@click.option("--out", "out_path", type=click.Path(path_type=Path))
def rules_eval(
    rules_path: Path,
    trace_path: Path,
    group_by: str,
    fmt: str,
    out_path: Optional[Path],
) -> None:
    """Evaluate rules over a trace; print the hit matrix and group summary."""
    store, registry, ruleset = _local_state(trace_path, rules_path)
    payload = build_violations_payload(store, registry, ruleset, group_by=group_by)
    if fmt == "table":
        click.echo(_violations_table(payload))
        return
    _write_artifact(out_path, payload)


def _violations_table(payload: dict[str, Any]) -> str:
    rule_ids = payload["matrix"]["rule_ids"]
    lines = ["gpu_uid          workload        " + "  ".join(rule_ids)]
    for row in payload["matrix"]["gpus"]:
        marks = "  ".join(
            ("FIRE" if row["fired"].get(r) else
             ("n/e " if not row["evaluable"].get(r, True) else "ok  ")).ljust(len(r))
            for r in rule_ids
        )
        lines.append(f"{row['gpu_uid']:<16} {row['workload_id']:<15} {marks}")
    return "\n".join(lines)


@cli.command()
@click.option("--trace", "trace_path", type=click.Path(path_type=Path),
              required=True)
@click.option("--rules", "rules_path", type=click.Path(path_type=Path))
@click.option("--workload", "workload_id", required=True)
@click.option("--metric", default="utilization_pct")
@click.option("--plot", default="hist", type=click.Choice(["hist", "timeline"]))
@click.option("--bins", type=int, default=20)
@click.option("--cut", type=float, default=None, help="Linkage cut threshold.")
@click.option("--k", type=int, default=None, help="Target cluster count.")
@click.option("--distance", default=None,
              type=click.Choice(["euclidean", "correlation"]))
@click.option("--x", "metric_x", default="utilization_pct")
@click.option("--y", "metric_y", default="power_watts")
@click.option("--alpha", type=float, default=0.01)
@click.option("--out", "out_prefix", type=click.Path(path_type=Path),
              required=True, help="Prefix for <prefix>.diagnostics.json etc.")
def diagnose(
    trace_path: Path,
    rules_path: Optional[Path],
    workload_id: str,
    metric: str,
    plot: str,
    bins: int,
    cut: Optional[float],
    k: Optional[int],
    distance: Optional[str],
    metric_x: str,
    metric_y: str,
    alpha: float,
    out_prefix: Path,
) -> None:
    """Write cluster-assignment and outlier-report JSON for one workload."""
    store, registry, ruleset = _local_state(trace_path, rules_path)
    diag = build_diagnostics_payload(
        store, registry, ruleset, workload_id,
        metric=metric, plot=plot, bins=bins,
        cut_threshold=cut, cut_k=k, distance=distance,
    )
    outliers = build_outliers_payload(
        store, registry, workload_id,
        metric_x=metric_x, metric_y=metric_y, alpha=alpha,
    )
    diag_path = out_prefix.with_suffix(out_prefix.suffix + ".diagnostics.json")
    outl_path = out_prefix.with_suffix(out_prefix.suffix + ".outliers.json")
    _write_artifact(diag_path, diag)
    _write_artifact(outl_path, outliers)
    click.echo(f"wrote {diag_path} and {outl_path}", err=True)


@cli.command()
@click.option("--spec", "spec_path", type=click.Path(path_type=Path),
              required=True, help="LayoutSpec JSON file.")
@click.option("--trace", "trace_path", type=click.Path(path_type=Path),
              required=True)
@click.option("--rules", "rules_path", type=click.Path(path_type=Path))
@click.option("--out", "out_path", type=click.Path(path_type=Path))
def layout(
    spec_path: Path,
    trace_path: Path,
    rules_path: Optional[Path],
    out_path: Optional[Path],
) -> None:
    """Compute layout geometry for a trace snapshot."""
    store, registry, ruleset = _local_state(trace_path, rules_path)
    spec = LayoutSpec.from_json(_read_json_file(spec_path))
    _write_artifact(out_path, build_layout_payload(store, registry, ruleset, spec))


@cli.command()
@click.option("--trace", "trace_path", type=click.Path(path_type=Path),
              required=True)
@click.option("--rules", "rules_path", type=click.Path(path_type=Path))
@click.option("--out", "out_path", type=click.Path(path_type=Path))
def report(
    trace_path: Path, rules_path: Optional[Path], out_path: Optional[Path]
) -> None:
    """Snapshot summary: topology digest, workloads, violations overview."""
    store, registry, ruleset = _local_state(trace_path, rules_path)
    snap = build_snapshot_payload(store, registry, ruleset, snapshot_id=0)
    violations = build_violations_payload(store, registry, ruleset)
    fired_units = sum(
        1
        for row in violations["matrix"]["gpus"]
        if any(row["fired"].values())
    )
    by_state: dict[str, int] = {}
    for wl in snap["workloads"]:
        by_state[wl["state"]] = by_state.get(wl["state"], 0) + 1
    payload = {
        "topology": snap["topology"],
        "now": snap["now"],
        "workloads_by_state": dict(sorted(by_state.items())),
        "waiting": len([w for w in snap["workloads"] if w["state"] == "waiting"]),
        "rules_enabled": len(ruleset.enabled()),
        "units_with_any_hit": fired_units,
    }
    _write_artifact(out_path, payload)


def main(argv: Optional[list[str]] = None) -> int:
    """Entry point with the documented exit-code contract."""
    try:
        cli.main(args=argv, standalone_mode=False)
        return 0
    except click.UsageError as exc:
        exc.show(file=sys.stderr)
        return 1
    except click.ClickException as exc:
        exc.show(file=sys.stderr)
        return 1
    except click.exceptions.Abort:
        return 1
    except ClusterscapeError as exc:
        click.echo(f"error: {exc}", err=True)
        return 1
    except OSError as exc:
        click.echo(f"io error: {exc}", err=True)
        return 2
    except Exception as exc:  # pragma: no cover - last resort
        click.echo(f"runtime error: {exc!r}", err=True)
        return 2


if __name__ == "__main__":
    sys.exit(main())
