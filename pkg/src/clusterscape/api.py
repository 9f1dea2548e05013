"""HTTP front door: snapshots, layouts, rules, violations, diagnostics, and
a server-sent event stream of snapshot ticks.

Reads see a consistent snapshot; registry and rule mutations are serialized
and bump the snapshot id. Response bodies use the canonical JSON writer so
they match CLI artifacts byte for byte.
"""

from __future__ import annotations

import asyncio
import json
import threading
from pathlib import Path
from typing import Any, Optional

from fastapi import FastAPI, Query, Request, Response
from fastapi.responses import StreamingResponse

from .model import (
    ClusterscapeError,
    NotFoundError,
    ValidationError,
    dump_json,
)
from .registry import Registry
from .traceio import dispatch_line
from .rules import RuleLimitError, RuleSet, ViolationRule
from .snapshot import (
    build_diagnostics_payload,
    build_layout_payload,
    build_outliers_payload,
    build_snapshot_payload,
    build_timeline_payload,
    build_violations_payload,
)
from .store import MetricStore
from .layout import ColorScaleSpec, FilterPredicate, LayoutSpec

STREAM_POLL_S = 0.2
STREAM_HEARTBEAT_S = 15.0


class ServiceState:
    """Store + registry + rules with a monotone snapshot id."""

    def __init__(self, rules_path: Optional[Path] = None):
        self.store = MetricStore()
        self.registry = Registry()
        self.rules_path = rules_path
        self.ruleset = self._load_rules()
        self.snapshot_id = 0
        self.lock = threading.Lock()

    def _load_rules(self) -> RuleSet:
        if self.rules_path is not None and self.rules_path.exists():
            return RuleSet.from_json(json.loads(self.rules_path.read_text()))
        return RuleSet()

    def _persist_rules(self) -> None:
        if self.rules_path is not None:
            self.rules_path.write_text(dump_json(self.ruleset.to_json()))

    def bump(self) -> int:
        self.snapshot_id += 1
        return self.snapshot_id

    def ingest_body(self, body: bytes) -> dict[str, Any]:
        accepted = 0
        errors: list[dict[str, Any]] = []
        offset = 0
        with self.lock:
            for raw in body.split(b"\n"):
                line_len = len(raw) + 1
                stripped = raw.strip()
                if stripped:
                    try:
                        self._ingest_line(stripped.decode("utf-8"), offset)
                        accepted += 1
                    except ClusterscapeError as exc:
                        errors.append({"offset": offset, "error": str(exc)})
                offset += line_len
            if accepted:
                self.bump()
        return {"accepted": accepted, "errors": errors}

    def _ingest_line(self, line: str, offset: int) -> None:
        dispatch_line(line, self.store, self.registry, offset)


def _json_response(payload: Any, status_code: int = 200) -> Response:
    return Response(
        content=dump_json(payload),
        status_code=status_code,
        media_type="application/json",
    )


async def _read_json(request: Request) -> Any:
    try:
        return await request.json()
    except Exception as exc:
        raise ValidationError(f"request body is not valid JSON: {exc}") from exc


def _parse_body(fn, obj):
    try:
        return fn(obj)
    except ClusterscapeError:
        raise
    except (KeyError, TypeError, ValueError, AttributeError) as exc:
        raise ValidationError(f"malformed request body: {exc!r}") from exc


def _error_response(exc: Exception) -> Response:
    if isinstance(exc, RuleLimitError):
        status = 409
    elif isinstance(exc, NotFoundError):
        status = 404
    else:
        status = 400
    return _json_response({"error": str(exc)}, status_code=status)


def create_app(state: Optional[ServiceState] = None) -> FastAPI:
    app = FastAPI(title="clusterscape", docs_url=None, redoc_url=None)
    st = state if state is not None else ServiceState()
    app.state.service = st

    @app.exception_handler(ClusterscapeError)
    async def _handle_domain_error(_req: Request, exc: ClusterscapeError):
        return _error_response(exc)

    @app.post("/v1/ingest")
    async def ingest(request: Request) -> Response:
        body = await request.body()
        return _json_response(st.ingest_body(body))

    @app.get("/v1/snapshot")
    async def snapshot() -> Response:
        with st.lock:
            payload = build_snapshot_payload(
                st.store, st.registry, st.ruleset, st.snapshot_id
            )
        return _json_response(payload)

    @app.post("/v1/layout")
    async def layout(request: Request) -> Response:
        body = await _read_json(request)
        spec = _parse_body(LayoutSpec.from_json, body)
        color_spec = None
        filters: tuple = ()
        if isinstance(body, dict) and body.get("color") is not None:
            color_spec = _parse_body(ColorScaleSpec.from_json, body["color"])
        if isinstance(body, dict) and body.get("filters"):
            filters = tuple(
                _parse_body(FilterPredicate.from_json, f) for f in body["filters"]
            )
        with st.lock:
            payload = build_layout_payload(
                st.store, st.registry, st.ruleset, spec,
                color_spec=color_spec, filters=filters,
            )
        return _json_response(payload)

    @app.get("/v1/rules")
    async def rules_list() -> Response:
        with st.lock:
            return _json_response(st.ruleset.to_json())

    @app.post("/v1/rules")
    async def rules_add(request: Request) -> Response:
        rule = _parse_body(ViolationRule.from_json, await _read_json(request))
        with st.lock:
            st.ruleset.add(rule)
            st._persist_rules()
            st.bump()
            return _json_response(rule.to_json(), status_code=201)

    @app.delete("/v1/rules/{rule_id}")
    async def rules_delete(rule_id: str) -> Response:
        with st.lock:
            try:
                removed = st.ruleset.remove(rule_id)
            except ValidationError as exc:
                raise NotFoundError(str(exc)) from exc
            st._persist_rules()
            st.bump()
            return _json_response(removed.to_json())

    @app.get("/v1/violations")
    async def violations(
        snapshot: Optional[int] = None, group_by: str = "node"
    ) -> Response:
        with st.lock:
            if snapshot is not None and snapshot != st.snapshot_id:
                raise NotFoundError(
                    f"snapshot {snapshot} is not current ({st.snapshot_id})"
                )
            payload = build_violations_payload(
                st.store, st.registry, st.ruleset, group_by=group_by
            )
        return _json_response(payload)

    @app.get("/v1/workloads/{workload_id}/diagnostics")
    async def diagnostics(
        workload_id: str,
        metric: str = "utilization_pct",
        plot: str = "hist",
        bins: int = 20,
        cut: Optional[float] = None,
        k: Optional[int] = None,
        distance: Optional[str] = None,
        max_points: int = 300,
        verbose: bool = False,
        t_from: Optional[int] = Query(None, alias="from"),
        t_to: Optional[int] = Query(None, alias="to"),
    ) -> Response:
        window = None
        if t_from is not None or t_to is not None:
            window = (t_from if t_from is not None else 0,
                      t_to if t_to is not None else 2**62)
        with st.lock:
            payload = build_diagnostics_payload(
                st.store,
                st.registry,
                st.ruleset,
                workload_id,
                metric=metric,
                plot=plot,
                bins=bins,
                cut_threshold=cut,
                cut_k=k,
                distance=distance,
                max_points=max_points,
                include_matrix=verbose,
                window=window,
            )
        return _json_response(payload)

    @app.get("/v1/workloads/{workload_id}/timeline")
    async def timeline(
        workload_id: str,
        metric: str = "utilization_pct",
        t_from: Optional[int] = Query(None, alias="from"),
        t_to: Optional[int] = Query(None, alias="to"),
        max_points: int = 300,
    ) -> Response:
        with st.lock:
            payload = build_timeline_payload(
                st.store,
                st.registry,
                workload_id,
                metric=metric,
                t_from=t_from,
                t_to=t_to,
                max_points=max_points,
            )
        return _json_response(payload)

    @app.get("/v1/workloads/{workload_id}/outliers")
    async def outliers(
        workload_id: str,
        x: str = "utilization_pct",
        y: str = "power_watts",
        alpha: float = 0.01,
    ) -> Response:
        with st.lock:
            payload = build_outliers_payload(
                st.store, st.registry, workload_id,
                metric_x=x, metric_y=y, alpha=alpha,
            )
        return _json_response(payload)

    @app.get("/v1/stream")
    async def stream(max_events: Optional[int] = None) -> StreamingResponse:
        # max_events closes the stream after that many ticks; lets polling
        # clients (and tests) read without holding the connection forever.
        async def gen():
            last = None
            idle = 0.0
            sent = 0
            while max_events is None or sent < max_events:
                current = st.snapshot_id
                if current != last:
                    last = current
                    idle = 0.0
                    sent += 1
                    yield f"event: snapshot\ndata: {{\"snapshot_id\": {current}}}\n\n"
                else:
                    await asyncio.sleep(STREAM_POLL_S)
                    idle += STREAM_POLL_S
                    if idle >= STREAM_HEARTBEAT_S:
                        idle = 0.0
                        yield ": heartbeat\n\n"

        return StreamingResponse(gen(), media_type="text/event-stream")

    return app


def run_server(host: str, port: int, rules_path: Optional[Path] = None) -> None:
    import uvicorn

    app = create_app(ServiceState(rules_path=rules_path))
    uvicorn.run(app, host=host, port=port, log_level="warning")
