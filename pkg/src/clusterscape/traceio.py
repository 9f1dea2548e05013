"""Reading and writing replayable NDJSON trace files.

A trace interleaves registry event records (objects with an "event" key)
and exporter metric lines (keys exactly ts/gpu/metric/value). Dispatch is
by the "event" key so one stream can feed both the store and the registry.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Any, Iterable, Iterator

from .model import MetricSample, ParseError
from .registry import Registry
from .store import MetricStore


def dispatch_line(
    line: str, store: MetricStore, registry: Registry, offset: int = 0
) -> None:
    if '"event"' in line:
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ParseError(f"invalid JSON: {exc.msg}", offset) from exc
        if isinstance(obj, dict) and "event" in obj:
            registry.apply_event(obj)
            return
    store.ingest_sample(line, offset)


def load_trace_lines(
    lines: Iterable[str], store: MetricStore, registry: Registry
) -> int:
    """Replay lines in order; returns the number of records applied."""
    count = 0
    offset = 0
    for line in lines:
        stripped = line.strip()
        if stripped:
            dispatch_line(stripped, store, registry, offset)
            count += 1
        offset += len(line.encode("utf-8"))
    return count


def load_trace_file(path: Path) -> tuple[MetricStore, Registry]:
    store = MetricStore()
    registry = Registry()
    with path.open("r", encoding="utf-8") as fh:
        load_trace_lines(fh, store, registry)
    return store, registry


def record_to_line(record: Any) -> str:
    if isinstance(record, MetricSample):
        return record.to_line()
    return json.dumps(record, separators=(",", ":"))


def write_trace(records: Iterator[Any], path: Path) -> int:
    count = 0
    with path.open("w", encoding="utf-8", newline="\n") as fh:
        for rec in records:
            fh.write(record_to_line(rec) + "\n")
            count += 1
    return count
