"""User-defined violation rules over per-GPU metric statistics.

A rule is a conjunction of (metric, statistic, operator, threshold)
conditions, evaluated over each allocated GPU's history from workload start
to now. GPUs with no data never fire; they are marked not-evaluable instead.
At most five rules may be enabled at once.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Optional

from .model import (
    METRIC_BOUNDS,
    EmptySeriesError,
    StatisticType,
    UnknownMetricError,
    ValidationError,
    Workload,
)
from .store import MetricStore, MetricSeries, compute_statistic

MAX_ENABLED_RULES = 5

OPS = ("<", "<=", ">", ">=")


class RuleLimitError(ValidationError):
    """More enabled rules than the five-slot ceiling allows."""

_OP_FN = {
    "<": lambda v, t: v < t,
    "<=": lambda v, t: v <= t,
    ">": lambda v, t: v > t,
    ">=": lambda v, t: v >= t,
}


@dataclass(frozen=True)
class Condition:
    metric: str
    stat: StatisticType
    op: str
    threshold: float

    def __post_init__(self) -> None:
        if self.metric not in METRIC_BOUNDS:
            raise UnknownMetricError(f"unknown metric {self.metric!r}")
        if self.op not in OPS:
            raise ValidationError(f"operator must be one of {OPS}, got {self.op!r}")
        if not isinstance(self.threshold, (int, float)) or not (
            self.threshold == self.threshold and abs(self.threshold) != float("inf")
        ):
            raise ValidationError("threshold must be finite")

    def to_json(self) -> dict[str, Any]:
        return {
            "metric": self.metric,
            "stat": self.stat.to_json(),
            "op": self.op,
            "threshold": self.threshold,
        }

    @staticmethod
    def from_json(obj: dict[str, Any]) -> "Condition":
        return Condition(
            metric=obj["metric"],
            stat=StatisticType.from_json(obj["stat"]),
            op=obj["op"],
            threshold=float(obj["threshold"]),
        )


@dataclass
class ViolationRule:
    rule_id: str
    display_name: str
    conditions: list[Condition]
    enabled: bool = True
    ordinal: int = 1  # 1..5 position in the global rule list

    def __post_init__(self) -> None:
        if not self.conditions:
            raise ValidationError(f"rule {self.rule_id}: needs >= 1 condition")
        if not 1 <= self.ordinal <= MAX_ENABLED_RULES:
            raise ValidationError(
                f"rule {self.rule_id}: ordinal must be in 1..{MAX_ENABLED_RULES}"
            )

    def to_json(self) -> dict[str, Any]:
        return {
            "rule_id": self.rule_id,
            "display_name": self.display_name,
            "conditions": [c.to_json() for c in self.conditions],
            "enabled": self.enabled,
            "ordinal": self.ordinal,
        }

    @staticmethod
    def from_json(obj: dict[str, Any]) -> "ViolationRule":
        return ViolationRule(
            rule_id=obj["rule_id"],
            display_name=obj.get("display_name", obj["rule_id"]),
            conditions=[Condition.from_json(c) for c in obj["conditions"]],
            enabled=bool(obj.get("enabled", True)),
            ordinal=int(obj.get("ordinal", 1)),
        )


@dataclass
class RuleHit:
    rule_id: str
    gpu_uid: str
    workload_id: str
    window: tuple[int, int]
    condition_values: list[Optional[float]]  # None when not evaluable
    fired: bool
    evaluable: bool

    def to_json(self) -> dict[str, Any]:
        return {
            "rule_id": self.rule_id,
            "gpu_uid": self.gpu_uid,
            "workload_id": self.workload_id,
            "window": list(self.window),
            "condition_values": self.condition_values,
            "fired": self.fired,
            "evaluable": self.evaluable,
        }


@dataclass
class RuleHitMatrix:
    """gpu x rule fired booleans, plus not-evaluable marks."""

    rule_ids: list[str]
    gpu_uids: list[str]
    workload_by_gpu: dict[str, str]
    fired: dict[str, dict[str, bool]]  # gpu -> rule_id -> bool
    evaluable: dict[str, dict[str, bool]]

    def to_json(self) -> dict[str, Any]:
        return {
            "rule_ids": self.rule_ids,
            "gpus": [
                {
                    "gpu_uid": g,
                    "workload_id": self.workload_by_gpu[g],
                    "fired": self.fired[g],
                    "evaluable": self.evaluable[g],
                }
                for g in self.gpu_uids
            ],
        }


@dataclass
class GroupViolationSummary:
    group_id: str
    total_unit_count: int
    per_rule: list[dict[str, Any]]  # {rule_id, matching_unit_count, proportion}
    any_hit: bool

    def to_json(self) -> dict[str, Any]:
        return {
            "group_id": self.group_id,
            "total_unit_count": self.total_unit_count,
            "per_rule": self.per_rule,
            "any_hit": self.any_hit,
        }


def evaluate_condition(
    cond: Condition, series: MetricSeries
) -> tuple[Optional[float], bool]:
    """Returns (statistic value, satisfied); (None, False) when the series
    is empty and the condition is not evaluable."""
    try:
        value = compute_statistic(series, cond.stat)
    except EmptySeriesError:
        return None, False
    return value, _OP_FN[cond.op](value, cond.threshold)


def evaluate_rule(
    rule: ViolationRule,
    workload: Workload,
    store: MetricStore,
    now: int,
) -> list[RuleHit]:
    """One RuleHit per allocated GPU over [start, min(now, end)].

    Disabled rules and workloads that never started yield no hits. A GPU
    with any not-evaluable condition gets fired=False and evaluable=False.
    """
    if not rule.enabled:
        return []
    if workload.state not in ("running", "finished") or workload.start_time is None:
        return []
    w_end = now if workload.end_time is None else min(now, workload.end_time)
    window = (workload.start_time, w_end)
    hits: list[RuleHit] = []
    for gpu_uid in workload.allocated_gpu_uids:
        values: list[Optional[float]] = []
        all_known = True
        all_satisfied = True
        for cond in rule.conditions:
            if store.has_gpu(gpu_uid):
                series = store.query_series(gpu_uid, cond.metric, window[0], window[1])
            else:
                series = MetricSeries(gpu_uid, cond.metric)
            value, ok = evaluate_condition(cond, series)
            values.append(value)
            if value is None:
                all_known = False
            elif not ok:
                all_satisfied = False
        hits.append(
            RuleHit(
                rule_id=rule.rule_id,
                gpu_uid=gpu_uid,
                workload_id=workload.workload_id,
                window=window,
                condition_values=values,
                fired=all_known and all_satisfied,
                evaluable=all_known,
            )
        )
    return hits


def evaluate_ruleset(
    rules: list[ViolationRule],
    workloads: list[Workload],
    store: MetricStore,
    now: int,
) -> RuleHitMatrix:
    """Evaluate every enabled rule independently over every allocated GPU of
    the given (running) workloads."""
    enabled = [r for r in rules if r.enabled]
    if len(enabled) > MAX_ENABLED_RULES:
        raise ValidationError(
            f"at most {MAX_ENABLED_RULES} rules may be enabled, got {len(enabled)}"
        )
    rule_ids = [r.rule_id for r in sorted(enabled, key=lambda r: r.ordinal)]
    gpu_uids: list[str] = []
    workload_by_gpu: dict[str, str] = {}
    for wl in workloads:
        if wl.state != "running":
            continue
        for uid in wl.allocated_gpu_uids:
            gpu_uids.append(uid)
            workload_by_gpu[uid] = wl.workload_id
    fired: dict[str, dict[str, bool]] = {g: {} for g in gpu_uids}
    evaluable: dict[str, dict[str, bool]] = {g: {} for g in gpu_uids}
    for rule in sorted(enabled, key=lambda r: r.ordinal):
        for wl in workloads:
            if wl.state != "running":
                continue
            for hit in evaluate_rule(rule, wl, store, now):
                fired[hit.gpu_uid][rule.rule_id] = hit.fired
                evaluable[hit.gpu_uid][rule.rule_id] = hit.evaluable
    return RuleHitMatrix(
        rule_ids=rule_ids,
        gpu_uids=gpu_uids,
        workload_by_gpu=workload_by_gpu,
        fired=fired,
        evaluable=evaluable,
    )


def summarize_group(
    matrix: RuleHitMatrix, membership: dict[str, list[str]]
) -> list[GroupViolationSummary]:
    """Per-group counts and proportions; membership maps group_id to the
    gpu_uids it owns and must partition the matrix's GPU set."""
    seen: set[str] = set()
    for gpus in membership.values():
        for g in gpus:
            if g in seen:
                raise ValidationError(f"gpu {g} in more than one group")
            seen.add(g)
    missing = set(matrix.gpu_uids) - seen
    if missing:
        raise ValidationError(f"gpus not covered by any group: {sorted(missing)[:3]}")
    summaries: list[GroupViolationSummary] = []
    for group_id in sorted(membership):
        gpus = [g for g in membership[group_id] if g in matrix.fired]
        total = len(gpus)
        per_rule = []
        any_hit = False
        for rid in matrix.rule_ids:
            matching = sum(1 for g in gpus if matrix.fired[g].get(rid, False))
            proportion = matching / total if total else 0.0
            if matching:
                any_hit = True
            per_rule.append(
                {
                    "rule_id": rid,
                    "matching_unit_count": matching,
                    "proportion": proportion,
                }
            )
        summaries.append(
            GroupViolationSummary(
                group_id=group_id,
                total_unit_count=total,
                per_rule=per_rule,
                any_hit=any_hit,
            )
        )
    return summaries


@dataclass
class RuleSet:
    """Mutable rule collection with the five-rule ceiling and JSON persistence."""

    rules: list[ViolationRule] = field(default_factory=list)

    def validate(self) -> None:
        ids = [r.rule_id for r in self.rules]
        if len(set(ids)) != len(ids):
            raise ValidationError("duplicate rule_id")
        enabled = [r for r in self.rules if r.enabled]
        if len(enabled) > MAX_ENABLED_RULES:
            raise RuleLimitError(
                f"rule limit: at most {MAX_ENABLED_RULES} rules may be enabled"
            )
        ordinals = [r.ordinal for r in enabled]
        if len(set(ordinals)) != len(ordinals):
            raise ValidationError("enabled rules must have unique ordinals")

    def add(self, rule: ViolationRule) -> None:
        candidate = RuleSet(self.rules + [rule])
        candidate.validate()
        self.rules.append(rule)

    def remove(self, rule_id: str) -> ViolationRule:
        for i, r in enumerate(self.rules):
            if r.rule_id == rule_id:
                return self.rules.pop(i)
        raise ValidationError(f"unknown rule {rule_id!r}")

    def enabled(self) -> list[ViolationRule]:
        return sorted(
            (r for r in self.rules if r.enabled), key=lambda r: r.ordinal
        )

    def to_json(self) -> list[dict[str, Any]]:
        return [r.to_json() for r in self.rules]

    @staticmethod
    def from_json(objs: list[dict[str, Any]]) -> "RuleSet":
        rs = RuleSet([ViolationRule.from_json(o) for o in objs])
        rs.validate()
        return rs
