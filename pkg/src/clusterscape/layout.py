"""Renderer-agnostic unit-visualization layout.

Units (one per GPU) are grouped into a layer hierarchy and placed with
Pack / FillX / FillY / ListX / ListY operators under Uniform or Count
sizing. Output is plain rectangles: no overlap among siblings, children
contained in their parent minus that depth's padding, and deterministic
byte-for-byte for identical inputs.
"""

from __future__ import annotations

import bisect
import math
from dataclasses import dataclass, field
from typing import Any, Iterable, Optional, Sequence

import numpy as np

from .model import DegenerateLayoutError, LayoutSpecError

OPERATORS = ("Pack", "FillX", "FillY", "ListX", "ListY")
SIZINGS = ("Uniform", "Count")

MIN_UNIT_PX = 1.0

# Aspect-ratio clamp for Pack/Count shelf rows (w/h of each child slot).
PACK_ASPECT_MAX = 2.0
PACK_ASPECT_MIN = 0.5

DEFAULT_PADDING = (12.0, 8.0, 6.0, 4.0)
DEFAULT_MARGIN = (6.0, 4.0, 3.0, 2.0)

DEFAULT_SCHEME = (
    "#440154", "#443983", "#31688e", "#21918c", "#35b779", "#90d743", "#fde725",
)


@dataclass(frozen=True)
class UnitRecord:
    gpu_uid: str
    attributes: dict[str, Any]

    def attr(self, name: str) -> Any:
        if name not in self.attributes:
            raise LayoutSpecError(
                f"unit {self.gpu_uid} has no attribute {name!r}"
            )
        return self.attributes[name]

    def to_json(self) -> dict[str, Any]:
        return {"gpu_uid": self.gpu_uid, "attributes": dict(self.attributes)}


@dataclass(frozen=True)
class LayerSpec:
    group_by: str
    operator: str = "Pack"
    sizing: str = "Uniform"
    sort: Optional[tuple[str, str]] = None  # (attribute, ascending|descending)
    label: bool = True

    def __post_init__(self) -> None:
        if self.operator not in OPERATORS:
            raise LayoutSpecError(f"unknown operator {self.operator!r}")
        if self.sizing not in SIZINGS:
            raise LayoutSpecError(f"unknown sizing {self.sizing!r}")
        if self.sort is not None and self.sort[1] not in ("ascending", "descending"):
            raise LayoutSpecError(f"bad sort direction {self.sort[1]!r}")

    def to_json(self) -> dict[str, Any]:
        return {
            "group_by": self.group_by,
            "operator": self.operator,
            "sizing": self.sizing,
            "sort": None
            if self.sort is None
            else {"attribute": self.sort[0], "direction": self.sort[1]},
            "label": self.label,
        }

    @staticmethod
    def from_json(obj: dict[str, Any]) -> "LayerSpec":
        sort = obj.get("sort")
        return LayerSpec(
            group_by=obj["group_by"],
            operator=obj.get("operator", "Pack"),
            sizing=obj.get("sizing", "Uniform"),
            sort=None if sort is None else (sort["attribute"], sort["direction"]),
            label=bool(obj.get("label", True)),
        )


@dataclass(frozen=True)
class LayoutSpec:
    layers: tuple[LayerSpec, ...]
    unit_operator: str = "Pack"
    unit_sizing: str = "Uniform"
    viewport: tuple[float, float] = (1200.0, 800.0)
    padding: tuple[float, ...] = DEFAULT_PADDING
    margin: tuple[float, ...] = DEFAULT_MARGIN

    def __post_init__(self) -> None:
        if self.unit_operator not in OPERATORS:
            raise LayoutSpecError(f"unknown unit operator {self.unit_operator!r}")
        if self.unit_sizing not in SIZINGS:
            raise LayoutSpecError(f"unknown unit sizing {self.unit_sizing!r}")
        if self.viewport[0] <= 0 or self.viewport[1] <= 0:
            raise LayoutSpecError("viewport must be positive")
        for seq, name in ((self.padding, "padding"), (self.margin, "margin")):
            if not seq:
                raise LayoutSpecError(f"{name} must be non-empty")
            if any(v < 0 for v in seq):
                raise LayoutSpecError(f"{name} must be non-negative")
        # Visibility rule: padding may only shrink or stay equal inward.
        if any(b > a for a, b in zip(self.padding, self.padding[1:])):
            raise LayoutSpecError("padding must be non-increasing by depth")

    def pad(self, depth: int) -> float:
        return self.padding[min(depth, len(self.padding) - 1)]

    def gap(self, depth: int) -> float:
        return self.margin[min(depth, len(self.margin) - 1)]

    def to_json(self) -> dict[str, Any]:
        return {
            "layers": [l.to_json() for l in self.layers],
            "unit_operator": {"operator": self.unit_operator, "sizing": self.unit_sizing},
            "viewport": {"width": self.viewport[0], "height": self.viewport[1]},
            "padding": list(self.padding),
            "margin": list(self.margin),
        }

    @staticmethod
    def from_json(obj: dict[str, Any]) -> "LayoutSpec":
        unit_op = obj.get("unit_operator", {})
        vp = obj.get("viewport", {})
        padding = obj.get("padding", DEFAULT_PADDING)
        margin = obj.get("margin", DEFAULT_MARGIN)
        if isinstance(padding, (int, float)):
            padding = (float(padding),)
        if isinstance(margin, (int, float)):
            margin = (float(margin),)
        return LayoutSpec(
            layers=tuple(LayerSpec.from_json(l) for l in obj.get("layers", [])),
            unit_operator=unit_op.get("operator", "Pack"),
            unit_sizing=unit_op.get("sizing", "Uniform"),
            viewport=(
                float(vp.get("width", 1200.0)),
                float(vp.get("height", 800.0)),
            ),
            padding=tuple(float(p) for p in padding),
            margin=tuple(float(m) for m in margin),
        )


@dataclass(frozen=True)
class Rect:
    x: float
    y: float
    w: float
    h: float

    @property
    def right(self) -> float:
        return self.x + self.w

    @property
    def bottom(self) -> float:
        return self.y + self.h

    def inset(self, amount: float) -> "Rect":
        w = max(0.0, self.w - 2 * amount)
        h = max(0.0, self.h - 2 * amount)
        return Rect(self.x + amount, self.y + amount, w, h)

    def clamp_to(self, outer: "Rect") -> "Rect":
        x = min(max(self.x, outer.x), outer.right)
        y = min(max(self.y, outer.y), outer.bottom)
        r = min(max(self.right, outer.x), outer.right)
        b = min(max(self.bottom, outer.y), outer.bottom)
        return Rect(x, y, max(0.0, r - x), max(0.0, b - y))

    def to_json(self) -> dict[str, float]:
        return {"x": self.x, "y": self.y, "w": self.w, "h": self.h}


@dataclass
class GroupNode:
    key: Optional[str]
    path: str
    depth: int
    children: list["GroupNode"] = field(default_factory=list)
    units: list[UnitRecord] = field(default_factory=list)
    first_seen: int = 0

    @property
    def count(self) -> int:
        if self.units:
            return len(self.units)
        return sum(c.count for c in self.children)


@dataclass
class LayoutGeometry:
    viewport: tuple[float, float]
    unit_rects: dict[str, dict[str, Any]]  # gpu_uid -> {x,y,w,h,path}
    group_rects: list[dict[str, Any]]  # pre-order

    def to_json(self) -> dict[str, Any]:
        return {
            "viewport": {"width": self.viewport[0], "height": self.viewport[1]},
            "unit_rects": self.unit_rects,
            "group_rects": self.group_rects,
        }


def build_hierarchy(units: Sequence[UnitRecord], spec: LayoutSpec) -> GroupNode:
    """Group units into a tree, one level per layer. Sibling order follows
    each layer's sort; the default is group key ascending, ties (and groups
    sorted by a non-key attribute) keep first-seen order."""
    uids = [u.gpu_uid for u in units]
    if len(set(uids)) != len(uids):
        raise LayoutSpecError("duplicate gpu_uid among units")
    root = GroupNode(key=None, path="", depth=0)
    root.units = list(units)
    frontier = [root]
    for layer in spec.layers:
        next_frontier: list[GroupNode] = []
        for node in frontier:
            groups: dict[str, GroupNode] = {}
            order = 0
            for unit in node.units:
                key = str(unit.attr(layer.group_by))
                child = groups.get(key)
                if child is None:
                    path = key if node.path == "" else f"{node.path}/{key}"
                    child = GroupNode(
                        key=key, path=path, depth=node.depth + 1, first_seen=order
                    )
                    groups[key] = child
                    order += 1
                child.units.append(unit)
            node.children = _sorted_groups(list(groups.values()), layer)
            node.units = []
            next_frontier.extend(node.children)
        frontier = next_frontier
    return root


def _sorted_groups(groups: list[GroupNode], layer: LayerSpec) -> list[GroupNode]:
    if layer.sort is None:
        return sorted(groups, key=lambda g: (str(g.key), g.first_seen))
    attr, direction = layer.sort
    reverse = direction == "descending"

    def sort_key(g: GroupNode) -> tuple[int, float, str]:
        if attr == layer.group_by:
            return (1, 0.0, str(g.key))
        if attr == "count":
            return (0, float(g.count), "")
        values = [u.attr(attr) for u in g.units]
        numeric = [v for v in values if isinstance(v, (int, float))
                   and not isinstance(v, bool)]
        if len(numeric) == len(values) and numeric:
            return (0, float(np.mean(numeric)), "")
        return (1, 0.0, str(values[0]) if values else "")

    return sorted(groups, key=sort_key, reverse=reverse)


def compute_layout(tree: GroupNode, spec: LayoutSpec) -> LayoutGeometry:
    w, h = spec.viewport
    root_rect = Rect(0.0, 0.0, float(w), float(h))
    unit_rects: dict[str, dict[str, Any]] = {}
    group_rects: list[dict[str, Any]] = []
    _layout_node(tree, root_rect, spec, unit_rects, group_rects)
    for uid, rect in unit_rects.items():
        if rect["w"] < MIN_UNIT_PX or rect["h"] < MIN_UNIT_PX:
            raise DegenerateLayoutError(
                f"unit {uid} got {rect['w']:.3f}x{rect['h']:.3f} px; "
                f"viewport too small"
            )
    return LayoutGeometry(
        viewport=(float(w), float(h)), unit_rects=unit_rects, group_rects=group_rects
    )


def _layout_node(
    node: GroupNode,
    rect: Rect,
    spec: LayoutSpec,
    unit_rects: dict[str, dict[str, Any]],
    group_rects: list[dict[str, Any]],
) -> None:
    layer = spec.layers[node.depth] if node.depth < len(spec.layers) else None
    label = node.key if (node.depth > 0 and spec.layers[node.depth - 1].label) else None
    group_rects.append(
        {
            "path": node.path,
            "depth": node.depth,
            "key": node.key,
            "label": label,
            "unit_count": node.count,
            "x": rect.x,
            "y": rect.y,
            "w": rect.w,
            "h": rect.h,
            "label_anchor": [rect.x, rect.y],
        }
    )
    content = rect.inset(spec.pad(node.depth))
    gap = spec.gap(node.depth)
    if node.units:
        counts = [1] * len(node.units)
        slots = _place(
            counts, content, spec.unit_operator, spec.unit_sizing, gap
        )
        for unit, slot in zip(node.units, slots):
            side = min(slot.w, slot.h)
            sq = Rect(
                slot.x + (slot.w - side) / 2.0,
                slot.y + (slot.h - side) / 2.0,
                side,
                side,
            ).clamp_to(content)
            unit_rects[unit.gpu_uid] = {
                "x": sq.x, "y": sq.y, "w": sq.w, "h": sq.h, "path": node.path,
            }
        return
    if not node.children:
        return
    assert layer is not None
    counts = [c.count for c in node.children]
    slots = _place(counts, content, layer.operator, layer.sizing, gap)
    for child, slot in zip(node.children, slots):
        _layout_node(child, slot.clamp_to(content), spec, unit_rects, group_rects)


def _place(
    counts: list[int], rect: Rect, operator: str, sizing: str, gap: float
) -> list[Rect]:
    if not counts:
        return []
    if rect.w <= 0 or rect.h <= 0:
        raise DegenerateLayoutError("no room left after padding")
    if operator == "Pack":
        if sizing == "Uniform":
            return _pack_uniform(len(counts), rect, gap)
        return _pack_count(counts, rect, gap)
    if operator in ("FillX", "FillY"):
        return _fill(counts, rect, operator == "FillX", sizing, gap)
    return _list(counts, rect, operator == "ListX", sizing, gap)


def _pack_uniform(n: int, rect: Rect, gap: float) -> list[Rect]:
    cols = math.ceil(math.sqrt(n))
    rows = math.ceil(n / cols)
    cw = (rect.w - (cols - 1) * gap) / cols
    ch = (rect.h - (rows - 1) * gap) / rows
    if cw <= 0 or ch <= 0:
        raise DegenerateLayoutError("pack grid cell collapsed to zero")
    out = []
    for i in range(n):
        col, row = i % cols, i // cols
        out.append(Rect(rect.x + col * (cw + gap), rect.y + row * (ch + gap), cw, ch))
    return out


def _pack_count(counts: list[int], rect: Rect, gap: float) -> list[Rect]:
    """Shelf packing with child areas proportional to unit counts. Children
    are added to a row while it is too wide (w/h > 2) and the addition keeps
    every member at w/h >= 0.5."""
    total = sum(counts)
    if total <= 0:
        return _pack_uniform(len(counts), rect, gap)
    areas = [rect.w * rect.h * c / total for c in counts]
    rows: list[list[int]] = []
    i = 0
    n = len(counts)
    while i < n:
        row = [i]
        i += 1
        while i < n:
            cur_h = sum(areas[j] for j in row) / rect.w
            cur_aspects = [areas[j] / (cur_h * cur_h) for j in row]
            new_h = (sum(areas[j] for j in row) + areas[i]) / rect.w
            new_aspects = [areas[j] / (new_h * new_h) for j in row + [i]]
            if max(cur_aspects) > PACK_ASPECT_MAX and min(new_aspects) >= PACK_ASPECT_MIN:
                row.append(i)
                i += 1
            else:
                break
        rows.append(row)
    out: list[Rect] = []
    y = rect.y
    for r_i, row in enumerate(rows):
        row_area = sum(areas[j] for j in row)
        row_h = rect.bottom - y if r_i == len(rows) - 1 else row_area / rect.w
        row_h = max(row_h, 0.0)
        x = rect.x
        for k, j in enumerate(row):
            w = (rect.right - x) if k == len(row) - 1 else (
                areas[j] / row_h if row_h > 0 else 0.0
            )
            w = max(w, 0.0)
            out.append(Rect(x, y, w, row_h))
            x += w
        y += row_h
    # Inter-child spacing: shrink each tile by half the gap on every side.
    if gap > 0:
        out = [t.inset(gap / 2.0).clamp_to(rect) for t in out]
    return out


def _fill(
    counts: list[int], rect: Rect, along_x: bool, sizing: str, gap: float
) -> list[Rect]:
    n = len(counts)
    main = (rect.w if along_x else rect.h) - (n - 1) * gap
    if main <= 0:
        raise DegenerateLayoutError("fill axis collapsed to zero")
    total = sum(counts)
    if sizing == "Count" and total > 0:
        extents = [main * c / total for c in counts]
    else:
        extents = [main / n] * n
    out = []
    pos = rect.x if along_x else rect.y
    for ext in extents:
        if along_x:
            out.append(Rect(pos, rect.y, ext, rect.h))
        else:
            out.append(Rect(rect.x, pos, rect.w, ext))
        pos += ext + gap
    return out


def _list(
    counts: list[int], rect: Rect, along_x: bool, sizing: str, gap: float
) -> list[Rect]:
    """Children at their natural (square) size in sibling order, wrapping to
    a new row/column on overflow; a shared scale factor is binary-searched so
    the wrapped layout fits the parent."""
    if sizing == "Count":
        sides = [math.sqrt(max(c, 1)) for c in counts]
    else:
        sides = [1.0] * len(counts)
    max_side = max(sides)
    main = rect.w if along_x else rect.h
    cross = rect.h if along_x else rect.w

    def fits(scale: float) -> bool:
        if scale * max_side > main:
            return False
        used = _wrap_extent(sides, scale, main, gap)
        return used <= cross

    lo, hi = 0.0, max(main, cross) / max_side
    for _ in range(60):
        mid = (lo + hi) / 2.0
        if fits(mid):
            lo = mid
        else:
            hi = mid
    scale = lo
    out = []
    pos_main = 0.0
    pos_cross = 0.0
    line_extent = 0.0
    for s in sides:
        ext = scale * s
        if pos_main > 0.0 and pos_main + ext > main + 1e-9:
            pos_cross += line_extent + gap
            pos_main = 0.0
            line_extent = 0.0
        if along_x:
            out.append(Rect(rect.x + pos_main, rect.y + pos_cross, ext, ext))
        else:
            out.append(Rect(rect.x + pos_cross, rect.y + pos_main, ext, ext))
        pos_main += ext + gap
        line_extent = max(line_extent, ext)
    return [t.clamp_to(rect) for t in out]


def _wrap_extent(sides: list[float], scale: float, main: float, gap: float) -> float:
    pos = 0.0
    cross = 0.0
    line = 0.0
    for s in sides:
        ext = scale * s
        if pos > 0.0 and pos + ext > main + 1e-9:
            cross += line + gap
            pos = 0.0
            line = 0.0
        pos += ext + gap
        line = max(line, ext)
    return cross + line


# -- color scales -----------------------------------------------------------


@dataclass(frozen=True)
class ColorScaleSpec:
    attribute: str
    scale: str = "linear"  # linear | log | quantile | quantize
    scheme: tuple[str, ...] = DEFAULT_SCHEME
    domain: Optional[tuple[float, float]] = None  # None: data-driven
    remap_to_filtered: bool = False
    bins: int = 5  # quantize/quantile bin count

    def __post_init__(self) -> None:
        if self.scale not in ("linear", "log", "quantile", "quantize"):
            raise LayoutSpecError(f"unknown color scale {self.scale!r}")
        if not self.scheme:
            raise LayoutSpecError("scheme must be non-empty")
        if self.bins < 1:
            raise LayoutSpecError("bins must be >= 1")

    def to_json(self) -> dict[str, Any]:
        return {
            "attribute": self.attribute,
            "scale": self.scale,
            "scheme": list(self.scheme),
            "domain": None if self.domain is None else list(self.domain),
            "remap_to_filtered": self.remap_to_filtered,
            "bins": self.bins,
        }

    @staticmethod
    def from_json(obj: dict[str, Any]) -> "ColorScaleSpec":
        dom = obj.get("domain")
        return ColorScaleSpec(
            attribute=obj["attribute"],
            scale=obj.get("scale", "linear"),
            scheme=tuple(obj.get("scheme", DEFAULT_SCHEME)),
            domain=None if dom is None else (float(dom[0]), float(dom[1])),
            remap_to_filtered=bool(obj.get("remap_to_filtered", False)),
            bins=int(obj.get("bins", 5)),
        )


@dataclass(frozen=True)
class FilterPredicate:
    attribute: str
    kind: str  # equals_any | range
    values: tuple[str, ...] = ()
    lo: float = 0.0
    hi: float = 0.0

    def __post_init__(self) -> None:
        if self.kind == "equals_any":
            if not self.values:
                raise LayoutSpecError("equals_any needs a non-empty value set")
        elif self.kind == "range":
            if self.lo > self.hi:
                raise LayoutSpecError("range filter needs lo <= hi")
        else:
            raise LayoutSpecError(f"unknown filter kind {self.kind!r}")

    def matches(self, unit: UnitRecord) -> bool:
        v = unit.attr(self.attribute)
        if self.kind == "equals_any":
            return str(v) in self.values
        if not isinstance(v, (int, float)) or isinstance(v, bool):
            raise LayoutSpecError(
                f"range filter on non-numeric attribute {self.attribute!r}"
            )
        return self.lo <= v <= self.hi

    def to_json(self) -> dict[str, Any]:
        out: dict[str, Any] = {"attribute": self.attribute, "kind": self.kind}
        if self.kind == "equals_any":
            out["values"] = sorted(self.values)
        else:
            out["lo"] = self.lo
            out["hi"] = self.hi
        return out

    @staticmethod
    def from_json(obj: dict[str, Any]) -> "FilterPredicate":
        if obj["kind"] == "equals_any":
            return FilterPredicate(
                attribute=obj["attribute"],
                kind="equals_any",
                values=tuple(obj["values"]),
            )
        return FilterPredicate(
            attribute=obj["attribute"],
            kind="range",
            lo=float(obj["lo"]),
            hi=float(obj["hi"]),
        )


def apply_filters(
    units: Sequence[UnitRecord], predicates: Iterable[FilterPredicate]
) -> list[UnitRecord]:
    preds = list(predicates)
    return [u for u in units if all(p.matches(u) for p in preds)]


def resolve_colors(
    units: Sequence[UnitRecord],
    cspec: ColorScaleSpec,
    active_filters: Iterable[FilterPredicate] = (),
) -> dict[str, str]:
    """gpu_uid -> color identifier. Numeric attributes run through the
    configured scale; categorical values map by sorted category order.
    Out-of-domain numeric values clamp to the domain ends."""
    units = list(units)
    if not units:
        return {}
    values = {u.gpu_uid: u.attr(cspec.attribute) for u in units}
    if any(isinstance(v, str) or isinstance(v, bool) for v in values.values()):
        cats = sorted({str(v) for v in values.values()})
        index = {c: i for i, c in enumerate(cats)}
        scheme = cspec.scheme
        return {g: scheme[index[str(v)] % len(scheme)] for g, v in values.items()}
    domain_units = (
        apply_filters(units, active_filters) if cspec.remap_to_filtered else units
    )
    domain_values = [float(u.attr(cspec.attribute)) for u in domain_units]
    if not domain_values:
        domain_values = [float(v) for v in values.values()]
    if cspec.domain is not None:
        lo, hi = cspec.domain
    else:
        lo, hi = min(domain_values), max(domain_values)
    scheme = cspec.scheme
    n_colors = len(scheme)
    if cspec.scale == "quantile":
        edges = _quantile_edges(domain_values, cspec.bins)
        out = {}
        for g, v in values.items():
            b = bisect.bisect_right(edges, float(v))
            out[g] = scheme[_bin_color_index(b, cspec.bins, n_colors)]
        return out
    if cspec.scale == "quantize":
        out = {}
        width = hi - lo
        for g, v in values.items():
            if width <= 0:
                b = 0
            else:
                b = min(cspec.bins - 1, max(0, int((float(v) - lo) / width * cspec.bins)))
            out[g] = scheme[_bin_color_index(b, cspec.bins, n_colors)]
        return out
    if cspec.scale == "log":
        if lo <= 0:
            raise LayoutSpecError("log scale requires a strictly positive domain")
        log_lo, log_hi = math.log(lo), math.log(hi)
        span = log_hi - log_lo
        out = {}
        for g, v in values.items():
            clamped = min(max(float(v), lo), hi)
            pos = 0.0 if span <= 0 else (math.log(clamped) - log_lo) / span
            out[g] = scheme[round(pos * (n_colors - 1))]
        return out
    span = hi - lo
    out = {}
    for g, v in values.items():
        pos = 0.0 if span <= 0 else min(max((float(v) - lo) / span, 0.0), 1.0)
        out[g] = scheme[round(pos * (n_colors - 1))]
    return out


def _quantile_edges(values: list[float], bins: int) -> list[float]:
    """Interior cut points at the b/bins percentiles (linear interpolation)."""
    if bins <= 1:
        return []
    arr = np.sort(np.asarray(values, dtype=float))
    return [
        float(np.percentile(arr, 100.0 * b / bins, method="linear"))
        for b in range(1, bins)
    ]


def _bin_color_index(b: int, bins: int, n_colors: int) -> int:
    b = min(max(b, 0), bins - 1)
    if bins == 1:
        return 0
    return round(b * (n_colors - 1) / (bins - 1))
