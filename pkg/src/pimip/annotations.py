"""Annotation data model and geometry.

Freehand boundaries arrive as timed stroke segments (one per pen-down /
pen-up pair). Consecutive segments joined into one polyline when both the
pen-down delay and the gap distance stay inside the configured policy, so
a brief pen lift does not split a region. Joining never invents points:
the bridge is the implicit edge between the two existing endpoints.

Masks are boolean rasters over an integer-aligned bounds rect, serialized
as alternating run lengths (zero run first, row-major). Mask edits are
brush sweeps: every lattice point within the brush radius of the brush
polyline is set (fill) or cleared (erase). Fill grows the bounds, erase
never shrinks them.

Every change to an annotation is a row in an append-only edit log; undo
is a log operation (retract the latest surviving row), so replaying a log
deterministically reproduces the stored state.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import (
    BadParams,
    DegeneratePolyline,
    DegenerateRect,
    EmptyInput,
    EmptyIntersection,
    NothingToUndo,
    OutOfBounds,
)

KINDS = ("point", "rectangle", "polygon", "mask")
POINTER_TYPES = ("mouse", "stylus", "touch")
EDIT_OPS = ("create", "update_coords", "mask_fill", "mask_erase", "undo", "clear")

DEFAULT_COLOR = "#ff4040ff"  # RGBA hex


# ------------------------------------------------------------------ strokes


@dataclass(frozen=True)
class StrokePoint:
    x: float
    y: float
    t: float  # milliseconds on the submission's shared stroke clock


@dataclass(frozen=True)
class StrokeSegment:
    """One pen-down..pen-up trace in base-level pixel coordinates."""

    points: tuple
    pointer_type: str = "mouse"
    device_zoom: float = 1.0  # viewer zoom at capture (screen px per slide px)

    def __post_init__(self):
        if not self.points:
            raise EmptyInput("stroke segment has no points")
        if self.pointer_type not in POINTER_TYPES:
            raise BadParams(f"pointer_type {self.pointer_type!r}")
        if self.device_zoom <= 0:
            raise BadParams(f"device_zoom {self.device_zoom}")
        ts = [p.t for p in self.points]
        if any(b < a for a, b in zip(ts, ts[1:])):
            raise BadParams("stroke timestamps must be nondecreasing")

    @property
    def t_down(self) -> float:
        return self.points[0].t

    @property
    def t_up(self) -> float:
        return self.points[-1].t

    @property
    def first(self) -> tuple:
        return (self.points[0].x, self.points[0].y)

    @property
    def last(self) -> tuple:
        return (self.points[-1].x, self.points[-1].y)


def segment_from_raw(
    raw_points: Sequence, pointer_type: str = "mouse", device_zoom: float = 1.0
) -> StrokeSegment:
    """Build a segment from [x, y, t] triples."""
    try:
        pts = tuple(StrokePoint(float(x), float(y), float(t)) for x, y, t in raw_points)
    except (TypeError, ValueError) as exc:
        raise BadParams(f"stroke points must be [x, y, t] triples: {exc}") from exc
    return StrokeSegment(points=pts, pointer_type=pointer_type, device_zoom=float(device_zoom))


@dataclass(frozen=True)
class GapPolicy:
    """Reconnection thresholds for accidental pen lifts.

    delta is a viewport-space distance; it converts to slide space as
    delta / device_zoom of the segment that resumes the stroke.
    """

    tau: float = 500.0  # milliseconds
    delta: float = 40.0  # viewport pixels

    def __post_init__(self):
        if self.tau < 0 or self.delta < 0:
            raise BadParams(f"gap policy tau={self.tau} delta={self.delta}")


def close_gaps(segments: Sequence[StrokeSegment], policy: GapPolicy) -> list:
    """Concatenate consecutive segments whose gap fits the policy.

    Segment k+1 joins the current polyline iff its pen-down comes within
    policy.tau of segment k's pen-up AND the distance from k's last point
    to k+1's first point is within policy.delta / device_zoom. Both checks
    are inclusive. Returns polylines as lists of (x, y); no point is
    dropped or added.
    """
    if not segments:
        raise EmptyInput("no stroke segments")
    polylines = [[(p.x, p.y) for p in segments[0].points]]
    for prev, cur in zip(segments, segments[1:]):
        dt = cur.t_down - prev.t_up
        gap = math.hypot(cur.first[0] - prev.last[0], cur.first[1] - prev.last[1])
        if dt <= policy.tau and gap <= policy.delta / cur.device_zoom:
            polylines[-1].extend((p.x, p.y) for p in cur.points)
        else:
            polylines.append([(p.x, p.y) for p in cur.points])
    return polylines


def close_polygon(polyline: Sequence) -> list:
    """Close a polyline into a ring (first == last). Idempotent."""
    pts = [(float(x), float(y)) for x, y in polyline]
    distinct = []
    for p in pts:
        if not distinct or distinct[-1] != p:
            distinct.append(p)
    if len(distinct) > 1 and distinct[0] == distinct[-1]:
        distinct.pop()
    if len(distinct) < 3:
        raise DegeneratePolyline(
            f"outline needs at least 3 distinct points, got {len(distinct)}"
        )
    return distinct + [distinct[0]]


# -------------------------------------------------------------- coordinates


def flatten_coords(coords: Sequence) -> list:
    """[(x, y), ...] -> [x0, y0, x1, y1, ...] for the wire/report formats."""
    out = []
    for x, y in coords:
        out.extend((float(x), float(y)))
    return out


def unflatten_coords(flat: Sequence) -> list:
    try:
        values = [float(v) for v in flat]
    except (TypeError, ValueError) as exc:
        raise BadParams(f"coordinates must be numbers: {exc}") from exc
    if len(values) % 2:
        raise BadParams(f"flat coordinate array has odd length {len(values)}")
    return [(values[i], values[i + 1]) for i in range(0, len(values), 2)]


def coords_bbox(coords: Sequence) -> tuple:
    xs = [p[0] for p in coords]
    ys = [p[1] for p in coords]
    return (min(xs), min(ys), max(xs), max(ys))


def rect_corners(x0: float, y0: float, x1: float, y1: float) -> list:
    """Four vertices, clockwise from top-left."""
    ax, bx = min(x0, x1), max(x0, x1)
    ay, by = min(y0, y1), max(y0, y1)
    if ax == bx or ay == by:
        raise DegenerateRect(f"rectangle ({x0},{y0})..({x1},{y1}) has no area")
    return [(ax, ay), (bx, ay), (bx, by), (ax, by)]


def validate_coords(kind: str, coords: Sequence) -> list:
    """Check a coordinate point array against its kind's shape rules."""
    if kind not in KINDS:
        raise BadParams(f"unknown annotation kind {kind!r}")
    pts = [(float(x), float(y)) for x, y in coords]
    if kind == "point":
        if len(pts) != 1:
            raise BadParams(f"point annotation needs 1 coordinate, got {len(pts)}")
    elif kind in ("rectangle", "mask"):
        if len(pts) != 4:
            raise BadParams(f"{kind} annotation needs 4 vertices, got {len(pts)}")
        try:
            canonical = rect_corners(pts[0][0], pts[0][1], pts[2][0], pts[2][1])
        except DegenerateRect as exc:
            raise BadParams(f"{kind} vertices are degenerate: {exc}") from exc
        if pts != canonical:
            raise BadParams(f"{kind} vertices must be the canonical clockwise rectangle")
    elif kind == "polygon":
        if len(pts) < 3 or pts[0] != pts[-1]:
            raise BadParams("polygon ring must close on its first point")
        if len(set(pts[:-1])) < 3:
            raise DegeneratePolyline("polygon has fewer than 3 distinct vertices")
    return pts


def check_bounds(coords: Sequence, width: float, height: float) -> None:
    for x, y in coords:
        if not (0 <= x <= width and 0 <= y <= height):
            raise OutOfBounds(f"({x},{y}) outside slide {width}x{height}")


# -------------------------------------------------------------------- masks


@dataclass(frozen=True)
class LabelMask:
    """Boolean raster over an integer bounds rect in base-level pixels."""

    bounds: tuple  # (x, y, w, h)
    raster: bytes  # row-major within bounds, one byte per pixel, 0 or 1

    def __post_init__(self):
        x, y, w, h = self.bounds
        if w < 1 or h < 1:
            raise BadParams(f"mask bounds {self.bounds}")
        if len(self.raster) != w * h:
            raise BadParams(
                f"raster holds {len(self.raster)} pixels, bounds are {w}x{h}"
            )

    def to_array(self) -> np.ndarray:
        a = np.frombuffer(self.raster, dtype=np.uint8)
        return a.reshape(self.bounds[3], self.bounds[2]).astype(bool)

    @property
    def area(self) -> int:
        return int(np.frombuffer(self.raster, dtype=np.uint8).sum())

    def pixels(self) -> set:
        x, y = self.bounds[0], self.bounds[1]
        ys, xs = np.nonzero(self.to_array())
        return {(x + int(px), y + int(py)) for px, py in zip(xs, ys)}

    def to_doc(self) -> dict:
        flat = np.frombuffer(self.raster, dtype=np.uint8)
        changes = np.flatnonzero(flat[1:] != flat[:-1]) + 1
        edges = np.concatenate(([0], changes, [len(flat)]))
        runs = [int(r) for r in np.diff(edges)]
        if flat[0] == 1:
            runs = [0] + runs
        return {"bounds": list(self.bounds), "rle": runs}


def mask_from_array(x: int, y: int, grid) -> LabelMask:
    g = np.asarray(grid).astype(np.uint8)
    return LabelMask(bounds=(int(x), int(y), g.shape[1], g.shape[0]), raster=g.tobytes())


def mask_from_doc(doc: dict) -> LabelMask:
    try:
        x, y, w, h = (int(v) for v in doc["bounds"])
        runs = [int(c) for c in doc["rle"]]
    except (KeyError, TypeError, ValueError) as exc:
        raise BadParams(f"malformed mask document: {exc}") from exc
    if any(c < 0 for c in runs):
        raise BadParams("negative run length")
    if sum(runs) != w * h:
        raise BadParams(f"runs cover {sum(runs)} pixels, bounds are {w}x{h}")
    flat = np.zeros(w * h, dtype=np.uint8)
    at, bit = 0, 0
    for c in runs:
        if bit:
            flat[at : at + c] = 1
        at += c
        bit ^= 1
    return LabelMask(bounds=(x, y, w, h), raster=flat.tobytes())


def empty_mask(x: int, y: int, w: int, h: int) -> LabelMask:
    return LabelMask(bounds=(int(x), int(y), int(w), int(h)), raster=bytes(w * h))


# -------------------------------------------------------------- rasterizing


def rasterize_polygon(ring: Sequence, clip_bounds=None) -> LabelMask:
    """Pixels covered by a closed ring: nonzero winding plus boundary.

    Lattice points exactly on an edge count as covered, so a 10x10
    square outline covers an 11x11 block. clip_bounds is an optional
    (x, y, w, h) rect; the mask bounds are the ring's pixel bounding box
    intersected with it.
    """
    pts = [(float(x), float(y)) for x, y in ring]
    if len(pts) > 1 and pts[0] == pts[-1]:
        pts = pts[:-1]
    if len(set(pts)) < 3:
        raise DegeneratePolyline("outline has fewer than 3 distinct vertices")
    x0 = math.floor(min(p[0] for p in pts))
    x1 = math.floor(max(p[0] for p in pts))
    y0 = math.floor(min(p[1] for p in pts))
    y1 = math.floor(max(p[1] for p in pts))
    if clip_bounds is not None:
        cx, cy, cw, ch = clip_bounds
        x0, x1 = max(x0, math.ceil(cx)), min(x1, math.floor(cx + cw - 1))
        y0, y1 = max(y0, math.ceil(cy)), min(y1, math.floor(cy + ch - 1))
        if x0 > x1 or y0 > y1:
            raise EmptyIntersection("outline lies outside the clip bounds")
    w, h = x1 - x0 + 1, y1 - y0 + 1
    px, py = np.meshgrid(
        np.arange(x0, x1 + 1, dtype=np.float64),
        np.arange(y0, y1 + 1, dtype=np.float64),
    )
    winding = np.zeros((h, w), dtype=np.int32)
    covered = np.zeros((h, w), dtype=bool)
    for i, (ax, ay) in enumerate(pts):
        bx, by = pts[(i + 1) % len(pts)]
        cross = (bx - ax) * (py - ay) - (by - ay) * (px - ax)
        covered |= (
            (cross == 0)
            & (px >= min(ax, bx))
            & (px <= max(ax, bx))
            & (py >= min(ay, by))
            & (py <= max(ay, by))
        )
        if by > ay:
            winding += ((ay <= py) & (py < by) & (cross > 0)).astype(np.int32)
        elif by < ay:
            winding -= ((by <= py) & (py < ay) & (cross < 0)).astype(np.int32)
    return mask_from_array(x0, y0, (winding != 0) | covered)


def _brush_support(brush_pts, radius, x0, y0, w, h) -> np.ndarray:
    """Boolean grid of lattice points within radius of the brush polyline.

    All-integer distance test (no division), so the boundary case
    dist == radius is exact and reproducible by a scalar oracle.
    """
    px, py = np.meshgrid(
        np.arange(x0, x0 + w, dtype=np.int64), np.arange(y0, y0 + h, dtype=np.int64)
    )
    support = np.zeros((h, w), dtype=bool)
    r2 = radius * radius
    pairs = list(zip(brush_pts, brush_pts[1:])) or [(brush_pts[0], brush_pts[0])]
    for (ax, ay), (bx, by) in pairs:
        apx, apy = px - ax, py - ay
        ap2 = apx * apx + apy * apy
        dx, dy = bx - ax, by - ay
        ab2 = dx * dx + dy * dy
        if ab2 == 0:
            support |= ap2 <= r2
            continue
        dot = apx * dx + apy * dy
        bpx, bpy = px - bx, py - by
        bp2 = bpx * bpx + bpy * bpy
        interior = ap2 * ab2 - dot * dot <= r2 * ab2
        support |= np.where(dot <= 0, ap2 <= r2, np.where(dot >= ab2, bp2 <= r2, interior))
    return support


def _int_brush(brush: Sequence) -> list:
    pts = []
    for x, y in brush:
        fx, fy = float(x), float(y)
        if fx != int(fx) or fy != int(fy):
            raise BadParams("brush coordinates must be integers")
        pts.append((int(fx), int(fy)))
    if not pts:
        raise EmptyInput("brush polyline has no points")
    return pts


def mask_edit(mask: LabelMask, brush: Sequence, radius: int, mode: str) -> LabelMask:
    """Sweep a disc of the given radius along the brush polyline.

    fill ORs the swept support into the raster (bounds grow to fit it);
    erase clears the support within the current bounds, which never
    shrink. Both are idempotent.
    """
    if mode not in ("fill", "erase"):
        raise BadParams(f"mask edit mode {mode!r}")
    radius = int(radius)
    if radius < 1:
        raise BadParams(f"brush radius {radius}")
    pts = _int_brush(brush)
    x, y, w, h = mask.bounds
    if mode == "erase":
        support = _brush_support(pts, radius, x, y, w, h)
        grid = mask.to_array() & ~support
        return mask_from_array(x, y, grid)
    bx0 = min(p[0] for p in pts) - radius
    bx1 = max(p[0] for p in pts) + radius
    by0 = min(p[1] for p in pts) - radius
    by1 = max(p[1] for p in pts) + radius
    nx0, ny0 = min(x, bx0), min(y, by0)
    nx1, ny1 = max(x + w, bx1 + 1), max(y + h, by1 + 1)
    nw, nh = nx1 - nx0, ny1 - ny0
    grid = np.zeros((nh, nw), dtype=bool)
    grid[y - ny0 : y - ny0 + h, x - nx0 : x - nx0 + w] = mask.to_array()
    grid |= _brush_support(pts, radius, nx0, ny0, nw, nh)
    return mask_from_array(nx0, ny0, grid)


def clear_mask(mask: LabelMask) -> LabelMask:
    x, y, w, h = mask.bounds
    return empty_mask(x, y, w, h)


# ------------------------------------------------------------------ records


@dataclass
class AnnotationRecord:
    """One stored annotation; persistence and HTTP layers carry it as-is."""

    id: str
    slide_id: str
    user_id: str
    kind: str
    coords: list  # [(x, y), ...] in base-level pixel space
    label: str = ""
    color: str = DEFAULT_COLOR
    version: int = 1
    deleted: bool = False
    created_at: int = 0  # epoch milliseconds
    updated_at: int = 0
    mask: LabelMask | None = None

    def bbox(self) -> tuple:
        return coords_bbox(self.coords)

    def to_doc(self) -> dict:
        return {
            "id": self.id,
            "slide_id": self.slide_id,
            "user_id": self.user_id,
            "kind": self.kind,
            "coords": flatten_coords(self.coords),
            "label": self.label,
            "color": self.color,
            "version": self.version,
            "deleted": self.deleted,
            "created_at": self.created_at,
            "updated_at": self.updated_at,
            "mask": self.mask.to_doc() if self.mask else None,
        }


def record_from_doc(doc: dict) -> AnnotationRecord:
    try:
        kind = doc["kind"]
        coords = validate_coords(kind, unflatten_coords(doc["coords"]))
        mask = mask_from_doc(doc["mask"]) if doc.get("mask") else None
        return AnnotationRecord(
            id=str(doc["id"]),
            slide_id=str(doc["slide_id"]),
            user_id=str(doc.get("user_id", "anonymous")),
            kind=kind,
            coords=coords,
            label=str(doc.get("label", "")),
            color=str(doc.get("color", DEFAULT_COLOR)),
            version=int(doc.get("version", 1)),
            deleted=bool(doc.get("deleted", False)),
            created_at=int(doc.get("created_at", 0)),
            updated_at=int(doc.get("updated_at", 0)),
            mask=mask,
        )
    except KeyError as exc:
        raise BadParams(f"annotation document missing field {exc}") from exc


def mask_coords(mask: LabelMask) -> list:
    """Canonical 4-vertex coords covering the mask bounds."""
    x, y, w, h = mask.bounds
    return rect_corners(x, y, x + w, y + h)


def make_point(slide_id, user_id, x, y, label="", bounds=None, color=DEFAULT_COLOR):
    if bounds is not None:
        check_bounds([(x, y)], bounds[0], bounds[1])
    return AnnotationRecord(
        id="", slide_id=slide_id, user_id=user_id, kind="point",
        coords=[(float(x), float(y))], label=label, color=color,
    )


def make_rectangle(slide_id, user_id, corner_a, corner_b, label="", bounds=None,
                   color=DEFAULT_COLOR):
    ax, ay = float(corner_a[0]), float(corner_a[1])
    bx, by = float(corner_b[0]), float(corner_b[1])
    if bounds is not None:
        w, h = bounds
        ax, ay = min(max(ax, 0.0), float(w)), min(max(ay, 0.0), float(h))
        bx, by = min(max(bx, 0.0), float(w)), min(max(by, 0.0), float(h))
    return AnnotationRecord(
        id="", slide_id=slide_id, user_id=user_id, kind="rectangle",
        coords=rect_corners(ax, ay, bx, by), label=label, color=color,
    )


# ----------------------------------------------------------------- edit log


def surviving_edits(rows: Sequence[dict]) -> list:
    """Fold undo rows away: each retracts the latest surviving edit.

    Raises NothingToUndo when an undo row has nothing left to retract
    (the create itself is undoable; retracting it deletes the record).
    """
    effective = []
    for row in rows:
        if row["op"] == "undo":
            if not effective:
                raise NothingToUndo("no surviving edit to retract")
            effective.pop()
        else:
            if row["op"] not in EDIT_OPS:
                raise BadParams(f"unknown edit op {row['op']!r}")
            effective.append(row)
    return effective


def replay_log(rows: Sequence[dict]) -> AnnotationRecord | None:
    """Materialize an annotation from its edit log.

    Returns None when every edit (including the create) was undone. The
    result's version equals the log length: every appended row is one
    successful versioned write.
    """
    if not rows:
        raise EmptyInput("edit log is empty")
    effective = surviving_edits(rows)
    if not effective:
        return None
    first = effective[0]
    if first["op"] != "create":
        raise BadParams(f"edit log starts with {first['op']!r}, not create")
    record = record_from_doc(first["payload"])
    for row in effective[1:]:
        op, payload = row["op"], row["payload"]
        if op == "update_coords":
            record.coords = validate_coords(
                record.kind, unflatten_coords(payload["coords"])
            )
            if "label" in payload:
                record.label = str(payload["label"])
            if "color" in payload:
                record.color = str(payload["color"])
        elif op in ("mask_fill", "mask_erase"):
            if record.mask is None:
                raise BadParams(f"{op} on an annotation without a mask")
            record.mask = mask_edit(
                record.mask,
                unflatten_coords(payload["brush"]),
                payload["radius"],
                "fill" if op == "mask_fill" else "erase",
            )
            record.coords = mask_coords(record.mask)
        elif op == "clear":
            record.deleted = True
        elif op == "create":
            raise BadParams("duplicate create in edit log")
    record.version = len(rows)
    return record
