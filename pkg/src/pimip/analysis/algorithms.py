"""Classical image-analysis routines over slide pixel data.

Everything here is deterministic and integer-exact where a threshold or
acceptance decision is made: Otsu scores compare via cross-multiplied
integer fractions, region growth tests its running mean without division,
and luminance rounds half up in integer arithmetic. Floating point only
appears in reported centroids.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from ..annotations import LabelMask, mask_from_array
from ..errors import BadParams, SeedOutOfBounds, UnknownClassifier

OPEN_CLOSE_STRUCTURE = np.ones((3, 3), dtype=bool)
EIGHT_CONNECTED = np.ones((3, 3), dtype=np.int32)

DEFAULT_CENTROIDS = ((200, 80, 80), (80, 80, 200))
CLASS_COLOR_CYCLE = (
    "#e6194bff", "#3cb44bff", "#4363d8ff", "#f58231ff",
    "#911eb4ff", "#46f0f0ff", "#f032e6ff", "#bcf60cff",
)


def luminance(image) -> np.ndarray:
    """Rec. 601 luma as uint8, rounded half up in integer arithmetic."""
    a = np.asarray(image)
    if a.ndim == 2:
        return a.astype(np.uint8)
    if a.ndim == 3 and a.shape[2] == 1:
        return a[:, :, 0].astype(np.uint8)
    if a.ndim == 3 and a.shape[2] == 3:
        r = a[:, :, 0].astype(np.int64)
        g = a[:, :, 1].astype(np.int64)
        b = a[:, :, 2].astype(np.int64)
        return ((299 * r + 587 * g + 114 * b + 500) // 1000).astype(np.uint8)
    raise BadParams(f"expected a gray or RGB image, got shape {a.shape}")


def saturation(image) -> np.ndarray:
    """Channel spread max(R,G,B) - min(R,G,B); zero for gray images."""
    a = np.asarray(image)
    if a.ndim == 2 or (a.ndim == 3 and a.shape[2] == 1):
        return np.zeros(a.shape[:2], dtype=np.uint8)
    if a.ndim == 3 and a.shape[2] == 3:
        return (a.max(axis=2).astype(np.int16) - a.min(axis=2)).astype(np.uint8)
    raise BadParams(f"expected a gray or RGB image, got shape {a.shape}")


def histogram256(values) -> list:
    counts = np.bincount(np.asarray(values, dtype=np.uint8).ravel(), minlength=256)
    return [int(c) for c in counts]


def otsu_threshold(hist) -> int:
    """Threshold maximizing between-class variance, smallest t on ties.

    Class 0 holds bins [0, t]; t is a candidate only when class 0 is
    nonempty, and an empty class 1 scores zero. Scores compare exactly:
    (s0*w1 - s1*w0)^2 / (w0*w1) via cross-multiplication, never floats.
    """
    counts = [int(c) for c in hist]
    if not counts or any(c < 0 for c in counts):
        raise BadParams("histogram must be a nonempty list of nonnegative counts")
    total = sum(counts)
    if total == 0:
        raise BadParams("histogram is empty")
    s_all = sum(i * c for i, c in enumerate(counts))
    w0 = 0
    s0 = 0
    best = None  # (num, den, t)
    for t, c in enumerate(counts):
        w0 += c
        s0 += t * c
        if w0 == 0:
            continue
        w1 = total - w0
        if w1 == 0:
            num, den = 0, 1
        else:
            diff = s0 * w1 - (s_all - s0) * w0
            num, den = diff * diff, w0 * w1
        if best is None or num * best[1] > best[0] * den:
            best = (num, den, t)
    return best[2]


def connected_components(mask) -> tuple:
    """8-connected components of a boolean grid.

    Returns (labels, blobs): labels is an int array with dense ids 1..N
    in row-major first-encounter order, blobs a list of dicts with label,
    area, and centroid (x, y) as the plain mean of member coordinates.
    """
    grid = np.asarray(mask, dtype=bool)
    labels, n = ndimage.label(grid, structure=EIGHT_CONNECTED)
    blobs = []
    if n:
        areas = ndimage.sum_labels(grid, labels, index=range(1, n + 1))
        centers = ndimage.center_of_mass(grid, labels, index=range(1, n + 1))
        for k, (area, (cy, cx)) in enumerate(zip(areas, centers), start=1):
            blobs.append(
                {"label": k, "area": int(area), "centroid": (float(cx), float(cy))}
            )
    return labels, blobs


# -------------------------------------------------------------- foreground


def pick_work_level(descriptor, max_dim: int) -> int:
    """Finest stored level whose larger dimension fits max_dim."""
    if max_dim < 1:
        raise BadParams(f"work_level_max_dim {max_dim}")
    for idx, level in enumerate(descriptor.levels):
        if max(level.width, level.height) <= max_dim:
            return idx
    return len(descriptor.levels) - 1


def _threshold_saturation(sat: np.ndarray) -> np.ndarray:
    hist = histogram256(sat)
    t = otsu_threshold(hist)
    fg = sat > t
    # Degenerate histogram: all mass in one bin leaves class 1 empty, so
    # fall back to "any chroma at all counts as tissue".
    if not fg.any():
        fg = sat > 0
    return fg


def _open_close(fg: np.ndarray) -> np.ndarray:
    """3x3 opening then closing, treating off-image as the edge value.

    Edge padding keeps the pair well behaved for regions touching the
    image border (a zero border would carve a ring off a full mask).
    """
    padded = np.pad(fg, 1, mode="edge")
    padded = ndimage.binary_opening(padded, structure=OPEN_CLOSE_STRUCTURE)
    padded = ndimage.binary_closing(padded, structure=OPEN_CLOSE_STRUCTURE)
    return padded[1:-1, 1:-1]


def _upscale_nearest(grid: np.ndarray, width: int, height: int) -> np.ndarray:
    gh, gw = grid.shape
    xs = (np.arange(width, dtype=np.int64) * gw) // width
    ys = (np.arange(height, dtype=np.int64) * gh) // height
    return grid[np.ix_(ys, xs)]


def foreground_mask(reader, work_level_max_dim: int = 2048) -> LabelMask:
    """Tissue-vs-background mask over the whole slide, in base pixels.

    Works at the finest stored level fitting work_level_max_dim: takes
    the saturation channel, splits it with Otsu, then cleans the binary
    image with a 3x3 opening and closing. The work-level mask upscales
    to base dimensions by nearest neighbor.
    """
    desc = reader.descriptor
    idx = pick_work_level(desc, work_level_max_dim)
    lw, lh = desc.level_dims(idx)
    buf = reader.read_region(idx, 0, 0, lw, lh)
    fg = _open_close(_threshold_saturation(saturation(buf.to_array())))
    full = _upscale_nearest(fg, desc.width, desc.height)
    return mask_from_array(0, 0, full)


# ------------------------------------------------------------------ nuclei


def detect_nuclei(region, threshold_mode: str = "otsu", threshold: int = 128,
                  min_area: int = 20, max_area: int = 50000) -> dict:
    """Dark-blob detection in a region image.

    Luminance is inverted so nuclei (dark on a light background) become
    the bright class, thresholded by Otsu or a fixed value, and the
    8-connected components with area in [min_area, max_area] report
    their centroids in region coordinates.
    """
    if threshold_mode not in ("otsu", "fixed"):
        raise BadParams(f"threshold_mode {threshold_mode!r}")
    if min_area > max_area:
        raise BadParams(f"min_area {min_area} > max_area {max_area}")
    if min_area < 1:
        raise BadParams(f"min_area {min_area}")
    inv = 255 - luminance(region)
    if threshold_mode == "otsu":
        t = otsu_threshold(histogram256(inv))
    else:
        t = int(threshold)
        if not 0 <= t <= 255:
            raise BadParams(f"threshold {t}")
    _, blobs = connected_components(inv > t)
    points = [b["centroid"] for b in blobs if min_area <= b["area"] <= max_area]
    return {"points": points, "threshold": t, "candidates": len(blobs)}


# ----------------------------------------------------------- grid classify


@dataclass(frozen=True)
class GridLabels:
    """Class ids over a square grid at one pyramid level."""

    grid_size: int  # level pixels per cell edge
    labels: tuple  # rows of class-id tuples, 0 = background
    palette: dict  # class id -> "#rrggbbaa"
    level_width: int
    level_height: int
    stats: dict = field(default_factory=dict)  # class id -> {cells, area}

    @property
    def rows(self) -> int:
        return len(self.labels)

    @property
    def cols(self) -> int:
        return len(self.labels[0]) if self.labels else 0

    def to_array(self) -> np.ndarray:
        return np.array(self.labels, dtype=np.int32)


def _mean_color_classifier(cell_pixels: np.ndarray, params: dict) -> int:
    """Nearest class centroid by squared RGB distance, ties to smaller id."""
    centroids = params.get("centroids") or DEFAULT_CENTROIDS
    mean = cell_pixels.reshape(-1, cell_pixels.shape[-1]).mean(axis=0)
    best_id, best_d = 0, None
    for k, c in enumerate(centroids, start=1):
        d = sum((float(m) - float(v)) ** 2 for m, v in zip(mean, c))
        if best_d is None or d < best_d:
            best_id, best_d = k, d
    return best_id


CLASSIFIERS = {"mean_color": _mean_color_classifier}


def default_palette(n_classes: int) -> dict:
    palette = {0: "#00000000"}
    for k in range(1, n_classes + 1):
        palette[k] = CLASS_COLOR_CYCLE[(k - 1) % len(CLASS_COLOR_CYCLE)]
    return palette


def classify_regions(reader, grid_size: int, classifier: str = "mean_color",
                     params: dict | None = None,
                     work_level_max_dim: int = 2048) -> GridLabels:
    """Label each grid cell of the work level with a tissue class.

    Cells whose foreground coverage is under half are background (0);
    the rest go through the named per-cell classifier. Grid dims are
    ceil(level dims / grid_size), so a grid_size beyond the level size
    still yields a 1x1 grid.
    """
    if classifier not in CLASSIFIERS:
        raise UnknownClassifier(classifier)
    if grid_size < 1:
        raise BadParams(f"grid_size {grid_size}")
    params = params or {}
    classify = CLASSIFIERS[classifier]
    desc = reader.descriptor
    idx = pick_work_level(desc, work_level_max_dim)
    lw, lh = desc.level_dims(idx)
    rgb = reader.read_region(idx, 0, 0, lw, lh).to_array()
    if rgb.ndim == 2:
        rgb = rgb[:, :, None].repeat(3, axis=2)
    fg = _open_close(_threshold_saturation(saturation(rgb)))
    cols = -(-lw // grid_size)
    rows = -(-lh // grid_size)
    labels = []
    stats = {}
    for gy in range(rows):
        row = []
        for gx in range(cols):
            x0, y0 = gx * grid_size, gy * grid_size
            cell_fg = fg[y0 : y0 + grid_size, x0 : x0 + grid_size]
            covered = int(cell_fg.sum())
            if covered * 2 < cell_fg.size:
                row.append(0)
                continue
            cell = rgb[y0 : y0 + grid_size, x0 : x0 + grid_size]
            k = classify(cell, params)
            row.append(k)
            entry = stats.setdefault(k, {"cells": 0, "area": 0})
            entry["cells"] += 1
            entry["area"] += covered
        labels.append(tuple(row))
    n_classes = len(params.get("centroids") or DEFAULT_CENTROIDS)
    palette = dict(params.get("palette") or default_palette(n_classes))
    return GridLabels(
        grid_size=grid_size,
        labels=tuple(labels),
        palette=palette,
        level_width=lw,
        level_height=lh,
        stats=stats,
    )


# ------------------------------------------------------------ region growth

GROW_OFFSETS = ((-1, -1), (0, -1), (1, -1), (-1, 0), (1, 0), (-1, 1), (0, 1), (1, 1))


def region_grow(region, seed, tolerance: float = 10, max_area: int = 10000) -> LabelMask:
    """Flood from a seed while pixels track the running regional mean.

    Breadth-first over 8-neighbors in row-major push order; a popped
    pixel joins when |lum * count - total| <= tolerance * count, the
    mean taken over pixels accepted so far. Growth stops at max_area.
    The mask comes back in region coordinates, tight around the region.
    """
    lum = luminance(region)
    h, w = lum.shape
    sx, sy = int(seed[0]), int(seed[1])
    if not (0 <= sx < w and 0 <= sy < h):
        raise SeedOutOfBounds(f"seed ({sx},{sy}) outside region {w}x{h}")
    if max_area < 1:
        raise BadParams(f"max_area {max_area}")
    if tolerance < 0:
        raise BadParams(f"tolerance {tolerance}")
    values = lum.astype(np.int64)
    accepted = np.zeros((h, w), dtype=bool)
    accepted[sy, sx] = True
    total = int(values[sy, sx])
    count = 1
    queue = deque()

    def push(x, y):
        for dx, dy in GROW_OFFSETS:
            nx, ny = x + dx, y + dy
            if 0 <= nx < w and 0 <= ny < h:
                queue.append((nx, ny))

    push(sx, sy)
    while queue and count < max_area:
        x, y = queue.popleft()
        if accepted[y, x]:
            continue
        if abs(int(values[y, x]) * count - total) <= tolerance * count:
            accepted[y, x] = True
            total += int(values[y, x])
            count += 1
            push(x, y)
    ys, xs = np.nonzero(accepted)
    x0, x1 = int(xs.min()), int(xs.max())
    y0, y1 = int(ys.min()), int(ys.max())
    return mask_from_array(x0, y0, accepted[y0 : y1 + 1, x0 : x1 + 1])
