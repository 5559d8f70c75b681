"""Analyzer plugin registry.

An analyzer is a named callable over slide pixels with a declared input
kind (whole_slide, region, click), output kind (mask, points,
grid_labels), and a typed parameter schema with defaults. Registration
order is listing order; re-registering a name is an error rather than a
silent replacement.
"""

from __future__ import annotations

from dataclasses import dataclass

from ..annotations import LabelMask
from ..errors import BadParams, DuplicateName, SeedOutOfBounds, UnknownAnalyzer
from . import algorithms

INPUT_KINDS = ("whole_slide", "region", "click")
OUTPUT_KINDS = ("mask", "points", "grid_labels")
PARAM_TYPES = ("int", "float", "str", "json")


@dataclass(frozen=True)
class ParamSpec:
    name: str
    type: str
    default: object

    def __post_init__(self):
        if self.type not in PARAM_TYPES:
            raise BadParams(f"param type {self.type!r}")

    def coerce(self, value):
        try:
            if self.type == "int":
                if isinstance(value, bool):
                    raise ValueError("bool is not an int")
                return int(value)
            if self.type == "float":
                return float(value)
            if self.type == "str":
                return str(value)
            return value  # json: raw list/dict passthrough
        except (TypeError, ValueError) as exc:
            raise BadParams(f"param {self.name}={value!r}: {exc}") from exc


@dataclass(frozen=True)
class AnalyzerDescriptor:
    name: str
    input_kind: str
    output_kind: str
    params_schema: tuple  # of ParamSpec
    fn: object  # fn(reader, params) -> result dict
    single_instance: bool = False  # set when fn is not reentrant

    def __post_init__(self):
        if self.input_kind not in INPUT_KINDS:
            raise BadParams(f"input_kind {self.input_kind!r}")
        if self.output_kind not in OUTPUT_KINDS:
            raise BadParams(f"output_kind {self.output_kind!r}")

    def coerce_params(self, raw: dict | None) -> dict:
        raw = dict(raw or {})
        known = {spec.name for spec in self.params_schema}
        unknown = set(raw) - known
        if unknown:
            raise BadParams(f"unknown params for {self.name}: {sorted(unknown)}")
        return {
            spec.name: spec.coerce(raw.get(spec.name, spec.default))
            for spec in self.params_schema
        }

    def to_doc(self) -> dict:
        return {
            "name": self.name,
            "input_kind": self.input_kind,
            "output_kind": self.output_kind,
            "params": [
                {"name": s.name, "type": s.type, "default": s.default}
                for s in self.params_schema
            ],
        }


class AnalyzerRegistry:
    def __init__(self):
        self._analyzers = {}

    def register(self, descriptor: AnalyzerDescriptor) -> None:
        if descriptor.name in self._analyzers:
            raise DuplicateName(f"analyzer {descriptor.name!r} already registered")
        self._analyzers[descriptor.name] = descriptor

    def get(self, name: str) -> AnalyzerDescriptor:
        try:
            return self._analyzers[name]
        except KeyError:
            raise UnknownAnalyzer(name) from None

    def names(self) -> list:
        return list(self._analyzers)

    def list(self) -> list:
        return list(self._analyzers.values())


# ----------------------------------------------------------- built-in runs


def _run_foreground(reader, params) -> dict:
    mask = algorithms.foreground_mask(reader, params["work_level_max_dim"])
    return {"kind": "mask", "mask": mask, "extras": {"area": mask.area}}


def _region_or_full(reader, params):
    desc = reader.descriptor
    x, y, w, h = params["x"], params["y"], params["w"], params["h"]
    if w <= 0 or h <= 0:
        x, y, w, h = 0, 0, desc.width, desc.height
    return x, y, reader.read_region(0, x, y, w, h)


def _run_nuclei(reader, params) -> dict:
    x0, y0, buf = _region_or_full(reader, params)
    found = algorithms.detect_nuclei(
        buf.to_array(),
        threshold_mode=params["threshold_mode"],
        threshold=params["threshold"],
        min_area=params["min_area"],
        max_area=params["max_area"],
    )
    points = [(x0 + px, y0 + py) for px, py in found["points"]]
    return {
        "kind": "points",
        "points": points,
        "extras": {"threshold": found["threshold"], "count": len(points)},
    }


def _run_grid(reader, params) -> dict:
    grid = algorithms.classify_regions(
        reader,
        grid_size=params["grid_size"],
        classifier=params["classifier"],
        params={"centroids": params["centroids"] or None},
        work_level_max_dim=params["work_level_max_dim"],
    )
    return {"kind": "grid_labels", "grid": grid, "extras": {"stats": grid.stats}}


def _run_region_grow(reader, params) -> dict:
    desc = reader.descriptor
    x, y = params["x"], params["y"]
    if not (0 <= x < desc.width and 0 <= y < desc.height):
        raise SeedOutOfBounds(f"seed ({x},{y}) outside slide {desc.width}x{desc.height}")
    window = params["window"]
    if window < 1:
        raise BadParams(f"window {window}")
    wx = max(0, min(x - window // 2, desc.width - window))
    wy = max(0, min(y - window // 2, desc.height - window))
    wx, wy = max(0, wx), max(0, wy)
    ww = min(window, desc.width - wx)
    wh = min(window, desc.height - wy)
    buf = reader.read_region(0, wx, wy, ww, wh)
    grown = algorithms.region_grow(
        buf.to_array(), (x - wx, y - wy),
        tolerance=params["tolerance"], max_area=params["max_area"],
    )
    bx, by, bw, bh = grown.bounds
    mask = LabelMask(bounds=(bx + wx, by + wy, bw, bh), raster=grown.raster)
    return {"kind": "mask", "mask": mask, "extras": {"area": mask.area}}


def built_in_registry() -> AnalyzerRegistry:
    reg = AnalyzerRegistry()
    reg.register(AnalyzerDescriptor(
        name="foreground_otsu",
        input_kind="whole_slide",
        output_kind="mask",
        params_schema=(ParamSpec("work_level_max_dim", "int", 2048),),
        fn=_run_foreground,
    ))
    reg.register(AnalyzerDescriptor(
        name="nucleus_detect",
        input_kind="region",
        output_kind="points",
        params_schema=(
            ParamSpec("x", "int", 0),
            ParamSpec("y", "int", 0),
            ParamSpec("w", "int", 0),  # 0 means the whole base level
            ParamSpec("h", "int", 0),
            ParamSpec("threshold_mode", "str", "otsu"),
            ParamSpec("threshold", "int", 128),
            ParamSpec("min_area", "int", 20),
            ParamSpec("max_area", "int", 50000),
        ),
        fn=_run_nuclei,
    ))
    reg.register(AnalyzerDescriptor(
        name="grid_classify",
        input_kind="whole_slide",
        output_kind="grid_labels",
        params_schema=(
            ParamSpec("grid_size", "int", 64),
            ParamSpec("classifier", "str", "mean_color"),
            ParamSpec("centroids", "json", list(list(c) for c in
                                                algorithms.DEFAULT_CENTROIDS)),
            ParamSpec("work_level_max_dim", "int", 2048),
        ),
        fn=_run_grid,
    ))
    reg.register(AnalyzerDescriptor(
        name="region_grow",
        input_kind="click",
        output_kind="mask",
        params_schema=(
            ParamSpec("x", "int", 0),
            ParamSpec("y", "int", 0),
            ParamSpec("tolerance", "int", 10),
            ParamSpec("max_area", "int", 10000),
            ParamSpec("window", "int", 512),
        ),
        fn=_run_region_grow,
    ))
    return reg


def run_analyzer(reader, descriptor: AnalyzerDescriptor, params: dict | None) -> dict:
    """Run synchronously with coerced params; returns the result dict."""
    return descriptor.fn(reader, descriptor.coerce_params(params))
