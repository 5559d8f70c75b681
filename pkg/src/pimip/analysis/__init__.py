from .algorithms import (
    GridLabels,
    classify_regions,
    connected_components,
    detect_nuclei,
    foreground_mask,
    histogram256,
    luminance,
    otsu_threshold,
    region_grow,
    saturation,
)
from .overlay import render_overlay
from .runner import TaskRunner, execute_task, load_result, write_artifacts
from .registry import (
    AnalyzerDescriptor,
    AnalyzerRegistry,
    ParamSpec,
    built_in_registry,
    run_analyzer,
)

__all__ = [
    "AnalyzerDescriptor",
    "AnalyzerRegistry",
    "GridLabels",
    "ParamSpec",
    "built_in_registry",
    "classify_regions",
    "connected_components",
    "detect_nuclei",
    "foreground_mask",
    "histogram256",
    "luminance",
    "otsu_threshold",
    "region_grow",
    "render_overlay",
    "run_analyzer",
    "TaskRunner",
    "execute_task",
    "load_result",
    "write_artifacts",
]
