"""Background execution of analysis tasks.

An in-process FIFO queue feeds a small worker pool. Each task moves
pending -> running -> done/failed in the store; a crashing analyzer
marks its task failed and the pool keeps serving. Result payloads land
under <data_dir>/slides/<slide_id>/results/<task_id>/ written to a temp
directory first and renamed into place:

    mask    "x y w h" then the alternating run lengths, zero run first
    points  flat x y pairs on one line
    grid    "grid_size rows cols level_w level_h" then row-major ids
    meta    analyzer, params, timestamps, extras (JSON)

The data files are deterministic for fixed params; timestamps live only
in meta and the task row.
"""

from __future__ import annotations

import json
import queue
import secrets
import shutil
import threading
import time
from pathlib import Path

from .. import slide_io
from ..annotations import LabelMask
from ..errors import MissingResult, PimipError
from ..store import now_ms
from .algorithms import GridLabels
from .registry import AnalyzerRegistry, run_analyzer

TERMINAL = ("done", "failed")


def result_files(result: dict) -> dict:
    """Deterministic artifact payload bytes keyed by file name."""
    kind = result["kind"]
    if kind == "mask":
        mask = result["mask"]
        x, y, w, h = mask.bounds
        runs = mask.to_doc()["rle"]
        body = f"{x} {y} {w} {h}\n" + " ".join(str(r) for r in runs) + "\n"
        return {"mask": body.encode()}
    if kind == "points":
        flat = []
        for px, py in result["points"]:
            flat.extend((repr(float(px)), repr(float(py))))
        return {"points": (" ".join(flat) + "\n").encode()}
    if kind == "grid_labels":
        grid = result["grid"]
        head = (f"{grid.grid_size} {grid.rows} {grid.cols} "
                f"{grid.level_width} {grid.level_height}\n")
        ids = " ".join(str(v) for row in grid.labels for v in row)
        return {"grid": (head + ids + "\n").encode()}
    raise PimipError(f"unwritable result kind {kind!r}")


def write_artifacts(store, task, result: dict, meta_extra: dict) -> str:
    """Write one task's result folder; returns the data-dir-relative ref."""
    final = store.results_dir(task.slide_id) / task.id
    tmp = final.with_name(f".{final.name}.{secrets.token_hex(4)}.tmp")
    tmp.mkdir(parents=True, exist_ok=True)
    try:
        for name, body in result_files(result).items():
            (tmp / name).write_bytes(body)
        meta = {
            "analyzer": task.analyzer_name,
            "params": task.params,
            "output_kind": result["kind"],
            "submitted_at": task.submitted_at,
            "finished_at": now_ms(),
            **meta_extra,
        }
        (tmp / "meta").write_text(json.dumps(meta, indent=2, sort_keys=True))
        if final.exists():
            shutil.rmtree(final)
        tmp.replace(final)
    finally:
        if tmp.exists():
            shutil.rmtree(tmp, ignore_errors=True)
    return f"slides/{task.slide_id}/results/{task.id}"


def load_result(store, task) -> dict:
    """Reload a finished task's artifacts into a result dict."""
    if task.status != "done" or not task.result_ref:
        raise MissingResult(f"task {task.id} is {task.status}")
    root = store.data_dir / task.result_ref
    meta_path = root / "meta"
    if not meta_path.is_file():
        raise MissingResult(f"no artifacts at {task.result_ref}")
    meta = json.loads(meta_path.read_text())
    kind = meta["output_kind"]
    if kind == "mask":
        lines = (root / "mask").read_text().split("\n")
        x, y, w, h = (int(v) for v in lines[0].split())
        runs = [int(v) for v in lines[1].split()]
        from ..annotations import mask_from_doc

        mask = mask_from_doc({"bounds": [x, y, w, h], "rle": runs})
        return {"kind": "mask", "mask": mask, "meta": meta}
    if kind == "points":
        raw = (root / "points").read_text().split()
        points = [(float(raw[i]), float(raw[i + 1])) for i in range(0, len(raw), 2)]
        return {"kind": "points", "points": points, "meta": meta}
    if kind == "grid_labels":
        lines = (root / "grid").read_text().split("\n")
        grid_size, rows, cols, lw, lh = (int(v) for v in lines[0].split())
        flat = [int(v) for v in lines[1].split()]
        labels = tuple(
            tuple(flat[r * cols : (r + 1) * cols]) for r in range(rows)
        )
        palette = {int(k): v for k, v in meta.get("palette", {}).items()}
        grid = GridLabels(
            grid_size=grid_size, labels=labels, palette=palette,
            level_width=lw, level_height=lh, stats=meta.get("stats", {}),
        )
        return {"kind": "grid_labels", "grid": grid, "meta": meta}
    raise MissingResult(f"unreadable result kind {kind!r}")


def _meta_extra(result: dict) -> dict:
    extra = dict(result.get("extras") or {})
    if result["kind"] == "grid_labels":
        grid = result["grid"]
        extra["palette"] = {str(k): v for k, v in grid.palette.items()}
        extra["stats"] = {
            str(k): dict(v) for k, v in grid.stats.items()
        }
    return extra


def execute_task(store, registry: AnalyzerRegistry, task_id: str,
                 reader_factory=None) -> None:
    """Run one pending task to a terminal state; never raises."""
    opener = reader_factory or (lambda slide: slide_io.open_slide(slide.source_path))
    try:
        task = store.update_task(task_id, status="running")
        descriptor = registry.get(task.analyzer_name)
        slide = store.get_slide(task.slide_id)
        with opener(slide) as reader:
            result = run_analyzer(reader, descriptor, task.params)
        ref = write_artifacts(store, task, result, _meta_extra(result))
        store.update_task(task_id, status="done", result_ref=ref,
                          finished_at=now_ms())
    except Exception as exc:  # a broken analyzer must not kill the pool
        message = f"{type(exc).__name__}: {exc}"[:500]
        try:
            store.update_task(task_id, status="failed", error_message=message,
                              finished_at=now_ms())
        except PimipError:
            pass


class TaskRunner:
    """FIFO pool: submit validates synchronously, workers run the rest."""

    def __init__(self, store, registry: AnalyzerRegistry, workers: int = 2,
                 reader_factory=None):
        self.store = store
        self.registry = registry
        self.reader_factory = reader_factory
        self._queue = queue.Queue()
        self._locks = {}  # analyzer name -> lock, for single_instance runs
        self._threads = [
            threading.Thread(target=self._work, name=f"analysis-{k}", daemon=True)
            for k in range(max(1, workers))
        ]
        for t in self._threads:
            t.start()

    def submit(self, slide_id: str, analyzer_name: str, params: dict | None):
        descriptor = self.registry.get(analyzer_name)  # UnknownAnalyzer
        coerced = descriptor.coerce_params(params)  # BadParams
        task = self.store.create_task(slide_id, analyzer_name, coerced)
        self._queue.put(task.id)
        return task

    def _work(self) -> None:
        while True:
            task_id = self._queue.get()
            if task_id is None:
                return
            lock = None
            try:
                task = self.store.get_task(task_id)
                descriptor = self.registry.get(task.analyzer_name)
                if descriptor.single_instance:
                    lock = self._locks.setdefault(descriptor.name, threading.Lock())
            except PimipError:
                lock = None
            if lock:
                with lock:
                    execute_task(self.store, self.registry, task_id,
                                 self.reader_factory)
            else:
                execute_task(self.store, self.registry, task_id,
                             self.reader_factory)
            self._queue.task_done()

    def wait(self, task_id: str, timeout: float = 30.0):
        """Poll until the task is terminal; returns the final row."""
        deadline = time.monotonic() + timeout
        while time.monotonic() < deadline:
            task = self.store.get_task(task_id)
            if task.status in TERMINAL:
                return task
            time.sleep(0.01)
        raise TimeoutError(
            f"{task_id} still {self.store.get_task(task_id).status} after {timeout}s"
        )

    def close(self) -> None:
        for _ in self._threads:
            self._queue.put(None)
        for t in self._threads:
            t.join(timeout=5)
