"""HTTP facade over slides, tiles, annotations, strokes, tasks, and reports.

The server holds no domain logic of its own: gap closing, rasterization,
versioned writes, and analysis all live in the library modules. Handlers
translate between wire shapes and those APIs, and map structured errors to
status codes with a `{code, message}` body.

Users are identified by the trusted `X-User` header; authentication is left
to deployment middleware. Write endpoints honor an `Idempotency-Key` header:
a replayed key returns the stored response instead of re-executing.
"""

from __future__ import annotations

import re
import secrets
import shutil
import threading

from fastapi import FastAPI, File, Form, Header, Request, Response, UploadFile
from fastapi.exceptions import HTTPException, RequestValidationError
from fastapi.responses import JSONResponse

from . import annotations as ann
from . import slide_io, tiler
from .analysis import TaskRunner, built_in_registry, load_result, run_analyzer
from .analysis.overlay import render_overlay
from .config import PimipConfig
from .errors import (
    BadParams,
    MissingResult,
    PimipError,
    TileOutOfRange,
)
from .pixels import encode_image
from .store import open_store, write_file_atomic

TILE_NAME_RE = re.compile(r"(\d+)_(\d+)\.([A-Za-z0-9]+)")
IMMUTABLE_CACHE = "public, max-age=31536000, immutable"

# container parse failures on upload surface as 415, not 400
UPLOAD_415 = (
    "BadMagic", "UnsupportedVersion", "TruncatedFile", "CyclicChain",
    "UnsupportedTagType", "InvalidDirectory", "UnsupportedCompression",
    "UnsupportedFormat", "UnreadableSource", "MissingManifest",
    "ManifestMismatch",
)

STATUS_BY_CODE = {
    "UnknownSlide": 404,
    "UnknownAnnotation": 404,
    "UnknownTask": 404,
    "UnknownAnalyzer": 404,
    "UnknownClassifier": 404,
    "UnknownStop": 404,
    "TileOutOfRange": 404,
    "LevelOutOfRange": 404,
    "MissingManifest": 404,
    "MissingResult": 404,
    "VersionConflict": 409,
    "DuplicateSlideId": 409,
    "DuplicateName": 409,
    "UnsupportedCompression": 415,
    "UnsupportedFormat": 415,
    "IoFailure": 500,
    "UnreadableSource": 500,
}

MEDIA_TYPES = {"png": "image/png", "jpeg": "image/jpeg", "jpg": "image/jpeg"}


def _error_body(code: str, message: str) -> dict:
    return {"code": code, "message": message}


def _require_version(if_match: str | None) -> int:
    if if_match is None:
        raise BadParams("If-Match header with the expected version is required")
    try:
        return int(if_match.strip().strip('"'))
    except ValueError as exc:
        raise BadParams(f"If-Match must be an integer version: {if_match!r}") from exc


def _parse_bbox(raw: str | None):
    if raw is None or raw == "":
        return None
    parts = raw.split(",")
    if len(parts) != 4:
        raise BadParams(f"bbox must be x,y,w,h: {raw!r}")
    try:
        return tuple(float(p) for p in parts)
    except ValueError as exc:
        raise BadParams(f"bbox must be numeric: {raw!r}") from exc


def _segments_from_docs(raw_segments) -> list:
    segments = []
    for doc in raw_segments:
        if not isinstance(doc, dict) or "points" not in doc:
            raise BadParams("each segment needs a points field")
        segments.append(ann.segment_from_raw(
            doc["points"],
            pointer_type=doc.get("pointer_type", "mouse"),
            device_zoom=doc.get("device_zoom", 1.0),
        ))
    return segments


def _snap_brush(segment: ann.StrokeSegment) -> list:
    return [(round(p.x), round(p.y)) for p in segment.points]


class StrokeBuffer:
    """Unfinished stroke batches, keyed per slide, user, and tool."""

    def __init__(self):
        self._lock = threading.Lock()
        self._pending: dict = {}

    def add(self, key, segments) -> int:
        with self._lock:
            bucket = self._pending.setdefault(key, [])
            bucket.extend(segments)
            return len(bucket)

    def take(self, key) -> list:
        with self._lock:
            return self._pending.pop(key, [])


def create_app(config: PimipConfig | None = None) -> FastAPI:
    config = config or PimipConfig()
    store = open_store(config)
    registry = built_in_registry()
    runner = TaskRunner(store, registry, workers=config.workers)
    layout = tiler.DeepZoomLayout(
        tile_size=config.tile_size, overlap=config.overlap,
        format=config.tile_format,
    )

    def shutdown():
        runner.close()
        store.close()

    app = FastAPI(title="pimip", on_shutdown=[shutdown])
    app.state.config = config
    app.state.store = store
    app.state.registry = registry
    app.state.runner = runner
    strokes = StrokeBuffer()
    idempotency: dict = {}
    idempotency_lock = threading.Lock()
    result_cache: dict = {}

    @app.exception_handler(PimipError)
    def on_domain_error(request: Request, exc: PimipError):
        status = STATUS_BY_CODE.get(exc.code, 400)
        return JSONResponse(_error_body(exc.code, str(exc)), status_code=status)

    @app.exception_handler(HTTPException)
    def on_http_error(request: Request, exc: HTTPException):
        return JSONResponse(
            _error_body("NotFound" if exc.status_code == 404 else "HttpError",
                        str(exc.detail)),
            status_code=exc.status_code,
        )

    @app.exception_handler(RequestValidationError)
    def on_validation_error(request: Request, exc: RequestValidationError):
        return JSONResponse(_error_body("BadParams", str(exc)), status_code=400)

    @app.middleware("http")
    async def idempotent_writes(request: Request, call_next):
        if request.method not in ("POST", "PUT", "DELETE"):
            return await call_next(request)
        key = request.headers.get("Idempotency-Key")
        if not key:
            return await call_next(request)
        with idempotency_lock:
            cached = idempotency.get(key)
        if cached is not None:
            status, body, media = cached
            return Response(content=body, status_code=status, media_type=media)
        response = await call_next(request)
        body = b""
        async for chunk in response.body_iterator:
            body += chunk
        if 200 <= response.status_code < 300:
            with idempotency_lock:
                idempotency[key] = (response.status_code, body, response.media_type)
        return Response(content=body, status_code=response.status_code,
                        media_type=response.media_type,
                        headers=dict(response.headers))

    def open_reader(slide_id: str):
        row = store.get_slide(slide_id)
        return slide_io.open_slide(
            row.source_path, slide_id=slide_id,
            base_magnification=row.base_magnification, mpp=row.mpp,
        )

    def user_of(request: Request) -> str:
        return request.headers.get("X-User", "anonymous")

    def cached_result(task_id: str) -> tuple:
        task = store.get_task(task_id)
        hit = result_cache.get(task_id)
        if hit is None:
            hit = load_result(store, task)
            if len(result_cache) >= 16:
                result_cache.pop(next(iter(result_cache)))
            result_cache[task_id] = hit
        return task, hit

    # ------------------------------------------------------------- slides

    @app.get("/api/slides")
    def list_slides():
        rows = []
        for row in store.list_slides():
            doc = row.to_doc()
            doc["thumbnail_url"] = f"/api/slides/{row.slide_id}/thumbnail"
            doc["dzi_url"] = f"/api/slides/{row.slide_id}.dzi"
            doc["tasks"] = store.task_counts(row.slide_id)
            rows.append(doc)
        return {"slides": rows}

    @app.post("/api/slides", status_code=201)
    def upload_slide(file: UploadFile = File(...), name: str | None = Form(None)):
        uploads = store.data_dir / "uploads"
        uploads.mkdir(parents=True, exist_ok=True)
        suffix = "".join(c for c in (file.filename or "upload.tif") if c.isalnum() or c in "._-")
        tmp = uploads / f"incoming-{secrets.token_hex(6)}-{suffix}"
        try:
            with tmp.open("wb") as sink:
                shutil.copyfileobj(file.file, sink)
            try:
                row = store.register_slide(tmp, name or None, adopt=True)
            except PimipError as exc:
                if exc.code in UPLOAD_415:
                    return JSONResponse(_error_body(exc.code, str(exc)),
                                        status_code=415)
                raise
        finally:
            tmp.unlink(missing_ok=True)
        return row.to_doc()

    @app.get("/api/slides/{slide_id}.dzi")
    def dzi(slide_id: str):
        row = store.get_slide(slide_id)
        return Response(content=tiler.dzi_document(row.width, row.height, layout),
                        media_type="application/xml")

    @app.get("/api/slides/{slide_id}/thumbnail")
    def thumbnail(slide_id: str, max: int = 256):
        if not 1 <= max <= 4096:
            raise BadParams(f"thumbnail max {max} outside 1..4096")
        store.get_slide(slide_id)
        cache_path = store.thumbs_dir(slide_id) / f"thumb-{max}.png"
        if not cache_path.is_file():
            reader = open_reader(slide_id)
            try:
                data = encode_image(tiler.make_thumbnail(reader, max), "png")
            finally:
                reader.close()
            write_file_atomic(cache_path, data)
        return Response(content=cache_path.read_bytes(), media_type="image/png",
                        headers={"Cache-Control": "public, max-age=3600"})

    @app.get("/api/slides/{slide_id}_files/{level}/{name}")
    def tile(slide_id: str, level: int, name: str):
        m = TILE_NAME_RE.fullmatch(name)
        if not m:
            raise TileOutOfRange(f"malformed tile name {name!r}")
        col, row, fmt = int(m.group(1)), int(m.group(2)), m.group(3).lower()
        reader = open_reader(slide_id)
        try:
            data = tiler.render_tile(reader, level, col, row, layout, fmt)
        finally:
            reader.close()
        return Response(content=data, media_type=MEDIA_TYPES.get(fmt, "application/octet-stream"),
                        headers={"Cache-Control": IMMUTABLE_CACHE})

    @app.get("/api/slides/{slide_id}")
    def slide_detail(slide_id: str):
        doc = store.get_slide(slide_id).to_doc()
        doc["thumbnail_url"] = f"/api/slides/{slide_id}/thumbnail"
        doc["dzi_url"] = f"/api/slides/{slide_id}.dzi"
        doc["tasks"] = store.task_counts(slide_id)
        return doc

    # -------------------------------------------------------- annotations

    @app.get("/api/slides/{slide_id}/annotations")
    def list_annotations(slide_id: str, bbox: str | None = None,
                         include_deleted: bool = False):
        store.get_slide(slide_id)
        rows = store.list_annotations(slide_id, bbox=_parse_bbox(bbox),
                                      include_deleted=include_deleted)
        return {"annotations": [r.to_doc() for r in rows]}

    @app.post("/api/slides/{slide_id}/annotations", status_code=201)
    async def create_annotation(slide_id: str, request: Request):
        body = await request.json()
        row = store.get_slide(slide_id)
        kind = body.get("kind")
        if kind not in ("point", "rectangle", "polygon"):
            raise BadParams(f"kind must be point, rectangle, or polygon: {kind!r}")
        coords = ann.validate_coords(kind, ann.unflatten_coords(body.get("coords", [])))
        ann.check_bounds(coords, row.width, row.height)
        record = ann.AnnotationRecord(
            id="", slide_id=slide_id, user_id=user_of(request), kind=kind,
            coords=coords, label=body.get("label", ""),
            color=body.get("color", ann.DEFAULT_COLOR),
        )
        return store.create_annotation(record).to_doc()

    @app.put("/api/slides/{slide_id}/annotations/{annotation_id}")
    async def update_annotation(slide_id: str, annotation_id: str, request: Request,
                                if_match: str | None = Header(None)):
        body = await request.json()
        version = _require_version(if_match)
        payload = {"coords": [float(v) for v in body.get("coords", [])]}
        for key in ("label", "color"):
            if key in body:
                payload[key] = body[key]
        record = store.apply_edit(annotation_id, version, "update_coords",
                                  payload, user_of(request))
        return record.to_doc()

    @app.delete("/api/slides/{slide_id}/annotations/{annotation_id}")
    def delete_annotation(slide_id: str, annotation_id: str, request: Request,
                          if_match: str | None = Header(None)):
        version = _require_version(if_match)
        record = store.delete_annotation(annotation_id, version, user_of(request))
        return record.to_doc()

    @app.post("/api/slides/{slide_id}/annotations/{annotation_id}/undo")
    def undo_annotation(slide_id: str, annotation_id: str, request: Request,
                        if_match: str | None = Header(None)):
        version = _require_version(if_match)
        record = store.apply_edit(annotation_id, version, "undo", {},
                                  user_of(request))
        return {"annotation": record.to_doc() if record else None}

    @app.post("/api/slides/{slide_id}/annotations/{annotation_id}/clear")
    def clear_annotation(slide_id: str, annotation_id: str, request: Request,
                         if_match: str | None = Header(None)):
        version = _require_version(if_match)
        record = store.apply_edit(annotation_id, version, "clear", {},
                                  user_of(request))
        return record.to_doc()

    # ------------------------------------------------------------ strokes

    def finish_boundary(row, submission, segments, user) -> list:
        policy = ann.GapPolicy(
            tau=float(submission.get("tau", config.gap_tau_ms)),
            delta=float(submission.get("delta", config.gap_delta_px)),
        )
        created = []
        for polyline in ann.close_gaps(segments, policy):
            clamped = [(min(max(x, 0.0), float(row.width)),
                        min(max(y, 0.0), float(row.height)))
                       for x, y in polyline]
            ring = ann.close_polygon(clamped)
            record = ann.AnnotationRecord(
                id="", slide_id=row.slide_id, user_id=user, kind="polygon",
                coords=ring, label=submission.get("label", ""),
                color=submission.get("color", ann.DEFAULT_COLOR),
            )
            created.append(store.create_annotation(record).to_doc())
        return created

    def finish_brush(row, submission, segments, user, tool) -> list:
        radius = int(submission.get("radius", 8))
        op = "mask_fill" if tool == "brush_fill" else "mask_erase"
        target = submission.get("annotation_id")
        if target is None:
            if tool == "brush_erase":
                raise BadParams("brush_erase needs an annotation_id to erase from")
            seed_x, seed_y = _snap_brush(segments[0])[0]
            mask = ann.empty_mask(seed_x, seed_y, 1, 1)
            for segment in segments:
                mask = ann.mask_edit(mask, _snap_brush(segment), radius, "fill")
            record = ann.AnnotationRecord(
                id="", slide_id=row.slide_id, user_id=user, kind="mask",
                coords=ann.mask_coords(mask), label=submission.get("label", ""),
                color=submission.get("color", ann.DEFAULT_COLOR), mask=mask,
            )
            return [store.create_annotation(record).to_doc()]
        record = store.get_annotation(target)
        for segment in segments:
            payload = {
                "brush": ann.flatten_coords(_snap_brush(segment)),
                "radius": radius,
            }
            record = store.apply_edit(target, record.version, op, payload, user)
        return [record.to_doc()]

    @app.post("/api/slides/{slide_id}/strokes")
    async def submit_strokes(slide_id: str, request: Request):
        submission = await request.json()
        row = store.get_slide(slide_id)
        user = user_of(request)
        tool = submission.get("tool")
        if tool not in ("boundary", "brush_fill", "brush_erase"):
            raise BadParams(f"tool must be boundary, brush_fill, or brush_erase: {tool!r}")
        segments = _segments_from_docs(submission.get("segments", []))
        key = (slide_id, user, tool)
        if not submission.get("finish", True):
            pending = strokes.add(key, segments)
            return {"buffered": pending, "annotations": []}
        if not segments:
            raise BadParams("finish requires at least one segment")
        segments = strokes.take(key) + segments
        if tool == "boundary":
            created = finish_boundary(row, submission, segments, user)
        else:
            created = finish_brush(row, submission, segments, user, tool)
        return {"buffered": 0, "annotations": created}

    @app.post("/api/slides/{slide_id}/regiongrow", status_code=201)
    async def region_grow(slide_id: str, request: Request):
        body = await request.json()
        row = store.get_slide(slide_id)
        descriptor = registry.get("region_grow")
        params = {k: body[k] for k in ("x", "y", "tolerance", "max_area", "window")
                  if k in body}
        reader = open_reader(slide_id)
        try:
            result = run_analyzer(reader, descriptor, params)
        finally:
            reader.close()
        mask = result["mask"]
        record = ann.AnnotationRecord(
            id="", slide_id=slide_id, user_id=user_of(request), kind="mask",
            coords=ann.mask_coords(mask), label=body.get("label", "region"),
            color=body.get("color", ann.DEFAULT_COLOR), mask=mask,
        )
        return store.create_annotation(record).to_doc()

    # ----------------------------------------------------------- analysis

    @app.get("/api/analyzers")
    def list_analyzers():
        return {"analyzers": [d.to_doc() for d in registry.list()]}

    @app.post("/api/tasks", status_code=201)
    async def create_task(request: Request):
        body = await request.json()
        if "slide_id" not in body or "analyzer" not in body:
            raise BadParams("task needs slide_id and analyzer")
        task = runner.submit(body["slide_id"], body["analyzer"],
                             body.get("params") or {})
        return task.to_doc()

    @app.get("/api/tasks")
    def list_tasks(slide_id: str | None = None):
        return {"tasks": [t.to_doc() for t in store.list_tasks(slide_id)]}

    @app.get("/api/tasks/{task_id}")
    def get_task(task_id: str):
        return store.get_task(task_id).to_doc()

    @app.get("/api/slides/{slide_id}/overlays/{task_id}/{level}/{name}")
    def overlay_tile(slide_id: str, task_id: str, level: int, name: str):
        m = TILE_NAME_RE.fullmatch(name)
        if not m or m.group(3).lower() != "png":
            raise TileOutOfRange(f"malformed overlay tile name {name!r}")
        row = store.get_slide(slide_id)
        task, result = cached_result(task_id)
        if task.slide_id != slide_id:
            raise MissingResult(f"task {task_id} belongs to {task.slide_id}")
        data = render_overlay(result, (row.width, row.height), level,
                              int(m.group(1)), int(m.group(2)), layout)
        return Response(content=data, media_type="image/png",
                        headers={"Cache-Control": IMMUTABLE_CACHE})

    # ------------------------------------------------------------ reports

    @app.get("/api/reports")
    def search_reports(q: str = "", columns: str | None = None,
                       section: str | None = None):
        wanted = None
        if columns:
            wanted = [c for c in columns.split(",") if c]
        rows = store.search_reports(q, columns=wanted, section=section)
        return {"rows": rows}

    @app.post("/api/slides/{slide_id}/report", status_code=201)
    async def put_report(slide_id: str, request: Request):
        body = await request.json()
        if "document" not in body:
            raise BadParams("report body needs a document field")
        report = store.import_report(slide_id, body["document"],
                                     source=body.get("source"))
        return report.to_doc()

    @app.get("/api/slides/{slide_id}/report")
    def get_report(slide_id: str):
        store.get_slide(slide_id)
        report = store.get_report(slide_id)
        return {"report": report.to_doc() if report else None}

    return app


def run_server(config: PimipConfig) -> None:
    """Blocking entry point used by the CLI serve command."""
    import uvicorn

    uvicorn.run(create_app(config), host="0.0.0.0", port=config.port,
                log_level="warning")
