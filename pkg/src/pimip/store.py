"""Relational persistence for slides, annotations, tasks, and reports.

The repository fronts two interchangeable backends through one schema:
an embedded single-file database (default, zero configuration) and any
external relational server reachable by URL. Annotation writes go
through optimistic versioning: every change appends an edit-log row and
bumps the record version with an UPDATE guarded on the expected version,
so stale writers get VersionConflict instead of silently clobbering.

Each slide owns a folder under <data_dir>/slides/<slide_id>/ with
annotations/, results/, and thumbs/ inside. Files there are written to a
temp name and renamed into place. Mask rasters live in the annotations
folder stamped with their record version; a stale or missing file falls
back to replaying the edit log, which by construction reproduces the
stored state.
"""

from __future__ import annotations

import csv
import io
import json
import os
import re
import secrets
import shutil
import threading
import time
import zipfile
from dataclasses import dataclass
from pathlib import Path

import sqlalchemy as sa

from . import annotations as ann
from .errors import (
    BadParams,
    DuplicateSlideId,
    MalformedDocument,
    NothingToUndo,
    UnknownAnnotation,
    UnknownSlide,
    UnknownTask,
    UnreadableSource,
    VersionConflict,
)

SLIDE_ID_RE = re.compile(r"^[A-Za-z0-9._-]{1,64}$")
REPORT_SOURCES = ("tcga_import", "manual", "hospital_import")
TASK_STATUSES = ("pending", "running", "done", "failed")


def now_ms() -> int:
    return int(time.time() * 1000)


@dataclass(frozen=True)
class SlideRow:
    slide_id: str
    display_name: str
    source_path: str
    width: int
    height: int
    base_magnification: float | None
    mpp: float | None
    created_at: int

    def to_doc(self) -> dict:
        return {
            "slide_id": self.slide_id,
            "display_name": self.display_name,
            "source_path": self.source_path,
            "width": self.width,
            "height": self.height,
            "base_magnification": self.base_magnification,
            "mpp": self.mpp,
            "created_at": self.created_at,
        }


@dataclass(frozen=True)
class StructuredReport:
    slide_id: str
    sections: tuple  # of (section_name, ((field_name, value_string), ...))
    source: str

    def to_doc(self) -> dict:
        return {
            "slide_id": self.slide_id,
            "source": self.source,
            "sections": [
                {"name": name, "fields": [[f, v] for f, v in fields]}
                for name, fields in self.sections
            ],
        }


@dataclass(frozen=True)
class TaskRow:
    id: str
    slide_id: str
    analyzer_name: str
    params: dict
    status: str
    submitted_at: int
    finished_at: int | None
    result_ref: str | None
    error_message: str | None

    def to_doc(self) -> dict:
        return {
            "id": self.id,
            "slide_id": self.slide_id,
            "analyzer_name": self.analyzer_name,
            "params": self.params,
            "status": self.status,
            "submitted_at": self.submitted_at,
            "finished_at": self.finished_at,
            "result_ref": self.result_ref,
            "error_message": self.error_message,
        }


def _schema() -> tuple:
    md = sa.MetaData()
    slides = sa.Table(
        "slides", md,
        sa.Column("slide_id", sa.String(64), primary_key=True),
        sa.Column("display_name", sa.Text, nullable=False),
        sa.Column("source_path", sa.Text, nullable=False),
        sa.Column("width", sa.Integer, nullable=False),
        sa.Column("height", sa.Integer, nullable=False),
        sa.Column("base_magnification", sa.Float),
        sa.Column("mpp", sa.Float),
        sa.Column("created_at", sa.BigInteger, nullable=False),
    )
    annotations = sa.Table(
        "annotations", md,
        sa.Column("id", sa.String(64), primary_key=True),
        sa.Column("slide_id", sa.String(64), sa.ForeignKey("slides.slide_id"),
                  nullable=False, index=True),
        sa.Column("user_id", sa.Text, nullable=False),
        sa.Column("kind", sa.String(16), nullable=False),
        sa.Column("coords", sa.Text, nullable=False),
        sa.Column("label", sa.Text, nullable=False),
        sa.Column("color", sa.String(16), nullable=False),
        sa.Column("version", sa.Integer, nullable=False),
        sa.Column("deleted", sa.Boolean, nullable=False),
        sa.Column("created_at", sa.BigInteger, nullable=False),
        sa.Column("updated_at", sa.BigInteger, nullable=False),
    )
    annotation_edits = sa.Table(
        "annotation_edits", md,
        sa.Column("annotation_id", sa.String(64), primary_key=True),
        sa.Column("seq", sa.Integer, primary_key=True),
        sa.Column("op", sa.String(16), nullable=False),
        sa.Column("payload", sa.Text, nullable=False),
        sa.Column("user_id", sa.Text, nullable=False),
        sa.Column("at", sa.BigInteger, nullable=False),
    )
    tasks = sa.Table(
        "tasks", md,
        sa.Column("id", sa.String(64), primary_key=True),
        sa.Column("slide_id", sa.String(64), nullable=False, index=True),
        sa.Column("analyzer_name", sa.Text, nullable=False),
        sa.Column("params", sa.Text, nullable=False),
        sa.Column("status", sa.String(16), nullable=False),
        sa.Column("submitted_at", sa.BigInteger, nullable=False),
        sa.Column("finished_at", sa.BigInteger),
        sa.Column("result_ref", sa.Text),
        sa.Column("error_message", sa.Text),
    )
    reports = sa.Table(
        "reports", md,
        sa.Column("slide_id", sa.String(64), primary_key=True),
        sa.Column("source", sa.String(32), nullable=False),
    )
    report_fields = sa.Table(
        "report_fields", md,
        sa.Column("slide_id", sa.String(64), primary_key=True),
        sa.Column("section_index", sa.Integer, primary_key=True),
        sa.Column("field_index", sa.Integer, primary_key=True),
        sa.Column("section_name", sa.Text, nullable=False),
        sa.Column("field_name", sa.Text, nullable=False),
        sa.Column("value_string", sa.Text, nullable=False),
    )
    return md, slides, annotations, annotation_edits, tasks, reports, report_fields


def write_file_atomic(path: Path, data: bytes) -> None:
    """Create-then-rename so readers never see a half-written file."""
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(f".{path.name}.{secrets.token_hex(4)}.tmp")
    tmp.write_bytes(data)
    os.replace(tmp, path)


class Store:
    def __init__(self, db_url: str, data_dir):
        self.data_dir = Path(data_dir)
        self.slides_root = self.data_dir / "slides"
        self.slides_root.mkdir(parents=True, exist_ok=True)
        kwargs = {}
        if db_url.startswith("sqlite"):
            kwargs["connect_args"] = {"check_same_thread": False}
            if db_url.endswith(":memory:"):
                kwargs["poolclass"] = sa.pool.StaticPool
        self.engine = sa.create_engine(db_url, **kwargs)
        (self.md, self.slides, self.annotations, self.annotation_edits,
         self.tasks, self.reports, self.report_fields) = _schema()
        self.md.create_all(self.engine)
        # Embedded databases allow one writer at a time; a process-wide
        # lock keeps concurrent API writers from tripping over that.
        self._write_lock = threading.Lock()

    def close(self) -> None:
        self.engine.dispose()

    # ------------------------------------------------------------- folders

    def slide_dir(self, slide_id: str) -> Path:
        return self.slides_root / slide_id

    def annotations_dir(self, slide_id: str) -> Path:
        return self.slide_dir(slide_id) / "annotations"

    def results_dir(self, slide_id: str) -> Path:
        return self.slide_dir(slide_id) / "results"

    def thumbs_dir(self, slide_id: str) -> Path:
        return self.slide_dir(slide_id) / "thumbs"

    def _make_slide_dirs(self, slide_id: str) -> None:
        for d in (self.annotations_dir(slide_id), self.results_dir(slide_id),
                  self.thumbs_dir(slide_id)):
            d.mkdir(parents=True, exist_ok=True)

    # -------------------------------------------------------------- slides

    def generate_slide_id(self) -> str:
        return f"slide-{secrets.token_hex(8)}"

    def register_slide(self, source_path, user_name: str | None = None,
                       adopt: bool = False) -> SlideRow:
        """Insert a slide row and create its folder tree.

        The source is opened to capture dimensions and scanner metadata;
        anything unreadable as a slide is rejected. With adopt=True the
        source file moves into the slide folder (upload flow); otherwise
        its original path is recorded (ingest-in-place flow).
        """
        from . import slide_io

        source = Path(source_path)
        if user_name is not None and not SLIDE_ID_RE.match(user_name):
            raise BadParams(f"slide name {user_name!r} must match [A-Za-z0-9._-]{{1,64}}")
        try:
            with slide_io.open_slide(source) as reader:
                desc = reader.descriptor
        except OSError as exc:
            raise UnreadableSource(f"{source}: {exc}") from exc
        slide_id = user_name or self.generate_slide_id()
        row = SlideRow(
            slide_id=slide_id,
            display_name=user_name or source.stem,
            source_path=str(source),
            width=desc.width,
            height=desc.height,
            base_magnification=desc.base_magnification,
            mpp=desc.mpp,
            created_at=now_ms(),
        )
        with self._write_lock, self.engine.begin() as conn:
            try:
                conn.execute(sa.insert(self.slides).values(**row.to_doc()))
            except sa.exc.IntegrityError as exc:
                raise DuplicateSlideId(slide_id) from exc
        self._make_slide_dirs(slide_id)
        if adopt:
            dest = self.slide_dir(slide_id) / f"source{source.suffix or '.tif'}"
            shutil.move(str(source), dest)
            with self._write_lock, self.engine.begin() as conn:
                conn.execute(
                    sa.update(self.slides)
                    .where(self.slides.c.slide_id == slide_id)
                    .values(source_path=str(dest))
                )
            row = self.get_slide(slide_id)
        return row

    def get_slide(self, slide_id: str) -> SlideRow:
        with self.engine.connect() as conn:
            got = conn.execute(
                sa.select(self.slides).where(self.slides.c.slide_id == slide_id)
            ).mappings().first()
        if got is None:
            raise UnknownSlide(slide_id)
        return SlideRow(**got)

    def list_slides(self) -> list:
        with self.engine.connect() as conn:
            rows = conn.execute(
                sa.select(self.slides).order_by(self.slides.c.created_at,
                                                self.slides.c.slide_id)
            ).mappings().all()
        return [SlideRow(**r) for r in rows]

    # --------------------------------------------------------- annotations

    def _mask_path(self, slide_id: str, annotation_id: str) -> Path:
        return self.annotations_dir(slide_id) / f"{annotation_id}.mask"

    def _write_mask(self, record: ann.AnnotationRecord) -> None:
        doc = {"version": record.version, **record.mask.to_doc()}
        body = json.dumps(doc, separators=(",", ":")).encode()
        write_file_atomic(self._mask_path(record.slide_id, record.id), body)

    def _load_mask(self, slide_id: str, annotation_id: str, version: int):
        path = self._mask_path(slide_id, annotation_id)
        try:
            doc = json.loads(path.read_text())
            if doc.get("version") == version:
                return ann.mask_from_doc(doc)
        except (OSError, ValueError):
            pass
        replayed = self.materialize(annotation_id)
        return replayed.mask if replayed else None

    def _row_to_record(self, row, with_mask: bool = True) -> ann.AnnotationRecord:
        record = ann.AnnotationRecord(
            id=row["id"],
            slide_id=row["slide_id"],
            user_id=row["user_id"],
            kind=row["kind"],
            coords=ann.unflatten_coords(json.loads(row["coords"])),
            label=row["label"],
            color=row["color"],
            version=row["version"],
            deleted=bool(row["deleted"]),
            created_at=row["created_at"],
            updated_at=row["updated_at"],
        )
        if record.kind == "mask" and with_mask:
            record.mask = self._load_mask(record.slide_id, record.id, record.version)
        return record

    def create_annotation(self, record: ann.AnnotationRecord) -> ann.AnnotationRecord:
        """First write: version 1, edit-log seq 1 with the full payload."""
        self.get_slide(record.slide_id)
        ann.validate_coords(record.kind, record.coords)
        if record.kind == "mask" and record.mask is None:
            raise BadParams("mask annotation needs a mask")
        record.id = record.id or f"a-{secrets.token_hex(8)}"
        record.version = 1
        record.created_at = record.updated_at = now_ms()
        payload = record.to_doc()
        del payload["version"], payload["created_at"], payload["updated_at"]
        del payload["deleted"]
        with self._write_lock, self.engine.begin() as conn:
            conn.execute(sa.insert(self.annotations).values(
                id=record.id,
                slide_id=record.slide_id,
                user_id=record.user_id,
                kind=record.kind,
                coords=json.dumps(ann.flatten_coords(record.coords)),
                label=record.label,
                color=record.color,
                version=1,
                deleted=False,
                created_at=record.created_at,
                updated_at=record.updated_at,
            ))
            conn.execute(sa.insert(self.annotation_edits).values(
                annotation_id=record.id, seq=1, op="create",
                payload=json.dumps(payload), user_id=record.user_id, at=record.created_at,
            ))
        if record.mask is not None:
            self._write_mask(record)
        return record

    def get_annotation(self, annotation_id: str) -> ann.AnnotationRecord:
        with self.engine.connect() as conn:
            row = conn.execute(
                sa.select(self.annotations)
                .where(self.annotations.c.id == annotation_id)
            ).mappings().first()
        if row is None:
            raise UnknownAnnotation(annotation_id)
        return self._row_to_record(row)

    def list_annotations(self, slide_id: str, bbox=None,
                         include_deleted: bool = False) -> list:
        """Viewport query: records whose bbox meets the given one."""
        self.get_slide(slide_id)
        with self.engine.connect() as conn:
            rows = conn.execute(
                sa.select(self.annotations)
                .where(self.annotations.c.slide_id == slide_id)
                .order_by(self.annotations.c.created_at, self.annotations.c.id)
            ).mappings().all()
        out = []
        for row in rows:
            if not include_deleted and row["deleted"]:
                continue
            record = self._row_to_record(row)
            if bbox is not None:
                x, y, w, h = bbox
                bx0, by0, bx1, by1 = record.bbox()
                if bx1 < x or bx0 > x + w or by1 < y or by0 > y + h:
                    continue
            out.append(record)
        return out

    def get_edits(self, annotation_id: str) -> list:
        with self.engine.connect() as conn:
            rows = conn.execute(
                sa.select(self.annotation_edits)
                .where(self.annotation_edits.c.annotation_id == annotation_id)
                .order_by(self.annotation_edits.c.seq)
            ).mappings().all()
        return [
            {"annotation_id": r["annotation_id"], "seq": r["seq"], "op": r["op"],
             "payload": json.loads(r["payload"]), "user_id": r["user_id"],
             "at": r["at"]}
            for r in rows
        ]

    def materialize(self, annotation_id: str):
        """Replay the edit log; equals the stored record by construction."""
        rows = self.get_edits(annotation_id)
        if not rows:
            raise UnknownAnnotation(annotation_id)
        record = ann.replay_log(rows)
        if record is not None:
            record.id = annotation_id
        return record

    def apply_edit(self, annotation_id: str, expected_version: int, op: str,
                   payload: dict, user_id: str) -> ann.AnnotationRecord | None:
        """One versioned write: append a log row, bump the record.

        The UPDATE is guarded on expected_version, so of any set of
        concurrent writers holding the same version exactly one wins and
        the rest get VersionConflict. Returns the new record, or None
        when the edit undid the create.
        """
        if op not in ("update_coords", "mask_fill", "mask_erase", "undo", "clear"):
            raise BadParams(f"edit op {op!r}")
        with self._write_lock:
            current = self.get_annotation(annotation_id)
            new_version = expected_version + 1
            log_rows = self.get_edits(annotation_id)
            candidate = log_rows + [{"op": op, "payload": payload}]
            new_state = ann.replay_log(candidate)  # NothingToUndo surfaces here
            if new_state is None:
                values = {"deleted": True, "version": new_version,
                          "updated_at": now_ms()}
            else:
                new_state.id = annotation_id
                values = {
                    "coords": json.dumps(ann.flatten_coords(new_state.coords)),
                    "label": new_state.label,
                    "color": new_state.color,
                    "deleted": new_state.deleted,
                    "version": new_version,
                    "updated_at": now_ms(),
                }
            with self.engine.begin() as conn:
                done = conn.execute(
                    sa.update(self.annotations)
                    .where(self.annotations.c.id == annotation_id)
                    .where(self.annotations.c.version == expected_version)
                    .values(**values)
                )
                if done.rowcount != 1:
                    raise VersionConflict(
                        f"{annotation_id}: expected version {expected_version}, "
                        f"stored is {current.version}"
                    )
                conn.execute(sa.insert(self.annotation_edits).values(
                    annotation_id=annotation_id, seq=new_version, op=op,
                    payload=json.dumps(payload), user_id=user_id, at=now_ms(),
                ))
            if new_state is not None and new_state.mask is not None:
                new_state.version = new_version
                self._write_mask(new_state)
            if new_state is None:
                return None
            return self.get_annotation(annotation_id)

    def put_annotation(self, record: ann.AnnotationRecord,
                       expected_version: int | None = None):
        """Create (expected_version None) or update coords/label/color."""
        if expected_version is None:
            return self.create_annotation(record)
        payload = {
            "coords": ann.flatten_coords(record.coords),
            "label": record.label,
            "color": record.color,
        }
        return self.apply_edit(record.id, expected_version, "update_coords",
                               payload, record.user_id)

    def delete_annotation(self, annotation_id: str, expected_version: int,
                          user_id: str):
        """Soft delete: a clear row; history stays and undo can revive."""
        return self.apply_edit(annotation_id, expected_version, "clear", {}, user_id)

    # ---------------------------------------------------------------- tasks

    def create_task(self, slide_id: str, analyzer_name: str, params: dict) -> TaskRow:
        self.get_slide(slide_id)
        task = TaskRow(
            id=f"t-{secrets.token_hex(8)}",
            slide_id=slide_id,
            analyzer_name=analyzer_name,
            params=dict(params or {}),
            status="pending",
            submitted_at=now_ms(),
            finished_at=None,
            result_ref=None,
            error_message=None,
        )
        doc = task.to_doc()
        doc["params"] = json.dumps(doc["params"])
        with self._write_lock, self.engine.begin() as conn:
            conn.execute(sa.insert(self.tasks).values(**doc))
        return task

    def update_task(self, task_id: str, **fields) -> TaskRow:
        allowed = {"status", "finished_at", "result_ref", "error_message"}
        bad = set(fields) - allowed
        if bad:
            raise BadParams(f"task fields {sorted(bad)}")
        status = fields.get("status")
        if status is not None and status not in TASK_STATUSES:
            raise BadParams(f"task status {status!r}")
        if status == "done" and not fields.get("result_ref"):
            raise BadParams("a done task needs a result_ref")
        legal = {"pending": ("running",), "running": ("done", "failed")}
        with self._write_lock:
            current = self.get_task(task_id)
            if status is not None and status not in legal.get(current.status, ()):
                raise BadParams(
                    f"task {task_id}: no transition {current.status} -> {status}"
                )
            with self.engine.begin() as conn:
                done = conn.execute(
                    sa.update(self.tasks).where(self.tasks.c.id == task_id)
                    .values(**fields)
                )
                if done.rowcount != 1:
                    raise UnknownTask(task_id)
        return self.get_task(task_id)

    def get_task(self, task_id: str) -> TaskRow:
        with self.engine.connect() as conn:
            row = conn.execute(
                sa.select(self.tasks).where(self.tasks.c.id == task_id)
            ).mappings().first()
        if row is None:
            raise UnknownTask(task_id)
        doc = dict(row)
        doc["params"] = json.loads(doc["params"])
        return TaskRow(**doc)

    def list_tasks(self, slide_id: str | None = None) -> list:
        query = sa.select(self.tasks).order_by(self.tasks.c.submitted_at,
                                               self.tasks.c.id)
        if slide_id is not None:
            query = query.where(self.tasks.c.slide_id == slide_id)
        with self.engine.connect() as conn:
            rows = conn.execute(query).mappings().all()
        out = []
        for row in rows:
            doc = dict(row)
            doc["params"] = json.loads(doc["params"])
            out.append(TaskRow(**doc))
        return out

    def task_counts(self, slide_id: str) -> dict:
        counts = dict.fromkeys(TASK_STATUSES, 0)
        for task in self.list_tasks(slide_id):
            counts[task.status] += 1
        return counts

    # -------------------------------------------------------------- reports

    def put_report(self, report: StructuredReport) -> StructuredReport:
        self.get_slide(report.slide_id)
        if report.source not in REPORT_SOURCES:
            raise BadParams(f"report source {report.source!r}")
        for name, fields in report.sections:
            names = [f for f, _ in fields]
            if len(names) != len(set(names)):
                raise MalformedDocument(f"duplicate field in section {name!r}")
        with self._write_lock, self.engine.begin() as conn:
            conn.execute(sa.delete(self.report_fields)
                         .where(self.report_fields.c.slide_id == report.slide_id))
            conn.execute(sa.delete(self.reports)
                         .where(self.reports.c.slide_id == report.slide_id))
            conn.execute(sa.insert(self.reports).values(
                slide_id=report.slide_id, source=report.source))
            for si, (section_name, fields) in enumerate(report.sections):
                for fi, (field_name, value) in enumerate(fields):
                    conn.execute(sa.insert(self.report_fields).values(
                        slide_id=report.slide_id, section_index=si,
                        field_index=fi, section_name=section_name,
                        field_name=field_name, value_string=str(value),
                    ))
        return report

    def import_report(self, slide_id: str, document: str,
                      source: str | None = None) -> StructuredReport:
        sections, detected = parse_report_document(document)
        report = StructuredReport(
            slide_id=slide_id, sections=sections, source=source or detected
        )
        return self.put_report(report)

    def get_report(self, slide_id: str) -> StructuredReport | None:
        self.get_slide(slide_id)
        with self.engine.connect() as conn:
            head = conn.execute(
                sa.select(self.reports).where(self.reports.c.slide_id == slide_id)
            ).mappings().first()
            if head is None:
                return None
            rows = conn.execute(
                sa.select(self.report_fields)
                .where(self.report_fields.c.slide_id == slide_id)
                .order_by(self.report_fields.c.section_index,
                          self.report_fields.c.field_index)
            ).mappings().all()
        sections = []
        last_index = None
        for row in rows:
            if row["section_index"] != last_index:
                sections.append((row["section_name"], []))
                last_index = row["section_index"]
            sections[-1][1].append((row["field_name"], row["value_string"]))
        return StructuredReport(
            slide_id=slide_id,
            sections=tuple((n, tuple(f)) for n, f in sections),
            source=head["source"],
        )

    def search_reports(self, query: str, columns=None, section: str | None = None):
        """Case-insensitive substring over field values and slide ids.

        Returns one row per matching report, slide_id ascending, carrying
        slide_id plus the selected columns (all field names when columns
        is None). A column missing from a report comes back as None.
        """
        q = (query or "").lower()
        with self.engine.connect() as conn:
            rows = conn.execute(
                sa.select(self.report_fields)
                .order_by(self.report_fields.c.slide_id,
                          self.report_fields.c.section_index,
                          self.report_fields.c.field_index)
            ).mappings().all()
        by_slide = {}
        for row in rows:
            by_slide.setdefault(row["slide_id"], []).append(row)
        out = []
        for slide_id in sorted(by_slide):
            fields = by_slide[slide_id]
            scope = [r for r in fields if section is None
                     or r["section_name"] == section]
            hit = (not q) or q in slide_id.lower() or any(
                q in r["value_string"].lower() for r in scope
            )
            if not hit:
                continue
            row_out = {"slide_id": slide_id}
            wanted = columns if columns is not None else [
                r["field_name"] for r in fields
            ]
            for col in wanted:
                value = next(
                    (r["value_string"] for r in fields if r["field_name"] == col),
                    None,
                )
                row_out[col] = value
            out.append(row_out)
        return out

    # -------------------------------------------------------------- bundles

    def export_bundle(self, slide_id: str, out_path) -> Path:
        """Zip a slide's rows, edit logs, report, and result artifacts."""
        slide = self.get_slide(slide_id)
        records = self.list_annotations(slide_id, include_deleted=True)
        tasks = self.list_tasks(slide_id)
        report = self.get_report(slide_id)
        out = Path(out_path)
        out.parent.mkdir(parents=True, exist_ok=True)
        tmp = out.with_name(f".{out.name}.{secrets.token_hex(4)}.tmp")
        with zipfile.ZipFile(tmp, "w", zipfile.ZIP_DEFLATED) as zf:
            manifest = {
                "slide": slide.to_doc(),
                "tasks": [t.to_doc() for t in tasks],
                "exported_at": now_ms(),
                "annotation_count": len(records),
            }
            zf.writestr("manifest", json.dumps(manifest, indent=2))
            lines = []
            for record in records:
                lines.append(json.dumps({
                    "record": record.to_doc(),
                    "edits": self.get_edits(record.id),
                }, separators=(",", ":")))
            zf.writestr("annotations.ndtext", "\n".join(lines) + ("\n" if lines else ""))
            if report is not None:
                zf.writestr("report", json.dumps(report.to_doc(), indent=2))
            results_root = self.results_dir(slide_id)
            for path in sorted(results_root.rglob("*")):
                if path.is_file():
                    zf.write(path, f"results/{path.relative_to(results_root)}")
        os.replace(tmp, out)
        return out

    def import_bundle(self, bundle_path) -> SlideRow:
        """Recreate a slide from an exported archive, rows kept verbatim.

        The slide row, annotation records, edit logs, report, and result
        files restore exactly as exported (ids, versions, timestamps),
        so a round trip reproduces identical query results. The pixel
        source is not in the bundle; its recorded path carries over.
        """
        try:
            zf = zipfile.ZipFile(bundle_path)
        except (OSError, zipfile.BadZipFile) as exc:
            raise MalformedDocument(f"{bundle_path}: {exc}") from exc
        with zf:
            try:
                manifest = json.loads(zf.read("manifest"))
                slide_doc = manifest["slide"]
                slide_id = slide_doc["slide_id"]
                ndtext = zf.read("annotations.ndtext").decode()
            except (KeyError, ValueError) as exc:
                raise MalformedDocument(f"bundle manifest: {exc}") from exc
            with self._write_lock, self.engine.begin() as conn:
                try:
                    conn.execute(sa.insert(self.slides).values(**slide_doc))
                except sa.exc.IntegrityError as exc:
                    raise DuplicateSlideId(slide_id) from exc
                for task_doc in manifest.get("tasks", []):
                    task_doc = dict(task_doc)
                    task_doc["params"] = json.dumps(task_doc["params"])
                    conn.execute(sa.insert(self.tasks).values(**task_doc))
                for line in ndtext.splitlines():
                    if not line.strip():
                        continue
                    try:
                        entry = json.loads(line)
                        doc, edits = entry["record"], entry["edits"]
                    except (KeyError, ValueError) as exc:
                        raise MalformedDocument(f"annotation line: {exc}") from exc
                    conn.execute(sa.insert(self.annotations).values(
                        id=doc["id"], slide_id=doc["slide_id"],
                        user_id=doc["user_id"], kind=doc["kind"],
                        coords=json.dumps(doc["coords"]), label=doc["label"],
                        color=doc["color"], version=doc["version"],
                        deleted=doc["deleted"], created_at=doc["created_at"],
                        updated_at=doc["updated_at"],
                    ))
                    for edit in edits:
                        conn.execute(sa.insert(self.annotation_edits).values(
                            annotation_id=edit["annotation_id"], seq=edit["seq"],
                            op=edit["op"], payload=json.dumps(edit["payload"]),
                            user_id=edit["user_id"], at=edit["at"],
                        ))
            self._make_slide_dirs(slide_id)
            for line in ndtext.splitlines():
                if not line.strip():
                    continue
                doc = json.loads(line)["record"]
                if doc.get("mask"):
                    record = ann.record_from_doc(doc)
                    self._write_mask(record)
            names = zf.namelist()
            if "report" in names:
                rep = json.loads(zf.read("report"))
                self.put_report(StructuredReport(
                    slide_id=slide_id,
                    sections=tuple(
                        (s["name"], tuple((f, v) for f, v in s["fields"]))
                        for s in rep["sections"]
                    ),
                    source=rep["source"],
                ))
            results_root = self.results_dir(slide_id)
            for name in names:
                if name.startswith("results/") and not name.endswith("/"):
                    rel = Path(name).relative_to("results")
                    write_file_atomic(results_root / rel, zf.read(name))
        return self.get_slide(slide_id)


# ------------------------------------------------------- report documents


def parse_report_document(document: str) -> tuple:
    """Parse a report as sectioned text or a tabular CSV.

    Sectioned text: `[section]` headings with `field: value` lines.
    Tabular: a header row of field names and one value row, landing in a
    single "general" section. Returns (sections, detected_source).
    """
    text = document.strip()
    if not text:
        raise MalformedDocument("empty report document")
    if text.startswith("["):
        return _parse_sectioned(text), "hospital_import"
    return _parse_tabular(text), "tcga_import"


def _parse_sectioned(text: str) -> tuple:
    sections = []
    current = None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line:
            continue
        if line.startswith("[") and line.endswith("]"):
            name = line[1:-1].strip()
            if not name:
                raise MalformedDocument(f"line {lineno}: empty section name")
            current = (name, [])
            sections.append(current)
            continue
        if current is None:
            raise MalformedDocument(f"line {lineno}: field before any section")
        if ":" not in line:
            raise MalformedDocument(f"line {lineno}: expected `field: value`")
        field, value = line.split(":", 1)
        field = field.strip()
        if not field:
            raise MalformedDocument(f"line {lineno}: empty field name")
        if field in (f for f, _ in current[1]):
            raise MalformedDocument(
                f"line {lineno}: duplicate field {field!r} in section {current[0]!r}"
            )
        current[1].append((field, value.strip()))
    if not sections:
        raise MalformedDocument("no sections found")
    return tuple((n, tuple(f)) for n, f in sections)


def _parse_tabular(text: str) -> tuple:
    rows = list(csv.reader(io.StringIO(text)))
    rows = [r for r in rows if any(cell.strip() for cell in r)]
    if len(rows) < 2:
        raise MalformedDocument("tabular report needs a header and a value row")
    header = [h.strip() for h in rows[0]]
    if any(not h for h in header):
        raise MalformedDocument("empty field name in header")
    if len(header) != len(set(header)):
        raise MalformedDocument("duplicate field in header")
    values = rows[1]
    if len(values) != len(header):
        raise MalformedDocument(
            f"value row has {len(values)} cells for {len(header)} fields"
        )
    fields = tuple((h, v.strip()) for h, v in zip(header, values))
    return (("general", fields),)


def open_store(config) -> Store:
    config.data_dir.mkdir(parents=True, exist_ok=True)
    return Store(config.database_url, config.data_dir)
