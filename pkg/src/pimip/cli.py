"""Operator command line: ingest slides, serve, run analyzers, move data.

Every command is a thin wrapper over the library modules. Machine-readable
output (ids, paths) goes to stdout one item per line; diagnostics go to
stderr. Errors exit nonzero with the structured error code printed.

Exit codes: 1 generic structured error, 2 source parse failure,
3 duplicate slide id, 4 unknown analyzer.
"""

from __future__ import annotations

import json
import sys
from pathlib import Path

import click

from . import slide_io
from .analysis import built_in_registry, execute_task
from .config import PimipConfig
from .errors import DuplicateSlideId, PimipError, UnknownAnalyzer
from .pixels import encode_image
from .store import open_store, write_file_atomic
from .tiler import make_thumbnail

PARSE_EXIT = (
    "BadMagic", "UnsupportedVersion", "TruncatedFile", "CyclicChain",
    "UnsupportedTagType", "InvalidDirectory", "UnsupportedCompression",
    "UnsupportedFormat", "UnreadableSource", "MissingManifest",
    "ManifestMismatch",
)


def _fail(exc: PimipError, exit_code: int) -> None:
    click.echo(f"{exc.code}: {exc}", err=True)
    sys.exit(exit_code)


def _config(ctx) -> PimipConfig:
    return ctx.obj


@click.group(context_settings={"auto_envvar_prefix": "PIMIP"})
@click.option("--data-dir", type=click.Path(path_type=Path), default="pimip-data",
              show_default=True, help="Root folder for the database and slides.")
@click.option("--port", type=int, default=8000, show_default=True)
@click.option("--tile-size", type=int, default=254, show_default=True)
@click.option("--gap-tau-ms", type=float, default=500.0, show_default=True)
@click.option("--gap-delta-px", type=float, default=40.0, show_default=True)
@click.option("--workers", type=int, default=2, show_default=True)
@click.pass_context
def main(ctx, data_dir, port, tile_size, gap_tau_ms, gap_delta_px, workers):
    """Self-hosted slide viewer and analysis toolkit."""
    ctx.obj = PimipConfig(
        data_dir=data_dir, port=port, tile_size=tile_size,
        gap_tau_ms=gap_tau_ms, gap_delta_px=gap_delta_px, workers=workers,
    )


@main.command()
@click.argument("source", type=click.Path(path_type=Path))
@click.option("--name", default=None, help="Slide id (default: generated).")
@click.pass_context
def ingest(ctx, source, name):
    """Register a slide file and build its thumbnail."""
    store = open_store(_config(ctx))
    try:
        try:
            row = store.register_slide(source, name, adopt=False)
        except DuplicateSlideId as exc:
            _fail(exc, 3)
        except PimipError as exc:
            if exc.code in PARSE_EXIT:
                _fail(exc, 2)
            raise
        reader = slide_io.open_slide(row.source_path)
        try:
            thumb = encode_image(make_thumbnail(reader, 256), "png")
        finally:
            reader.close()
        write_file_atomic(store.thumbs_dir(row.slide_id) / "thumb-256.png", thumb)
        click.echo(row.slide_id)
    except PimipError as exc:
        _fail(exc, 1)
    finally:
        store.close()


@main.command()
@click.pass_context
def serve(ctx):
    """Run the HTTP server (blocks until interrupted)."""
    from .server import run_server

    config = _config(ctx)
    click.echo(f"serving {config.data_dir} on port {config.port}", err=True)
    run_server(config)


def _parse_param(raw: str) -> tuple:
    if "=" not in raw:
        raise click.BadParameter(f"--param wants k=v, got {raw!r}")
    key, value = raw.split("=", 1)
    try:
        return key, json.loads(value)
    except json.JSONDecodeError:
        return key, value


class AnalyzeCommand(click.Command):
    """Appends the analyzer roster from the registry to --help."""

    def format_help(self, ctx, formatter):
        super().format_help(ctx, formatter)
        with formatter.section("Analyzers"):
            for descriptor in built_in_registry().list():
                params = ", ".join(
                    f"{p.name}={p.default!r}" for p in descriptor.params_schema
                )
                formatter.write_text(
                    f"{descriptor.name} ({descriptor.input_kind} -> "
                    f"{descriptor.output_kind}) params: {params or 'none'}"
                )


@main.command(cls=AnalyzeCommand)
@click.argument("slide_id")
@click.option("--model", required=True, help="Analyzer name from the registry.")
@click.option("--param", multiple=True, help="Analyzer parameter as k=v.")
@click.pass_context
def analyze(ctx, slide_id, model, param):
    """Run one analyzer synchronously and print the result folder."""
    store = open_store(_config(ctx))
    registry = built_in_registry()
    try:
        params = dict(_parse_param(p) for p in param)
        try:
            descriptor = registry.get(model)
        except UnknownAnalyzer as exc:
            _fail(exc, 4)
        descriptor.coerce_params(params)
        store.get_slide(slide_id)
        task = store.create_task(slide_id, model, params)
        execute_task(store, registry, task.id)
        final = store.get_task(task.id)
        if final.status != "done":
            click.echo(f"task failed: {final.error_message}", err=True)
            sys.exit(1)
        click.echo(str(store.data_dir / final.result_ref))
    except PimipError as exc:
        _fail(exc, 1)
    finally:
        store.close()


@main.command()
@click.argument("slide_id")
@click.option("--out", required=True, type=click.Path(path_type=Path),
              help="Zip file to write.")
@click.pass_context
def export(ctx, slide_id, out):
    """Write one slide's annotations, report, and results to a zip."""
    store = open_store(_config(ctx))
    try:
        path = store.export_bundle(slide_id, out)
        click.echo(str(path))
    except PimipError as exc:
        _fail(exc, 1)
    finally:
        store.close()


@main.command(name="import")
@click.argument("bundle", type=click.Path(path_type=Path))
@click.pass_context
def import_(ctx, bundle):
    """Load a previously exported bundle into this data folder."""
    store = open_store(_config(ctx))
    try:
        row = store.import_bundle(bundle)
        click.echo(row.slide_id)
    except DuplicateSlideId as exc:
        _fail(exc, 3)
    except PimipError as exc:
        _fail(exc, 1)
    finally:
        store.close()


@main.group()
def report():
    """Structured report commands."""


@report.command(name="import")
@click.argument("slide_id")
@click.argument("document", type=click.Path(path_type=Path))
@click.pass_context
def report_import(ctx, slide_id, document):
    """Parse a report document (tabular or sectioned) into the store."""
    store = open_store(_config(ctx))
    try:
        text = Path(document).read_text()
        stored = store.import_report(slide_id, text)
        click.echo(f"{slide_id} {stored.source} sections={len(stored.sections)}")
    except OSError as exc:
        click.echo(f"IoFailure: {exc}", err=True)
        sys.exit(1)
    except PimipError as exc:
        _fail(exc, 1)
    finally:
        store.close()


@report.command(name="search")
@click.option("-q", "--query", default="", help="Substring to match.")
@click.option("--columns", default=None, help="Comma-separated field names.")
@click.pass_context
def report_search(ctx, query, columns):
    """Search report fields; one json row per line."""
    store = open_store(_config(ctx))
    try:
        wanted = [c for c in columns.split(",") if c] if columns else None
        for row in store.search_reports(query, columns=wanted):
            click.echo(json.dumps(row, sort_keys=True))
    except PimipError as exc:
        _fail(exc, 1)
    finally:
        store.close()


if __name__ == "__main__":
    main()
