"""Command-line wrapper: exit codes, stdout shapes, and round trips."""

import json

import pytest
from click.testing import CliRunner

from pimip.cli import main
from pimip.config import PimipConfig
from pimip.store import open_store

from tiffgen import build_tiff, gradient_image


@pytest.fixture
def runner():
    return CliRunner()


@pytest.fixture
def data_dir(tmp_path):
    return tmp_path / "data"


@pytest.fixture
def tiff_file(tmp_path):
    img = gradient_image(140, 90, channels=3, seed=41)
    path = tmp_path / "scan.tif"
    path.write_bytes(build_tiff([img], tile=(64, 64),
                                description="x|AppMag = 20|MPP = 0.5"))
    return path


def run(runner, data_dir, *args):
    return runner.invoke(main, ["--data-dir", str(data_dir), *args],
                         catch_exceptions=False)


class TestIngest:
    def test_prints_id_and_populates_folder(self, runner, data_dir, tiff_file):
        result = run(runner, data_dir, "ingest", str(tiff_file), "--name", "s1")
        assert result.exit_code == 0, result.output
        assert result.output.strip() == "s1"
        assert (data_dir / "slides" / "s1" / "thumbs" / "thumb-256.png").is_file()

    def test_duplicate_name_exits_3(self, runner, data_dir, tiff_file):
        run(runner, data_dir, "ingest", str(tiff_file), "--name", "s1")
        result = runner.invoke(main, ["--data-dir", str(data_dir), "ingest",
                                      str(tiff_file), "--name", "s1"])
        assert result.exit_code == 3
        assert "DuplicateSlideId" in result.output

    def test_corrupt_header_exits_2(self, runner, data_dir, tmp_path):
        bad = tmp_path / "bad.tif"
        bad.write_bytes(b"XX\x00\x00 not a tiff at all")
        result = runner.invoke(main, ["--data-dir", str(data_dir), "ingest",
                                      str(bad)])
        assert result.exit_code == 2
        assert "BadMagic" in result.output

    def test_generated_id_printed(self, runner, data_dir, tiff_file):
        result = run(runner, data_dir, "ingest", str(tiff_file))
        assert result.exit_code == 0
        slide_id = result.output.strip()
        assert slide_id.startswith("slide-")
        assert "\n" not in slide_id


class TestAnalyze:
    def test_runs_and_prints_result_path(self, runner, data_dir, tiff_file):
        run(runner, data_dir, "ingest", str(tiff_file), "--name", "s1")
        result = run(runner, data_dir, "analyze", "s1",
                     "--model", "foreground_otsu")
        assert result.exit_code == 0, result.output
        from pathlib import Path
        out = Path(result.output.strip())
        assert out.is_dir()
        assert (out / "mask").is_file() and (out / "meta").is_file()
        meta = json.loads((out / "meta").read_text())
        assert meta["analyzer"] == "foreground_otsu"

    def test_unknown_model_exits_4(self, runner, data_dir, tiff_file):
        run(runner, data_dir, "ingest", str(tiff_file), "--name", "s1")
        result = runner.invoke(main, ["--data-dir", str(data_dir), "analyze",
                                      "s1", "--model", "resnet50"])
        assert result.exit_code == 4
        assert "UnknownAnalyzer" in result.output

    def test_params_forwarded(self, runner, data_dir, tiff_file):
        run(runner, data_dir, "ingest", str(tiff_file), "--name", "s1")
        result = run(runner, data_dir, "analyze", "s1", "--model",
                     "grid_classify", "--param", "grid_size=32")
        assert result.exit_code == 0, result.output
        store = open_store(PimipConfig(data_dir=data_dir))
        try:
            task = store.list_tasks("s1")[0]
            assert task.params == {"grid_size": 32}
        finally:
            store.close()

    def test_help_lists_analyzers(self, runner):
        result = runner.invoke(main, ["analyze", "--help"])
        assert result.exit_code == 0
        for name in ("foreground_otsu", "nucleus_detect", "grid_classify",
                     "region_grow"):
            assert name in result.output


class TestBundles:
    def test_export_import_round_trip(self, runner, data_dir, tiff_file,
                                      tmp_path):
        run(runner, data_dir, "ingest", str(tiff_file), "--name", "s1")
        store = open_store(PimipConfig(data_dir=data_dir))
        try:
            from pimip import annotations as ann
            store.create_annotation(ann.make_point("s1", "cli", 5, 5))
            store.import_report("s1", "[a]\nx: 1\n")
            src_rows = [r.to_doc() for r in store.list_annotations("s1")]
        finally:
            store.close()
        zip_path = tmp_path / "out.zip"
        result = run(runner, data_dir, "export", "s1", "--out", str(zip_path))
        assert result.exit_code == 0
        assert result.output.strip() == str(zip_path)

        other = tmp_path / "data2"
        result = run(runner, other, "import", str(zip_path))
        assert result.exit_code == 0
        assert result.output.strip() == "s1"
        dst = open_store(PimipConfig(data_dir=other))
        try:
            assert [r.to_doc() for r in dst.list_annotations("s1")] == src_rows
            assert dst.get_report("s1").sections == (("a", (("x", "1"),)),)
        finally:
            dst.close()

    def test_export_unknown_slide(self, runner, data_dir, tmp_path):
        result = runner.invoke(main, ["--data-dir", str(data_dir), "export",
                                      "ghost", "--out", str(tmp_path / "x.zip")])
        assert result.exit_code == 1
        assert "UnknownSlide" in result.output


class TestReports:
    def test_import_and_search(self, runner, data_dir, tiff_file, tmp_path):
        run(runner, data_dir, "ingest", str(tiff_file), "--name", "s1")
        doc = tmp_path / "report.txt"
        doc.write_text("[path]\ndiagnosis: carcinoma\n")
        result = run(runner, data_dir, "report", "import", "s1", str(doc))
        assert result.exit_code == 0
        assert "hospital_import" in result.output
        result = run(runner, data_dir, "report", "search", "-q", "carcin",
                     "--columns", "diagnosis")
        assert result.exit_code == 0
        rows = [json.loads(line) for line in result.output.splitlines()]
        assert rows == [{"slide_id": "s1", "diagnosis": "carcinoma"}]

    def test_malformed_document(self, runner, data_dir, tiff_file, tmp_path):
        run(runner, data_dir, "ingest", str(tiff_file), "--name", "s1")
        doc = tmp_path / "report.txt"
        doc.write_text("[x]\nno colon here\n")
        result = runner.invoke(main, ["--data-dir", str(data_dir), "report",
                                      "import", "s1", str(doc)])
        assert result.exit_code == 1
        assert "MalformedDocument" in result.output
