"""Tests for the ReportViewer app (smoke tests + composition)."""
from __future__ import annotations

import pytest
from textual.widgets import Footer, Header

from percept_bench.app import ReportViewer
from percept_bench.evaluation import build_report, write_report
from percept_bench.imaging import BoundingBox
from percept_bench.models import AnnotationRecord, Detection
from percept_bench.widgets import ClassTreeWidget, DetailPanel, SummaryBar


# ---------------------------------------------------------------------------
# Helpers
# ---------------------------------------------------------------------------

def write_sample_report(out_dir) -> str:
    gts = [
        AnnotationRecord("f0", "book", BoundingBox(0, 0, 10, 10)),
        AnnotationRecord("f0", "cup", BoundingBox(20, 0, 30, 10)),
    ]
    dets = [Detection("f0", "book", BoundingBox(0, 0, 10, 10), 0.9)]
    report, _ = build_report("vtree", dets, gts, frames=1)
    return str(write_report(report, out_dir))


@pytest.fixture
def report_path(tmp_path) -> str:
    return write_sample_report(tmp_path / "run")


# ---------------------------------------------------------------------------
# App composition tests
# ---------------------------------------------------------------------------


@pytest.mark.asyncio
async def test_app_composes_widgets(report_path) -> None:
    app = ReportViewer(report_path)
    async with app.run_test():
        assert app.query_one(Header) is not None
        assert app.query_one(Footer) is not None
        assert app.query_one(ClassTreeWidget) is not None
        assert app.query_one(DetailPanel) is not None
        assert app.query_one(SummaryBar) is not None


@pytest.mark.asyncio
async def test_app_title_and_subtitle(report_path) -> None:
    app = ReportViewer(report_path)
    async with app.run_test():
        assert app.title == "percept-bench report"
        assert app.sub_title == report_path


def test_app_has_bindings() -> None:
    keys = {b[0] for b in ReportViewer.BINDINGS}
    assert {"q", "r", "e", "v"} <= keys


# ---------------------------------------------------------------------------
# Loading
# ---------------------------------------------------------------------------


@pytest.mark.asyncio
async def test_report_loaded_on_mount(report_path) -> None:
    app = ReportViewer(report_path)
    async with app.run_test() as pilot:
        await pilot.pause()
        assert app.report is not None
        assert app.report.method == "vtree"
        bar = app.query_one(SummaryBar)
        assert bar._display_text.startswith("vtree  Precision: 1.000  Recall: 0.500")
        assert app.query_one(DetailPanel)._lines[0].startswith("[bold]vtree[/bold]")


@pytest.mark.asyncio
async def test_missing_report_shows_error(tmp_path) -> None:
    app = ReportViewer(tmp_path / "absent.json")
    async with app.run_test() as pilot:
        await pilot.pause()
        assert app.report is None
        assert app.query_one(SummaryBar)._display_text.startswith("❌")
        assert "Error" in app.query_one(DetailPanel)._lines[0]


@pytest.mark.asyncio
async def test_reload_picks_up_new_file(tmp_path) -> None:
    app = ReportViewer(tmp_path / "run" / "report.json")
    async with app.run_test() as pilot:
        await pilot.pause()
        assert app.report is None
        write_sample_report(tmp_path / "run")
        await pilot.press("r")
        await pilot.pause()
        assert app.report is not None


# ---------------------------------------------------------------------------
# Interaction
# ---------------------------------------------------------------------------


@pytest.mark.asyncio
async def test_selecting_class_shows_counts(report_path) -> None:
    app = ReportViewer(report_path)
    async with app.run_test() as pilot:
        await pilot.pause()
        tree = app.query_one(ClassTreeWidget)
        cup = tree.root.children[0].children[1]
        tree.select_node(cup)
        await pilot.pause()
        lines = app.query_one(DetailPanel)._lines
        assert lines[0] == "[bold]cup[/bold]"
        assert lines[1].startswith("TP 0   FP 0   FN 1")


@pytest.mark.asyncio
async def test_selecting_condition_group_shows_table(report_path) -> None:
    app = ReportViewer(report_path)
    async with app.run_test() as pilot:
        await pilot.pause()
        tree = app.query_one(ClassTreeWidget)
        tree.select_node(tree.root.children[1])
        await pilot.pause()
        assert app.query_one(DetailPanel)._lines[0] == "[bold]recall by condition[/bold]"


@pytest.mark.asyncio
async def test_toggle_detail_panel(report_path) -> None:
    app = ReportViewer(report_path)
    async with app.run_test() as pilot:
        panel = app.query_one(DetailPanel)
        await pilot.press("v")
        await pilot.pause()
        assert not panel.display
        await pilot.press("v")
        await pilot.pause()
        assert panel.display


@pytest.mark.asyncio
async def test_expand_all_toggles_groups(report_path) -> None:
    app = ReportViewer(report_path)
    async with app.run_test() as pilot:
        await pilot.pause()
        tree = app.query_one(ClassTreeWidget)
        assert not tree.root.children[2].is_expanded
        await pilot.press("e")
        await pilot.pause()
        assert all(g.is_expanded for g in tree.root.children)
        await pilot.press("e")
        await pilot.pause()
        assert not any(g.is_expanded for g in tree.root.children)
