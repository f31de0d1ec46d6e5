"""Tests for ClassTreeWidget, DetailPanel and SummaryBar widgets."""
from __future__ import annotations

import pytest
from textual.app import App, ComposeResult
from textual.widgets import Footer, Header

from percept_bench.evaluation import EvalReport, build_report
from percept_bench.imaging import BoundingBox
from percept_bench.models import AnnotationRecord, Condition, Detection
from percept_bench.widgets import ClassTreeWidget, DetailPanel, SummaryBar


# ---------------------------------------------------------------------------
# Helpers / fixtures
# ---------------------------------------------------------------------------

def make_report(groups: dict[str, list[str]] | None = None) -> EvalReport:
    """Two books found (one occluded), one cup missed plus a stray cup detection."""
    gts = [
        AnnotationRecord("f0", "book", BoundingBox(0, 0, 10, 10)),
        AnnotationRecord("f0", "cup", BoundingBox(20, 0, 30, 10)),
        AnnotationRecord("f1", "book", BoundingBox(0, 0, 10, 10), frozenset({Condition.OCCLUDED})),
    ]
    dets = [
        Detection("f0", "book", BoundingBox(0, 0, 10, 10), 0.9),
        Detection("f1", "book", BoundingBox(1, 0, 11, 10), 0.8),
        Detection("f0", "cup", BoundingBox(0, 0, 10, 10), 0.1),
    ]
    report, _ = build_report("sift", dets, gts, frames=2, groups=groups)
    return report


class WidgetTestApp(App[None]):
    """Minimal host app for widget tests."""

    def compose(self) -> ComposeResult:
        yield Header()
        yield ClassTreeWidget("Report")
        yield DetailPanel()
        yield SummaryBar()
        yield Footer()


def labels(node) -> list[str]:
    return [child.label.plain for child in node.children]


# ---------------------------------------------------------------------------
# ClassTreeWidget tests
# ---------------------------------------------------------------------------


@pytest.mark.asyncio
async def test_tree_has_three_groups() -> None:
    app = WidgetTestApp()
    async with app.run_test() as pilot:
        tree = app.query_one(ClassTreeWidget)
        tree.update_tree(make_report())
        await pilot.pause()
        assert labels(tree.root) == ["classes", "conditions", "area"]


@pytest.mark.asyncio
async def test_class_labels_show_precision_and_recall() -> None:
    app = WidgetTestApp()
    async with app.run_test() as pilot:
        tree = app.query_one(ClassTreeWidget)
        tree.update_tree(make_report())
        await pilot.pause()
        assert labels(tree.root.children[0]) == ["● book  P 1.00  R 1.00", "○ cup  P 0.00  R 0.00"]
        assert [c.data for c in tree.root.children[0].children] == ["class:book", "class:cup"]


@pytest.mark.asyncio
async def test_condition_rows_carry_icons() -> None:
    app = WidgetTestApp()
    async with app.run_test() as pilot:
        tree = app.query_one(ClassTreeWidget)
        tree.update_tree(make_report())
        await pilot.pause()
        rows = labels(tree.root.children[1])
        assert "◐ occluded  1/1  R 1.00" in rows
        assert "● normal  1/2  R 0.50" in rows


@pytest.mark.asyncio
async def test_area_group_starts_collapsed() -> None:
    app = WidgetTestApp()
    async with app.run_test() as pilot:
        tree = app.query_one(ClassTreeWidget)
        tree.update_tree(make_report())
        await pilot.pause()
        assert not tree.root.children[2].is_expanded
        assert tree.root.children[1].is_expanded


@pytest.mark.asyncio
async def test_class_groups_replace_flat_list() -> None:
    app = WidgetTestApp()
    async with app.run_test() as pilot:
        tree = app.query_one(ClassTreeWidget)
        tree.update_tree(make_report({"reading": ["book"]}))
        await pilot.pause()
        assert labels(tree.root) == ["reading", "classes", "conditions", "area"]
        assert labels(tree.root.children[1]) == ["○ cup  P 0.00  R 0.00"]


@pytest.mark.asyncio
async def test_update_keeps_expansion_state() -> None:
    app = WidgetTestApp()
    async with app.run_test() as pilot:
        tree = app.query_one(ClassTreeWidget)
        tree.update_tree(make_report())
        await pilot.pause()
        tree.root.children[1].collapse()
        tree.update_tree(make_report())
        await pilot.pause()
        assert not tree.root.children[1].is_expanded


# ---------------------------------------------------------------------------
# SummaryBar tests
# ---------------------------------------------------------------------------


@pytest.mark.asyncio
async def test_summary_bar_aggregate_text() -> None:
    app = WidgetTestApp()
    async with app.run_test() as pilot:
        bar = app.query_one(SummaryBar)
        bar.update_summary(make_report())
        await pilot.pause()
        assert bar._display_text == (
            "sift  Precision: 0.667  Recall: 0.667  F: 0.667  TP 2  FP 1  FN 1  Frames: 2"
        )


@pytest.mark.asyncio
async def test_summary_bar_flags_undefined_ratios() -> None:
    app = WidgetTestApp()
    async with app.run_test() as pilot:
        bar = app.query_one(SummaryBar)
        report, _ = build_report("cascade", [], [], frames=3)
        bar.update_summary(report)
        await pilot.pause()
        assert bar._display_text.endswith("(undefined ratios)")


@pytest.mark.asyncio
async def test_summary_bar_error() -> None:
    app = WidgetTestApp()
    async with app.run_test() as pilot:
        bar = app.query_one(SummaryBar)
        bar.set_error("Cannot read report")
        await pilot.pause()
        assert bar._display_text == "❌ Cannot read report"


# ---------------------------------------------------------------------------
# DetailPanel tests
# ---------------------------------------------------------------------------


@pytest.mark.asyncio
async def test_detail_panel_placeholder() -> None:
    app = WidgetTestApp()
    async with app.run_test() as pilot:
        await pilot.pause()
        assert "Select a class" in app.query_one(DetailPanel)._lines[0]


@pytest.mark.asyncio
async def test_detail_panel_class_counts() -> None:
    app = WidgetTestApp()
    async with app.run_test() as pilot:
        panel = app.query_one(DetailPanel)
        panel.show_class(make_report(), "book")
        await pilot.pause()
        assert panel._lines[1] == "TP 2   FP 0   FN 0   ground truth 2"
        assert panel._lines[2] == "precision 1.000"


@pytest.mark.asyncio
async def test_detail_panel_unknown_class() -> None:
    app = WidgetTestApp()
    async with app.run_test() as pilot:
        panel = app.query_one(DetailPanel)
        panel.show_class(make_report(), "kettle")
        await pilot.pause()
        assert "No results for kettle" in panel._lines[0]


@pytest.mark.asyncio
async def test_detail_panel_highlights_selected_row() -> None:
    app = WidgetTestApp()
    async with app.run_test() as pilot:
        panel = app.query_one(DetailPanel)
        panel.show_rows("recall by condition", make_report().conditions, "occluded")
        await pilot.pause()
        highlighted = [line for line in panel._lines if line.startswith("[reverse]")]
        assert len(highlighted) == 1
        assert "occluded" in highlighted[0]


@pytest.mark.asyncio
async def test_detail_panel_overview_groups_and_histogram() -> None:
    app = WidgetTestApp()
    async with app.run_test() as pilot:
        panel = app.query_one(DetailPanel)
        panel.show_overview(make_report({"all": ["book", "cup"]}))
        await pilot.pause()
        assert "all: recall 0.500 ± 0.500  precision 0.500 ± 0.500" in panel._lines
        assert any(line.startswith("0.9-1.0") for line in panel._lines)


@pytest.mark.asyncio
async def test_detail_panel_empty_histogram() -> None:
    app = WidgetTestApp()
    async with app.run_test() as pilot:
        panel = app.query_one(DetailPanel)
        report, _ = build_report("sift", [], [], frames=1)
        panel.show_overview(report)
        await pilot.pause()
        assert "n/a" in panel._lines[1]
        assert "histogram empty" in panel._lines[-1]
