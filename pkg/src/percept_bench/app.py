"""ReportViewer: Textual browser for a benchmark report.json."""
from __future__ import annotations

import logging
from pathlib import Path

from textual.app import App, ComposeResult
from textual.containers import Horizontal
from textual.widgets import Footer, Header, Tree

from .errors import PerceptionError
from .evaluation import EvalReport, load_report
from .widgets import ClassTreeWidget, DetailPanel, SummaryBar

logger = logging.getLogger(__name__)


class ReportViewer(App[None]):
    """Class tree on the left, details on the right, aggregate scores below."""

    TITLE = "percept-bench report"
    BINDINGS = [
        ("q", "quit", "Quit"),
        ("r", "reload", "Reload"),
        ("e", "expand_all", "Expand All"),
        ("v", "toggle_detail", "Details"),
    ]

    CSS = """
    #main-content {
        height: 1fr;
    }
    ClassTreeWidget {
        width: 2fr;
    }
    DetailPanel {
        width: 3fr;
        border-left: solid $accent;
    }
    SummaryBar {
        height: auto;
        min-height: 3;
        background: $surface;
        padding: 1;
        dock: bottom;
    }
    """

    def __init__(self, report_path: str | Path, **kwargs) -> None:
        super().__init__(**kwargs)
        self.report_path = Path(report_path)
        self.report: EvalReport | None = None

    def compose(self) -> ComposeResult:
        yield Header()
        with Horizontal(id="main-content"):
            yield ClassTreeWidget("Report")
            yield DetailPanel()
        yield SummaryBar()
        yield Footer()

    def on_mount(self) -> None:
        self.sub_title = str(self.report_path)
        self._load()

    def _load(self) -> None:
        """Read the report and refresh every widget; a bad file only shows an error."""
        bar = self.query_one(SummaryBar)
        try:
            self.report = load_report(self.report_path)
        except PerceptionError as exc:
            logger.warning("Cannot load %s: %s", self.report_path, exc)
            self.report = None
            bar.set_error(str(exc))
            self.query_one(DetailPanel).show_error(str(exc))
            return
        self.query_one(ClassTreeWidget).update_tree(self.report)
        bar.update_summary(self.report)
        self.query_one(DetailPanel).show_overview(self.report)
        logger.info("Loaded report %s (%d classes)", self.report_path, len(self.report.counts.per_class))

    def on_tree_node_selected(self, event: Tree.NodeSelected) -> None:
        selector = event.node.data
        if selector is None or self.report is None:
            return
        panel = self.query_one(DetailPanel)
        kind, _, key = selector.partition(":")
        if kind == "class":
            panel.show_class(self.report, key)
        elif kind in ("condition", "conditions"):
            panel.show_rows("recall by condition", self.report.conditions, key or None)
        elif kind in ("size", "sizes"):
            panel.show_rows("recall by area (px)", self.report.sizes, key or None)
        else:
            panel.show_overview(self.report)

    def action_reload(self) -> None:
        logger.info("Reloading %s", self.report_path)
        self._load()

    def action_toggle_detail(self) -> None:
        """Hide or show the detail panel; the tree takes the full width when hidden."""
        panel = self.query_one(DetailPanel)
        tree = self.query_one(ClassTreeWidget)
        if panel.display:
            panel.display = False
            tree.styles.width = "100%"
        else:
            panel.display = True
            tree.styles.width = "2fr"

    def action_expand_all(self) -> None:
        tree = self.query_one(ClassTreeWidget)
        any_collapsed = any(not group.is_expanded for group in tree.root.children)
        for group in tree.root.children:
            if any_collapsed:
                group.expand()
            else:
                group.collapse()
        self.notify("Expanded all" if any_collapsed else "Collapsed all")
