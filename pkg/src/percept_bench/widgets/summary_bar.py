"""SummaryBar: footer Static widget with aggregate report metrics."""
from __future__ import annotations

from textual.widgets import Static

from ..evaluation import EvalReport


class SummaryBar(Static):
    """Footer widget showing aggregate scores.

    Displays: "sift  Precision: 0.900  Recall: 0.850  F: 0.874  TP 17  FP 2  FN 3  Frames: 50"
    The current text is kept in ``_display_text`` for tests.
    """

    def __init__(self, content: str = "Loading report...", **kwargs: object) -> None:
        super().__init__(content, **kwargs)
        self._display_text: str = str(content)

    def update_summary(self, report: EvalReport) -> None:
        agg = report.aggregate
        total = report.counts.total
        flag = "  (undefined ratios)" if agg.undefined else ""
        text = (
            f"{report.method}  "
            f"Precision: {agg.precision:.3f}  "
            f"Recall: {agg.recall:.3f}  "
            f"F: {agg.f:.3f}  "
            f"TP {total.tp}  FP {total.fp}  FN {total.fn}  "
            f"Frames: {report.frames}{flag}"
        )
        self._display_text = text
        self.update(text)

    def set_error(self, message: str) -> None:
        text = f"❌ {message}"
        self._display_text = text
        self.update(text)
