"""DetailPanel: right-side view of the selected class or table row."""
from __future__ import annotations

from textual.widgets import RichLog

from ..evaluation import EvalReport, Metrics, RecallRow

_BAR_WIDTH = 30


def _metric(value: float, defined: bool) -> str:
    return f"{value:.3f}" if defined else "n/a"


def _histogram_lines(report: EvalReport) -> list[str]:
    hist = report.histogram
    if hist.empty:
        return ["[dim]No true positives: overlap histogram empty[/dim]"]
    peak = max(hist.counts)
    lines = []
    for lo, n, cum in zip(hist.edges, hist.counts, hist.cumulative):
        bar = "█" * (round(_BAR_WIDTH * n / peak) if peak else 0)
        lines.append(f"{lo:.1f}-{lo + 0.1:.1f} {n:5d} {cum:6.2f} {bar}")
    return lines


class DetailPanel(RichLog):
    """Placeholder until something is selected, then the matching table.

    The last rendered lines are kept in ``_lines`` for tests.
    """

    DEFAULT_CSS = """
    DetailPanel {
        border-left: solid $accent;
    }
    """

    def __init__(self, *args, **kwargs) -> None:
        kwargs.setdefault("markup", True)
        super().__init__(*args, **kwargs)
        self._lines: list[str] = []

    def on_mount(self) -> None:
        self.show_placeholder()

    def _show(self, lines: list[str]) -> None:
        self.clear()
        self._lines = list(lines)
        for line in lines:
            self.write(line)

    def show_placeholder(self) -> None:
        self._show(["[dim]Select a class or table row[/dim]"])

    def show_error(self, message: str) -> None:
        self._show([f"[bold red]Error:[/bold red] {message}"])

    def show_class(self, report: EvalReport, name: str) -> None:
        counts = report.counts.per_class.get(name)
        if counts is None:
            self._show([f"[dim]No results for {name}[/dim]"])
            return
        m: Metrics = report.per_class[name]
        self._show([
            f"[bold]{name}[/bold]",
            f"TP {counts.tp}   FP {counts.fp}   FN {counts.fn}   ground truth {counts.gt}",
            f"precision {_metric(m.precision, m.precision_defined)}",
            f"recall    {_metric(m.recall, m.recall_defined)}",
            f"f (beta={report.metric.beta:g}) {m.f:.3f}",
        ])

    def show_rows(self, title: str, rows: dict[str, RecallRow], selected: str | None = None) -> None:
        lines = [f"[bold]{title}[/bold]"]
        for key, row in rows.items():
            rec = "-" if row.empty else f"{row.recall:.3f}"
            line = f"{key:<28} {row.detected:4d}/{row.total:<4d} {rec}"
            lines.append(f"[reverse]{line}[/reverse]" if key == selected else line)
        self._show(lines)

    def show_overview(self, report: EvalReport) -> None:
        agg = report.aggregate
        lines = [
            f"[bold]{report.method}[/bold]  frames {report.frames}  overlap mode {report.metric.mode.value}",
            f"precision {_metric(agg.precision, agg.precision_defined)}  "
            f"recall {_metric(agg.recall, agg.recall_defined)}  f {agg.f:.3f}",
            "",
        ]
        for name, g in report.group_summary.items():
            lines.append(
                f"{name}: recall {g.recall_mean:.3f} ± {g.recall_std:.3f}  "
                f"precision {g.precision_mean:.3f} ± {g.precision_std:.3f}"
            )
        for key, value in report.extras.items():
            lines.append(f"{key}: {value}")
        lines += ["", "[bold]overlap histogram[/bold]", *_histogram_lines(report)]
        self._show(lines)
