"""ClassTreeWidget: report classes, condition rows and area buckets as a tree."""
from __future__ import annotations

from textual.widgets import Tree

from ..evaluation import EvalReport, Metrics, RecallRow
from ..models import CONDITION_ICONS, Condition

# (minimum recall, icon); first match wins
_QUALITY_ICONS = ((0.9, "●"), (0.5, "◐"), (0.0, "○"))


def _quality_icon(recall: float) -> str:
    for floor, icon in _QUALITY_ICONS:
        if recall >= floor:
            return icon
    return "○"


def _class_label(name: str, m: Metrics) -> str:
    """Format: "● mug  P 0.90  R 0.85" """
    return f"{_quality_icon(m.recall)} {name}  P {m.precision:.2f}  R {m.recall:.2f}"


def _condition_icon(key: str) -> str:
    icons = []
    for part in key.split("+"):
        try:
            icons.append(CONDITION_ICONS[Condition(part)])
        except ValueError:
            icons.append("?")
    return "".join(icons)


def _row_label(key: str, row: RecallRow, icon: str = "") -> str:
    prefix = f"{icon} " if icon else ""
    if row.empty:
        return f"{prefix}{key}  -"
    return f"{prefix}{key}  {row.detected}/{row.total}  R {row.recall:.2f}"


class ClassTreeWidget(Tree[str]):
    """Three groups, each node carrying a ``kind:key`` selector:

        ▼ classes
            ● mug  P 0.90  R 0.85
        ▼ conditions
            ≈ blur  3/4  R 0.75
        ▶ area
    """

    def on_mount(self) -> None:
        self.show_root = False
        self.root.expand()

    def update_tree(self, report: EvalReport) -> None:
        """Rebuild from ``report``, keeping each group's expansion state."""
        expanded = {child.label.plain: child.is_expanded for child in self.root.children}
        self.clear()
        self.root.expand()

        per_class = report.per_class
        if report.groups:
            grouped = {c for members in report.groups.values() for c in members}
            for name, members in sorted(report.groups.items()):
                group = self.root.add(name, data="group:" + name, expand=expanded.get(name, True))
                for cls in members:
                    if cls in per_class:
                        group.add_leaf(_class_label(cls, per_class[cls]), data="class:" + cls)
            rest = [c for c in per_class if c not in grouped]
        else:
            rest = list(per_class)
        if rest or not report.groups:
            group = self.root.add("classes", data="overview", expand=expanded.get("classes", True))
            if not rest:
                group.add_leaf("No classes")
            for cls in rest:
                group.add_leaf(_class_label(cls, per_class[cls]), data="class:" + cls)

        conditions = self.root.add("conditions", data="conditions", expand=expanded.get("conditions", True))
        for key, row in report.conditions.items():
            conditions.add_leaf(_row_label(key, row, _condition_icon(key)), data="condition:" + key)
        sizes = self.root.add("area", data="sizes", expand=expanded.get("area", False))
        for key, row in report.sizes.items():
            sizes.add_leaf(_row_label(key, row), data="size:" + key)
