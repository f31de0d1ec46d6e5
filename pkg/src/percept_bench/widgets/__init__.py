"""Textual widgets for the report viewer."""
from __future__ import annotations

from .class_tree import ClassTreeWidget
from .detail_panel import DetailPanel
from .summary_bar import SummaryBar

__all__ = ["ClassTreeWidget", "DetailPanel", "SummaryBar"]
