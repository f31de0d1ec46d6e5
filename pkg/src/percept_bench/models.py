from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum

from .errors import AnnotationError
from .imaging import BoundingBox


class Condition(Enum):
    NORMAL = "normal"
    BLUR = "blur"
    OCCLUDED = "occluded"
    ILLUMINATION = "illumination"


CONDITION_ICONS: dict[Condition, str] = {
    Condition.NORMAL: "●",
    Condition.BLUR: "≈",
    Condition.OCCLUDED: "◐",
    Condition.ILLUMINATION: "☀",
}

CONDITION_STYLES: dict[Condition, str] = {
    Condition.NORMAL: "green",
    Condition.BLUR: "cyan",
    Condition.OCCLUDED: "yellow",
    Condition.ILLUMINATION: "magenta",
}


class Method(Enum):
    SIFT = "sift"
    VTREE = "vtree"
    CASCADE = "cascade"


@dataclass(frozen=True)
class AnnotationRecord:
    frame_id: str
    class_name: str
    box: BoundingBox
    conditions: frozenset[Condition] = field(default_factory=lambda: frozenset({Condition.NORMAL}))

    def __post_init__(self) -> None:
        conditions = frozenset(self.conditions)
        if not conditions:
            raise AnnotationError("at least one condition flag is required")
        if Condition.NORMAL in conditions and len(conditions) > 1:
            raise AnnotationError("'normal' cannot be combined with other condition flags")
        object.__setattr__(self, "conditions", conditions)

    @property
    def occluded(self) -> bool:
        return Condition.OCCLUDED in self.conditions

    @property
    def condition_key(self) -> str:
        """Canonical '+'-joined flag combination, e.g. ``blur+occluded``."""
        order = list(Condition)
        return "+".join(c.value for c in sorted(self.conditions, key=order.index))

    @property
    def area(self) -> float:
        return self.box.area


@dataclass(frozen=True)
class Detection:
    frame_id: str
    class_name: str
    box: BoundingBox
    score: float

    def __post_init__(self) -> None:
        if not math.isfinite(self.score):
            raise AnnotationError(f"detection score must be finite, got {self.score}")
