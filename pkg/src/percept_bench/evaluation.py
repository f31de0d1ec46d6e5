"""Ground truth and detection files, detection-to-truth matching, metrics,
breakdown tables and report files."""
from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Iterable

import numpy as np

from .errors import AnnotationError, ConfigError
from .imaging import BoundingBox, overlap_ratio
from .models import AnnotationRecord, Condition, Detection

logger = logging.getLogger(__name__)

REPORT_FORMAT_VERSION = 1
HISTOGRAM_BINS = 10
SIZE_EDGES: tuple[float, ...] = (5000.0, 20000.0, 80000.0)

# Rows of the per-condition recall table, in display order.
CONDITION_ROWS: tuple[str, ...] = (
    "normal",
    "blur",
    "occluded",
    "illumination",
    "blur+occluded",
    "occluded+illumination",
    "blur+illumination",
    "blur+occluded+illumination",
)


# ---------------------------------------------------------------------------
# Text formats
# ---------------------------------------------------------------------------

def _num(v: float) -> str:
    return str(int(v)) if float(v).is_integer() else repr(float(v))


def _check_token(value: str, what: str, lineno: int | None = None) -> None:
    if not value or any(ch.isspace() for ch in value):
        raise AnnotationError(f"{what} must be a non-empty token without whitespace: {value!r}", lineno)


def _lines(text: str) -> Iterable[tuple[int, list[str]]]:
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if line:
            yield lineno, line.split()


def _parse_box(fields: list[str], lineno: int) -> BoundingBox:
    try:
        coords = [float(v) for v in fields]
    except ValueError:
        raise AnnotationError(f"non-numeric box coordinates {' '.join(fields)!r}", lineno) from None
    try:
        return BoundingBox(*coords)
    except ValueError as exc:
        raise AnnotationError(str(exc), lineno) from None


def parse_annotations_text(text: str) -> list[AnnotationRecord]:
    """``frame class x_min y_min x_max y_max flags`` per line, flags comma-joined."""
    records = []
    valid = {c.value: c for c in Condition}
    for lineno, fields in _lines(text):
        if len(fields) != 7:
            raise AnnotationError(f"expected 7 fields, got {len(fields)}", lineno)
        frame, cls = fields[0], fields[1]
        box = _parse_box(fields[2:6], lineno)
        flags = fields[6].split(",")
        unknown = [f for f in flags if f not in valid]
        if unknown:
            raise AnnotationError(f"unknown condition flag(s) {', '.join(unknown)}", lineno)
        try:
            records.append(AnnotationRecord(frame, cls, box, frozenset(valid[f] for f in flags)))
        except AnnotationError as exc:
            raise AnnotationError(str(exc), lineno) from None
    return records


def parse_annotations(path: str | Path) -> list[AnnotationRecord]:
    return parse_annotations_text(Path(path).read_text(encoding="utf-8"))


def format_annotations(records: Iterable[AnnotationRecord]) -> str:
    lines = []
    for r in records:
        _check_token(r.frame_id, "frame id")
        _check_token(r.class_name, "class name")
        coords = " ".join(_num(v) for v in r.box.as_tuple())
        lines.append(f"{r.frame_id} {r.class_name} {coords} {r.condition_key.replace('+', ',')}")
    return "".join(line + "\n" for line in lines)


def write_annotations(records: Iterable[AnnotationRecord], path: str | Path) -> None:
    Path(path).write_text(format_annotations(records), encoding="utf-8")


def parse_detections_text(text: str) -> list[Detection]:
    """``frame class x_min y_min x_max y_max score`` per line."""
    out = []
    for lineno, fields in _lines(text):
        if len(fields) != 7:
            raise AnnotationError(f"expected 7 fields, got {len(fields)}", lineno)
        box = _parse_box(fields[2:6], lineno)
        try:
            score = float(fields[6])
        except ValueError:
            raise AnnotationError(f"non-numeric score {fields[6]!r}", lineno) from None
        try:
            out.append(Detection(fields[0], fields[1], box, score))
        except AnnotationError as exc:
            raise AnnotationError(str(exc), lineno) from None
    return out


def parse_detections(path: str | Path) -> list[Detection]:
    return parse_detections_text(Path(path).read_text(encoding="utf-8"))


def format_detections(dets: Iterable[Detection]) -> str:
    lines = []
    for d in dets:
        _check_token(d.frame_id, "frame id")
        _check_token(d.class_name, "class name")
        coords = " ".join(_num(v) for v in d.box.as_tuple())
        lines.append(f"{d.frame_id} {d.class_name} {coords} {_num(d.score)}")
    return "".join(line + "\n" for line in lines)


def write_detections(dets: Iterable[Detection], path: str | Path) -> None:
    Path(path).write_text(format_detections(dets), encoding="utf-8")


# ---------------------------------------------------------------------------
# Matching
# ---------------------------------------------------------------------------

class OverlapMode(Enum):
    """Which ground truth is scored by intersection over its own area."""

    STRICT = "strict"
    OCCLUDED = "occluded"
    RELAXED = "relaxed"


@dataclass(frozen=True)
class MetricConfig:
    beta: float = 1.0
    overlap_threshold: float = 0.5
    mode: OverlapMode = OverlapMode.OCCLUDED

    def __post_init__(self) -> None:
        if not self.beta > 0:
            raise ConfigError(f"beta must be > 0, got {self.beta}")
        if not 0.0 < self.overlap_threshold <= 1.0:
            raise ConfigError(f"overlap_threshold must be in (0, 1], got {self.overlap_threshold}")
        if isinstance(self.mode, str):
            object.__setattr__(self, "mode", OverlapMode(self.mode))

    def relaxed_for(self, gt: AnnotationRecord) -> bool:
        if self.mode is OverlapMode.RELAXED:
            return True
        return self.mode is OverlapMode.OCCLUDED and gt.occluded


@dataclass
class ClassCounts:
    tp: int = 0
    fp: int = 0
    fn: int = 0

    @property
    def gt(self) -> int:
        return self.tp + self.fn

    def __add__(self, other: ClassCounts) -> ClassCounts:
        return ClassCounts(self.tp + other.tp, self.fp + other.fp, self.fn + other.fn)


@dataclass
class ConfusionCounts:
    per_class: dict[str, ClassCounts] = field(default_factory=dict)

    @property
    def total(self) -> ClassCounts:
        out = ClassCounts()
        for c in self.per_class.values():
            out = out + c
        return out

    def get(self, class_name: str) -> ClassCounts:
        return self.per_class.setdefault(class_name, ClassCounts())


@dataclass(frozen=True)
class Assignment:
    """Outcome for one detection; ``gt_index`` is None for a false positive."""

    det_index: int
    gt_index: int | None
    iou: float = 0.0
    ratio: float = 0.0

    @property
    def true_positive(self) -> bool:
        return self.gt_index is not None


@dataclass
class MatchResult:
    counts: ConfusionCounts
    assignments: list[Assignment]
    gt_detected: list[bool]

    @property
    def true_positives(self) -> list[Assignment]:
        return [a for a in self.assignments if a.true_positive]


def match_detections(
    dets: list[Detection], gts: list[AnnotationRecord], cfg: MetricConfig | None = None
) -> MatchResult:
    """Greedy matching in descending score order (ties by detection index).

    Each detection takes the unmatched same-frame same-class ground truth with
    the highest intersection over union among those meeting the overlap
    criterion; lower ground-truth index wins ties. Later hits on a taken
    ground truth count as false positives.
    """
    cfg = cfg or MetricConfig()
    by_key: dict[tuple[str, str], list[int]] = {}
    for i, g in enumerate(gts):
        by_key.setdefault((g.frame_id, g.class_name), []).append(i)
    counts = ConfusionCounts()
    for g in gts:
        counts.get(g.class_name)
    taken = [False] * len(gts)
    order = sorted(range(len(dets)), key=lambda i: (-dets[i].score, i))
    assignments: list[Assignment | None] = [None] * len(dets)
    for di in order:
        det = dets[di]
        best: tuple[float, int, float] | None = None
        for gi in by_key.get((det.frame_id, det.class_name), ()):
            if taken[gi]:
                continue
            gt = gts[gi]
            ratio = overlap_ratio(gt.box, det.box, occluded=cfg.relaxed_for(gt))
            if ratio < cfg.overlap_threshold:
                continue
            iou = overlap_ratio(gt.box, det.box)
            if best is None or iou > best[0]:
                best = (iou, gi, ratio)
        if best is None:
            counts.get(det.class_name).fp += 1
            assignments[di] = Assignment(di, None)
        else:
            iou, gi, ratio = best
            taken[gi] = True
            counts.get(det.class_name).tp += 1
            assignments[di] = Assignment(di, gi, iou, ratio)
    for gi, g in enumerate(gts):
        if not taken[gi]:
            counts.get(g.class_name).fn += 1
    return MatchResult(counts, [a for a in assignments if a is not None], taken)


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------

def _ratio(num: float, den: float) -> tuple[float, bool]:
    return (num / den, True) if den > 0 else (0.0, False)


def f_measure(precision: float, recall: float) -> float:
    """Balanced f-measure; 0 when both inputs are 0."""
    s = precision + recall
    return 2.0 * precision * recall / s if s > 0 else 0.0


def f_beta(precision: float, recall: float, beta: float = 1.0) -> float:
    b2 = beta * beta
    den = b2 * precision + recall
    return (1.0 + b2) * precision * recall / den if den > 0 else 0.0


@dataclass(frozen=True)
class Metrics:
    precision: float
    recall: float
    f: float
    precision_defined: bool = True
    recall_defined: bool = True

    @property
    def undefined(self) -> bool:
        return not (self.precision_defined and self.recall_defined)


def compute_metrics(counts: ClassCounts, cfg: MetricConfig | None = None) -> Metrics:
    cfg = cfg or MetricConfig()
    precision, p_ok = _ratio(counts.tp, counts.tp + counts.fp)
    recall, r_ok = _ratio(counts.tp, counts.tp + counts.fn)
    return Metrics(precision, recall, f_beta(precision, recall, cfg.beta), p_ok, r_ok)


@dataclass(frozen=True)
class RecallRow:
    total: int
    detected: int

    @property
    def recall(self) -> float:
        return self.detected / self.total if self.total else 0.0

    @property
    def empty(self) -> bool:
        return self.total == 0


def condition_breakdown(result: MatchResult, gts: list[AnnotationRecord]) -> dict[str, RecallRow]:
    """Recall per exact flag combination; rows partition the ground truth."""
    totals = {key: [0, 0] for key in CONDITION_ROWS}
    for gi, g in enumerate(gts):
        row = totals.setdefault(g.condition_key, [0, 0])
        row[0] += 1
        row[1] += int(result.gt_detected[gi])
    return {key: RecallRow(t, d) for key, (t, d) in totals.items()}


def _size_label(lo: float, hi: float) -> str:
    return f"[{_num(lo)},{_num(hi)})" if math.isfinite(hi) else f"[{_num(lo)},inf)"


def size_breakdown(
    result: MatchResult, gts: list[AnnotationRecord], edges: tuple[float, ...] = SIZE_EDGES
) -> dict[str, RecallRow]:
    """Recall per ground-truth area bucket in pixels."""
    bounds = [0.0, *edges, math.inf]
    rows: dict[str, list[int]] = {_size_label(lo, hi): [0, 0] for lo, hi in zip(bounds, bounds[1:])}
    labels = list(rows)
    for gi, g in enumerate(gts):
        k = int(np.searchsorted(np.asarray(edges), g.area, side="right"))
        rows[labels[k]][0] += 1
        rows[labels[k]][1] += int(result.gt_detected[gi])
    return {k: RecallRow(t, d) for k, (t, d) in rows.items()}


@dataclass(frozen=True)
class GroupSummary:
    classes: tuple[str, ...]
    recall_mean: float
    recall_std: float
    precision_mean: float
    precision_std: float


def group_breakdown(per_class: dict[str, Metrics], groups: dict[str, list[str]]) -> dict[str, GroupSummary]:
    """Mean and population std of per-class recall and precision per group;
    classes without results are skipped."""
    out = {}
    for name, members in groups.items():
        present = tuple(c for c in members if c in per_class)
        if not present:
            continue
        r = np.array([per_class[c].recall for c in present])
        p = np.array([per_class[c].precision for c in present])
        out[name] = GroupSummary(present, float(r.mean()), float(r.std()), float(p.mean()), float(p.std()))
    return out


@dataclass(frozen=True)
class OverlapHistogram:
    counts: tuple[int, ...]

    @property
    def total(self) -> int:
        return sum(self.counts)

    @property
    def empty(self) -> bool:
        return self.total == 0

    @property
    def edges(self) -> tuple[float, ...]:
        return tuple(i / HISTOGRAM_BINS for i in range(HISTOGRAM_BINS + 1))

    @property
    def cumulative(self) -> tuple[float, ...]:
        """Fraction of true positives with overlap below each upper edge
        (the last bin includes 1.0)."""
        if self.empty:
            return tuple(0.0 for _ in self.counts)
        acc = np.cumsum(self.counts) / self.total
        return tuple(float(v) for v in acc)

    def fraction_above(self, threshold: float) -> float:
        """Share of true positives in bins starting at or above ``threshold``."""
        if self.empty:
            return 0.0
        first = int(math.ceil(threshold * HISTOGRAM_BINS - 1e-9))
        return sum(self.counts[first:]) / self.total


def overlap_histogram(assignments: Iterable[Assignment]) -> OverlapHistogram:
    """Histogram of true-positive intersection-over-union at 0.1 bins."""
    counts = [0] * HISTOGRAM_BINS
    for a in assignments:
        if not a.true_positive:
            continue
        counts[min(HISTOGRAM_BINS - 1, int(a.iou * HISTOGRAM_BINS))] += 1
    return OverlapHistogram(tuple(counts))


# ---------------------------------------------------------------------------
# Report
# ---------------------------------------------------------------------------

@dataclass
class TimingStats:
    per_frame_ms: list[float] = field(default_factory=list)

    @property
    def mean_ms(self) -> float:
        return float(np.mean(self.per_frame_ms)) if self.per_frame_ms else 0.0

    @property
    def fps(self) -> float:
        return 1000.0 / self.mean_ms if self.mean_ms > 0 else 0.0

    def to_dict(self) -> dict:
        arr = np.asarray(self.per_frame_ms, dtype=np.float64)
        return {
            "frames": len(arr),
            "mean_ms": self.mean_ms,
            "median_ms": float(np.median(arr)) if len(arr) else 0.0,
            "max_ms": float(arr.max()) if len(arr) else 0.0,
            "fps": self.fps,
        }


@dataclass(eq=False)
class EvalReport:
    """Counts plus everything derived from them. Wall-clock data lives in
    ``TimingStats`` so the report itself is reproducible."""

    method: str
    counts: ConfusionCounts
    conditions: dict[str, RecallRow]
    sizes: dict[str, RecallRow]
    histogram: OverlapHistogram
    frames: int = 0
    metric: MetricConfig = field(default_factory=MetricConfig)
    groups: dict[str, list[str]] = field(default_factory=dict)
    extras: dict[str, float | int | str] = field(default_factory=dict)

    @property
    def per_class(self) -> dict[str, Metrics]:
        return {c: compute_metrics(k, self.metric) for c, k in sorted(self.counts.per_class.items())}

    @property
    def aggregate(self) -> Metrics:
        return compute_metrics(self.counts.total, self.metric)

    @property
    def group_summary(self) -> dict[str, GroupSummary]:
        return group_breakdown(self.per_class, self.groups)

    def to_dict(self) -> dict:
        def metrics(m: Metrics) -> dict:
            return {
                "precision": m.precision,
                "recall": m.recall,
                "f": m.f,
                "undefined": m.undefined,
            }

        def rows(table: dict[str, RecallRow]) -> dict:
            return {k: {"total": r.total, "detected": r.detected, "recall": r.recall} for k, r in table.items()}

        return {
            "version": REPORT_FORMAT_VERSION,
            "method": self.method,
            "frames": self.frames,
            "metric": {
                "beta": self.metric.beta,
                "overlap_threshold": self.metric.overlap_threshold,
                "mode": self.metric.mode.value,
            },
            "classes": {
                c: {"tp": k.tp, "fp": k.fp, "fn": k.fn, **metrics(compute_metrics(k, self.metric))}
                for c, k in sorted(self.counts.per_class.items())
            },
            "aggregate": {
                "tp": self.counts.total.tp,
                "fp": self.counts.total.fp,
                "fn": self.counts.total.fn,
                **metrics(self.aggregate),
            },
            "conditions": rows(self.conditions),
            "sizes": rows(self.sizes),
            "groups": {
                name: {
                    "classes": list(g.classes),
                    "recall_mean": g.recall_mean,
                    "recall_std": g.recall_std,
                    "precision_mean": g.precision_mean,
                    "precision_std": g.precision_std,
                }
                for name, g in self.group_summary.items()
            },
            "group_members": {k: list(v) for k, v in sorted(self.groups.items())},
            "overlap_histogram": {
                "counts": list(self.histogram.counts),
                "cumulative": list(self.histogram.cumulative),
                "empty": self.histogram.empty,
            },
            "extras": dict(sorted(self.extras.items())),
        }

    @classmethod
    def from_dict(cls, data: dict) -> EvalReport:
        """Rebuild from stored counts; derived values are recomputed."""
        if data.get("version") != REPORT_FORMAT_VERSION:
            raise ConfigError(f"Unsupported report version {data.get('version')!r}")
        metric = MetricConfig(
            data["metric"]["beta"], data["metric"]["overlap_threshold"], OverlapMode(data["metric"]["mode"])
        )
        counts = ConfusionCounts(
            {c: ClassCounts(v["tp"], v["fp"], v["fn"]) for c, v in data["classes"].items()}
        )

        def rows(table: dict) -> dict[str, RecallRow]:
            return {k: RecallRow(v["total"], v["detected"]) for k, v in table.items()}

        return cls(
            method=data["method"],
            counts=counts,
            conditions=rows(data["conditions"]),
            sizes=rows(data["sizes"]),
            histogram=OverlapHistogram(tuple(data["overlap_histogram"]["counts"])),
            frames=data["frames"],
            metric=metric,
            groups={k: list(v) for k, v in data.get("group_members", {}).items()},
            extras=dict(data.get("extras", {})),
        )

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n"


def build_report(
    method: str,
    dets: list[Detection],
    gts: list[AnnotationRecord],
    frames: int,
    cfg: MetricConfig | None = None,
    groups: dict[str, list[str]] | None = None,
) -> tuple[EvalReport, MatchResult]:
    cfg = cfg or MetricConfig()
    result = match_detections(dets, gts, cfg)
    report = EvalReport(
        method=method,
        counts=result.counts,
        conditions=condition_breakdown(result, gts),
        sizes=size_breakdown(result, gts),
        histogram=overlap_histogram(result.assignments),
        frames=frames,
        metric=cfg,
        groups=dict(groups or {}),
    )
    return report, result


def _fmt_metric(value: float, defined: bool) -> str:
    return f"{value:6.3f}" if defined else "   n/a"


def render_text(report: EvalReport) -> str:
    lines = [f"method: {report.method}    frames: {report.frames}    overlap: {report.metric.mode.value}", ""]
    lines.append(f"{'class':<24} {'TP':>5} {'FP':>5} {'FN':>5} {'prec':>6} {'rec':>6} {'f':>6}")
    for name, m in report.per_class.items():
        k = report.counts.per_class[name]
        lines.append(
            f"{name:<24} {k.tp:5d} {k.fp:5d} {k.fn:5d} "
            f"{_fmt_metric(m.precision, m.precision_defined)} {_fmt_metric(m.recall, m.recall_defined)} {m.f:6.3f}"
        )
    agg, tot = report.aggregate, report.counts.total
    lines.append(
        f"{'ALL':<24} {tot.tp:5d} {tot.fp:5d} {tot.fn:5d} "
        f"{_fmt_metric(agg.precision, agg.precision_defined)} {_fmt_metric(agg.recall, agg.recall_defined)} {agg.f:6.3f}"
    )
    for title, table in (("condition", report.conditions), ("area", report.sizes)):
        lines += ["", f"{title:<28} {'n':>5} {'recall':>7}"]
        for key, row in table.items():
            rec = "      -" if row.empty else f"{row.recall:7.3f}"
            lines.append(f"{key:<28} {row.total:5d} {rec}")
    if report.group_summary:
        lines += ["", f"{'group':<20} {'rec mean':>9} {'rec std':>8} {'prec mean':>10} {'prec std':>9}"]
        for name, g in report.group_summary.items():
            lines.append(
                f"{name:<20} {g.recall_mean:9.3f} {g.recall_std:8.3f} {g.precision_mean:10.3f} {g.precision_std:9.3f}"
            )
    lines += ["", "overlap histogram" + (" (no true positives)" if report.histogram.empty else "")]
    for lo, n, cum in zip(report.histogram.edges, report.histogram.counts, report.histogram.cumulative):
        lines.append(f"  [{lo:.1f},{lo + 0.1:.1f}) {n:5d}  {cum:6.3f}")
    return "\n".join(lines) + "\n"


def write_overlap_csv(histogram: OverlapHistogram, path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["bin_low", "bin_high", "count", "cumulative"])
        for lo, n, cum in zip(histogram.edges, histogram.counts, histogram.cumulative):
            writer.writerow([f"{lo:.1f}", f"{lo + 0.1:.1f}", n, f"{cum:.6f}"])


def write_report(report: EvalReport, out_dir: str | Path, timing: TimingStats | None = None) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.json").write_text(report.to_json(), encoding="utf-8")
    (out / "report.txt").write_text(render_text(report), encoding="utf-8")
    write_overlap_csv(report.histogram, out / "overlap.csv")
    if timing is not None:
        (out / "timing.json").write_text(json.dumps(timing.to_dict(), sort_keys=True, indent=2) + "\n")
    logger.info("Wrote report for %s to %s", report.method, out)
    return out / "report.json"


def load_report(path: str | Path) -> EvalReport:
    path = Path(path)
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except (OSError, ValueError) as exc:
        raise ConfigError(f"Cannot read report {path}: {exc}") from exc
    try:
        return EvalReport.from_dict(data)
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"Malformed report {path}: {exc}") from exc
