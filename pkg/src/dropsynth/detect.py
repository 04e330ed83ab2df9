"""Box matching and detection metrics: IoU, precision/recall, AP, mAP suites.

Matching is greedy in descending confidence, the convention of the common
detection benchmarks. All coordinates are normalized to [0, 1] and there is
a single class (droplet), so mAP coincides with AP.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

COCO_IOU_THRESHOLDS = [0.50 + 0.05 * k for k in range(10)]


@dataclass(frozen=True)
class BoundingBox:
    """Axis-aligned box in normalized image coordinates, class fixed to 0."""

    x0: float
    y0: float
    x1: float
    y1: float

    def __post_init__(self):
        if not (0.0 <= self.x0 < self.x1 <= 1.0 and 0.0 <= self.y0 < self.y1 <= 1.0):
            raise ValueError(
                f"invalid box ({self.x0}, {self.y0}, {self.x1}, {self.y1})"
            )

    @property
    def area(self) -> float:
        return (self.x1 - self.x0) * (self.y1 - self.y0)


@dataclass(frozen=True)
class DetectionRecord:
    image_id: str
    box: BoundingBox
    confidence: float

    def __post_init__(self):
        if not 0.0 <= self.confidence <= 1.0:
            raise ValueError(f"confidence {self.confidence} outside [0, 1]")


@dataclass
class MatchResult:
    """Per-prediction TP/FP flags plus the unmatched ground-truth count."""

    iou_threshold: float
    flags: list[bool]  # True = TP, aligned with confidence-sorted predictions
    confidences: list[float]
    n_gt: int

    @property
    def tp(self) -> int:
        return sum(self.flags)

    @property
    def fp(self) -> int:
        return len(self.flags) - self.tp

    @property
    def fn(self) -> int:
        return self.n_gt - self.tp


def iou(a: BoundingBox, b: BoundingBox) -> float:
    """Intersection-over-union of two boxes; 0 when disjoint."""
    ix = max(0.0, min(a.x1, b.x1) - max(a.x0, b.x0))
    iy = max(0.0, min(a.y1, b.y1) - max(a.y0, b.y0))
    inter = ix * iy
    if inter == 0.0:
        return 0.0
    return inter / (a.area + b.area - inter)


def match(
    preds: Sequence[DetectionRecord],
    gts: Sequence[BoundingBox],
    iou_threshold: float,
) -> MatchResult:
    """Greedy confidence-ordered matching of predictions to ground truth.

    Each prediction, highest confidence first, claims the unclaimed GT with
    the highest IoU at or above the threshold; otherwise it is a false
    positive. Confidence ties break toward the earlier prediction.
    """
    if not 0.0 < iou_threshold < 1.0:
        raise ValueError(f"iou_threshold must be in (0, 1), got {iou_threshold}")
    order = sorted(range(len(preds)), key=lambda i: (-preds[i].confidence, i))
    claimed = [False] * len(gts)
    flags, confidences = [], []
    for i in order:
        best_j, best_iou = -1, 0.0
        for j, gt in enumerate(gts):
            if claimed[j]:
                continue
            v = iou(preds[i].box, gt)
            if v >= iou_threshold and v > best_iou:
                best_j, best_iou = j, v
        if best_j >= 0:
            claimed[best_j] = True
            flags.append(True)
        else:
            flags.append(False)
        confidences.append(preds[i].confidence)
    return MatchResult(iou_threshold, flags, confidences, len(gts))


def precision_recall(matches: Iterable[MatchResult]) -> tuple[float, float]:
    """Dataset-level precision and recall from per-image match results.

    With zero predictions, precision is defined as 1.0 so PR curves stay
    anchored at the no-prediction operating point.
    """
    tp = fp = fn = 0
    for m in matches:
        tp += m.tp
        fp += m.fp
        fn += m.fn
    if tp + fn == 0:
        raise ValueError("recall undefined: no ground-truth boxes in dataset")
    precision = tp / (tp + fp) if tp + fp > 0 else 1.0
    recall = tp / (tp + fn)
    return precision, recall


def _pr_points(matches: Sequence[MatchResult]) -> tuple[np.ndarray, np.ndarray]:
    """Cumulative precision/recall arrays over the confidence sweep."""
    n_gt = sum(m.n_gt for m in matches)
    pairs = []
    for m in matches:
        pairs.extend(zip(m.confidences, m.flags))
    pairs.sort(key=lambda p: -p[0])
    if not pairs:
        return np.array([]), np.array([])
    flags = np.array([f for _, f in pairs], dtype=np.float64)
    tp_cum = np.cumsum(flags)
    fp_cum = np.cumsum(1.0 - flags)
    precision = tp_cum / (tp_cum + fp_cum)
    recall = tp_cum / n_gt if n_gt > 0 else np.zeros_like(tp_cum)
    return precision, recall


def average_precision(
    matches: Sequence[MatchResult],
    interpolation: str = "all_point",
) -> float:
    """Area under the monotone precision envelope of the PR curve.

    ``all_point`` integrates exactly over every recall step; ``coco_101``
    samples the envelope at 101 evenly spaced recall levels.
    """
    if interpolation not in ("all_point", "coco_101"):
        raise ValueError(f"unknown interpolation {interpolation!r}")
    n_gt = sum(m.n_gt for m in matches)
    if n_gt == 0:
        raise ValueError("average precision undefined without ground truth")
    precision, recall = _pr_points(matches)
    if len(precision) == 0:
        return 0.0
    # Monotone non-increasing envelope, right to left.
    prec = np.concatenate(([0.0], precision, [0.0]))
    rec = np.concatenate(([0.0], recall, [1.0]))
    envelope = np.maximum.accumulate(prec[::-1])[::-1]
    if interpolation == "all_point":
        idx = np.where(rec[1:] != rec[:-1])[0]
        return float(np.sum((rec[idx + 1] - rec[idx]) * envelope[idx + 1]))
    samples = np.linspace(0.0, 1.0, 101)
    # Envelope precision at the first curve point with recall >= sample.
    ap = 0.0
    for s in samples:
        candidates = envelope[1:-1][recall >= s]
        ap += float(candidates[0]) if len(candidates) else 0.0
    return ap / 101.0


@dataclass
class DetectionReport:
    """Aggregate metrics plus the IoU-0.50 PR curve and max-F1 point."""

    map50: float
    map50_95: float
    precision: float
    recall: float
    pr_curve: list[tuple[float, float]] = field(default_factory=list)
    ap_per_iou: dict[str, float] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "map50": self.map50,
            "map50_95": self.map50_95,
            "precision": self.precision,
            "recall": self.recall,
            "ap_per_iou": self.ap_per_iou,
            "pr_curve": [list(p) for p in self.pr_curve],
        }

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "DetectionReport":
        doc = json.loads(Path(path).read_text())
        return cls(
            map50=doc["map50"],
            map50_95=doc["map50_95"],
            precision=doc["precision"],
            recall=doc["recall"],
            pr_curve=[tuple(p) for p in doc["pr_curve"]],
            ap_per_iou=doc.get("ap_per_iou", {}),
        )


def _max_f1_point(matches: Sequence[MatchResult]) -> tuple[float, float]:
    """Precision/recall at the confidence cut maximizing F1 on the 0.50 curve."""
    precision, recall = _pr_points(matches)
    if len(precision) == 0:
        return 1.0, 0.0
    f1 = 2 * precision * recall / np.maximum(precision + recall, 1e-12)
    k = int(np.argmax(f1))
    return float(precision[k]), float(recall[k])


def map_suite(
    preds_by_image: Mapping[str, Sequence[DetectionRecord]],
    gts_by_image: Mapping[str, Sequence[BoundingBox]],
    interpolation: str = "all_point",
) -> DetectionReport:
    """Evaluate a prediction set: mAP50, mAP50-95, max-F1 operating point.

    ``gts_by_image`` defines the image universe; predictions for unknown
    images are ignored.
    """
    ap_per_iou = {}
    matches50: list[MatchResult] = []
    for thr in COCO_IOU_THRESHOLDS:
        matches = [
            match(list(preds_by_image.get(img, [])), list(gts), thr)
            for img, gts in gts_by_image.items()
        ]
        ap_per_iou[f"{thr:.2f}"] = average_precision(matches, interpolation)
        if abs(thr - 0.50) < 1e-9:
            matches50 = matches
    map50 = ap_per_iou["0.50"]
    map50_95 = float(np.mean(list(ap_per_iou.values())))
    precision, recall = _max_f1_point(matches50)
    curve_p, curve_r = _pr_points(matches50)
    return DetectionReport(
        map50=map50,
        map50_95=map50_95,
        precision=precision,
        recall=recall,
        pr_curve=list(zip(curve_r.tolist(), curve_p.tolist())),
        ap_per_iou=ap_per_iou,
    )


def write_predictions(records: Iterable[DetectionRecord], path: str | Path) -> None:
    """Write ``image_id class confidence cx cy w h`` lines (normalized)."""
    lines = []
    for r in records:
        b = r.box
        cx, cy = (b.x0 + b.x1) / 2, (b.y0 + b.y1) / 2
        w, h = b.x1 - b.x0, b.y1 - b.y0
        lines.append(
            f"{r.image_id} 0 {r.confidence:.6f} {cx:.6f} {cy:.6f} {w:.6f} {h:.6f}"
        )
    Path(path).write_text("\n".join(lines) + ("\n" if lines else ""))


def read_predictions(path: str | Path) -> list[DetectionRecord]:
    records = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        if not line.strip():
            continue
        parts = line.split()
        if len(parts) != 7:
            raise ValueError(f"{path}:{lineno}: expected 7 fields, got {len(parts)}")
        image_id = parts[0]
        conf = float(parts[2])
        cx, cy, w, h = (float(p) for p in parts[3:])
        records.append(
            DetectionRecord(
                image_id=image_id,
                box=BoundingBox(cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2),
                confidence=conf,
            )
        )
    return records
