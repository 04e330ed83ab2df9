"""Augmentation experiment orchestration.

Pipeline: pseudo-label synthetic images with a detector trained on real
data, rank synthetic candidates by distributional quality, build the mixed
training ladder (real-only rung first, nested synthetic subsets above it),
train/evaluate the detector per rung on frozen val/test splits, and emit
the relative-improvement report.

The detector itself is an external backend behind a two-method contract;
a deterministic bright-blob matcher ships as the offline reference
implementation.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Protocol

import numpy as np
from scipy import ndimage

from . import fid as fid_mod
from .data import (
    DatasetManifest,
    ManifestEntry,
    load_image,
    read_labels,
    write_labels,
)
from .detect import (
    BoundingBox,
    DetectionRecord,
    DetectionReport,
    iou,
    map_suite,
    read_predictions,
    write_predictions,
)

log = logging.getLogger(__name__)


class DetectorBackend(Protocol):
    """Contract for an external detector; the harness never looks inside."""

    name: str

    def train(self, manifest_path: str | Path, out_dir: str | Path) -> Path:
        """Train on a manifest's train split; returns a model artifact path."""

    def predict(self, model_path: str | Path, image_dir: str | Path,
                out_path: str | Path) -> Path:
        """Run detection over a directory; writes a prediction file."""


class BlobDetector:
    """Deterministic stub backend: thresholded connected bright components.

    Training picks the intensity threshold (over a fixed candidate grid)
    that maximizes F1 of the component boxes against the ground-truth
    labels. Confidence is the component's peak brightness mapped to [0, 1].
    """

    name = "blob_stub"

    CANDIDATE_THRESHOLDS = np.linspace(-0.6, 0.8, 29)
    MIN_AREA = 2

    def train(self, manifest_path: str | Path, out_dir: str | Path) -> Path:
        manifest = DatasetManifest.load(manifest_path)
        entries = manifest.entries("train")
        if not entries:
            raise ValueError("empty train split")
        best_thr, best_f1 = 0.0, -1.0
        for thr in self.CANDIDATE_THRESHOLDS:
            tp = fp = fn = 0
            for e in entries:
                if not e.label:
                    continue
                gts = read_labels(e.label)
                preds = self._detect(load_image(e.image, channels=1), float(thr))
                matched = [False] * len(gts)
                for box, _ in preds:
                    hit = False
                    for j, gt in enumerate(gts):
                        if not matched[j] and iou(box, gt) >= 0.3:
                            matched[j] = True
                            hit = True
                            break
                    tp += hit
                    fp += not hit
                fn += matched.count(False)
            f1 = 2 * tp / max(2 * tp + fp + fn, 1)
            if f1 > best_f1:
                best_thr, best_f1 = float(thr), f1
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        model_path = out_dir / "blob_model.json"
        model_path.write_text(json.dumps(
            {"threshold": best_thr, "min_area": self.MIN_AREA, "f1": best_f1}
        ))
        return model_path

    def predict(self, model_path: str | Path, image_dir: str | Path,
                out_path: str | Path) -> Path:
        model = json.loads(Path(model_path).read_text())
        records = []
        for img_path in sorted(Path(image_dir).glob("*.png")):
            arr = load_image(img_path, channels=1)
            for box, conf in self._detect(arr, model["threshold"],
                                          model["min_area"]):
                records.append(DetectionRecord(img_path.stem, box, conf))
        write_predictions(records, out_path)
        return Path(out_path)

    def _detect(self, arr: np.ndarray, threshold: float,
                min_area: int | None = None) -> list[tuple[BoundingBox, float]]:
        min_area = self.MIN_AREA if min_area is None else min_area
        gray = arr[:, :, 0]
        labeled, n = ndimage.label(gray > threshold)
        size = gray.shape[0]
        out = []
        for s, idx in zip(ndimage.find_objects(labeled), range(1, n + 1)):
            if s is None:
                continue
            area = (s[0].stop - s[0].start) * (s[1].stop - s[1].start)
            if area < min_area:
                continue
            x0, x1 = s[1].start / size, s[1].stop / size
            y0, y1 = s[0].start / size, s[0].stop / size
            if x1 <= x0 or y1 <= y0:
                continue
            peak = float(gray[s][labeled[s] == idx].max())
            conf = float(np.clip((peak + 1.0) / 2.0, 0.0, 1.0))
            out.append((BoundingBox(x0, y0, min(x1, 1.0), min(y1, 1.0)), conf))
        return out


def pseudo_label(
    backend: DetectorBackend,
    model_path: str | Path,
    synthetic_manifest: DatasetManifest,
    confidence_floor: float,
    work_dir: str | Path,
    refine_hook=None,
) -> tuple[DatasetManifest, dict]:
    """Label a synthetic set with a real-data-trained detector.

    Predictions at or above ``confidence_floor`` become label files next to
    the images. ``refine_hook(image_path, boxes) -> boxes`` may rewrite
    labels before they are written; whether it ran is recorded in the
    returned stats together with per-image box counts.
    """
    work_dir = Path(work_dir)
    work_dir.mkdir(parents=True, exist_ok=True)
    entries = synthetic_manifest.entries("train")
    if not entries:
        raise ValueError("synthetic manifest has no train entries")
    image_dir = Path(entries[0].image).parent
    pred_path = backend.predict(model_path, image_dir, work_dir / "pseudo_preds.txt")
    by_image: dict[str, list[DetectionRecord]] = {}
    for r in read_predictions(pred_path):
        by_image.setdefault(r.image_id, []).append(r)

    new_entries = []
    counts, flagged = {}, []
    for e in entries:
        stem = Path(e.image).stem
        boxes = [r.box for r in by_image.get(stem, [])
                 if r.confidence >= confidence_floor]
        if refine_hook is not None:
            boxes = refine_hook(e.image, boxes)
        label_path = Path(e.image).with_suffix(".txt")
        write_labels(boxes, label_path)
        counts[stem] = len(boxes)
        if not boxes:
            flagged.append(stem)
        new_entries.append(ManifestEntry(
            image=e.image, label=str(label_path), provenance=e.provenance,
            quality_score=e.quality_score, checkpoint_id=e.checkpoint_id,
        ))
    stats = {
        "refinement_ran": refine_hook is not None,
        "confidence_floor": confidence_floor,
        "box_counts": counts,
        "empty_label_images": flagged,
    }
    (work_dir / "pseudo_label_stats.json").write_text(
        json.dumps(stats, indent=2) + "\n"
    )
    labeled = DatasetManifest(
        resolution=synthetic_manifest.resolution,
        channels=synthetic_manifest.channels,
        seed=synthetic_manifest.seed,
        splits={"train": new_entries},
    )
    return labeled, stats


def quality_rank(
    candidate_features: fid_mod.FeatureSet,
    reference_stats: fid_mod.GaussianStats,
    window: int = 64,
) -> np.ndarray:
    """Score candidates by distributional proximity to the reference.

    Each sliding window of ``window`` consecutive candidate rows gets an
    FID against the reference; a candidate's score is the negated mean FID
    of the windows containing it, so higher means closer to the real
    distribution. Deterministic for a fixed feature order.
    """
    if window < 2:
        raise ValueError("window must be >= 2")
    feats = candidate_features.features
    n = feats.shape[0]
    window = min(window, n)
    n_windows = n - window + 1
    window_fid = np.empty(n_windows)
    for w in range(n_windows):
        stats = fid_mod.fit_gaussian(
            fid_mod.FeatureSet(feats[w : w + window], candidate_features.extractor_id)
        )
        window_fid[w] = fid_mod.fid(reference_stats, stats)
    scores = np.empty(n)
    for j in range(n):
        lo = max(0, j - window + 1)
        hi = min(j, n_windows - 1)
        scores[j] = -window_fid[lo : hi + 1].mean()
    return scores


def build_mix(
    real_manifest: DatasetManifest,
    synthetic_manifest: DatasetManifest,
    rung_size: int,
    seed: int,
) -> DatasetManifest:
    """All real train entries plus the top synthetic entries up to rung_size.

    Synthetic entries are taken by quality_score descending with seeded
    shuffle as tiebreak; because the order is fixed per (pool, seed), the
    chosen subsets nest as the rung grows.
    """
    real = real_manifest.entries("train")
    if rung_size < len(real):
        raise ValueError(
            f"rung size {rung_size} below real count {len(real)}"
        )
    need = rung_size - len(real)
    pool = list(synthetic_manifest.entries("train"))
    if need > len(pool):
        raise ValueError(
            f"synthetic pool too small: need {need}, have {len(pool)} "
            f"(short by {need - len(pool)})"
        )
    rng = np.random.default_rng(seed)
    tiebreak = rng.permutation(len(pool))
    order = sorted(
        range(len(pool)),
        key=lambda i: (-(pool[i].quality_score or 0.0), tiebreak[i]),
    )
    chosen = [pool[i] for i in order[:need]]
    return DatasetManifest(
        resolution=real_manifest.resolution,
        channels=real_manifest.channels,
        seed=seed,
        splits={
            "train": real + chosen,
            "val": list(real_manifest.entries("val")),
            "test": list(real_manifest.entries("test")),
        },
    )


@dataclass
class ExperimentReport:
    """Per-rung metrics on frozen val/test splits plus relative improvements."""

    rungs: list[int]
    val_reports: list[DetectionReport]
    test_reports: list[DetectionReport]
    failures: dict[int, str] = field(default_factory=dict)

    METRICS = ("precision", "recall", "map50", "map50_95")

    def improvements(self, split: str = "val") -> list[dict[str, float]]:
        """Relative change of each metric vs the real-only rung, in percent."""
        reports = self.val_reports if split == "val" else self.test_reports
        base = reports[0]
        out = []
        for rep in reports:
            out.append({
                m: relative_improvement(getattr(rep, m), getattr(base, m))
                for m in self.METRICS
            })
        return out

    def to_dict(self) -> dict:
        return {
            "rungs": self.rungs,
            "val": [r.to_dict() for r in self.val_reports],
            "test": [r.to_dict() for r in self.test_reports],
            "val_improvement_pct": self.improvements("val"),
            "test_improvement_pct": self.improvements("test"),
            "failures": self.failures,
        }

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")

    def render_table(self) -> str:
        """Plain-text table with the val/test metric columns per rung."""
        header = (
            f"{'rung':>6} | "
            + " ".join(f"val_{m:<9}" for m in self.METRICS)
            + "| "
            + " ".join(f"test_{m:<8}" for m in self.METRICS)
        )
        lines = [header, "-" * len(header)]
        for k, rung in enumerate(self.rungs):
            v, t = self.val_reports[k], self.test_reports[k]
            cells = [f"{getattr(v, m):<13.3f}" for m in self.METRICS]
            cells += [f"{getattr(t, m):<13.3f}" for m in self.METRICS]
            lines.append(f"{rung:>6} | " + "".join(cells))
        return "\n".join(lines)


def relative_improvement(value: float, baseline: float) -> float:
    """(value - baseline) / baseline, in percent."""
    if baseline == 0:
        raise ValueError("baseline metric is zero; relative change undefined")
    return (value - baseline) / baseline * 100.0


def _evaluate_split(backend, model_path, manifest: DatasetManifest, split: str,
                    work_dir: Path, tag: str) -> DetectionReport:
    entries = manifest.entries(split)
    image_dir = Path(entries[0].image).parent
    pred_path = backend.predict(model_path, image_dir, work_dir / f"{tag}_preds.txt")
    preds_by_image: dict[str, list[DetectionRecord]] = {}
    for r in read_predictions(pred_path):
        preds_by_image.setdefault(r.image_id, []).append(r)
    gts = {
        Path(e.image).stem: read_labels(e.label) if e.label else []
        for e in entries
    }
    return map_suite(preds_by_image, gts)


def check_split_hygiene(manifests: list[DatasetManifest]) -> None:
    """No path in more than one split; val/test identical across rungs."""
    ref_val = [e.image for e in manifests[0].entries("val")]
    ref_test = [e.image for e in manifests[0].entries("test")]
    for m in manifests:
        sets = {s: {e.image for e in m.entries(s)} for s in ("train", "val", "test")}
        for a in ("train", "val", "test"):
            for b in ("train", "val", "test"):
                if a < b and sets[a] & sets[b]:
                    raise ValueError(f"split leakage between {a} and {b}")
        if [e.image for e in m.entries("val")] != ref_val:
            raise ValueError("val split differs across rungs")
        if [e.image for e in m.entries("test")] != ref_test:
            raise ValueError("test split differs across rungs")


def run_ladder(
    backend: DetectorBackend,
    real_manifest: DatasetManifest,
    synthetic_manifest: DatasetManifest,
    rungs: list[int],
    seed: int,
    work_dir: str | Path,
) -> ExperimentReport:
    """Train and evaluate the detector at every rung of the mixing ladder.

    The first rung must equal the real train count (the baseline). A rung
    failure is recorded and the remaining rungs still run; callers should
    treat any failure as a nonzero-exit condition.
    """
    if sorted(rungs) != rungs or len(set(rungs)) != len(rungs):
        raise ValueError("rungs must be strictly increasing")
    n_real = len(real_manifest.entries("train"))
    if rungs[0] != n_real:
        raise ValueError(f"first rung must be real-only ({n_real}), got {rungs[0]}")
    work_dir = Path(work_dir)
    work_dir.mkdir(parents=True, exist_ok=True)

    manifests = [
        build_mix(real_manifest, synthetic_manifest, rung, seed) for rung in rungs
    ]
    check_split_hygiene(manifests)

    val_reports, test_reports, failures = [], [], {}
    for rung, mixed in zip(rungs, manifests):
        rung_dir = work_dir / f"rung_{rung}"
        rung_dir.mkdir(exist_ok=True)
        manifest_path = rung_dir / "train_manifest.json"
        mixed.save(manifest_path)
        try:
            model_path = backend.train(manifest_path, rung_dir)
            val_reports.append(
                _evaluate_split(backend, model_path, mixed, "val", rung_dir, "val")
            )
            test_reports.append(
                _evaluate_split(backend, model_path, mixed, "test", rung_dir, "test")
            )
        except Exception as exc:
            log.error("rung %d failed: %s", rung, exc)
            failures[rung] = str(exc)
            break
    report = ExperimentReport(
        rungs=rungs[: len(val_reports)],
        val_reports=val_reports,
        test_reports=test_reports,
        failures=failures,
    )
    report.save(work_dir / "experiment_report.json")
    (work_dir / "experiment_table.txt").write_text(report.render_table() + "\n")
    return report
