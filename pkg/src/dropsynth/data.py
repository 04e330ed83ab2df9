"""Dataset ingestion, manifests, label files, and the resolution ladder.

All images are served as float32 arrays in [-1, 1], shaped H x W x C with
C in {1, 3}. Labels use the normalized center format ``class cx cy w h``
with class fixed to 0 (droplet).
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from PIL import Image, UnidentifiedImageError

from .detect import BoundingBox

log = logging.getLogger(__name__)

MANIFEST_VERSION = 1
IMAGE_EXTENSIONS = {".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff"}

MAX_STAGE = 9


def stage_resolution(stage: int) -> int:
    """Resolution of ladder stage i: 2**(i+1). Stage 1 is 4px, stage 9 is 1024px."""
    if not 1 <= stage <= MAX_STAGE:
        raise ValueError(f"stage must be in [1, {MAX_STAGE}], got {stage}")
    return 2 ** (stage + 1)


@dataclass(frozen=True)
class ResolutionLadder:
    """The progressive ladder of (stage index, resolution) pairs."""

    max_stage: int = MAX_STAGE

    def __post_init__(self):
        if not 1 <= self.max_stage <= MAX_STAGE:
            raise ValueError(f"max_stage must be in [1, {MAX_STAGE}]")

    @property
    def stages(self) -> list[tuple[int, int]]:
        return [(i, stage_resolution(i)) for i in range(1, self.max_stage + 1)]

    @property
    def max_resolution(self) -> int:
        return stage_resolution(self.max_stage)


@dataclass
class ManifestEntry:
    image: str
    label: str | None = None
    provenance: str = "real"  # real | synthetic
    quality_score: float | None = None
    checkpoint_id: str | None = None

    def __post_init__(self):
        if self.provenance not in ("real", "synthetic"):
            raise ValueError(f"bad provenance {self.provenance!r}")
        if self.provenance == "synthetic" and not self.checkpoint_id:
            raise ValueError(f"synthetic entry {self.image} missing checkpoint_id")


@dataclass
class DatasetManifest:
    """On-disk description of a dataset: per-split entries plus provenance.

    Serialized as a single JSON document so experiment runs diff cleanly.
    """

    resolution: int
    channels: int
    seed: int
    splits: dict[str, list[ManifestEntry]] = field(default_factory=dict)
    version: int = MANIFEST_VERSION

    def __post_init__(self):
        for name in self.splits:
            if name not in ("train", "val", "test"):
                raise ValueError(f"unknown split {name!r}")
        seen: set[str] = set()
        for entries in self.splits.values():
            for e in entries:
                if e.image in seen:
                    raise ValueError(f"duplicate image path {e.image}")
                seen.add(e.image)

    def entries(self, split: str) -> list[ManifestEntry]:
        return self.splits.get(split, [])

    @property
    def split_sizes(self) -> dict[str, int]:
        return {k: len(v) for k, v in self.splits.items()}

    def save(self, path: str | Path) -> None:
        doc = {
            "version": self.version,
            "resolution": self.resolution,
            "channels": self.channels,
            "seed": self.seed,
            "split_sizes": self.split_sizes,
            "splits": {k: [asdict(e) for e in v] for k, v in self.splits.items()},
        }
        Path(path).write_text(json.dumps(doc, indent=2) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "DatasetManifest":
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
        if doc.get("version") != MANIFEST_VERSION:
            raise ValueError(f"unsupported manifest version {doc.get('version')}")
        splits = {
            k: [ManifestEntry(**e) for e in v] for k, v in doc["splits"].items()
        }
        return cls(
            resolution=doc["resolution"],
            channels=doc["channels"],
            seed=doc["seed"],
            splits=splits,
        )


def load_image(path: str | Path, channels: int | None = None) -> np.ndarray:
    """Decode an image to a float32 H x W x C array in [-1, 1]."""
    with Image.open(path) as im:
        if channels == 1 or (channels is None and im.mode in ("L", "I;16")):
            im = im.convert("L")
        else:
            im = im.convert("RGB")
        arr = np.asarray(im, dtype=np.float32)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    return arr / 127.5 - 1.0


def save_image(pixels: np.ndarray, path: str | Path) -> None:
    """Write a [-1, 1] array as an 8-bit PNG, clamping out-of-range values."""
    arr = np.clip(pixels, -1.0, 1.0)
    arr = np.round((arr + 1.0) * 127.5).astype(np.uint8)
    if arr.ndim == 3 and arr.shape[2] == 1:
        arr = arr[:, :, 0]
    Image.fromarray(arr).save(path, format="PNG")


def _center_crop_square(arr: np.ndarray) -> np.ndarray:
    h, w = arr.shape[:2]
    side = min(h, w)
    top = (h - side) // 2
    left = (w - side) // 2
    return arr[top : top + side, left : left + side]


def _resize(arr: np.ndarray, size: int) -> np.ndarray:
    """Resize a [-1, 1] square array to size x size.

    Uses area (box) resampling when shrinking, bilinear when enlarging.
    """
    if arr.shape[0] == size:
        return arr
    mode = Image.BOX if arr.shape[0] > size else Image.BILINEAR
    out = np.empty((size, size, arr.shape[2]), dtype=np.float32)
    for c in range(arr.shape[2]):
        im = Image.fromarray(arr[:, :, c].astype(np.float32), mode="F")
        out[:, :, c] = np.asarray(im.resize((size, size), mode), dtype=np.float32)
    return np.clip(out, -1.0, 1.0)


def split_counts(n: int, ratios: Sequence[float]) -> tuple[int, int, int]:
    """Largest-remainder apportionment of n items into three splits."""
    if len(ratios) != 3:
        raise ValueError("expected three split ratios")
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError(f"split ratios must sum to 1, got {sum(ratios)}")
    raw = [n * r for r in ratios]
    counts = [math.floor(x) for x in raw]
    short = n - sum(counts)
    remainders = sorted(range(3), key=lambda i: raw[i] - counts[i], reverse=True)
    for i in remainders[:short]:
        counts[i] += 1
    return tuple(counts)  # type: ignore[return-value]


def prepare_dataset(
    source_dir: str | Path,
    out_dir: str | Path,
    target_resolution: int,
    split_ratios: Sequence[float] = (0.653, 0.174, 0.173),
    seed: int = 0,
    channels: int = 1,
) -> DatasetManifest:
    """Normalize a directory of images into a split dataset.

    Images are center-cropped square, resized to ``target_resolution``,
    written as PNGs under ``out_dir/<split>/``, and assigned to splits by a
    seeded shuffle. Sibling ``.txt`` label files are carried along when
    present. Undecodable files are skipped with a warning.
    """
    source_dir = Path(source_dir)
    out_dir = Path(out_dir)
    paths = sorted(
        p for p in source_dir.iterdir()
        if p.suffix.lower() in IMAGE_EXTENSIONS
    )
    if not paths:
        raise FileNotFoundError(f"no images found in {source_dir}")

    rng = np.random.default_rng(seed)
    order = rng.permutation(len(paths))
    n_train, n_val, n_test = split_counts(len(paths), split_ratios)
    assignment = ["train"] * n_train + ["val"] * n_val + ["test"] * n_test

    splits: dict[str, list[ManifestEntry]] = {"train": [], "val": [], "test": []}
    for split in splits:
        (out_dir / split).mkdir(parents=True, exist_ok=True)

    for idx, split in zip(order, assignment):
        src = paths[idx]
        try:
            arr = load_image(src, channels=channels)
        except (UnidentifiedImageError, OSError) as exc:
            log.warning("skipping undecodable image %s: %s", src, exc)
            continue
        arr = _resize(_center_crop_square(arr), target_resolution)
        dst = out_dir / split / (src.stem + ".png")
        save_image(arr, dst)
        label_src = src.with_suffix(".txt")
        label_dst = None
        if label_src.exists():
            label_dst = dst.with_suffix(".txt")
            label_dst.write_text(label_src.read_text())
        splits[split].append(
            ManifestEntry(
                image=str(dst),
                label=str(label_dst) if label_dst else None,
            )
        )

    manifest = DatasetManifest(
        resolution=target_resolution, channels=channels, seed=seed, splits=splits
    )
    manifest.save(out_dir / "manifest.json")
    return manifest


def downsample_area(arr: np.ndarray, size: int) -> np.ndarray:
    """Area-average a square H x W x C array down to size x size.

    Requires the input side to be an integer multiple of ``size``; this is
    always true along the power-of-two ladder.
    """
    h = arr.shape[0]
    if h == size:
        return arr
    if h % size != 0:
        raise ValueError(f"cannot area-average {h}px to {size}px")
    f = h // size
    return arr.reshape(size, f, size, f, arr.shape[2]).mean(axis=(1, 3))


def image_pyramid(pixels: np.ndarray, ladder: ResolutionLadder) -> list[np.ndarray]:
    """Downsample an image to every ladder resolution, coarsest first."""
    if pixels.shape[0] < ladder.max_resolution:
        raise ValueError(
            f"image side {pixels.shape[0]} is smaller than stage "
            f"{ladder.max_stage} resolution {ladder.max_resolution}"
        )
    return [downsample_area(pixels, res) for _, res in ladder.stages]


def write_labels(
    boxes: Iterable[BoundingBox], path: str | Path, image_size: int | None = None
) -> None:
    """Write boxes as ``0 cx cy w h`` lines, normalized, 6 decimal places.

    ``image_size`` is accepted for callers holding pixel-space context; boxes
    themselves are already normalized.
    """
    lines = []
    for b in boxes:
        cx = (b.x0 + b.x1) / 2
        cy = (b.y0 + b.y1) / 2
        w = b.x1 - b.x0
        h = b.y1 - b.y0
        lines.append(f"0 {cx:.6f} {cy:.6f} {w:.6f} {h:.6f}")
    Path(path).write_text("\n".join(lines) + ("\n" if lines else ""))


def read_labels(path: str | Path) -> list[BoundingBox]:
    """Parse a label file written by :func:`write_labels`."""
    boxes = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        if not line.strip():
            continue
        parts = line.split()
        if len(parts) != 5:
            raise ValueError(f"{path}:{lineno}: expected 5 fields, got {len(parts)}")
        try:
            cls = int(parts[0])
            cx, cy, w, h = (float(p) for p in parts[1:])
        except ValueError as exc:
            raise ValueError(f"{path}:{lineno}: {exc}") from None
        if cls != 0:
            raise ValueError(f"{path}:{lineno}: unexpected class {cls}")
        x0, x1 = cx - w / 2, cx + w / 2
        y0, y1 = cy - h / 2, cy + h / 2
        eps = 2e-6  # 6-decimal quantization can push edges slightly past [0, 1]
        if not (-eps <= x0 and x1 <= 1 + eps and -eps <= y0 and y1 <= 1 + eps):
            raise ValueError(f"{path}:{lineno}: box out of [0,1] range")
        boxes.append(
            BoundingBox(
                min(max(x0, 0.0), 1.0),
                min(max(y0, 0.0), 1.0),
                min(max(x1, 0.0), 1.0),
                min(max(y1, 0.0), 1.0),
            )
        )
    return boxes
