"""Procedural droplet scenes: bright ellipses on dark noise, exact boxes.

The desk-scale stand-in for the high-speed-camera captures. Every scene
carries its ground-truth boxes, so pseudo-labeling quality and detector
metrics can be checked against an exact reference.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .data import DatasetManifest, ManifestEntry, save_image, write_labels
from .detect import BoundingBox


def generate_scene(
    rng: np.random.Generator,
    size: int = 64,
    max_droplets: int = 6,
    background: float = -0.85,
    noise_sigma: float = 0.04,
) -> tuple[np.ndarray, list[BoundingBox]]:
    """One grayscale scene in [-1, 1] with its droplet boxes."""
    img = np.full((size, size), background, dtype=np.float32)
    img += rng.normal(0.0, noise_sigma, size=(size, size)).astype(np.float32)
    boxes = []
    yy, xx = np.mgrid[0:size, 0:size]
    for _ in range(rng.integers(1, max_droplets + 1)):
        rx = rng.uniform(0.03, 0.09) * size
        ry = rx * rng.uniform(0.7, 1.3)
        cx = rng.uniform(rx + 1, size - rx - 1)
        cy = rng.uniform(ry + 1, size - ry - 1)
        brightness = rng.uniform(0.4, 1.0)
        mask = ((xx - cx) / rx) ** 2 + ((yy - cy) / ry) ** 2
        # Soft-edged ellipse: full brightness inside, falls off near the rim.
        profile = np.clip(1.0 - mask, 0.0, 1.0) ** 0.5
        img = np.maximum(img, (background + (brightness - background) * profile))
        boxes.append(
            BoundingBox(
                max((cx - rx) / size, 0.0),
                max((cy - ry) / size, 0.0),
                min((cx + rx) / size, 1.0),
                min((cy + ry) / size, 1.0),
            )
        )
    return np.clip(img, -1.0, 1.0)[:, :, None], boxes


def generate_corpus(
    out_dir: str | Path,
    counts: dict[str, int],
    size: int = 64,
    seed: int = 0,
    max_droplets: int = 6,
) -> DatasetManifest:
    """Write a split corpus of procedural scenes with label files."""
    out_dir = Path(out_dir)
    rng = np.random.default_rng(seed)
    splits: dict[str, list[ManifestEntry]] = {}
    for split, count in counts.items():
        (out_dir / split).mkdir(parents=True, exist_ok=True)
        entries = []
        for k in range(count):
            img, boxes = generate_scene(rng, size=size, max_droplets=max_droplets)
            img_path = out_dir / split / f"scene_{k:05d}.png"
            label_path = img_path.with_suffix(".txt")
            save_image(img, img_path)
            write_labels(boxes, label_path)
            entries.append(ManifestEntry(image=str(img_path), label=str(label_path)))
        splits[split] = entries
    manifest = DatasetManifest(resolution=size, channels=1, seed=seed, splits=splits)
    manifest.save(out_dir / "manifest.json")
    return manifest
