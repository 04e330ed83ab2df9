"""Frechet distance between image sets.

Features come from a pluggable extractor: the standard pretrained
Inception-V3 pool (2048-D, requires torchvision weights) or a tiny
fixed-seed random-convolution embedder (64-D, fully offline) used by the
desk-scale test suite. Gaussians are fit per set and the distance is

    ||mu_x - mu_g||^2 + Tr(Sx + Sg - 2 (Sx Sg)^{1/2})

with an eigendecomposition-based PSD matrix square root. A literal
variant replacing (Sx Sg)^{1/2} with Sx^{1/2} Sg^{1/2} is kept behind a
flag; the two agree whenever the covariances commute.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import torch
import torch.nn.functional as F

log = logging.getLogger(__name__)

TINY_EMBEDDER_DIM = 64
TINY_EMBEDDER_SEED = 1234
TINY_EMBEDDER_SIZE = 32
INCEPTION_DIM = 2048


@dataclass
class FeatureSet:
    """N x D feature matrix, one row per image."""

    features: np.ndarray
    extractor_id: str

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        if self.features.ndim != 2 or self.features.shape[0] < 2:
            raise ValueError("need an N x D matrix with N >= 2")
        if not np.isfinite(self.features).all():
            raise ValueError("non-finite feature entries")
        n, d = self.features.shape
        if n < d + 1:
            log.warning(
                "only %d samples for %d-D features; covariance will be singular",
                n, d,
            )

    def save(self, path: str | Path) -> None:
        np.savez(path, features=self.features, extractor_id=self.extractor_id)

    @classmethod
    def load(cls, path: str | Path) -> "FeatureSet":
        with np.load(path) as npz:
            return cls(npz["features"], str(npz["extractor_id"]))


@dataclass
class GaussianStats:
    mu: np.ndarray
    sigma: np.ndarray

    def __post_init__(self):
        self.mu = np.asarray(self.mu, dtype=np.float64)
        self.sigma = np.asarray(self.sigma, dtype=np.float64)
        if np.abs(self.sigma - self.sigma.T).max() > 1e-8:
            raise ValueError("covariance not symmetric")


@dataclass
class FidReport:
    fid: float
    n_real: int
    n_fake: int
    extractor_id: str
    formula_variant: str = "standard"

    def to_dict(self) -> dict:
        return {
            "fid": self.fid,
            "n_real": self.n_real,
            "n_fake": self.n_fake,
            "extractor_id": self.extractor_id,
            "formula_variant": self.formula_variant,
        }

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")


class _TinyEmbedder(torch.nn.Module):
    """Three random conv layers with a frozen seed; 64-D global-pool output."""

    def __init__(self):
        super().__init__()
        g = torch.Generator().manual_seed(TINY_EMBEDDER_SEED)
        widths = [1, 16, 32, TINY_EMBEDDER_DIM]
        self.weights = []
        for cin, cout in zip(widths, widths[1:]):
            w = torch.randn(cout, cin, 3, 3, generator=g) * (2.0 / (cin * 9)) ** 0.5
            self.weights.append(w)

    def forward(self, x):
        for i, w in enumerate(self.weights):
            x = F.conv2d(x, w, padding=1)
            x = F.leaky_relu(x, 0.2)
            if i < len(self.weights) - 1:
                x = F.avg_pool2d(x, 2)
        return x.mean(dim=(2, 3))


_tiny_embedder: _TinyEmbedder | None = None


def _as_tensor_batch(images: Sequence[np.ndarray], size: int) -> torch.Tensor:
    """Stack [-1, 1] H x W x C arrays into an N x 1 x size x size tensor."""
    out = []
    for arr in images:
        t = torch.from_numpy(np.asarray(arr, dtype=np.float32))
        if t.dim() == 2:
            t = t.unsqueeze(-1)
        t = t.permute(2, 0, 1).mean(dim=0, keepdim=True)  # collapse to gray
        mode = "area" if t.shape[-1] >= size else "bilinear"
        t = F.interpolate(t.unsqueeze(0), size=(size, size), mode=mode).squeeze(0)
        out.append(t)
    return torch.stack(out)


def extract_features(
    images: Sequence[np.ndarray], extractor: str = "tiny_embedder"
) -> FeatureSet:
    """Embed images ([-1, 1] float arrays) into feature rows.

    ``tiny_embedder`` is deterministic and offline; ``inception_v3`` needs
    torchvision with downloadable weights and fails with a pointer to
    tiny_embedder when they are unavailable.
    """
    if extractor == "tiny_embedder":
        global _tiny_embedder
        if _tiny_embedder is None:
            _tiny_embedder = _TinyEmbedder()
        with torch.no_grad():
            batch = _as_tensor_batch(images, TINY_EMBEDDER_SIZE)
            feats = _tiny_embedder(batch).numpy()
        return FeatureSet(feats, "tiny_embedder")
    if extractor == "inception_v3":
        return _inception_features(images)
    raise ValueError(f"unknown extractor {extractor!r}")


def _inception_features(images: Sequence[np.ndarray]) -> FeatureSet:
    try:
        from torchvision.models import Inception_V3_Weights, inception_v3

        model = inception_v3(weights=Inception_V3_Weights.DEFAULT)
    except Exception as exc:  # missing torchvision or weights download failure
        raise RuntimeError(
            "pretrained inception_v3 unavailable "
            f"({exc}); use extractor='tiny_embedder' for offline runs"
        ) from exc
    model.fc = torch.nn.Identity()
    model.eval()
    feats = []
    with torch.no_grad():
        for arr in images:
            t = torch.from_numpy(np.asarray(arr, dtype=np.float32))
            if t.dim() == 2:
                t = t.unsqueeze(-1)
            t = t.permute(2, 0, 1)
            if t.shape[0] == 1:
                t = t.expand(3, -1, -1)
            t = F.interpolate(
                t.unsqueeze(0), size=(299, 299), mode="bilinear",
                align_corners=False,
            )
            feats.append(model(t).squeeze(0).numpy())
    return FeatureSet(np.stack(feats), "inception_v3")


def fit_gaussian(fs: FeatureSet) -> GaussianStats:
    """Column mean and unbiased sample covariance, symmetrized."""
    x = fs.features
    if x.shape[0] < 2:
        raise ValueError("need at least 2 samples to fit a covariance")
    mu = x.mean(axis=0)
    centered = x - mu
    sigma = centered.T @ centered / (x.shape[0] - 1)
    sigma = (sigma + sigma.T) / 2
    return GaussianStats(mu, sigma)


def sqrtm_psd(a: np.ndarray, sym_tol: float = 1e-6) -> np.ndarray:
    """Symmetric PSD square root via eigendecomposition, eigenvalues clamped at 0."""
    a = np.asarray(a, dtype=np.float64)
    scale = max(np.abs(a).max(), 1.0)
    if np.abs(a - a.T).max() > sym_tol * scale:
        raise ValueError("matrix is not symmetric within tolerance")
    a = (a + a.T) / 2
    vals, vecs = np.linalg.eigh(a)
    vals = np.clip(vals, 0.0, None)
    return (vecs * np.sqrt(vals)) @ vecs.T


def fid(x: GaussianStats, g: GaussianStats, variant: str = "standard") -> float:
    """Frechet distance between two Gaussians.

    standard computes Tr((Sx Sg)^{1/2}) via the symmetrized product
    Sx^{1/2} Sg Sx^{1/2}; paper_literal uses Tr(Sx^{1/2} Sg^{1/2}).
    Small negative residue from numerics is clamped to zero.
    """
    if x.mu.shape != g.mu.shape:
        raise ValueError(
            f"dimension mismatch: {x.mu.shape[0]} vs {g.mu.shape[0]}"
        )
    if np.array_equal(x.mu, g.mu) and np.array_equal(x.sigma, g.sigma):
        return 0.0
    mean_term = float(np.sum((x.mu - g.mu) ** 2))
    if variant == "standard":
        root_x = sqrtm_psd(x.sigma)
        inner = sqrtm_psd(root_x @ g.sigma @ root_x)
        cross = float(np.trace(inner))
    elif variant == "paper_literal":
        cross = float(np.trace(sqrtm_psd(x.sigma) @ sqrtm_psd(g.sigma)))
    else:
        raise ValueError(f"unknown FID variant {variant!r}")
    trace_term = float(np.trace(x.sigma) + np.trace(g.sigma)) - 2.0 * cross
    value = mean_term + trace_term
    if -1e-6 < value < 0.0:
        value = 0.0
    return value


def fid_from_features(
    real: FeatureSet, fake: FeatureSet, variant: str = "standard"
) -> FidReport:
    if real.extractor_id != fake.extractor_id:
        raise ValueError(
            f"extractor mismatch: {real.extractor_id} vs {fake.extractor_id}"
        )
    value = fid(fit_gaussian(real), fit_gaussian(fake), variant)
    return FidReport(
        fid=value,
        n_real=real.features.shape[0],
        n_fake=fake.features.shape[0],
        extractor_id=real.extractor_id,
        formula_variant=variant,
    )
