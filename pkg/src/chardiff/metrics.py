"""Evaluation metrics: OCR counting, normalized edit distance, Frechet distance.

OCR counting is multiset-based and case-sensitive per image; accuracy is
per-image exact match of the full word sequence. The Frechet distance uses
the standard Gaussian form with the matrix square root taken through an
eigendecomposition of the symmetrized product.
"""

from __future__ import annotations

import json
from collections import Counter
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ValidationError

METRICS_SCHEMA = "chardiff-metrics/v1"


@dataclass
class OcrMetrics:
    precision: float
    recall: float
    f_score: float
    accuracy: float


def ocr_metrics(predictions: list[list[str]], ground_truth: list[list[str]]) -> OcrMetrics:
    """Corpus-level precision/recall/F over word multisets, plus accuracy.

    matched counts the per-image multiset intersection (case-sensitive);
    accuracy is the fraction of images whose predicted word sequence equals
    the ground truth exactly. Zero denominators give 0 by convention.
    """
    if len(predictions) != len(ground_truth):
        raise ValueError(
            f"{len(predictions)} predictions vs {len(ground_truth)} ground-truth lists"
        )
    matched = n_pred = n_gt = exact = 0
    for pred, gt in zip(predictions, ground_truth):
        inter = Counter(pred) & Counter(gt)
        matched += sum(inter.values())
        n_pred += len(pred)
        n_gt += len(gt)
        exact += pred == gt
    precision = matched / n_pred if n_pred else 0.0
    recall = matched / n_gt if n_gt else 0.0
    f_score = (
        2 * precision * recall / (precision + recall) if (precision + recall) else 0.0
    )
    accuracy = exact / len(predictions) if predictions else 0.0
    return OcrMetrics(precision, recall, f_score, accuracy)


def levenshtein(s1: str, s2: str) -> int:
    """Edit distance, O(len(s1) * len(s2)) dynamic program."""
    if len(s1) < len(s2):
        s1, s2 = s2, s1
    prev = list(range(len(s2) + 1))
    for i, c1 in enumerate(s1, 1):
        cur = [i]
        for j, c2 in enumerate(s2, 1):
            cur.append(min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (c1 != c2)))
        prev = cur
    return prev[-1]


def ned_similarity(s1: str, s2: str) -> float:
    """1 - levenshtein/max-length; 1.0 when both strings are empty."""
    if not s1 and not s2:
        return 1.0
    return 1.0 - levenshtein(s1, s2) / max(len(s1), len(s2))


# ---------------------------------------------------------------------------
# Frechet distance over feature statistics


@dataclass
class FeatureStats:
    mu: np.ndarray
    sigma: np.ndarray
    count: int


class DownsampleFeatures:
    """Default fixed feature transform: area-downsampled pixels + channel stats.

    grid x grid x 3 block means flattened, followed by per-channel mean and
    population variance (3 + 3 values). Seedless and version-stable, so
    desk-scale Frechet values are comparable across runs of this package --
    not comparable to any external FID implementation.
    """

    def __init__(self, grid: int = 8):
        self.grid = grid

    def __call__(self, image: np.ndarray) -> np.ndarray:
        image = np.asarray(image, dtype=np.float64)
        H, W, C = image.shape
        g = self.grid
        rows = np.arange(H) * g // H
        cols = np.arange(W) * g // W
        pooled = np.zeros((g, g, C))
        counts = np.zeros((g, g, 1))
        np.add.at(pooled, (rows[:, None], cols[None, :]), image)
        np.add.at(counts, (rows[:, None], cols[None, :]), 1.0)
        pooled /= counts
        channel = image.reshape(-1, C)
        return np.concatenate([pooled.ravel(), channel.mean(axis=0), channel.var(axis=0)])


def extract_feature_stats(images, extractor=None) -> FeatureStats:
    """Mean and unbiased covariance of extracted feature vectors."""
    extractor = extractor or DownsampleFeatures()
    feats = np.stack([np.asarray(extractor(im), dtype=np.float64) for im in images])
    if feats.shape[0] < 2:
        raise ValueError(f"need at least 2 images, got {feats.shape[0]}")
    mu = feats.mean(axis=0)
    sigma = np.cov(feats, rowvar=False, ddof=1)
    return FeatureStats(mu=mu, sigma=np.atleast_2d(sigma), count=feats.shape[0])


def _clipped_eigh(matrix: np.ndarray, tol: float):
    w, v = np.linalg.eigh((matrix + matrix.T) / 2.0)
    if w.min() < -tol:
        raise ValueError(
            f"matrix has eigenvalue {w.min():.3e} below the -{tol:.0e} clipping tolerance"
        )
    return np.clip(w, 0.0, None), v


def frechet_distance(a: FeatureStats, b: FeatureStats, tol: float = 1e-8) -> float:
    """|mu_a - mu_b|^2 + Tr(S_a + S_b - 2 (S_a S_b)^{1/2}).

    The product square root is computed as sqrt(S_a)^T S_b sqrt(S_a) (a
    symmetric matrix with the same spectrum as S_a S_b); eigenvalues within
    -tol of zero are clipped, anything lower is an error.
    """
    if a.mu.shape != b.mu.shape or a.sigma.shape != b.sigma.shape:
        raise ValueError(
            f"feature dimensions differ: {a.mu.shape}/{a.sigma.shape} vs {b.mu.shape}/{b.sigma.shape}"
        )
    wa, va = _clipped_eigh(a.sigma, tol)
    sqrt_a = (va * np.sqrt(wa)) @ va.T
    wp, _ = _clipped_eigh(sqrt_a @ b.sigma @ sqrt_a, tol)
    diff = a.mu - b.mu
    fid = float(diff @ diff + np.trace(a.sigma) + np.trace(b.sigma) - 2.0 * np.sqrt(wp).sum())
    return max(fid, 0.0)


# ---------------------------------------------------------------------------
# Metric reports


def write_metric_report(path, metrics: dict, corpus_hash: str, config_hash: str) -> dict:
    report = {
        "schema": METRICS_SCHEMA,
        "metrics": {k: float(v) for k, v in metrics.items()},
        "corpus_hash": corpus_hash,
        "config_hash": config_hash,
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(report, sort_keys=True, indent=1) + "\n")
    return report


def read_metric_report(path) -> dict:
    report = json.loads(Path(path).read_text())
    if report.get("schema") != METRICS_SCHEMA:
        raise ValidationError(f"unknown metric report schema {report.get('schema')!r}")
    return report
