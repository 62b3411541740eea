"""Feature analysis: normalised pairwise distances with a Gaussian KDE, linear
CKA between layer activations, and Welch's two-sample t-test."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial.distance import pdist
from scipy.special import betainc

from .networks import extract_all_features

N_LAYERS = 5


class AnalysisError(ValueError):
    pass


@dataclass
class FeatureMatrix:
    values: np.ndarray
    layer_id: int = 5
    model_id: str = ""
    sample_ids: list[str] = field(default_factory=list)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2:
            raise AnalysisError(f"feature matrix must be 2-D, got shape {self.values.shape}")
        if not np.all(np.isfinite(self.values)):
            raise AnalysisError("feature matrix contains NaN or Inf")
        if not self.sample_ids:
            self.sample_ids = [str(i) for i in range(len(self.values))]
        if len(self.sample_ids) != len(self.values):
            raise AnalysisError("sample id count does not match feature rows")


@dataclass
class DistanceReport:
    distances: np.ndarray
    mean: float
    grid: np.ndarray
    density: np.ndarray
    bandwidth: float


def _values(f) -> np.ndarray:
    return f.values if isinstance(f, FeatureMatrix) else np.asarray(f, dtype=np.float64)


def pairwise_distances(features) -> np.ndarray:
    """Euclidean distances between all unordered pairs of L2-normalised rows."""
    x = _values(features)
    if x.ndim != 2 or len(x) < 2:
        raise AnalysisError("pairwise_distances needs at least 2 rows")
    norms = np.linalg.norm(x, axis=1, keepdims=True)
    return pdist(x / np.maximum(norms, 1e-12), "euclidean")


def scott_bandwidth(samples: np.ndarray) -> float:
    samples = np.asarray(samples, dtype=np.float64)
    return float(samples.std(ddof=1) * len(samples) ** (-0.2))


def gaussian_kde(samples, grid) -> np.ndarray:
    """Gaussian kernel density of ``samples`` evaluated at ``grid`` (Scott bandwidth)."""
    samples = np.asarray(samples, dtype=np.float64).ravel()
    if len(samples) < 2:
        raise AnalysisError("gaussian_kde needs at least 2 samples")
    if np.ptp(samples) == 0:
        raise AnalysisError("gaussian_kde: samples have zero variance (degenerate distribution)")
    h = scott_bandwidth(samples)
    u = (np.asarray(grid, dtype=np.float64)[:, None] - samples[None, :]) / h
    return np.exp(-0.5 * u * u).sum(axis=1) / (len(samples) * h * math.sqrt(2 * math.pi))


def kde_grid(samples, points: int = 256, pad: float = 3.0) -> np.ndarray:
    samples = np.asarray(samples, dtype=np.float64)
    h = scott_bandwidth(samples)
    return np.linspace(samples.min() - pad * h, samples.max() + pad * h, points)


def distance_report(features, points: int = 256) -> DistanceReport:
    d = pairwise_distances(features)
    grid = kde_grid(d, points)
    return DistanceReport(d, float(d.mean()), grid, gaussian_kde(d, grid), scott_bandwidth(d))


def distance_gain(report_caid: DistanceReport, report_base: DistanceReport) -> float:
    """Percent change of the mean distance relative to the baseline."""
    if report_base.mean == 0:
        raise AnalysisError("distance_gain: baseline mean distance is zero")
    return 100.0 * (report_caid.mean - report_base.mean) / report_base.mean


def linear_cka(x, y) -> float:
    x = _values(x)
    y = _values(y)
    if x.shape[0] != y.shape[0]:
        raise AnalysisError(f"linear_cka: row counts differ ({x.shape[0]} vs {y.shape[0]})")
    if x.shape[0] < 2:
        raise AnalysisError("linear_cka needs at least 2 rows")
    x = x - x.mean(axis=0)
    y = y - y.mean(axis=0)
    xx = np.linalg.norm(x.T @ x)
    yy = np.linalg.norm(y.T @ y)
    if xx == 0 or yy == 0:
        raise AnalysisError("linear_cka undefined: a centred feature matrix is all zeros")
    return float(np.linalg.norm(y.T @ x) ** 2 / (xx * yy))


def cka_reuse_table(model_before, model_after, probe_images: np.ndarray) -> list[tuple[int, float]]:
    """Per-layer CKA between two encoders on the same probe set, layers 1 to 5."""
    before = dict(model_before.named_parameters())
    after = dict(model_after.named_parameters())
    if before.keys() != after.keys() or any(before[k].shape != after[k].shape for k in before):
        raise AnalysisError("cka_reuse_table: encoder architectures differ")
    fa = extract_all_features(model_before, probe_images)
    fb = extract_all_features(model_after, probe_images)
    return [(layer + 1, linear_cka(fa[layer], fb[layer])) for layer in range(N_LAYERS)]


def t_sf_two_sided(t: float, df: float) -> float:
    """Two-sided tail probability of Student's t via the regularised incomplete beta."""
    return float(betainc(df / 2.0, 0.5, df / (df + t * t)))


def two_sample_ttest(a, b) -> tuple[float, float]:
    """Welch's unequal-variance t-test; returns ``(t, two-sided p)``."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if len(a) < 2 or len(b) < 2:
        raise AnalysisError("two_sample_ttest needs at least 2 samples per group")
    va = a.var(ddof=1) / len(a)
    vb = b.var(ddof=1) / len(b)
    diff = a.mean() - b.mean()
    se2 = va + vb
    if se2 == 0:
        return (0.0, 1.0) if diff == 0 else (math.copysign(math.inf, diff), 0.0)
    t = diff / math.sqrt(se2)
    df = se2 * se2 / (va * va / (len(a) - 1) + vb * vb / (len(b) - 1))
    return float(t), t_sf_two_sided(t, df)


def write_features_csv(fm: FeatureMatrix, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["sample_id"] + [f"f{j}" for j in range(fm.values.shape[1])])
        for sid, row in zip(fm.sample_ids, fm.values):
            w.writerow([sid] + [repr(float(v)) for v in row])


def read_features_csv(path, layer_id: int = 5, model_id: str = "") -> FeatureMatrix:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0][:1] != ["sample_id"]:
        raise AnalysisError(f"{path}: expected header starting with 'sample_id'")
    ids = [r[0] for r in rows[1:]]
    values = np.array([[float(v) for v in r[1:]] for r in rows[1:]], dtype=np.float64)
    return FeatureMatrix(values.reshape(len(ids), len(rows[0]) - 1), layer_id, model_id or Path(path).stem, ids)
