"""Binary K-means over scene features and internal/external cluster validity."""
from __future__ import annotations

import itertools
import logging
import math
import warnings
from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np
from scipy.spatial.distance import cdist

log = logging.getLogger(__name__)

INSHORE = "inshore"
OFFSHORE = "offshore"


@dataclass
class FeatureMatrix:
    rows: np.ndarray
    image_ids: List[str] = field(default_factory=list)

    def __post_init__(self):
        self.rows = np.asarray(self.rows, dtype=np.float64)
        if self.rows.ndim != 2 or self.rows.shape[0] < 2:
            raise ValueError(f"feature matrix needs >= 2 rows of equal dimension, got shape {self.rows.shape}")
        if not np.all(np.isfinite(self.rows)):
            raise ValueError("feature matrix contains non-finite values")
        if not self.image_ids:
            self.image_ids = [str(i) for i in range(self.rows.shape[0])]
        if len(self.image_ids) != self.rows.shape[0]:
            raise ValueError("image_ids must align with rows")


@dataclass
class ClusterResult:
    assignments: np.ndarray
    centroids: np.ndarray
    inertia: float
    iterations_used: int
    inertia_history: List[float] = field(default_factory=list)

    @property
    def k(self) -> int:
        return self.centroids.shape[0]

    def sizes(self) -> np.ndarray:
        return np.bincount(self.assignments, minlength=self.k)


@dataclass
class ValidityReport:
    calinski_harabasz: float
    davies_bouldin: float
    silhouette: float

    KEYS = ("Calinski-Harabasz-Index", "Davies-Bouldin-Index", "Silhouette-Coefficient")

    def to_text(self) -> str:
        values = (self.calinski_harabasz, self.davies_bouldin, self.silhouette)
        return "".join(f"{key} = {value!r}\n" for key, value in zip(self.KEYS, values))

    @classmethod
    def from_text(cls, text: str) -> "ValidityReport":
        found = {}
        for line in text.splitlines():
            if "=" in line:
                key, value = (part.strip() for part in line.split("=", 1))
                found[key] = float(value)
        return cls(*(found[k] for k in cls.KEYS))


def _matrix(features) -> np.ndarray:
    if isinstance(features, FeatureMatrix):
        return features.rows
    return FeatureMatrix(features).rows


def standardize(x: np.ndarray) -> np.ndarray:
    """Per-dimension zero mean / unit variance; constant dimensions are only centred."""
    std = x.std(axis=0)
    std[std == 0] = 1.0
    return (x - x.mean(axis=0)) / std


def _sq_dists(x: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    return np.stack([((x - c) ** 2).sum(axis=1) for c in centroids], axis=1)


def _kmeans_pp(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = x.shape[0]
    chosen = [int(rng.integers(n))]
    closest = ((x - x[chosen[0]]) ** 2).sum(axis=1)
    for _ in range(1, k):
        total = closest.sum()
        if total > 0:
            idx = int(rng.choice(n, p=closest / total))
        else:
            idx = int(rng.integers(n))
        chosen.append(idx)
        closest = np.minimum(closest, ((x - x[idx]) ** 2).sum(axis=1))
    return x[chosen].copy()


def _lloyd(x: np.ndarray, centroids: np.ndarray, max_iter: int, tol: float) -> ClusterResult:
    k = centroids.shape[0]
    history = []
    iterations = 0
    for iterations in range(1, max_iter + 1):
        d2 = _sq_dists(x, centroids)
        labels = d2.argmin(axis=1)  # ties -> lowest index
        own = d2[np.arange(len(x)), labels]
        history.append(float(own.sum()))
        new = centroids.copy()
        taken = set()
        for j in range(k):
            members = labels == j
            if members.any():
                new[j] = x[members].mean(axis=0)
                continue
            # reseed an empty cluster at the point farthest from its own centroid
            order = np.argsort(-own, kind="stable")
            pick = next((int(i) for i in order if int(i) not in taken), int(order[0]))
            taken.add(pick)
            new[j] = x[pick]
            log.warning("k-means: cluster %d emptied at iteration %d; reseeded at row %d", j, iterations, pick)
        shift = float(np.sqrt(((new - centroids) ** 2).sum(axis=1)).max())
        centroids = new
        if shift < tol:
            break
    d2 = _sq_dists(x, centroids)
    labels = d2.argmin(axis=1)
    inertia = float(d2[np.arange(len(x)), labels].sum())
    history.append(inertia)
    for before, after in zip(history, history[1:]):
        if after > before * (1 + 1e-12) + 1e-12:
            raise AssertionError(f"k-means inertia increased: {before} -> {after}")
    return ClusterResult(labels, centroids, inertia, iterations, history)


def kmeans(
    features,
    k: int = 2,
    seed: int = 0,
    max_iter: int = 300,
    tol: float = 1e-6,
    restarts: int = 10,
    normalize: bool = False,
) -> ClusterResult:
    """Lloyd's algorithm from k-means++ seeds; keeps the lowest-inertia restart."""
    x = _matrix(features)
    n = x.shape[0]
    if k < 2:
        raise ValueError("k must be >= 2")
    if k > n:
        raise ValueError(f"k={k} exceeds number of rows {n}")
    if restarts < 1:
        raise ValueError("restarts must be >= 1")
    if normalize:
        x = standardize(x)
    best: Optional[ClusterResult] = None
    for child in np.random.SeedSequence(seed).spawn(restarts):
        rng = np.random.default_rng(child)
        result = _lloyd(x, _kmeans_pp(x, k, rng), max_iter, tol)
        if best is None or result.inertia < best.inertia:
            best = result
    if (best.sizes() == 0).any():
        warnings.warn("k-means finished with an empty cluster (degenerate input)", RuntimeWarning, stacklevel=2)
    return best


def _groups(x: np.ndarray, assignments) -> List[np.ndarray]:
    labels = np.asarray(assignments)
    if labels.shape != (x.shape[0],):
        raise ValueError("assignments must align with feature rows")
    _, inverse = np.unique(labels, return_inverse=True)
    groups = [x[inverse == j] for j in range(inverse.max() + 1)]
    if len(groups) < 2:
        raise ValueError("validity indices need at least 2 nonempty clusters")
    return groups


def calinski_harabasz(features, assignments) -> float:
    """Between/within dispersion ratio; +inf (with a warning) when within-cluster scatter is zero."""
    x = _matrix(features)
    groups = _groups(x, assignments)
    n, k = x.shape[0], len(groups)
    if n <= k:
        raise ValueError(f"calinski_harabasz needs n > k, got n={n}, k={k}")
    mean = x.mean(axis=0)
    between = sum(len(g) * float(((g.mean(axis=0) - mean) ** 2).sum()) for g in groups)
    within = sum(float(((g - g.mean(axis=0)) ** 2).sum()) for g in groups)
    if within == 0:
        warnings.warn("calinski_harabasz: zero within-cluster dispersion", RuntimeWarning, stacklevel=2)
        return math.inf
    return (between / (k - 1)) / (within / (n - k))


def davies_bouldin(features, assignments) -> float:
    x = _matrix(features)
    groups = _groups(x, assignments)
    centroids = np.array([g.mean(axis=0) for g in groups])
    scatter = np.array([np.sqrt(((g - c) ** 2).sum(axis=1)).mean() for g, c in zip(groups, centroids)])
    sep = cdist(centroids, centroids)
    k = len(groups)
    off_diag = ~np.eye(k, dtype=bool)
    if np.any(sep[off_diag] == 0):
        raise ValueError("davies_bouldin: two clusters share a centroid")
    ratios = np.where(off_diag, (scatter[:, None] + scatter[None, :]) / np.where(off_diag, sep, 1.0), -np.inf)
    return float(ratios.max(axis=1).mean())


def silhouette(features, assignments) -> float:
    """Mean silhouette width over exact pairwise Euclidean distances; singletons score 0."""
    x = _matrix(features)
    _groups(x, assignments)
    n = x.shape[0]
    if n < 3:
        raise ValueError("silhouette needs at least 3 points")
    _, labels = np.unique(np.asarray(assignments), return_inverse=True)
    k = labels.max() + 1
    dist = cdist(x, x)
    sizes = np.bincount(labels, minlength=k)
    sums = np.stack([dist[:, labels == j].sum(axis=1) for j in range(k)], axis=1)
    own = sizes[labels]
    a = np.where(own > 1, sums[np.arange(n), labels] / np.maximum(own - 1, 1), 0.0)
    means = sums / sizes[None, :]
    means[np.arange(n), labels] = np.inf
    b = means.min(axis=1)
    denom = np.maximum(a, b)
    s = np.where((own > 1) & (denom > 0), (b - a) / np.where(denom > 0, denom, 1.0), 0.0)
    return float(s.mean())


def validity_report(features, assignments) -> ValidityReport:
    return ValidityReport(
        calinski_harabasz(features, assignments),
        davies_bouldin(features, assignments),
        silhouette(features, assignments),
    )


def minority_cluster(result: ClusterResult) -> int:
    """Index of the smaller cluster (index 0 on an exact tie, with a warning)."""
    if result.k != 2:
        raise ValueError(f"scene labelling needs k=2, got k={result.k}")
    sizes = result.sizes()
    if sizes[0] == sizes[1]:
        warnings.warn("clusters have equal size; labelling cluster 0 as inshore", RuntimeWarning, stacklevel=2)
        return 0
    return int(np.argmin(sizes))


def label_scenes(result: ClusterResult) -> List[str]:
    """Smaller cluster -> inshore, larger -> offshore, per row."""
    minority = minority_cluster(result)
    return [INSHORE if c == minority else OFFSHORE for c in result.assignments]


def external_accuracy(predicted: Sequence, reference: Sequence) -> float:
    """Agreement fraction under the best one-to-one relabelling of ``predicted``."""
    if len(predicted) != len(reference):
        raise ValueError(f"label lists differ in length: {len(predicted)} vs {len(reference)}")
    if not predicted:
        raise ValueError("no labels to compare")
    labels = sorted(set(predicted) | set(reference), key=str)
    best = 0
    for perm in itertools.permutations(labels):
        mapping = dict(zip(labels, perm))
        best = max(best, sum(mapping[p] == r for p, r in zip(predicted, reference)))
    return best / len(predicted)
