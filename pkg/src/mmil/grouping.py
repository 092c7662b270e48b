"""Grouping operators that split a bag into sub-bags, plus sub-bag masking.

All operators are pure functions of their inputs and seed.  A
:class:`Partition` records which sub-bag each instance belongs to and
which sub-bags are masked (dropped from every downstream computation).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .errors import ConfigurationError, DataError

GROUPING_OPERATORS = ("coordinate", "embedding", "random", "sequential")

KMEANS_MAX_ITER = 100
KMEANS_TOL = 1e-6


@dataclass(frozen=True)
class Partition:
    assignment: np.ndarray
    g: int
    masked: np.ndarray = field(default=None)  # type: ignore[assignment]
    seed: int = 0

    def __post_init__(self):
        a = np.asarray(self.assignment, dtype=np.int64)
        object.__setattr__(self, "assignment", a)
        m = np.zeros(self.g, dtype=bool) if self.masked is None else np.asarray(self.masked, dtype=bool)
        object.__setattr__(self, "masked", m)
        if self.g < 1:
            raise ConfigurationError(f"sub-bag count must be >= 1, got {self.g}")
        if m.shape != (self.g,):
            raise ConfigurationError(f"mask has {m.shape[0]} flags for {self.g} sub-bags")
        if a.size and (a.min() < 0 or a.max() >= self.g):
            raise ConfigurationError("assignment index outside [0, g)")
        if m.all():
            raise ConfigurationError("every sub-bag is masked")

    @property
    def n(self) -> int:
        return int(self.assignment.size)

    def sizes(self) -> np.ndarray:
        return np.bincount(self.assignment, minlength=self.g)

    def active(self) -> np.ndarray:
        """Indices of unmasked sub-bags, ascending."""
        return np.flatnonzero(~self.masked)

    def members(self, j: int) -> np.ndarray:
        """Instance indices of sub-bag ``j`` in original order."""
        return np.flatnonzero(self.assignment == j)

    def to_json(self) -> dict:
        return {
            "g": self.g,
            "assignment": self.assignment.tolist(),
            "masked": self.masked.tolist(),
            "seed": self.seed,
        }

    @classmethod
    def from_json(cls, record: dict) -> "Partition":
        return cls(np.array(record["assignment"]), int(record["g"]), np.array(record["masked"]), int(record["seed"]))

    def dumps(self) -> str:
        return json.dumps(self.to_json())


def _check_count(n: int, g: int) -> None:
    if g < 1:
        raise ConfigurationError(f"sub-bag count must be >= 1, got {g}")
    if g > n:
        raise ConfigurationError(f"cannot form {g} sub-bags from {n} instances")


# ---------------------------------------------------------------------------
# k-means


@dataclass
class KMeansResult:
    labels: np.ndarray
    centroids: np.ndarray
    objective: list[float]
    iterations: int


def _distances(x: np.ndarray, c: np.ndarray, metric: str) -> np.ndarray:
    if metric == "cosine":
        cn = c / np.linalg.norm(c, axis=1, keepdims=True)
        return 1.0 - x @ cn.T
    d = (x * x).sum(1)[:, None] - 2.0 * x @ c.T + (c * c).sum(1)[None, :]
    return np.maximum(d, 0.0)


def _update(x: np.ndarray, labels: np.ndarray, old: np.ndarray, metric: str) -> np.ndarray:
    g = old.shape[0]
    counts = np.bincount(labels, minlength=g)
    sums = np.zeros_like(old)
    np.add.at(sums, labels, x)
    new = old.copy()
    nz = counts > 0
    new[nz] = sums[nz] / counts[nz, None]
    if metric == "cosine":
        norms = np.linalg.norm(new, axis=1, keepdims=True)
        new = np.where(norms > 0, new / np.where(norms > 0, norms, 1.0), old)
    return new


def _repair_empty(x, labels, centroids, metric) -> bool:
    """Move the worst-fit point of a multi-member cluster into each empty cluster."""
    g = centroids.shape[0]
    changed = False
    while True:
        counts = np.bincount(labels, minlength=g)
        empty = np.flatnonzero(counts == 0)
        if empty.size == 0:
            return changed
        own = _distances(x, centroids, metric)[np.arange(len(x)), labels]
        own = np.where(counts[labels] > 1, own, -np.inf)
        i = int(np.argmax(own))
        labels[i] = empty[0]
        centroids[empty[0]] = x[i]
        changed = True


def kmeans_fit(
    points,
    g: int,
    seed: int = 0,
    max_iter: int = KMEANS_MAX_ITER,
    tol: float = KMEANS_TOL,
    metric: str = "euclidean",
) -> KMeansResult:
    """Lloyd iterations from a seeded farthest-point initialisation.

    The objective is the sum of squared distances (euclidean) or of
    ``1 - cos`` (cosine).  Empty clusters are repaired every iteration so
    every returned cluster has at least one member.
    """
    x = np.asarray(points, dtype=np.float64)
    if x.ndim != 2:
        raise DataError(f"points must be a 2-D array, got shape {x.shape}")
    n = x.shape[0]
    _check_count(n, g)
    if not np.all(np.isfinite(x)):
        raise DataError("points contain non-finite values")
    if metric == "cosine":
        norms = np.linalg.norm(x, axis=1)
        zero = np.flatnonzero(norms == 0)
        if zero.size:
            raise DataError(f"zero vector at index {int(zero[0])} under cosine metric")
        x = x / norms[:, None]
    elif metric != "euclidean":
        raise ConfigurationError(f"unknown k-means metric {metric!r}")

    rng = np.random.default_rng(seed)
    chosen = [int(rng.integers(n))]
    nearest = _distances(x, x[chosen], metric)[:, 0]
    for _ in range(1, g):
        nearest[chosen] = -np.inf
        nxt = int(np.argmax(nearest))
        chosen.append(nxt)
        nearest = np.minimum(nearest, _distances(x, x[[nxt]], metric)[:, 0])
    centroids = x[chosen].copy()

    labels = np.argmin(_distances(x, centroids, metric), axis=1)
    _repair_empty(x, labels, centroids, metric)
    history: list[float] = []
    it = 0
    for it in range(1, max_iter + 1):
        new = _update(x, labels, centroids, metric)
        shift = float(np.max(np.linalg.norm(new - centroids, axis=1)))
        centroids = new
        d = _distances(x, centroids, metric)
        labels = np.argmin(d, axis=1)
        _repair_empty(x, labels, centroids, metric)
        history.append(float(_distances(x, centroids, metric)[np.arange(n), labels].sum()))
        if shift < tol:
            break
    return KMeansResult(labels.astype(np.int64), centroids, history, it)


def kmeans(points, g: int, seed: int = 0, max_iter: int = KMEANS_MAX_ITER,
           tol: float = KMEANS_TOL, metric: str = "euclidean") -> Partition:
    result = kmeans_fit(points, g, seed=seed, max_iter=max_iter, tol=tol, metric=metric)
    return Partition(result.labels, g, seed=seed)


# ---------------------------------------------------------------------------
# operators


def group_coordinate(coords, g: int, seed: int = 0) -> Partition:
    if coords is None:
        raise ConfigurationError(
            "coordinate grouping needs patch coordinates; use the embedding, random or sequential operator"
        )
    c = np.asarray(coords, dtype=np.float64)
    if c.ndim != 2 or c.shape[1] != 2:
        raise DataError(f"coordinates must have shape (n, 2), got {c.shape}")
    return kmeans(c, g, seed=seed, metric="euclidean")


def group_embedding(embeddings, g: int, seed: int = 0) -> Partition:
    return kmeans(embeddings, g, seed=seed, metric="cosine")


def group_random(n: int, g: int, seed: int = 0) -> Partition:
    """Deal a seeded permutation round-robin into ``g`` sub-bags."""
    _check_count(n, g)
    perm = np.random.default_rng(seed).permutation(n)
    assignment = np.empty(n, dtype=np.int64)
    assignment[perm] = np.arange(n) % g
    return Partition(assignment, g, seed=seed)


def group_sequential(n: int, g: int) -> Partition:
    _check_count(n, g)
    base, extra = divmod(n, g)
    sizes = [base + 1] * extra + [base] * (g - extra)
    return Partition(np.repeat(np.arange(g), sizes), g, seed=0)


def apply_mask(p: Partition, ratio: float, seed: int = 0) -> Partition:
    """Flag ``floor(ratio * g)`` uniformly chosen sub-bags as masked."""
    if not 0.0 <= ratio < 1.0:
        raise ConfigurationError(f"mask ratio must lie in [0, 1), got {ratio}")
    count = mask_count(p.g, ratio)
    if count >= p.g:
        raise ConfigurationError(f"mask ratio {ratio} would mask all {p.g} sub-bags")
    masked = np.zeros(p.g, dtype=bool)
    if count:
        masked[np.random.default_rng(seed).choice(p.g, size=count, replace=False)] = True
    return replace(p, masked=masked)


def mask_count(g: int, ratio: float) -> int:
    # guard against 0.6 * 10 = 5.999... style float error
    return int(math.floor(ratio * g + 1e-9))


def group(operator: str, g: int, *, n: int | None = None, embeddings=None, coords=None,
          seed: int = 0) -> Partition:
    """Dispatch to one of :data:`GROUPING_OPERATORS` by name."""
    if operator == "coordinate":
        return group_coordinate(coords, g, seed)
    if operator == "embedding":
        return group_embedding(embeddings, g, seed)
    if n is None:
        n = len(embeddings if embeddings is not None else coords)
    if operator == "random":
        return group_random(n, g, seed)
    if operator == "sequential":
        return group_sequential(n, g)
    raise ConfigurationError(
        f"unknown grouping operator {operator!r}; choose one of {', '.join(GROUPING_OPERATORS)}"
    )


def size_histogram(p: Partition) -> list[int]:
    return p.sizes().tolist()


def summarize(partitions: Sequence[Partition]) -> list[dict]:
    return [{**q.to_json(), "sizes": size_histogram(q)} for q in partitions]
