"""Grouping mobility-similar users with k-medoids on ``1 - SSIM`` distances."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from math import comb
from typing import Mapping, Sequence

import numpy as np

from fedmobfair.heatmap import SimilarityMatrix


class ClusteringError(ValueError):
    pass


@dataclass
class DistanceMatrix:
    user_ids: list[str]
    values: np.ndarray


@dataclass
class ClusterAssignment:
    user_ids: list[str]
    labels: np.ndarray
    medoids: list[int]
    cost: float
    cost_history: list[float] = field(default_factory=list)
    iterations: int = 0

    @property
    def k(self) -> int:
        return len(self.medoids)

    def as_dict(self) -> dict[str, int]:
        return {u: int(c) for u, c in zip(self.user_ids, self.labels)}

    def medoid_users(self) -> list[str]:
        return [self.user_ids[m] for m in self.medoids]

    def to_csv(self) -> bytes:
        return assignment_to_csv(self.as_dict())


def to_distance(sm: SimilarityMatrix) -> DistanceMatrix:
    d = np.clip(1.0 - np.asarray(sm.values, dtype=np.float64), 0.0, 2.0)
    d = 0.5 * (d + d.T)
    np.fill_diagonal(d, 0.0)
    return DistanceMatrix(list(sm.user_ids), d)


def _assign(d: np.ndarray, medoids: np.ndarray) -> np.ndarray:
    # argmin takes the first minimum, i.e. the lower cluster index on ties
    labels = np.argmin(d[:, medoids], axis=1)
    labels[medoids] = np.arange(len(medoids))
    return labels


def _cost(d: np.ndarray, medoids: np.ndarray, labels: np.ndarray) -> float:
    return float(d[np.arange(d.shape[0]), medoids[labels]].sum())


def _update_medoids(d: np.ndarray, labels: np.ndarray, k: int) -> np.ndarray:
    new = np.empty(k, dtype=np.int64)
    for c in range(k):
        members = np.flatnonzero(labels == c)
        totals = d[np.ix_(members, members)].sum(axis=1)
        new[c] = members[int(np.argmin(totals))]
    return new


def _best_swap(d: np.ndarray, medoids: np.ndarray, current: float):
    n = d.shape[0]
    best = (current, None)
    is_medoid = np.zeros(n, dtype=bool)
    is_medoid[medoids] = True
    for slot in range(len(medoids)):
        for h in range(n):
            if is_medoid[h]:
                continue
            trial = medoids.copy()
            trial[slot] = h
            cost = _cost(d, trial, _assign(d, trial))
            if cost < best[0] - 1e-12:
                best = (cost, trial)
    return best[1]


def kmedoids(d: DistanceMatrix | np.ndarray, k: int, seed: int, max_iters: int = 100,
             user_ids: Sequence[str] | None = None) -> ClusterAssignment:
    """PAM-style k-medoids on a precomputed distance matrix.

    Alternates nearest-medoid assignment with per-cluster medoid updates until
    stable, then tries single medoid/non-medoid swaps; an improving swap
    restarts the alternation. Total cost never increases.
    """
    if isinstance(d, DistanceMatrix):
        user_ids = d.user_ids
        values = np.asarray(d.values, dtype=np.float64)
    else:
        values = np.asarray(d, dtype=np.float64)
        user_ids = list(user_ids) if user_ids is not None else [str(i) for i in range(values.shape[0])]
    n = values.shape[0]
    if not 1 <= k <= n:
        raise ClusteringError(f"k must lie in [1, {n}], got {k}")

    rng = np.random.default_rng(seed)
    medoids = np.sort(rng.choice(n, size=k, replace=False)).astype(np.int64)
    labels = _assign(values, medoids)
    history = [_cost(values, medoids, labels)]
    it = 0
    while it < max_iters:
        it += 1
        new = _update_medoids(values, labels, k)
        if np.array_equal(new, medoids):
            swapped = _best_swap(values, medoids, history[-1])
            if swapped is None:
                break
            new = swapped
        medoids = new
        labels = _assign(values, medoids)
        history.append(_cost(values, medoids, labels))

    # canonical labels: clusters ordered by their medoid's user index
    order = np.argsort(medoids, kind="stable")
    remap = np.empty(k, dtype=np.int64)
    remap[order] = np.arange(k)
    return ClusterAssignment(
        user_ids=list(user_ids),
        labels=remap[labels],
        medoids=[int(m) for m in medoids[order]],
        cost=history[-1],
        cost_history=history,
        iterations=it,
    )


def silhouette(d: DistanceMatrix | np.ndarray, a: ClusterAssignment | Sequence[int]) -> float:
    values = np.asarray(d.values if isinstance(d, DistanceMatrix) else d, dtype=np.float64)
    labels = np.asarray(a.labels if isinstance(a, ClusterAssignment) else a)
    clusters = np.unique(labels)
    if len(clusters) < 2:
        raise ClusteringError("silhouette needs at least 2 clusters")
    n = values.shape[0]
    s = np.zeros(n)
    for i in range(n):
        own = labels == labels[i]
        if own.sum() == 1:
            continue
        a_i = values[i, own].sum() / (own.sum() - 1)
        b_i = min(values[i, labels == c].mean() for c in clusters if c != labels[i])
        denom = max(a_i, b_i)
        s[i] = 0.0 if denom == 0 else (b_i - a_i) / denom
    return float(s.mean())


def adjusted_rand_index(labels_true: Sequence, labels_pred: Sequence) -> float:
    t = np.unique(np.asarray(labels_true), return_inverse=True)[1]
    p = np.unique(np.asarray(labels_pred), return_inverse=True)[1]
    n = len(t)
    table = np.zeros((t.max() + 1, p.max() + 1), dtype=np.int64)
    np.add.at(table, (t, p), 1)
    sum_cells = sum(comb(int(v), 2) for v in table.ravel())
    sum_rows = sum(comb(int(v), 2) for v in table.sum(axis=1))
    sum_cols = sum(comb(int(v), 2) for v in table.sum(axis=0))
    total = comb(n, 2)
    expected = sum_rows * sum_cols / total if total else 0.0
    max_index = 0.5 * (sum_rows + sum_cols)
    if max_index == expected:
        return 1.0
    return float((sum_cells - expected) / (max_index - expected))


def assignment_to_csv(assignment: Mapping[str, int]) -> bytes:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["user_id", "cluster"])
    for uid in sorted(assignment):
        w.writerow([uid, int(assignment[uid])])
    return buf.getvalue().encode("utf-8")


def assignment_from_csv(data: bytes | str) -> dict[str, int]:
    text = data.decode("utf-8") if isinstance(data, bytes) else data
    reader = csv.DictReader(io.StringIO(text))
    if reader.fieldnames != ["user_id", "cluster"]:
        raise ClusteringError(f"expected header user_id,cluster, got {reader.fieldnames}")
    return {row["user_id"]: int(row["cluster"]) for row in reader}
