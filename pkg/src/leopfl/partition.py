"""Dirichlet non-IID partitioning and per-satellite test splits."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class PartitionPlan:
    alpha: float
    indices: list[np.ndarray]
    proportions: np.ndarray  # (classes, satellites), rows drawn from Dirichlet(alpha)

    @property
    def num_satellites(self) -> int:
        return len(self.indices)


def largest_remainder(weights: np.ndarray, total: int) -> np.ndarray:
    """Integer counts summing to ``total`` proportional to ``weights``."""
    weights = np.asarray(weights, dtype=np.float64)
    if total == 0 or weights.sum() == 0:
        return np.zeros(len(weights), dtype=np.int64)
    exact = weights / weights.sum() * total
    counts = np.floor(exact).astype(np.int64)
    short = total - int(counts.sum())
    order = np.lexsort((np.arange(len(weights)), -(exact - counts)))
    counts[order[:short]] += 1
    return counts


def dirichlet_partition(labels: np.ndarray, num_satellites: int, alpha: float, seed: int) -> PartitionPlan:
    labels = np.asarray(labels)
    if alpha <= 0:
        raise ValueError("Dirichlet concentration must be positive")
    if num_satellites < 1:
        raise ValueError("need at least one satellite")
    if len(labels) < num_satellites:
        raise ValueError("fewer samples than satellites")
    rng = np.random.default_rng(seed)
    classes = np.unique(labels)
    props = np.zeros((int(classes.max()) + 1, num_satellites))
    buckets: list[list[int]] = [[] for _ in range(num_satellites)]
    for c in classes:
        idx = np.flatnonzero(labels == c)
        rng.shuffle(idx)
        p = rng.dirichlet(np.full(num_satellites, alpha))
        props[c] = p
        counts = largest_remainder(p, len(idx))
        start = 0
        for n, k in enumerate(counts):
            buckets[n].extend(idx[start : start + k].tolist())
            start += k
    for n in range(num_satellites):
        if not buckets[n]:
            donor = max(range(num_satellites), key=lambda m: (len(buckets[m]), -m))
            buckets[n].append(buckets[donor].pop())
    return PartitionPlan(alpha, [np.sort(np.asarray(b, dtype=np.int64)) for b in buckets], props)


def label_entropy(labels: np.ndarray, classes: int) -> float:
    """Shannon entropy (nats) of a label multiset."""
    counts = np.bincount(np.asarray(labels, dtype=np.int64), minlength=classes).astype(np.float64)
    p = counts[counts > 0] / counts.sum()
    return float(-(p * np.log(p)).sum())


def mean_label_entropy(labels: np.ndarray, plan: PartitionPlan, classes: int) -> float:
    return float(np.mean([label_entropy(labels[idx], classes) for idx in plan.indices]))


def personalized_test_indices(test_labels: np.ndarray, train_labels: np.ndarray, classes: int,
                              size: int, rng: np.random.Generator) -> np.ndarray:
    """Draw a test subset whose label mix follows the satellite's own training mix."""
    want = largest_remainder(np.bincount(train_labels, minlength=classes), size)
    picked = []
    for c, k in enumerate(want):
        if k == 0:
            continue
        pool = np.flatnonzero(test_labels == c)
        if pool.size == 0:
            continue
        picked.extend(rng.choice(pool, size=k, replace=k > pool.size).tolist())
    return np.asarray(sorted(picked), dtype=np.int64)
