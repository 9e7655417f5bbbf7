"""Matched-cluster sensitivity/specificity and the K-means baseline."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment
from sklearn.cluster import KMeans

from ..betacore import TriadDataset


@dataclass(frozen=True)
class ClusterMetrics:
    true_cluster: int
    sensitivity: float
    specificity: float
    tp: int
    fn: int
    tn: int
    fp: int


@dataclass(frozen=True)
class MetricsReport:
    per_cluster: tuple           # ClusterMetrics, one per true cluster
    matching: dict               # inferred label -> true label
    selected_k: int

    @property
    def sensitivities(self) -> np.ndarray:
        return np.array([m.sensitivity for m in self.per_cluster])

    @property
    def specificities(self) -> np.ndarray:
        return np.array([m.specificity for m in self.per_cluster])


def contingency(truth, inferred, n_true=None, n_inferred=None) -> np.ndarray:
    truth = np.asarray(truth, dtype=int)
    inferred = np.asarray(inferred, dtype=int)
    n_true = int(truth.max()) + 1 if n_true is None else n_true
    n_inferred = int(inferred.max()) + 1 if n_inferred is None else n_inferred
    table = np.zeros((n_true, n_inferred), dtype=np.int64)
    np.add.at(table, (truth, inferred), 1)
    return table


def match_labels(table) -> dict:
    """Inferred -> true label map maximising the number of matched sites."""
    rows, cols = linear_sum_assignment(table, maximize=True)
    return {int(c): int(r) for r, c in zip(rows, cols)}


def evaluate_clustering(inferred, truth, n_true_clusters: int | None = None) -> MetricsReport:
    """One-vs-rest sensitivity and specificity per true cluster after matching.

    Sites in inferred clusters left unmatched (more inferred than true
    clusters) count as false positives for every true cluster.
    """
    inferred = np.asarray(inferred, dtype=int)
    truth = np.asarray(truth, dtype=int)
    if inferred.shape != truth.shape:
        raise ValueError("inferred and truth must have equal length")
    names, inferred = np.unique(inferred, return_inverse=True)
    n_true = int(truth.max()) + 1 if n_true_clusters is None else int(n_true_clusters)
    table = contingency(truth, inferred, n_true)
    # order inferred columns by their counts so that ties in the assignment
    # are broken by content, never by label names
    order = np.lexsort(-table[::-1])
    table = table[:, order]
    matching = match_labels(table)
    unmatched = [c for c in range(table.shape[1]) if c not in matching]
    by_true = {t: c for c, t in matching.items()}
    J = truth.size
    col_sizes = table.sum(axis=0)
    out = []
    for t in range(n_true):
        n_t = int(table[t].sum())
        c = by_true.get(t)
        tp = int(table[t, c]) if c is not None else 0
        fp = int(col_sizes[c] - tp) if c is not None else 0
        fp += int(sum(col_sizes[u] - table[t, u] for u in unmatched))
        fn = n_t - tp
        tn = J - n_t - fp
        sens = tp / n_t if n_t else float("nan")
        spec = tn / (tn + fp) if tn + fp else float("nan")
        out.append(ClusterMetrics(t, sens, spec, tp, fn, tn, fp))
    matching = {int(names[order[c]]): t for c, t in matching.items()}
    return MetricsReport(tuple(out), matching, int(table.shape[1]))


def mean_methylation(data: TriadDataset) -> np.ndarray:
    """J x 3 matrix of per-site sample means for father, mother and child."""
    return np.column_stack([data.father.mean(axis=1), data.mother.mean(axis=1),
                            data.child.mean(axis=1)])


def kmeans_baseline(data: TriadDataset, k: int, seed: int = 0, n_init: int = 1,
                    init: str = "random") -> np.ndarray:
    """Lloyd's K-means on per-site mean methylation triples.

    The default (one start, centres drawn from random rows) mirrors the usual
    R ``kmeans`` call; raise ``n_init`` or pass ``init="k-means++"`` for a
    multi-start baseline.
    """
    if k < 1:
        raise ValueError("k must be at least 1")
    features = mean_methylation(data)
    if k == 1:
        return np.zeros(data.n_sites, dtype=int)
    km = KMeans(n_clusters=k, init=init, n_init=n_init, algorithm="lloyd", random_state=seed)
    return km.fit_predict(features).astype(int)
