"""Subset-sampling clustering for site counts too large for a single EM fit.

Random subsets of S sites are clustered independently; the pooled per-subset
coefficient vectors are then grouped by a weighted second-stage K-means, and
every site inherits the group of its subset-level cluster.
"""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np
from sklearn.cluster import KMeans

from .betacore import ScaleTable, TriadDataset
from .emcluster import EmConfig, MixtureState, OptimizerFailure, SiteStats, hard_assignments
from .modelselect import PLATEAU_FRACTION, KSweepResult, sweep_k

log = logging.getLogger(__name__)


def coverage_miss_pct(n_sites: int, subset_size: int, n_subsets: int) -> float:
    """Expected percentage of sites never drawn, ``100 (1 - S/J)^m``."""
    return 100.0 * (1.0 - subset_size / n_sites) ** n_subsets


def minimal_subset_count(n_sites: int, subset_size: int, miss_budget_pct: float) -> int:
    """Smallest m with ``100 (1 - S/J)^m <= eta``."""
    if not 0 < subset_size <= n_sites:
        raise ValueError(f"subset size must lie in 1..{n_sites}, got {subset_size}")
    if not 0 < miss_budget_pct < 100:
        raise ValueError("miss budget must lie strictly between 0 and 100 percent")
    if subset_size == n_sites:
        return 1
    # start from the closed-form estimate, then correct for rounding either way
    m = max(1, math.ceil(math.log(miss_budget_pct / 100.0) / math.log1p(-subset_size / n_sites)))
    while m > 1 and coverage_miss_pct(n_sites, subset_size, m - 1) <= miss_budget_pct:
        m -= 1
    while coverage_miss_pct(n_sites, subset_size, m) > miss_budget_pct:
        m += 1
    return m


@dataclass(frozen=True)
class SubsetPlan:
    n_sites: int
    subset_size: int
    n_subsets: int
    miss_budget_pct: float
    seed: int
    subsets: tuple = field(repr=False)
    forced: bool = False

    def __post_init__(self):
        if len(self.subsets) != self.n_subsets:
            raise ValueError("number of subsets does not match n_subsets")
        subsets = []
        for s in self.subsets:
            s = np.sort(np.asarray(s, dtype=np.intp))
            if s.size != self.subset_size or np.unique(s).size != s.size:
                raise ValueError(f"each subset needs {self.subset_size} distinct sites")
            if s.size and (s[0] < 0 or s[-1] >= self.n_sites):
                raise ValueError("subset index out of range")
            s.setflags(write=False)
            subsets.append(s)
        object.__setattr__(self, "subsets", tuple(subsets))

    @property
    def expected_miss_pct(self) -> float:
        return coverage_miss_pct(self.n_sites, self.subset_size, self.n_subsets)

    @property
    def satisfies_budget(self) -> bool:
        return self.expected_miss_pct <= self.miss_budget_pct

    def coverage(self) -> np.ndarray:
        """Number of subsets containing each site."""
        counts = np.zeros(self.n_sites, dtype=int)
        for s in self.subsets:
            counts[s] += 1
        return counts

    def uncovered(self) -> np.ndarray:
        return np.flatnonzero(self.coverage() == 0)


def _draw_subset(seed: int, index: int, attempt: int, n_sites: int, size: int) -> np.ndarray:
    rng = np.random.default_rng([seed, index, attempt])
    return np.sort(rng.choice(n_sites, size=size, replace=False))


def plan_subsets(n_sites: int, subset_size: int, miss_budget_pct: float = 1.0, seed: int = 0,
                 n_subsets: int | None = None) -> SubsetPlan:
    """Draw the random site subsets for a subset-sampling run.

    Parameters
    ----------
    n_sites, subset_size
        J and S.
    miss_budget_pct
        eta, the tolerated expected percentage of never-sampled sites.
    seed
        Master seed; subset ``i`` is drawn from the stream ``(seed, i)``.
    n_subsets
        Force m instead of solving for the minimal value.  A forced m may
        violate the budget; the plan then reports ``satisfies_budget=False``.
    """
    m_min = minimal_subset_count(n_sites, subset_size, miss_budget_pct)
    m = m_min if n_subsets is None else int(n_subsets)
    if m < 1:
        raise ValueError("n_subsets must be at least 1")
    subsets = tuple(_draw_subset(seed, i, 0, n_sites, subset_size) for i in range(m))
    plan = SubsetPlan(n_sites, subset_size, m, float(miss_budget_pct), seed, subsets,
                      forced=n_subsets is not None)
    if not plan.satisfies_budget:
        log.warning("m=%d subsets leave an expected %.3g%% of sites unsampled (budget %.3g%%)",
                    m, plan.expected_miss_pct, miss_budget_pct)
    return plan


@dataclass(frozen=True)
class Stage1Cluster:
    subset_id: int
    cluster_id: int
    coefficients: np.ndarray
    size: int


@dataclass(frozen=True)
class TwoStageResult:
    stage1_gammas: tuple
    final_coefficients: np.ndarray
    final_assignments: np.ndarray
    conflicts_resolved: int
    post_hoc: np.ndarray
    group_of_stage1: np.ndarray
    subset_k: tuple
    plan: SubsetPlan = field(repr=False)
    subset_curves: tuple = field(default=(), repr=False)
    stage1_states: tuple = field(default=(), repr=False, compare=False)

    @property
    def n_groups(self) -> int:
        return self.final_coefficients.shape[0]

    @property
    def mixing(self) -> np.ndarray:
        return np.bincount(self.final_assignments, minlength=self.n_groups) / self.final_assignments.size

    def write_stage1_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["subset", "cluster", "gamma0", "gamma1", "gamma2", "size", "group"])
            for row, g in zip(self.stage1_gammas, self.group_of_stage1):
                w.writerow([row.subset_id, row.cluster_id, *map(repr, map(float, row.coefficients)),
                            row.size, int(g)])


def subset_config(config: EmConfig, subset_id: int, attempt: int = 0) -> EmConfig:
    """EM settings for one subset, with a seed derived from (master seed, subset)."""
    seed = int(np.random.SeedSequence([config.seed, subset_id, attempt]).generate_state(1)[0])
    return replace(config, seed=seed)


def _fit_subset(stats: SiteStats, index, config, k_range) -> tuple[KSweepResult, MixtureState]:
    sweep = sweep_k(k_range=k_range, config=config, stats=stats.subset(index))
    return sweep, sweep.selected_state


def _group_ratio(points, weights, labels, centers) -> float:
    """Weighted within-group over between-group dispersion."""
    grand = np.average(points, axis=0, weights=weights)
    within = float(np.sum(weights * np.sum((points - centers[labels]) ** 2, axis=1)))
    sizes = np.bincount(labels, weights=weights, minlength=len(centers))
    between = float(np.sum(sizes * np.sum((centers - grand) ** 2, axis=1)))
    if within <= 0.0:
        return 0.0
    return within / between if between > 0.0 else math.inf


def group_coefficients(points, weights, max_groups: int, seed: int = 0,
                       fraction: float = PLATEAU_FRACTION):
    """Weighted K-means on coefficient vectors.

    The within/between ratio is computed for ``2..max_groups`` groups and the
    group count is read off its elbow with the same plateau rule used for the
    BIC curve: the smallest g whose drop to g+1 is below ``fraction`` of the
    largest drop.

    Returns ``(labels, centers)`` with groups ordered by decreasing weight.
    """
    points = np.asarray(points, dtype=float)
    weights = np.asarray(weights, dtype=float)
    n_distinct = len(np.unique(points, axis=0))
    if n_distinct <= 1 or max_groups <= 1:
        labels = np.zeros(len(points), dtype=int)
        return labels, np.average(points, axis=0, weights=weights)[None, :]
    fits, ratios = [], []
    for g in range(2, min(max_groups, n_distinct) + 1):
        km = KMeans(n_clusters=g, n_init=10, random_state=seed).fit(points, sample_weight=weights)
        fits.append((km.labels_, km.cluster_centers_))
        ratios.append(_group_ratio(points, weights, km.labels_, km.cluster_centers_))
        log.debug("second stage: %d groups, within/between %.4g", g, ratios[-1])
    drops = -np.diff(ratios)
    chosen = len(fits) - 1
    if drops.size and drops.max() > 0:
        small = np.flatnonzero(drops < fraction * drops.max())
        if small.size:
            chosen = int(small[0])
    labels, centers = fits[chosen]
    mass = np.bincount(labels, weights=weights, minlength=len(centers))
    order = np.argsort(-mass, kind="stable")
    rank = np.empty_like(order)
    rank[order] = np.arange(len(order))
    return rank[labels], centers[order]


def cluster_by_subsets(data: TriadDataset = None, scales: ScaleTable = None, plan: SubsetPlan = None,
                       config: EmConfig = None, k_range=range(1, 9), *, stats: SiteStats = None,
                       max_groups: int | None = None) -> TwoStageResult:
    """Two-stage clustering over the subsets of ``plan``.

    Each subset gets its own BIC sweep over ``k_range``.  The selected fit's
    non-empty clusters contribute (gamma, size) pairs to a weighted second
    stage.  Sites seen in subsets whose clusters fall in different groups, and
    sites no subset covered, are placed by their individual likelihood under
    the group centroids.  The second stage considers ``2..max_groups`` groups,
    with ``max_groups`` defaulting to the largest K selected in any subset.
    """
    if plan is None or config is None:
        raise ValueError("plan and config are required")
    if stats is None:
        stats = SiteStats.build(data, scales)
    if plan.n_sites != stats.n_sites:
        raise ValueError("plan was drawn for a different number of sites")
    ks = list(k_range)

    rows, states, subset_k, curves = [], [], [], []
    site_lists, label_lists = [], []
    for s, index in enumerate(plan.subsets):
        try:
            sweep, state = _fit_subset(stats, index, subset_config(config, s), ks)
        except (OptimizerFailure, ValueError) as exc:
            log.warning("subset %d failed (%s); redrawing once", s, exc)
            index = _draw_subset(plan.seed, s, 1, plan.n_sites, plan.subset_size)
            sweep, state = _fit_subset(stats, index, subset_config(config, s, 1), ks)
        labels = hard_assignments(state)
        counts = np.bincount(labels, minlength=state.n_clusters)
        for k in np.flatnonzero(counts):
            rows.append(Stage1Cluster(s, int(k), state.coefficients[k].copy(), int(counts[k])))
        states.append(state)
        subset_k.append(sweep.selected_k)
        curves.append(tuple(sweep.curve()))
        site_lists.append(np.asarray(index))
        label_lists.append(labels)
        log.info("subset %d: K=%d (%s)", s, sweep.selected_k, sweep.selection_rule)

    # every subset samples the same population, so no more groups than the
    # richest subset fit supports
    max_groups = max_groups or max(subset_k)
    points = np.array([r.coefficients for r in rows])
    weights = np.array([r.size for r in rows], dtype=float)
    group_labels, centers = group_coefficients(points, weights, max_groups, plan.seed)
    lookup = {(r.subset_id, r.cluster_id): int(g) for r, g in zip(rows, group_labels)}

    J = stats.n_sites
    candidates = [set() for _ in range(J)]
    for s, (index, labels) in enumerate(zip(site_lists, label_lists)):
        for j, k in zip(index, labels):
            candidates[j].add(lookup[(s, int(k))])

    site_ll = stats.child_loglik(centers)
    assignments = np.empty(J, dtype=int)
    conflicts = 0
    post_hoc = []
    for j, cand in enumerate(candidates):
        if len(cand) == 1:
            assignments[j] = next(iter(cand))
            continue
        if not cand:
            post_hoc.append(j)
            assignments[j] = int(np.argmax(site_ll[j]))
            continue
        conflicts += 1
        cand = sorted(cand)
        assignments[j] = cand[int(np.argmax(site_ll[j, cand]))]
    if post_hoc:
        log.warning("%d site(s) not covered by any subset were assigned post hoc", len(post_hoc))
    return TwoStageResult(tuple(rows), centers, assignments, conflicts, np.array(post_hoc, dtype=int),
                          group_labels, tuple(subset_k), plan, tuple(curves), tuple(states))
