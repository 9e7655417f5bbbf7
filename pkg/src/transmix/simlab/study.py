"""Monte Carlo studies, bootstrap standard errors and nontransmission checks."""
from __future__ import annotations

import csv
import logging
import os
import time
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.optimize import linear_sum_assignment

from ..betacore import DegenerateSiteError, TriadDataset, compute_site_scales
from ..emcluster import EmConfig, MixtureState, SiteStats, hard_assignments, run_em, m_step_gamma
from ..modelselect import sweep_k
from .metrics import MetricsReport, evaluate_clustering, kmeans_baseline
from .scenarios import ScenarioSpec, generate_dataset

log = logging.getLogger(__name__)

METHODS = ("prop", "kmeans")


def task_seed(master: int, *index: int) -> int:
    """Seed for one task, derived from the master seed and the task index."""
    return int(np.random.SeedSequence([int(master), *map(int, index)]).generate_state(1)[0])


def nontransmission_detection(coefficients, assignments, truth, nontransmitted) -> float:
    """Share of truly nontransmitted sites placed in the near-zero-slope cluster.

    The near-zero-slope cluster is the inferred cluster whose slope vector
    ``(gamma1, gamma2)`` has the smallest Euclidean norm.
    """
    coefficients = np.atleast_2d(np.asarray(coefficients, dtype=float))
    target = int(np.argmin(np.linalg.norm(coefficients[:, 1:], axis=1)))
    sites = np.isin(np.asarray(truth), list(nontransmitted))
    if not sites.any():
        raise ValueError("truth contains no nontransmitted sites")
    return float(np.mean(np.asarray(assignments)[sites] == target))


@dataclass(frozen=True)
class ReplicateOutcome:
    replicate: int
    seed: int
    selected_k: int = 0
    selection_rule: str = ""
    bic_curve: tuple = ()
    prop: MetricsReport | None = None
    prop_true_k: MetricsReport | None = None
    kmeans: MetricsReport | None = None
    coefficients: np.ndarray | None = field(default=None, repr=False)
    nt_detection: float | None = None
    elapsed: float = 0.0
    error: str | None = None

    @property
    def ok(self) -> bool:
        return self.error is None


def run_replicate(spec: ScenarioSpec, replicate: int, k_range, config: EmConfig,
                  kmeans_starts: int = 1) -> ReplicateOutcome:
    """Generate one replicate, sweep K, evaluate EM and the K-means baseline."""
    seed = task_seed(spec.seed, replicate)
    start = time.perf_counter()
    try:
        data, truth = generate_dataset(spec.with_seed(seed))
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            stats = SiteStats.build(data, compute_site_scales(data))
        cfg = replace(config, seed=task_seed(config.seed, replicate))
        sweep = sweep_k(k_range=k_range, config=cfg, stats=stats)
        K = spec.n_clusters
        selected = sweep.selected_state
        true_state = sweep.states.get(K)
        if true_state is None:
            true_state = run_em(config=replace(cfg, n_clusters=K), stats=stats)
        prop = evaluate_clustering(hard_assignments(selected), truth, K)
        prop_k = evaluate_clustering(hard_assignments(true_state), truth, K)
        km = evaluate_clustering(kmeans_baseline(data, K, seed=task_seed(seed, 1), n_init=kmeans_starts),
                                 truth, K)
        nt = None
        if spec.nontransmitted:
            nt = nontransmission_detection(selected.coefficients, hard_assignments(selected), truth,
                                           spec.nontransmitted)
        return ReplicateOutcome(replicate, seed, sweep.selected_k, sweep.selection_rule,
                                tuple(sweep.curve()), prop, prop_k, km, true_state.coefficients, nt,
                                time.perf_counter() - start)
    except Exception as exc:  # a failed replicate is recorded, not fatal
        log.warning("replicate %d failed: %s", replicate, exc)
        return ReplicateOutcome(replicate, seed, elapsed=time.perf_counter() - start,
                                error=f"{type(exc).__name__}: {exc}")


@dataclass(frozen=True)
class StudyReport:
    spec: ScenarioSpec
    outcomes: tuple

    @property
    def successful(self) -> tuple:
        return tuple(o for o in self.outcomes if o.ok)

    @property
    def n_failed(self) -> int:
        return len(self.outcomes) - len(self.successful)

    def k_frequency(self) -> dict:
        counts = {}
        for o in self.successful:
            counts[o.selected_k] = counts.get(o.selected_k, 0) + 1
        return dict(sorted(counts.items()))

    def _reports(self, method: str):
        attr = {"prop": "prop", "prop_true_k": "prop_true_k", "kmeans": "kmeans"}[method]
        return [getattr(o, attr) for o in self.successful]

    def sensitivities(self, method: str = "prop") -> np.ndarray:
        """Replicates x clusters matrix of sensitivities."""
        return np.array([r.sensitivities for r in self._reports(method)])

    def specificities(self, method: str = "prop") -> np.ndarray:
        return np.array([r.specificities for r in self._reports(method)])

    def summary(self, method: str = "prop") -> dict:
        """Per-cluster mean and SD of sensitivity and specificity."""
        sens, spec = self.sensitivities(method), self.specificities(method)
        ddof = 1 if len(sens) > 1 else 0
        return {"sens_mean": sens.mean(axis=0), "sens_sd": sens.std(axis=0, ddof=ddof),
                "spec_mean": spec.mean(axis=0), "spec_sd": spec.std(axis=0, ddof=ddof)}

    def nt_detection(self) -> np.ndarray:
        return np.array([o.nt_detection for o in self.successful if o.nt_detection is not None])

    def write_tables(self, outdir) -> list:
        """Write the metric, K-frequency and per-replicate tables as CSV."""
        os.makedirs(outdir, exist_ok=True)
        paths = []
        path = os.path.join(outdir, "study_metrics.csv")
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["method", "cluster", "sens_mean", "sens_sd", "spec_mean", "spec_sd"])
            if self.successful:
                for method in ("prop", "prop_true_k", "kmeans"):
                    s = self.summary(method)
                    for k in range(self.spec.n_clusters):
                        w.writerow([method, k + 1] + [f"{s[c][k]:.6f}" for c in
                                                      ("sens_mean", "sens_sd", "spec_mean", "spec_sd")])
        paths.append(path)
        path = os.path.join(outdir, "k_frequency.csv")
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["k", "count"])
            for k, n in self.k_frequency().items():
                w.writerow([k, n])
        paths.append(path)
        path = os.path.join(outdir, "replicates.csv")
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["replicate", "seed", "selected_k", "rule", "nt_detection", "seconds", "error"])
            for o in self.outcomes:
                w.writerow([o.replicate, o.seed, o.selected_k, o.selection_rule,
                            "" if o.nt_detection is None else f"{o.nt_detection:.6f}",
                            f"{o.elapsed:.2f}", o.error or ""])
        paths.append(path)
        return paths


def run_mc_study(spec: ScenarioSpec, n_replicates: int, k_range=range(2, 9), config: EmConfig = None,
                 *, n_jobs: int = 1, kmeans_starts: int = 1) -> StudyReport:
    """Monte Carlo study of one scenario.

    Every replicate draws a fresh dataset, sweeps K over ``k_range``, scores
    the fit at the selected K and at the true K, and scores K-means at the
    true K.  Replicate ``r`` is seeded from ``(spec.seed, r)`` so results do
    not depend on ``n_jobs``.
    """
    if n_replicates < 1:
        raise ValueError("n_replicates must be at least 1")
    config = config or EmConfig(spec.n_clusters)
    ks = list(k_range)
    args = [(spec, r, ks, config, kmeans_starts) for r in range(n_replicates)]
    if n_jobs == 1:
        outcomes = [run_replicate(*a) for a in args]
    else:
        with ProcessPoolExecutor(max_workers=n_jobs) as pool:
            outcomes = list(pool.map(run_replicate, *zip(*args)))
    return StudyReport(spec, tuple(outcomes))


# -- bootstrap -----------------------------------------------------------------

@dataclass(frozen=True)
class BootstrapResult:
    n_reps: int
    n_skipped: int
    coefficient_se: np.ndarray          # K x 3
    replicates: np.ndarray = field(repr=False)   # usable reps x K x 3

    @property
    def n_used(self) -> int:
        return self.replicates.shape[0]


def _fixed_assignment_fit(stats: SiteStats, assignments, start) -> np.ndarray:
    K = start.shape[0]
    onehot = np.zeros((stats.n_sites, K))
    onehot[np.arange(stats.n_sites), assignments] = 1.0
    state = MixtureState(start, onehot.mean(axis=0), onehot)
    return m_step_gamma(state, stats=stats)


def _aligned_refit(stats: SiteStats, start, config: EmConfig) -> np.ndarray:
    state = run_em(config=replace(config, n_clusters=start.shape[0]), stats=stats)
    cost = np.linalg.norm(start[:, None, :] - state.coefficients[None, :, :], axis=2)
    rows, cols = linear_sum_assignment(cost)
    return state.coefficients[cols[np.argsort(rows)]]


def bootstrap_se(data: TriadDataset, assignments, point_coefficients, n_reps: int = 100,
                 seed: int = 0, *, full_refit: bool = False, config: EmConfig | None = None,
                 resamples=None) -> BootstrapResult:
    """Bootstrap standard errors of the cluster coefficients.

    Triads (columns) are resampled with replacement.  Each replicate
    re-estimates the site scales and, by default, refits every cluster's
    coefficients with the site assignments held fixed.  ``full_refit`` runs
    the whole EM instead and aligns its clusters to the point estimates by
    Hungarian matching on coefficient distance.

    Parameters
    ----------
    resamples
        Optional explicit list of column-index arrays, overriding the random
        draws (``n_reps`` is then its length).
    """
    start = np.atleast_2d(np.asarray(point_coefficients, dtype=float))
    assignments = np.asarray(assignments, dtype=int)
    if resamples is None:
        if n_reps < 2:
            raise ValueError("n_reps must be at least 2")
        rng = np.random.default_rng(seed)
        resamples = [rng.integers(0, data.n_triads, size=data.n_triads) for _ in range(n_reps)]
    n_reps = len(resamples)
    config = config or EmConfig(start.shape[0], seed=seed)
    reps, skipped = [], 0
    for r, cols in enumerate(resamples):
        boot = data.resample_triads(cols)
        try:
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", RuntimeWarning)
                stats = SiteStats.build(boot, compute_site_scales(boot))
        except DegenerateSiteError as exc:
            log.info("bootstrap replicate %d skipped: %s", r, exc)
            skipped += 1
            continue
        if full_refit:
            reps.append(_aligned_refit(stats, start, replace(config, seed=task_seed(seed, r))))
        else:
            reps.append(_fixed_assignment_fit(stats, assignments, start))
    reps = np.array(reps).reshape(-1, *start.shape)
    if reps.shape[0] < 2:
        warnings.warn("fewer than two usable bootstrap replicates", RuntimeWarning, stacklevel=2)
        se = np.full(start.shape, np.nan)
    else:
        se = reps.std(axis=0, ddof=1)
    return BootstrapResult(n_reps, skipped, se, reps)
