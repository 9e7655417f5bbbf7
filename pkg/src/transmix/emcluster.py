"""Empirical EM for a mixture of beta regressions over methylation sites.

Each cluster k carries coefficients ``(g0, g1, g2)``; a site j in cluster k has
child mean ``expit(g0 + g1*M_j + g2*F_j)`` where ``M_j``/``F_j`` are the
empirical logit-means of the mother and father values.  The child precision
and the parental Beta laws stay at their per-site empirical estimates, so EM
only iterates over mixing proportions and coefficients.
"""
from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.special import logsumexp

from . import kernels
from .betacore import (ScaleTable, SiteScales, TriadDataset, beta_log_density,
                       inverse_logit, parental_loglik)

log = logging.getLogger(__name__)

MU_EPS = 1e-12
#: total responsibility below which a cluster is frozen as a null cluster
EMPTY_CLUSTER_MASS = 1e-8
#: responsibilities below this are skipped while optimising one cluster
ACTIVE_WEIGHT = 1e-14


class OptimizerFailure(RuntimeError):
    """The M-step could not find an ascent direction."""


@dataclass(frozen=True)
class ClusterCoefficients:
    gamma0: float
    gamma1: float
    gamma2: float

    def __post_init__(self):
        if not np.all(np.isfinite(self.as_array())):
            raise ValueError("cluster coefficients must be finite")

    def as_array(self) -> np.ndarray:
        return np.array([self.gamma0, self.gamma1, self.gamma2], dtype=float)

    @classmethod
    def from_array(cls, values) -> "ClusterCoefficients":
        g0, g1, g2 = (float(v) for v in values)
        return cls(g0, g1, g2)


@dataclass(frozen=True)
class EmConfig:
    n_clusters: int
    tol: float = 1e-7
    max_iter: int = 500
    n_restarts: int = 5
    seed: int = 0

    def __post_init__(self):
        if self.n_clusters < 1:
            raise ValueError("n_clusters must be at least 1")
        if not self.tol > 0:
            raise ValueError("tol must be positive")
        if self.n_restarts < 1:
            raise ValueError("n_restarts must be at least 1")
        if self.max_iter < 1:
            raise ValueError("max_iter must be at least 1")


@dataclass(frozen=True)
class MixtureState:
    coefficients: np.ndarray          # K x 3
    mixing: np.ndarray                # K
    responsibilities: np.ndarray      # J x K
    loglik_trace: tuple = ()
    iteration: int = 0
    converged: bool = False
    null_clusters: tuple = ()

    @property
    def n_clusters(self) -> int:
        return self.coefficients.shape[0]

    @property
    def loglik(self) -> float:
        return self.loglik_trace[-1] if self.loglik_trace else float("nan")

    @property
    def clusters(self) -> list[ClusterCoefficients]:
        return [ClusterCoefficients.from_array(g) for g in self.coefficients]


@dataclass(frozen=True)
class SiteStats:
    """Sufficient statistics of the child values plus fixed per-site terms."""

    slog: np.ndarray        # sum_i log y_ij
    slog1m: np.ndarray      # sum_i log(1 - y_ij)
    n_triads: int
    phi: np.ndarray         # child precision
    mlogit: np.ndarray
    flogit: np.ndarray
    child_logit: np.ndarray
    parental: np.ndarray = field(repr=False)   # parental log-density per site

    @classmethod
    def build(cls, data: TriadDataset, scales: ScaleTable) -> "SiteStats":
        y = data.child
        c = lambda a: np.ascontiguousarray(a, dtype=float)  # noqa: E731
        return cls(
            slog=c(np.log(y).sum(axis=1)),
            slog1m=c(np.log1p(-y).sum(axis=1)),
            n_triads=data.n_triads,
            phi=c(scales.child_precision),
            mlogit=c(scales.mother_logit),
            flogit=c(scales.father_logit),
            child_logit=c(scales.child_logit),
            parental=parental_loglik(data, scales),
        )

    @property
    def n_sites(self) -> int:
        return self.slog.shape[0]

    def subset(self, index) -> "SiteStats":
        index = np.asarray(index)
        return SiteStats(*(np.ascontiguousarray(getattr(self, f)[index]) if f != "n_triads"
                           else self.n_triads
                           for f in ("slog", "slog1m", "n_triads", "phi", "mlogit",
                                     "flogit", "child_logit", "parental")))

    def design(self) -> np.ndarray:
        return np.column_stack([np.ones(self.n_sites), self.mlogit, self.flogit])

    def child_loglik(self, coefficients) -> np.ndarray:
        """J x K matrix of summed child log-densities under each cluster."""
        g = np.ascontiguousarray(np.atleast_2d(coefficients), dtype=float)
        return kernels.loglik_matrix(g, self.slog, self.slog1m, float(self.n_triads),
                                     self.phi, self.mlogit, self.flogit)

    def cluster_objective(self, gamma, weights):
        """Weighted child log-likelihood of one cluster and its gradient."""
        return kernels.cluster_objective(
            np.ascontiguousarray(gamma, dtype=float), np.ascontiguousarray(weights, dtype=float),
            self.slog, self.slog1m, float(self.n_triads), self.phi, self.mlogit, self.flogit)


def _stats(data, scales, stats):
    if stats is not None:
        return stats
    if data is None or scales is None:
        raise ValueError("either stats or both data and scales are required")
    return SiteStats.build(data, scales)


# -- single-site evaluations ---------------------------------------------------

def child_cluster_mean(coeff: ClusterCoefficients, site: SiteScales) -> float:
    eta = coeff.gamma0 + coeff.gamma1 * site.logit_mean_mother + coeff.gamma2 * site.logit_mean_father
    return float(np.clip(inverse_logit(eta), MU_EPS, 1.0 - MU_EPS))


def site_cluster_loglik(site_index: int, coeff: ClusterCoefficients, data: TriadDataset,
                        scales: ScaleTable) -> float:
    """Log-likelihood of all triads at one site if the site belongs to ``coeff``'s cluster.

    Includes the mother and father terms, which do not depend on the cluster.
    """
    if not 0 <= site_index < data.n_sites:
        raise IndexError(f"site index {site_index} out of range")
    site = scales.site(site_index)
    mu = child_cluster_mean(coeff, site)
    phi = site.child_precision
    total = beta_log_density(data.child[site_index], alpha=mu * phi, beta=(1.0 - mu) * phi).sum()
    total += beta_log_density(data.mother[site_index], site.mother).sum()
    total += beta_log_density(data.father[site_index], site.father).sum()
    return float(total)


# -- EM steps ------------------------------------------------------------------

def _responsibilities(log_joint):
    """Row-normalise a J x K matrix of log(pi_k) + loglik_jk in log-space."""
    log_norm = logsumexp(log_joint, axis=1, keepdims=True)
    bad = ~np.isfinite(log_norm[:, 0])
    with np.errstate(invalid="ignore"):
        resp = np.exp(log_joint - log_norm)
    if np.any(bad):
        warnings.warn(f"{int(bad.sum())} site(s) have zero likelihood under every cluster; "
                      "using uniform responsibilities", RuntimeWarning, stacklevel=3)
        resp[bad] = 1.0 / log_joint.shape[1]
    return resp, log_norm[:, 0]


def _log_joint(coefficients, mixing, stats):
    with np.errstate(divide="ignore"):
        return np.log(mixing)[None, :] + stats.child_loglik(coefficients)


def observed_loglik(coefficients, mixing, stats: SiteStats) -> float:
    """Observed-data log-likelihood including the parental density terms."""
    _, log_norm = _responsibilities(_log_joint(coefficients, mixing, stats))
    return float(log_norm.sum() + stats.parental.sum())


def e_step(state: MixtureState, data: TriadDataset = None, scales: ScaleTable = None, *,
           stats: SiteStats = None) -> np.ndarray:
    """Posterior cluster membership probabilities, one row per site."""
    stats = _stats(data, scales, stats)
    resp, _ = _responsibilities(_log_joint(state.coefficients, state.mixing, stats))
    return resp


def m_step_pi(responsibilities) -> np.ndarray:
    r = np.asarray(responsibilities, dtype=float)
    pi = r.mean(axis=0)
    return pi / pi.sum()


def _maximize_cluster(gamma, weights, stats: SiteStats):
    """Quasi-Newton ascent on one cluster's weighted child log-likelihood."""
    active = np.flatnonzero(weights > ACTIVE_WEIGHT)
    sub = stats.subset(active) if active.size < weights.size else stats
    x, _ = kernels.maximize_cluster(
        np.ascontiguousarray(gamma, dtype=float), np.ascontiguousarray(weights[active]),
        sub.slog, sub.slog1m, float(stats.n_triads), sub.phi, sub.mlogit, sub.flogit)
    if not np.all(np.isfinite(x)):
        raise OptimizerFailure("quasi-Newton iterate is not finite")
    return x


def m_step_gamma(state: MixtureState, data: TriadDataset = None, scales: ScaleTable = None, *,
                 stats: SiteStats = None, responsibilities=None) -> np.ndarray:
    """Per-cluster coefficient update by quasi-Newton ascent from the current values.

    Clusters whose total responsibility is below 1e-8 keep their coefficients.
    """
    stats = _stats(data, scales, stats)
    resp = state.responsibilities if responsibilities is None else responsibilities
    out = np.array(state.coefficients, dtype=float, copy=True)
    for k in range(out.shape[0]):
        w = np.ascontiguousarray(resp[:, k])
        if w.sum() < EMPTY_CLUSTER_MASS:
            continue
        out[k] = _maximize_cluster(out[k], w, stats)
    return out


# -- driver --------------------------------------------------------------------

def initial_coefficients(stats: SiteStats, n_clusters: int, rng: np.random.Generator) -> np.ndarray:
    """Least-squares fits of the child logit-mean over a random site partition."""
    X = stats.design()
    y = stats.child_logit
    labels = rng.permutation(np.arange(stats.n_sites) % n_clusters)
    global_fit = np.linalg.lstsq(X, y, rcond=None)[0]
    out = np.empty((n_clusters, 3))
    for k in range(n_clusters):
        idx = labels == k
        if idx.sum() < 3:
            out[k] = global_fit
        else:
            out[k] = np.linalg.lstsq(X[idx], y[idx], rcond=None)[0]
    return out


def _fit_from(coefficients, mixing, stats: SiteStats, tol, max_iter):
    K = coefficients.shape[0]
    log_joint = _log_joint(coefficients, mixing, stats)
    resp, log_norm = _responsibilities(log_joint)
    const = float(stats.parental.sum())
    trace = [float(log_norm.sum()) + const]
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        mixing = m_step_pi(resp)
        coefficients = m_step_gamma(
            MixtureState(coefficients, mixing, resp), stats=stats)
        resp, log_norm = _responsibilities(_log_joint(coefficients, mixing, stats))
        trace.append(float(log_norm.sum()) + const)
        if trace[-1] - trace[-2] < tol:
            converged = True
            break
    nulls = tuple(int(k) for k in range(K) if resp[:, k].sum() < EMPTY_CLUSTER_MASS)
    return MixtureState(coefficients, mixing, resp, tuple(trace), it, converged, nulls)


def fit_from(coefficients, data: TriadDataset = None, scales: ScaleTable = None, *,
             mixing=None, tol=1e-7, max_iter=500, stats: SiteStats = None) -> MixtureState:
    """Run EM from given starting coefficients (and uniform mixing by default)."""
    stats = _stats(data, scales, stats)
    coefficients = np.array(coefficients, dtype=float, ndmin=2)
    K = coefficients.shape[0]
    mixing = np.full(K, 1.0 / K) if mixing is None else np.asarray(mixing, dtype=float)
    return _fit_from(coefficients, mixing, stats, tol, max_iter)


def run_em(data: TriadDataset = None, scales: ScaleTable = None, config: EmConfig = None, *,
           stats: SiteStats = None) -> MixtureState:
    """Best of ``config.n_restarts`` EM runs by final observed-data log-likelihood."""
    if config is None:
        raise ValueError("config is required")
    stats = _stats(data, scales, stats)
    K = config.n_clusters
    seeds = np.random.SeedSequence(config.seed).spawn(config.n_restarts)
    best = None
    failures = []
    for seq in seeds:
        rng = np.random.default_rng(seq)
        try:
            start = initial_coefficients(stats, K, rng)
            state = _fit_from(start, np.full(K, 1.0 / K), stats, config.tol, config.max_iter)
        except OptimizerFailure as exc:
            failures.append(exc)
            continue
        if best is None or state.loglik > best.loglik:
            best = state
    if best is None:
        raise OptimizerFailure(f"all {config.n_restarts} restarts failed: {failures[-1]}")
    return best


def hard_assignments(state_or_resp) -> np.ndarray:
    """Per-site argmax of the responsibilities; ties go to the lowest index."""
    resp = getattr(state_or_resp, "responsibilities", state_or_resp)
    return np.argmax(np.asarray(resp), axis=1)


def relabel(state: MixtureState, order) -> MixtureState:
    """Return ``state`` with its clusters permuted into ``order``."""
    order = np.asarray(order)
    inverse = np.argsort(order)
    return replace(state, coefficients=state.coefficients[order], mixing=state.mixing[order],
                   responsibilities=state.responsibilities[:, order],
                   null_clusters=tuple(sorted(int(inverse[k]) for k in state.null_clusters)))
