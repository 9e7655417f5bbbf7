"""Beta-distribution primitives and per-site empirical scale estimation.

Methylation values live in the open unit interval.  Every site carries three
Beta laws (child, mother, father) whose shapes are estimated by inverting the
sample mean and variance across triads.
"""
from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.special import betaln, expit

log = logging.getLogger(__name__)

#: values at or beyond the unit-interval boundary are pulled to this distance
BOUNDARY_EPS = 1e-6
#: shapes are re-derived from a variance no larger than this fraction of m(1-m)
VARIANCE_CLAMP = 0.99

ROLES = ("child", "mother", "father")


class DomainError(ValueError):
    """An argument falls outside the open unit interval."""


class DegenerateSiteError(ValueError):
    """A site has no spread across subjects, so no Beta law can be fitted."""

    def __init__(self, message, site_id=None, role=None):
        super().__init__(message)
        self.site_id = site_id
        self.role = role


def logit(p):
    p = np.asarray(p, dtype=float)
    if np.any((p <= 0.0) | (p >= 1.0)) or np.any(np.isnan(p)):
        raise DomainError("logit requires 0 < p < 1")
    out = np.log(p) - np.log1p(-p)
    return out if out.ndim else float(out)


def inverse_logit(x):
    out = expit(np.asarray(x, dtype=float))
    return out if out.ndim else float(out)


@dataclass(frozen=True)
class BetaScale:
    alpha: float
    beta: float

    def __post_init__(self):
        if not (self.alpha > 0 and self.beta > 0) or not np.isfinite(self.alpha + self.beta):
            raise ValueError(f"Beta shapes must be positive, got ({self.alpha}, {self.beta})")

    @property
    def mean(self) -> float:
        return self.alpha / (self.alpha + self.beta)

    @property
    def precision(self) -> float:
        return self.alpha + self.beta

    @property
    def variance(self) -> float:
        s = self.precision
        return self.alpha * self.beta / (s * s * (s + 1.0))

    @property
    def logit_mean(self) -> float:
        return float(np.log(self.alpha) - np.log(self.beta))

    @classmethod
    def from_mean_precision(cls, mean: float, precision: float) -> "BetaScale":
        return cls(mean * precision, (1.0 - mean) * precision)


def beta_log_density(x, scale: BetaScale | None = None, *, alpha=None, beta=None):
    """Log of the Beta(alpha, beta) density at ``x``.

    Either a :class:`BetaScale` or explicit (broadcastable) ``alpha``/``beta``
    arrays may be given.  Raises :class:`DomainError` for ``x`` outside (0, 1).
    """
    if scale is not None:
        alpha, beta = scale.alpha, scale.beta
    x = np.asarray(x, dtype=float)
    if np.any((x <= 0.0) | (x >= 1.0)):
        raise DomainError("Beta log-density is only finite for 0 < x < 1")
    a = np.asarray(alpha, dtype=float)
    b = np.asarray(beta, dtype=float)
    out = (a - 1.0) * np.log(x) + (b - 1.0) * np.log1p(-x) - betaln(a, b)
    return out if out.ndim else float(out)


def shapes_from_moments(mean, variance):
    """Vectorised method-of-moments inversion; no clamping or validation."""
    mean = np.asarray(mean, dtype=float)
    common = mean * (1.0 - mean) / np.asarray(variance, dtype=float) - 1.0
    return mean * common, (1.0 - mean) * common


def _clamped_moments(values, axis=-1):
    values = np.asarray(values, dtype=float)
    m = values.mean(axis=axis)
    v = values.var(axis=axis, ddof=1)
    bound = m * (1.0 - m)
    over = v >= bound
    v = np.where(over, VARIANCE_CLAMP * bound, v)
    return m, v, over


def estimate_scales_from_moments(values) -> BetaScale:
    """Empirical Beta shapes from the sample mean and (unbiased) variance.

    Variances at or above the Bernoulli bound ``m(1-m)`` are clamped to
    ``0.99 m(1-m)`` with a warning.
    """
    values = np.asarray(values, dtype=float).ravel()
    if values.size < 2:
        raise DegenerateSiteError("need at least two values to estimate a Beta scale")
    if np.any((values <= 0.0) | (values >= 1.0)):
        raise DomainError("values must lie strictly inside (0, 1)")
    m, v, over = _clamped_moments(values)
    if over:
        warnings.warn("sample variance exceeds m(1-m); clamped", RuntimeWarning, stacklevel=2)
    if not v > 0:
        raise DegenerateSiteError("all values identical; variance is zero")
    a, b = shapes_from_moments(m, v)
    return BetaScale(float(a), float(b))


@dataclass(frozen=True)
class SiteScales:
    child: BetaScale
    mother: BetaScale
    father: BetaScale

    @property
    def logit_mean_child(self) -> float:
        return self.child.logit_mean

    @property
    def logit_mean_mother(self) -> float:
        return self.mother.logit_mean

    @property
    def logit_mean_father(self) -> float:
        return self.father.logit_mean

    @property
    def child_precision(self) -> float:
        return self.child.precision


@dataclass(frozen=True)
class ScaleTable:
    """Column-oriented per-site scales, the form the numerical code consumes.

    Each attribute is a length-J array; ``shapes`` maps a role to an
    ``(alpha, beta)`` pair of arrays.
    """

    site_ids: tuple
    alpha: dict = field(repr=False)
    beta: dict = field(repr=False)

    def __len__(self):
        return len(self.site_ids)

    def logit_mean(self, role: str) -> np.ndarray:
        return np.log(self.alpha[role]) - np.log(self.beta[role])

    @property
    def mother_logit(self) -> np.ndarray:
        return self.logit_mean("mother")

    @property
    def father_logit(self) -> np.ndarray:
        return self.logit_mean("father")

    @property
    def child_logit(self) -> np.ndarray:
        return self.logit_mean("child")

    @property
    def child_precision(self) -> np.ndarray:
        return self.alpha["child"] + self.beta["child"]

    def site(self, j: int) -> SiteScales:
        return SiteScales(*(BetaScale(float(self.alpha[r][j]), float(self.beta[r][j])) for r in ROLES))

    def __iter__(self):
        return (self.site(j) for j in range(len(self)))

    def subset(self, index) -> "ScaleTable":
        index = np.asarray(index)
        ids = tuple(self.site_ids[i] for i in index)
        return ScaleTable(ids, {r: a[index] for r, a in self.alpha.items()},
                          {r: b[index] for r, b in self.beta.items()})


@dataclass(frozen=True)
class TriadDataset:
    """Child, mother and father values as J x I matrices (sites by triads)."""

    child: np.ndarray
    mother: np.ndarray
    father: np.ndarray
    site_ids: tuple = None

    def __post_init__(self):
        mats = []
        for name in ROLES:
            arr = np.array(getattr(self, name), dtype=float)
            if arr.ndim != 2:
                raise ValueError(f"{name} values must be a 2-d sites x triads matrix")
            if np.any((arr <= 0.0) | (arr >= 1.0)) or np.any(np.isnan(arr)):
                raise DomainError(f"{name} values must lie strictly inside (0, 1)")
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
            mats.append(arr)
        if not (mats[0].shape == mats[1].shape == mats[2].shape):
            raise ValueError("child, mother and father matrices must share one shape")
        ids = self.site_ids
        if ids is None:
            ids = tuple(f"site{j + 1}" for j in range(mats[0].shape[0]))
        ids = tuple(str(s) for s in ids)
        if len(ids) != mats[0].shape[0]:
            raise ValueError("site_ids length does not match the number of sites")
        object.__setattr__(self, "site_ids", ids)

    @classmethod
    def from_arrays(cls, child, mother, father, site_ids=None, clip=True):
        """Build a dataset, clipping boundary values into the open interval."""
        if clip:
            child, mother, father = (clip_unit(v, name) for v, name in
                                     zip((child, mother, father), ROLES))
        return cls(child, mother, father, site_ids)

    @property
    def n_sites(self) -> int:
        return self.child.shape[0]

    @property
    def n_triads(self) -> int:
        return self.child.shape[1]

    def role(self, name: str) -> np.ndarray:
        return getattr(self, name)

    def subset_sites(self, index) -> "TriadDataset":
        index = np.asarray(index)
        return TriadDataset(self.child[index], self.mother[index], self.father[index],
                            tuple(self.site_ids[i] for i in index))

    def resample_triads(self, columns) -> "TriadDataset":
        columns = np.asarray(columns)
        return TriadDataset(self.child[:, columns], self.mother[:, columns],
                            self.father[:, columns], self.site_ids)


def clip_unit(values, label="values"):
    values = np.asarray(values, dtype=float)
    lo, hi = BOUNDARY_EPS, 1.0 - BOUNDARY_EPS
    n_out = int(np.count_nonzero((values < lo) | (values > hi)))
    if n_out:
        log.warning("clipped %d %s into [%g, %g]", n_out, label, lo, hi)
        values = np.clip(values, lo, hi)
    return values


def compute_site_scales(data: TriadDataset) -> ScaleTable:
    """Empirical Beta shapes for every (site, role) pair.

    Raises :class:`DegenerateSiteError` naming the first site whose values are
    constant for some role.
    """
    alpha, beta = {}, {}
    for role in ROLES:
        values = data.role(role)
        m, v, over = _clamped_moments(values, axis=1)
        bad = np.flatnonzero(~(v > 0))
        if bad.size:
            j = int(bad[0])
            raise DegenerateSiteError(
                f"site {data.site_ids[j]!r}: {role} values are constant", data.site_ids[j], role)
        if np.any(over):
            ids = [data.site_ids[j] for j in np.flatnonzero(over)[:5]]
            warnings.warn(f"{role} variance clamped at {int(over.sum())} site(s), e.g. {ids}",
                          RuntimeWarning, stacklevel=2)
        alpha[role], beta[role] = shapes_from_moments(m, v)
    return ScaleTable(data.site_ids, alpha, beta)


def parental_loglik(data: TriadDataset, scales: ScaleTable) -> np.ndarray:
    """Per-site sum over triads of the mother and father Beta log-densities."""
    total = np.zeros(data.n_sites)
    for role in ("mother", "father"):
        a = scales.alpha[role][:, None]
        b = scales.beta[role][:, None]
        total += beta_log_density(data.role(role), alpha=a, beta=b).sum(axis=1)
    return total
