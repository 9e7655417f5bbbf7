"""Built-in simulation scenarios and the triad data generator."""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
from scipy import stats as st
from scipy.special import expit, logit

from ..betacore import BOUNDARY_EPS, TriadDataset

#: transmission patterns used by the S0-S4 scenarios
PATERNAL = (-4.2, 0.0, 1.3)
MATERNAL = (-0.7, 1.9, 0.0)
NONTRANSMITTED = (-2.3, 0.0, 0.0)
MOTHER_DOMINATED = (1.4, -1.5, -0.6)
BOTH_PARENTS = (-3.0, 2.0, 2.0)

#: cluster coefficients and sizes reported for the 4063-site cohort fit; the
#: nontransmission scenarios use them as a realistic background mixture
COHORT_CLUSTERS = (
    ((0.2695, 0.5704, 0.4638), 349),
    ((0.7019, 0.2151, 0.8547), 53),
    ((1.1761, 0.6727, 0.4763), 14),
    ((-0.2357, 0.5415, 0.5236), 2182),
    ((0.4783, 0.5265, 0.5106), 118),
    ((0.0536, 0.6414, 0.3808), 1347),
)

#: parental means in the cohort-like nontransmission scenarios span a wide range
COHORT_MEAN_RANGE = (0.15, 0.85)

GENERATORS = ("beta", "truncated-normal")
BUILTIN = ("S0", "S1", "S2", "S3", "S4", "TN", "NT1", "NT2")


class UnknownScenario(KeyError):
    pass


@dataclass(frozen=True)
class ScenarioSpec:
    """A simulation design: cluster coefficients, sizes and generator settings.

    Sites are laid out cluster by cluster, so "neighbouring" sites share a
    cluster.  ``neighbor_correlation[k]`` is the lag-1 latent Gaussian
    correlation between adjacent sites of cluster k.
    """

    name: str
    n_triads: int
    cluster_defs: tuple                     # ((g0, g1, g2), n_sites) pairs
    neighbor_correlation: tuple = None
    generator: str = "beta"
    seed: int = 0
    mean_range: tuple = (0.45, 0.55)        # parental means
    precision_range: tuple = (5.0, 50.0)
    parent_mean: float = 0.5                # truncated-normal generator only
    tn_variance: float = 0.25               # pre-truncation variance
    nontransmitted: tuple = field(default=())   # indices of clusters with zero slopes

    def __post_init__(self):
        defs = tuple((tuple(float(v) for v in g), int(n)) for g, n in self.cluster_defs)
        object.__setattr__(self, "cluster_defs", defs)
        corr = self.neighbor_correlation
        corr = (0.0,) * len(defs) if corr is None else tuple(float(c) for c in corr)
        if len(corr) != len(defs):
            raise ValueError("one neighbour correlation per cluster is required")
        if any(not 0.0 <= c < 1.0 for c in corr):
            raise ValueError("neighbour correlations must lie in [0, 1)")
        object.__setattr__(self, "neighbor_correlation", corr)
        if self.generator not in GENERATORS:
            raise ValueError(f"generator must be one of {GENERATORS}")
        if any(n < 1 for _, n in defs) or self.n_triads < 2:
            raise ValueError("cluster sizes must be positive and n_triads >= 2")

    @property
    def n_clusters(self) -> int:
        return len(self.cluster_defs)

    @property
    def n_sites(self) -> int:
        return sum(n for _, n in self.cluster_defs)

    @property
    def sizes(self) -> tuple:
        return tuple(n for _, n in self.cluster_defs)

    @property
    def coefficients(self) -> np.ndarray:
        return np.array([g for g, _ in self.cluster_defs], dtype=float)

    def truth(self) -> np.ndarray:
        return np.repeat(np.arange(self.n_clusters), self.sizes)

    def with_seed(self, seed: int) -> "ScenarioSpec":
        return replace(self, seed=int(seed))


def _split(total, weights):
    weights = np.asarray(weights, dtype=float)
    raw = total * weights / weights.sum()
    sizes = np.floor(raw).astype(int)
    for i in np.argsort(raw - sizes)[::-1][: total - sizes.sum()]:
        sizes[i] += 1
    return sizes


def builtin_scenario(name: str, seed: int = 0) -> ScenarioSpec:
    s0 = (PATERNAL, MATERNAL, NONTRANSMITTED, MOTHER_DOMINATED)
    s1_sizes = (500, 600, 850, 50)
    key = name.upper()
    if key == "S0":
        return ScenarioSpec("S0", 60, tuple(zip(s0, (500,) * 4)), seed=seed)
    if key == "S1":
        return ScenarioSpec("S1", 60, tuple(zip(s0, s1_sizes)), seed=seed)
    if key == "S2":
        return ScenarioSpec("S2", 60, tuple(zip(s0, s1_sizes)),
                            neighbor_correlation=(0.9, 0.9, 0.0, 0.0), seed=seed)
    if key == "S3":
        return ScenarioSpec("S3", 60, tuple(zip(s0 + (BOTH_PARENTS,), (500, 600, 450, 50, 400))),
                            seed=seed)
    if key == "S4":
        return ScenarioSpec("S4", 60, tuple(zip(s0, (2500, 3000, 4250, 250))), seed=seed)
    if key == "TN":
        return ScenarioSpec("TN", 60, tuple(zip(s0, (500,) * 4)), generator="truncated-normal",
                            seed=seed)
    if key in ("NT1", "NT2"):
        coeffs = [g for g, _ in COHORT_CLUSTERS]
        weights = [n for _, n in COHORT_CLUSTERS]
        if key == "NT1":
            # 1500 background sites, then 500 sites with zero slopes
            sizes = _split(1500, weights)
            defs = tuple(zip(coeffs, sizes)) + (((0.5, 0.0, 0.0), 500),)
            return ScenarioSpec("NT1", 41, defs, seed=seed, mean_range=COHORT_MEAN_RANGE,
                                nontransmitted=(len(coeffs),))
        sizes = _split(1000, weights)
        return ScenarioSpec("NT2", 41, tuple(zip(coeffs, sizes)), seed=seed,
                            mean_range=COHORT_MEAN_RANGE)
    raise UnknownScenario(f"unknown scenario {name!r}; choose from {', '.join(BUILTIN)}")


def _latent_uniforms(rng, n_sites, n_triads, rho):
    """Uniforms whose probit transforms form a lag-1 AR chain along the sites."""
    z = rng.standard_normal((n_sites, n_triads))
    if rho > 0.0:
        innov = np.sqrt(1.0 - rho * rho)
        for j in range(1, n_sites):
            z[j] = rho * z[j - 1] + innov * z[j]
    return st.norm.cdf(z)


def _draw_beta(rng, a, b, n_triads, rho):
    if rho > 0.0:
        u = _latent_uniforms(rng, a.shape[0], n_triads, rho)
        return st.beta.ppf(u, a[:, None], b[:, None])
    return rng.beta(a[:, None], b[:, None], size=(a.shape[0], n_triads))


def _draw_truncnorm(rng, loc, sd, n_triads, rho):
    lo, hi = (0.0 - loc) / sd, (1.0 - loc) / sd
    u = (_latent_uniforms(rng, loc.shape[0], n_triads, rho) if rho > 0.0
         else rng.uniform(size=(loc.shape[0], n_triads)))
    return st.truncnorm.ppf(u, lo[:, None], hi[:, None], loc=loc[:, None], scale=sd)


def _site_shapes(rng, n, spec):
    mean = rng.uniform(*spec.mean_range, size=n)
    prec = rng.uniform(*spec.precision_range, size=n)
    return mean * prec, (1.0 - mean) * prec


def generate_dataset(spec: ScenarioSpec):
    """Simulate one replicate; returns ``(dataset, truth_labels)``.

    Values are clipped into ``[1e-6, 1 - 1e-6]``, the same boundary policy
    applied to ingested data.
    """
    rng = np.random.default_rng(spec.seed)
    blocks = {"child": [], "mother": [], "father": []}
    I = spec.n_triads
    for (gamma, n), rho in zip(spec.cluster_defs, spec.neighbor_correlation):
        g0, g1, g2 = gamma
        if spec.generator == "beta":
            am, bm = _site_shapes(rng, n, spec)
            af, bf = _site_shapes(rng, n, spec)
            mlogit = np.log(am) - np.log(bm)
            flogit = np.log(af) - np.log(bf)
            mu = expit(g0 + g1 * mlogit + g2 * flogit)
            prec = rng.uniform(*spec.precision_range, size=n)
            blocks["mother"].append(_draw_beta(rng, am, bm, I, rho))
            blocks["father"].append(_draw_beta(rng, af, bf, I, rho))
            blocks["child"].append(_draw_beta(rng, mu * prec, (1.0 - mu) * prec, I, rho))
        else:
            sd = np.sqrt(spec.tn_variance)
            parent_loc = np.full(n, spec.parent_mean)
            plogit = logit(spec.parent_mean)
            child_loc = np.full(n, expit(g0 + (g1 + g2) * plogit))
            blocks["mother"].append(_draw_truncnorm(rng, parent_loc, sd, I, rho))
            blocks["father"].append(_draw_truncnorm(rng, parent_loc, sd, I, rho))
            blocks["child"].append(_draw_truncnorm(rng, child_loc, sd, I, rho))
    mats = {}
    for role, parts in blocks.items():
        mats[role] = np.clip(np.vstack(parts), BOUNDARY_EPS, 1.0 - BOUNDARY_EPS)
    ids = tuple(f"cg{j + 1:06d}" for j in range(spec.n_sites))
    data = TriadDataset(mats["child"], mats["mother"], mats["father"], ids)
    return data, spec.truth()
