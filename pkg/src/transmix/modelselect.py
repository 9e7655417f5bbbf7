"""BIC for the transmission mixture and selection of the number of clusters."""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .emcluster import EmConfig, MixtureState, OptimizerFailure, SiteStats, run_em

log = logging.getLogger(__name__)

#: a drop below this fraction of the largest drop marks the plateau
PLATEAU_FRACTION = 0.05


def n_free_parameters(n_sites: int, n_clusters: int) -> int:
    return 6 * n_sites + 4 * n_clusters - 1


def bic_value(loglik: float, n_sites: int, n_clusters: int, n_triads: int) -> float:
    """``-2 l + (6J + 4K - 1) log(3 I J)``."""
    if min(n_sites, n_clusters, n_triads) < 1:
        raise ValueError("counts must be positive")
    return -2.0 * loglik + n_free_parameters(n_sites, n_clusters) * math.log(3 * n_triads * n_sites)


@dataclass(frozen=True)
class BicRecord:
    n_clusters: int
    loglik: float
    bic: float
    n_null_clusters: int = 0
    failed: bool = False

    @property
    def ok(self) -> bool:
        return not self.failed and math.isfinite(self.bic)


@dataclass(frozen=True)
class KSweepResult:
    records: tuple
    selected_k: int
    selection_rule: str
    states: dict = field(default_factory=dict, repr=False, compare=False)

    @property
    def selected_state(self) -> MixtureState | None:
        return self.states.get(self.selected_k)

    def curve(self) -> list[tuple[int, float]]:
        return [(r.n_clusters, r.bic) for r in self.records]


def select_k(records, fraction: float = PLATEAU_FRACTION) -> tuple[int, str]:
    """Pick K from a BIC curve by the plateau rule.

    Candidates are (a) the smallest K whose drop to the next evaluated K is
    below ``fraction`` of the largest drop on the curve, and (b) the
    minimum-BIC K unless its fit contains a null cluster.  The smaller
    candidate wins.  Failed fits are ignored.
    """
    usable = [r for r in records if r.ok]
    if not usable:
        raise ValueError("no successful fits to select from")
    if len(usable) == 1:
        return usable[0].n_clusters, "min-bic"
    drops = [a.bic - b.bic for a, b in zip(usable[:-1], usable[1:])]
    max_drop = max(drops)
    plateau = usable[-1].n_clusters
    for rec, drop in zip(usable[:-1], drops):
        if max_drop <= 0 or drop < fraction * max_drop:
            plateau = rec.n_clusters
            break
    best = min(usable, key=lambda r: r.bic)
    if best.n_null_clusters == 0 and best.n_clusters <= plateau:
        return best.n_clusters, "min-bic"
    return plateau, "plateau"


def count_null_clusters(state: MixtureState, n_sites: int) -> int:
    """Clusters with mixing proportion below one site's worth (1/J)."""
    return int(np.sum(state.mixing < 1.0 / n_sites))


def sweep_k(data=None, scales=None, k_range=range(1, 9), config: EmConfig = None, *,
            stats: SiteStats = None, fraction: float = PLATEAU_FRACTION) -> KSweepResult:
    """Fit the mixture for each K in ``k_range`` and select K from the BIC curve.

    ``config.n_clusters`` is ignored; every other setting is shared across K.
    A K whose fit fails is recorded with a NaN log-likelihood.
    """
    if stats is None:
        stats = SiteStats.build(data, scales)
    ks = list(k_range)
    if not ks:
        raise ValueError("k_range is empty")
    config = config or EmConfig(1)
    records, states = [], {}
    for K in ks:
        cfg = replace(config, n_clusters=K)
        try:
            state = run_em(config=cfg, stats=stats)
        except OptimizerFailure as exc:
            log.warning("K=%d failed: %s", K, exc)
            records.append(BicRecord(K, float("nan"), float("nan"), 0, failed=True))
            continue
        states[K] = state
        records.append(BicRecord(K, state.loglik,
                                 bic_value(state.loglik, stats.n_sites, K, stats.n_triads),
                                 count_null_clusters(state, stats.n_sites)))
        log.info("K=%d loglik=%.3f bic=%.3f", K, records[-1].loglik, records[-1].bic)
    k, rule = select_k(records, fraction)
    return KSweepResult(tuple(records), k, rule, states)


def write_bic_curve(path, result: KSweepResult) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["k", "bic"])
        for k, bic in result.curve():
            writer.writerow([k, repr(float(bic))])
