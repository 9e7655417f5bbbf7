"""Compare the compiled and NumPy kernel backends.

Times the three hot kernels on S0-sized inputs (2000 sites, 60 triads) and a
full K=4 EM fit under each backend.  Run from the repository root::

    python3 benchmarks/bench_kernels.py [--repeat N]
"""
import argparse
import time
import warnings

import numpy as np

from transmix import kernels
from transmix.betacore import compute_site_scales
from transmix.emcluster import EmConfig, SiteStats, run_em
from transmix.simlab import builtin_scenario, generate_dataset


def best_of(fn, repeat):
    times = []
    for _ in range(repeat):
        t = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t)
    return min(times)


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeat", type=int, default=5)
    args = parser.parse_args()

    data, _ = generate_dataset(builtin_scenario("S0", seed=1))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        stats = SiteStats.build(data, compute_site_scales(data))
    common = (stats.slog, stats.slog1m, float(stats.n_triads), stats.phi, stats.mlogit, stats.flogit)
    gammas = np.array(builtin_scenario("S0").coefficients)
    weights = np.random.default_rng(0).uniform(size=stats.n_sites)

    found = kernels.backends()
    if "cython" not in found:
        print("compiled backend not built; only the NumPy fallback is available")
    results = {}
    for name, mod in found.items():
        def em():
            saved = kernels.loglik_matrix, kernels.cluster_objective, kernels.maximize_cluster
            kernels.loglik_matrix = mod.loglik_matrix
            kernels.cluster_objective = mod.cluster_objective
            kernels.maximize_cluster = mod.maximize_cluster
            try:
                run_em(config=EmConfig(4, n_restarts=1, seed=0), stats=stats)
            finally:
                kernels.loglik_matrix, kernels.cluster_objective, kernels.maximize_cluster = saved

        results[name] = {
            "loglik_matrix": best_of(lambda: mod.loglik_matrix(gammas, *common), args.repeat * 20),
            "cluster_objective": best_of(lambda: mod.cluster_objective(gammas[1], weights, *common),
                                         args.repeat * 20),
            "maximize_cluster": best_of(lambda: mod.maximize_cluster(np.zeros(3), weights, *common),
                                        args.repeat),
            "em_fit_k4": best_of(em, max(1, args.repeat // 2)),
        }

    names = list(results)
    print(f"{'kernel':<20}" + "".join(f"{n:>14}" for n in names) + ("     speedup" if len(names) > 1 else ""))
    for kernel in results[names[0]]:
        row = f"{kernel:<20}" + "".join(f"{results[n][kernel] * 1e3:>12.3f}ms" for n in names)
        if len(names) > 1:
            row += f"{results['python'][kernel] / results['cython'][kernel]:>11.1f}x"
        print(row)


if __name__ == "__main__":
    main()
