import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import small_instance
from transmix.bigdata import (SubsetPlan, cluster_by_subsets, coverage_miss_pct, group_coefficients,
                              minimal_subset_count, plan_subsets, subset_config)
from transmix.emcluster import EmConfig, SiteStats, hard_assignments, run_em
from transmix.modelselect import sweep_k


def test_minimal_m_cohort_sizes():
    assert minimal_subset_count(4063, 2000, 1.0) == 7
    assert coverage_miss_pct(4063, 2000, 6) > 1.0


def test_forced_m_cohort_sizes():
    plan = plan_subsets(4063, 2000, 1.0, seed=0, n_subsets=15)
    assert plan.n_subsets == 15 and plan.forced
    assert plan.expected_miss_pct == pytest.approx(0.0038, abs=1e-4)
    assert plan.satisfies_budget


def test_full_subset_needs_one_draw():
    assert minimal_subset_count(50, 50, 0.5) == 1


def test_invalid_plan_arguments():
    with pytest.raises(ValueError):
        plan_subsets(10, 11, 1.0)
    with pytest.raises(ValueError):
        plan_subsets(10, 5, 0.0)
    with pytest.raises(ValueError):
        plan_subsets(10, 5, 100.0)


@given(st.integers(2, 20000), st.floats(0.01, 1.0), st.floats(0.001, 50.0))
def test_minimal_m_is_minimal(J, frac, eta):
    S = max(1, min(J, int(J * frac)))
    m = minimal_subset_count(J, S, eta)
    assert coverage_miss_pct(J, S, m) <= eta
    if m > 1:
        assert coverage_miss_pct(J, S, m - 1) > eta


def test_plan_subsets_are_valid_and_deterministic():
    a = plan_subsets(300, 40, 5.0, seed=3)
    b = plan_subsets(300, 40, 5.0, seed=3)
    assert a.n_subsets == minimal_subset_count(300, 40, 5.0)
    for s, t in zip(a.subsets, b.subsets):
        np.testing.assert_array_equal(s, t)
        assert len(np.unique(s)) == 40 and s.min() >= 0 and s.max() < 300
    assert any(not np.array_equal(x, y) for x, y in zip(a.subsets, a.subsets[1:]))


def test_plan_rejects_bad_subsets():
    with pytest.raises(ValueError):
        SubsetPlan(5, 2, 1, 1.0, 0, ([0, 0],))
    with pytest.raises(ValueError):
        SubsetPlan(5, 2, 1, 1.0, 0, ([0, 7],))


def test_group_coefficients_separated_points():
    rng = np.random.default_rng(0)
    blobs = np.array([[0, 0, 0], [5, 5, 5], [-5, 3, 0]], dtype=float)
    pts = np.repeat(blobs, 4, axis=0) + rng.normal(0, 0.1, size=(12, 3))
    w = np.repeat([30.0, 20.0, 10.0], 4)
    labels, centers = group_coefficients(pts, w, max_groups=5)
    assert len(centers) == 3
    np.testing.assert_array_equal(labels, np.repeat([0, 1, 2], 4))
    np.testing.assert_allclose(centers[0], np.average(pts[:4], axis=0, weights=w[:4]))


def test_group_coefficients_single_point():
    labels, centers = group_coefficients(np.ones((2, 3)), np.ones(2), max_groups=3)
    assert labels.tolist() == [0, 0] and centers.shape == (1, 3)


@pytest.fixture(scope="module")
def two_cluster():
    return small_instance(n_sites=(60, 60), n_triads=30, seed=21,
                          coefficients=[(-2.0, 1.5, 0.0), (1.0, 0.0, -1.5)])


def test_single_full_subset_matches_direct_fit(two_cluster):
    _, _, stats, _ = two_cluster
    J = stats.n_sites
    plan = SubsetPlan(J, J, 1, 1.0, 0, (np.arange(J),))
    cfg = EmConfig(2, n_restarts=2, seed=4)
    res = cluster_by_subsets(plan=plan, config=cfg, k_range=[2], stats=stats)
    direct = run_em(config=subset_config(cfg, 0), stats=stats)
    labels = hard_assignments(direct)
    # same partition, possibly with the groups renumbered
    assert len(set(zip(labels.tolist(), res.final_assignments.tolist()))) == 2
    assert res.conflicts_resolved == 0 and res.post_hoc.size == 0
    np.testing.assert_allclose(np.sort(res.final_coefficients, axis=0),
                               np.sort(direct.coefficients, axis=0))


def test_overlapping_subsets_resolve_conflicts_by_likelihood(two_cluster):
    _, _, stats, truth = two_cluster
    plan = plan_subsets(stats.n_sites, 80, 5.0, seed=2)
    res = cluster_by_subsets(plan=plan, config=EmConfig(2, n_restarts=2), k_range=[2, 3], stats=stats)
    assert res.final_assignments.shape == (stats.n_sites,)
    assert res.n_groups >= 2
    # each site's label is one of its candidate groups; where candidates conflict,
    # the chosen group maximises the site's own likelihood
    ll = stats.child_loglik(res.final_coefficients)
    cands = [set() for _ in range(stats.n_sites)]
    lookup = {(r.subset_id, r.cluster_id): g for r, g in zip(res.stage1_gammas, res.group_of_stage1)}
    for s, (idx, state) in enumerate(zip(res.plan.subsets, res.stage1_states)):
        for j, k in zip(idx, hard_assignments(state)):
            cands[j].add(lookup[(s, int(k))])
    n_conf = 0
    for j, c in enumerate(cands):
        if len(c) > 1:
            n_conf += 1
            assert ll[j, res.final_assignments[j]] == max(ll[j, g] for g in c)
        elif len(c) == 1:
            assert res.final_assignments[j] in c
    assert n_conf == res.conflicts_resolved


def test_forced_small_m_reports_uncovered_sites(two_cluster, tmp_path):
    _, _, stats, _ = two_cluster
    plan = plan_subsets(stats.n_sites, 60, 1.0, seed=5, n_subsets=1)
    assert not plan.satisfies_budget
    res = cluster_by_subsets(plan=plan, config=EmConfig(2, n_restarts=2), k_range=[2], stats=stats)
    np.testing.assert_array_equal(res.post_hoc, plan.uncovered())
    assert res.post_hoc.size == 60
    ll = stats.child_loglik(res.final_coefficients)
    np.testing.assert_array_equal(res.final_assignments[res.post_hoc], ll[res.post_hoc].argmax(axis=1))
    path = tmp_path / "stage1.csv"
    res.write_stage1_csv(path)
    lines = path.read_text().splitlines()
    assert lines[0] == "subset,cluster,gamma0,gamma1,gamma2,size,group"
    assert len(lines) == 1 + len(res.stage1_gammas)


def test_cluster_by_subsets_deterministic(two_cluster):
    _, _, stats, _ = two_cluster
    plan = plan_subsets(stats.n_sites, 70, 5.0, seed=8)
    a = cluster_by_subsets(plan=plan, config=EmConfig(2, n_restarts=2), k_range=[1, 2, 3], stats=stats)
    b = cluster_by_subsets(plan=plan, config=EmConfig(2, n_restarts=2), k_range=[1, 2, 3], stats=stats)
    np.testing.assert_array_equal(a.final_assignments, b.final_assignments)
    np.testing.assert_array_equal(a.final_coefficients, b.final_coefficients)


@pytest.mark.slow
def test_s0_two_halves_recover_paternal_cluster(s0_replicate):
    _, _, stats, truth = s0_replicate
    perm = np.random.default_rng(0).permutation(stats.n_sites)
    plan = SubsetPlan(stats.n_sites, 1000, 2, 1.0, 0, (perm[:1000], perm[1000:]))
    res = cluster_by_subsets(plan=plan, config=EmConfig(4, n_restarts=3), k_range=range(2, 7), stats=stats)
    paternal = np.argmin(np.linalg.norm(res.final_coefficients - [-4.2, 0, 1.3], axis=1))
    in_group = res.final_assignments[truth == 0] == paternal
    assert in_group.mean() >= 0.95
