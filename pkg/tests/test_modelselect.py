import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import small_instance
from transmix.emcluster import EmConfig
from transmix.modelselect import (BicRecord, bic_value, n_free_parameters, select_k, sweep_k,
                                  write_bic_curve)


def test_bic_unit_counts():
    assert bic_value(0.0, 1, 1, 1) == pytest.approx(9 * math.log(3), abs=1e-12)
    assert bic_value(0.0, 1, 1, 1) == pytest.approx(9.8875106, abs=1e-6)


def test_bic_adds_four_parameters_per_cluster():
    assert bic_value(0.0, 1, 2, 1) == pytest.approx(13 * math.log(3), abs=1e-12)


def test_bic_simulation_scale():
    assert bic_value(-100.0, 2000, 4, 60) == pytest.approx(200 + 12015 * math.log(360000), rel=1e-14)
    assert n_free_parameters(2000, 4) == 12015


def test_bic_rejects_nonpositive_counts():
    with pytest.raises(ValueError):
        bic_value(0.0, 0, 1, 1)


@given(st.floats(-1e6, 1e6), st.integers(1, 5000), st.integers(1, 20), st.integers(1, 200))
def test_bic_increasing_in_k(loglik, J, K, I):
    assert bic_value(loglik, J, K + 1, I) > bic_value(loglik, J, K, I)


def _curve(bics, nulls=None):
    nulls = nulls or [0] * len(bics)
    return [BicRecord(k, -b / 2, b, n) for k, b, n in zip(range(1, len(bics) + 1), bics, nulls)]


def test_select_min_bic_at_elbow():
    # sharp drops until K=4, then a rise
    assert select_k(_curve([1000, 600, 300, 100, 110, 120])) == (4, "min-bic")


def test_select_plateau_before_tiny_further_drops():
    # min at K=6 but the drops after K=4 are < 5% of the largest
    k, rule = select_k(_curve([1000, 600, 300, 100, 95, 92]))
    assert (k, rule) == (4, "plateau")


def test_select_null_cluster_disqualifies_min():
    # cohort-like curve: the minimum at K=7 has a null cluster and the drop is slight
    bics = [1000, 700, 500, 350, 250, 200, 195]
    nulls = [0, 0, 0, 0, 0, 0, 1]
    assert select_k(_curve(bics, nulls)) == (6, "plateau")


def test_select_ignores_failed_fits():
    recs = _curve([1000, 400, 100, 90])
    recs[2] = BicRecord(3, float("nan"), float("nan"), failed=True)
    k, _ = select_k(recs)
    assert k != 3


def test_select_single_record():
    assert select_k(_curve([5.0])) == (1, "min-bic")
    with pytest.raises(ValueError):
        select_k([BicRecord(1, float("nan"), float("nan"), failed=True)])


def test_sweep_single_k_range():
    _, _, stats, _ = small_instance(n_sites=(10, 10), n_triads=8, seed=1)
    res = sweep_k(k_range=[3], config=EmConfig(1, n_restarts=2), stats=stats)
    assert res.selected_k == 3 and [r.n_clusters for r in res.records] == [3]


def test_sweep_selects_one_for_single_cluster_data():
    # zero slopes: the plug-in parental logit-means carry no estimation noise into the fit
    for seed in range(3):
        _, _, stats, _ = small_instance(n_sites=(200,), n_triads=60, seed=seed, coefficients=[(0.3, 0.0, 0.0)])
        res = sweep_k(k_range=range(1, 5), config=EmConfig(1, n_restarts=2), stats=stats)
        assert res.selected_k == 1
    assert [r.n_clusters for r in res.records] == [1, 2, 3, 4]


def test_sweep_records_follow_formula_and_are_deterministic(tmp_path):
    data, scales, stats, _ = small_instance(n_sites=(30, 30), n_triads=20, seed=2,
                                            coefficients=[(-2, 1.5, 0), (1, 0, -1.5)])
    cfg = EmConfig(1, n_restarts=2, seed=9)
    a = sweep_k(data, scales, range(1, 4), cfg)
    b = sweep_k(k_range=range(1, 4), config=cfg, stats=stats)
    assert a.selected_k == b.selected_k == 2
    for rec in a.records:
        assert rec.bic == bic_value(rec.loglik, 60, rec.n_clusters, 20)
    assert a.selected_state is a.states[2]
    path = tmp_path / "bic.csv"
    write_bic_curve(path, a)
    lines = path.read_text().splitlines()
    assert lines[0] == "k,bic" and len(lines) == 4
    assert np.isclose(float(lines[2].split(",")[1]), a.records[1].bic, rtol=0, atol=0)


def test_sweep_empty_range():
    _, _, stats, _ = small_instance()
    with pytest.raises(ValueError):
        sweep_k(k_range=[], stats=stats)
