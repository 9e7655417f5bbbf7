import csv
import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from transmix.betacore import TriadDataset
from transmix.cli import (IncompleteTriadError, IngestError, beta_from_intensity, export_triads,
                          ingest_triads, main, read_manifest, screen_sites)
from transmix.simlab import ScenarioSpec, generate_dataset


def _write(path, rows, header="site_id,role,subject_id,value"):
    path.write_text("\n".join([header] + [",".join(map(str, r)) for r in rows]) + "\n")
    return path


def _full_rows(values):
    """values[site][role][subject] -> long-format rows."""
    rows = []
    for site, by_role in values.items():
        for role, vals in by_role.items():
            rows += [(site, role, f"f{i}", v) for i, v in enumerate(vals)]
    return rows


def test_intensity_formula():
    assert beta_from_intensity(100, 100) == pytest.approx(1 / 3, abs=1e-15)
    assert beta_from_intensity(0, 0) == 0.0


def test_ingest_beta_shape_and_order(tmp_path):
    vals = {"cgB": {"child": [0.1, 0.2], "mother": [0.3, 0.4], "father": [0.5, 0.6]},
            "cgA": {"child": [0.7, 0.8], "mother": [0.9, 0.15], "father": [0.25, 0.35]}}
    data = ingest_triads(_write(tmp_path / "d.csv", _full_rows(vals)))
    assert data.site_ids == ("cgB", "cgA")
    assert data.child.shape == (2, 2)
    np.testing.assert_array_equal(data.mother[1], [0.9, 0.15])


def test_ingest_intensity_clips_zero(tmp_path, caplog):
    rows = []
    for role in ("child", "mother", "father"):
        rows += [("s1", role, "f1", 100, 100), ("s1", role, "f2", 0, 0)]
    data = ingest_triads(_write(tmp_path / "i.csv", rows, "site_id,role,subject_id,M,U"),
                         "intensity-csv")
    assert data.child[0, 0] == pytest.approx(1 / 3)
    assert data.child[0, 1] == 1e-6
    assert "clipped" in caplog.text


@pytest.mark.parametrize("rows, line, fragment", [
    ([("s1", "child", "f1", "abc")], 2, "non-numeric"),
    ([("s1", "child", "f1", 0.5), ("s1", "uncle", "f1", 0.5)], 3, "unknown role"),
    ([("s1", "child", "f1", 0.5), ("s1", "child", "f1", 0.6)], 3, "duplicate"),
    ([("s1", "child", "f1", 1.5)], 2, "outside"),
    ([("s1", "child", "f1")], 2, "expected 4 fields"),
])
def test_ingest_parse_errors_name_line(tmp_path, rows, line, fragment):
    with pytest.raises(IngestError, match=f"line {line}: .*{fragment}"):
        ingest_triads(_write(tmp_path / "bad.csv", rows))


def test_ingest_bad_header(tmp_path):
    p = tmp_path / "h.csv"
    p.write_text("site,role,subject,value\n")
    with pytest.raises(IngestError, match="line 1"):
        ingest_triads(p)


def test_ingest_incomplete_triad_lists_missing(tmp_path):
    vals = {"s1": {"child": [0.1, 0.2], "mother": [0.3, 0.4], "father": [0.5, 0.6]}}
    rows = _full_rows(vals)[:-1]
    with pytest.raises(IncompleteTriadError) as err:
        ingest_triads(_write(tmp_path / "inc.csv", rows))
    assert err.value.missing == [("s1", "father", "f1")]


@settings(max_examples=20, deadline=None)
@given(st.integers(1, 4), st.integers(2, 5), st.integers(0, 2**32 - 1))
def test_export_ingest_round_trip(tmp_path_factory, J, I, seed):
    rng = np.random.default_rng(seed)
    data = TriadDataset(*(rng.uniform(1e-6, 1 - 1e-6, (J, I)) for _ in range(3)),
                        tuple(f"cg{j}" for j in range(J)))
    path = tmp_path_factory.mktemp("rt") / "x.csv"
    export_triads(data, path)
    back = ingest_triads(path)
    assert back.site_ids == data.site_ids
    for role in ("child", "mother", "father"):
        np.testing.assert_allclose(back.role(role), data.role(role), rtol=0, atol=1e-12)


# -- screening -----------------------------------------------------------------

def _screen_data():
    rng = np.random.default_rng(0)
    mother = rng.uniform(0.2, 0.8, (3, 5))
    father = rng.uniform(0.2, 0.8, (3, 5))
    child = rng.uniform(0.2, 0.8, (3, 5))
    child[0] = mother[0]
    father[0] = mother[0]
    mother[2] = 0.4                      # degenerate role
    return TriadDataset(child, mother, father, ("same", "random", "flat"))


def test_screen_cutoff_zero_keeps_non_degenerate():
    kept, report = screen_sites(_screen_data(), 0.0)
    assert kept.site_ids == ("same", "random")
    assert report.status[2] == "degenerate"


def test_screen_perfect_correlation_passes_any_cutoff():
    kept, report = screen_sites(_screen_data(), 1.0)
    assert kept.site_ids == ("same",)
    assert report.r_mother[0] == pytest.approx(1.0)


def test_screen_hand_computed_correlation():
    x = np.array([0.1, 0.2, 0.3, 0.4, 0.5])
    y = np.array([0.3, 0.1, 0.5, 0.2, 0.4])
    # hand computation: deviations (-2,-1,0,1,2)/10 and (0,-2,2,-1,1)/10
    # r = (0+2+0-1+2)/sqrt(10*10) = 0.3
    data = TriadDataset(x[None], y[None], x[None], ("s",))
    kept, report = screen_sites(data, 0.5)
    assert report.r_mother[0] == pytest.approx(0.3, abs=1e-12)
    assert kept.n_sites == 0 and report.status == ("fail",)


@given(st.floats(0, 1), st.floats(0, 1))
def test_screen_monotone(c1, c2):
    lo, hi = sorted((c1, c2))
    rng = np.random.default_rng(1)
    base = rng.uniform(0.1, 0.9, (30, 8))
    data = TriadDataset(base, np.clip(base + rng.normal(0, 0.2, base.shape), 0.01, 0.99),
                        np.clip(base + rng.normal(0, 0.2, base.shape), 0.01, 0.99))
    a, _ = screen_sites(data, lo)
    b, _ = screen_sites(data, hi)
    assert set(b.site_ids) <= set(a.site_ids)


def test_screen_rejects_bad_cutoff():
    with pytest.raises(ValueError):
        screen_sites(_screen_data(), 1.5)


# -- pipelines -----------------------------------------------------------------

@pytest.fixture(scope="module")
def two_cluster_file(tmp_path_factory):
    spec = ScenarioSpec("custom", 30, (((-2.0, 1.5, 0.0), 40), ((1.0, 0.0, -1.5), 40)), seed=3)
    data, _ = generate_dataset(spec)
    path = tmp_path_factory.mktemp("data") / "triads.csv"
    export_triads(data, path)
    return path


def _read(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


def test_fit_outputs(two_cluster_file, tmp_path):
    out = tmp_path / "fit"
    rc = main(["fit", "--input", str(two_cluster_file), "--output", str(out), "--k", "2",
               "--cutoff", "0", "--restarts", "2"])
    assert rc == 0
    coef = _read(out / "coefficients.csv")
    assert coef[0] == ["cluster", "gamma0", "gamma1", "gamma2", "se_gamma0", "se_gamma1", "se_gamma2",
                       "pi", "n_sites"]
    assert len(coef) == 3
    assign = _read(out / "assignments.csv")
    assert assign[0] == ["site_id", "cluster", "resp_1", "resp_2"] and len(assign) == 81
    manifest = read_manifest(out / "run_manifest.txt")
    assert manifest["k"] == "2" and manifest["seed"] == "0" and manifest["tol"] == "1e-07"
    assert manifest["n_sites_retained"] == "80" and "numpy" in manifest


def test_sweep_outputs_and_determinism(two_cluster_file, tmp_path):
    args = ["sweep", "--input", str(two_cluster_file), "--cutoff", "0", "--k-min", "1", "--k-max", "3",
            "--restarts", "2", "--seed", "11"]
    assert main(args + ["--output", str(tmp_path / "a")]) == 0
    assert main(args + ["--output", str(tmp_path / "b")]) == 0
    curve = _read(tmp_path / "a" / "bic_curve.csv")
    assert curve[0] == ["k", "bic"] and [r[0] for r in curve[1:]] == ["1", "2", "3"]
    assert read_manifest(tmp_path / "a" / "run_manifest.txt")["selected_k"] == "2"
    for name in ("assignments.csv", "coefficients.csv", "bic_curve.csv"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_rerun_from_manifest(two_cluster_file, tmp_path):
    first = tmp_path / "first"
    assert main(["fit", "--input", str(two_cluster_file), "--output", str(first), "--k", "2",
                 "--cutoff", "0", "--restarts", "1", "--seed", "5"]) == 0
    assert main(["rerun", str(first / "run_manifest.txt"), "--output", str(tmp_path / "again")]) == 0
    for name in ("assignments.csv", "coefficients.csv"):
        assert (first / name).read_bytes() == (tmp_path / "again" / name).read_bytes()


def test_bootstrap_command_fills_standard_errors(two_cluster_file, tmp_path):
    out = tmp_path / "boot"
    assert main(["bootstrap", "--input", str(two_cluster_file), "--output", str(out), "--k", "2",
                 "--cutoff", "0", "--restarts", "1", "--reps", "5"]) == 0
    for row in _read(out / "coefficients.csv")[1:]:
        assert all(float(v) >= 0 for v in row[4:7])


def test_subsets_command(two_cluster_file, tmp_path):
    out = tmp_path / "sub"
    assert main(["subsets", "--input", str(two_cluster_file), "--output", str(out), "--cutoff", "0",
                 "--subset-size", "50", "--miss-budget", "5", "--k-min", "1", "--k-max", "3",
                 "--restarts", "1"]) == 0
    assign = _read(out / "assignments.csv")
    assert assign[0] == ["site_id", "cluster", "post_hoc"] and len(assign) == 81
    manifest = read_manifest(out / "run_manifest.txt")
    assert int(manifest["n_subsets"]) == 4
    assert _read(out / "stage1_gammas.csv")[0][0] == "subset"


def test_simulate_command(tmp_path):
    out = tmp_path / "sim"
    assert main(["simulate", "--scenario", "S0", "--replicates", "0", "--write-data",
                 "--output", str(out), "--seed", "2"]) == 0
    data = ingest_triads(out / "data.csv")
    assert data.n_sites == 2000 and data.n_triads == 60
    assert len(_read(out / "truth.csv")) == 2001


def test_screening_default_drops_uncorrelated_sites(two_cluster_file, tmp_path, capsys):
    # generated data carries no individual-level correlation, so the default
    # cutoff of 0.5 removes every site and the run fails cleanly
    out = tmp_path / "err"
    rc = main(["fit", "--input", str(two_cluster_file), "--output", str(out), "--k", "2"])
    assert rc != 0
    record = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
    assert record["status"] == "error" and "screening" in record["message"]
    assert json.loads((out / "error.json").read_text()) == record


def test_missing_input_is_reported(tmp_path, capsys):
    rc = main(["fit", "--input", str(tmp_path / "nope.csv"), "--output", str(tmp_path / "o"), "--k", "2"])
    assert rc == 1
    assert json.loads(capsys.readouterr().err)["error"] == "FileNotFoundError"


def test_incomplete_triad_record(tmp_path, capsys):
    p = _write(tmp_path / "inc.csv", [("s1", "child", "f1", 0.5)])
    assert main(["fit", "--input", str(p), "--output", str(tmp_path / "o"), "--k", "1"]) == 1
    record = json.loads(capsys.readouterr().err)
    assert record["error"] == "IncompleteTriadError"
    assert ["s1", "mother", "f1"] in record["missing"]
