"""Command-line front end: ingestion, screening and the fitting pipelines.

Input is long-format CSV with one measurement per row::

    site_id,role,subject_id,value          (beta-csv)
    site_id,role,subject_id,M,U            (intensity-csv)

``role`` is one of child/mother/father and ``subject_id`` identifies the
triad (family), so each (site, triad) needs exactly three rows.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import os
import platform
import shlex
import sys
import warnings
from dataclasses import dataclass

import numpy as np

from . import __version__, kernels
from .betacore import ROLES, TriadDataset, compute_site_scales
from .emcluster import EmConfig, SiteStats, hard_assignments, run_em
from .modelselect import bic_value, sweep_k, write_bic_curve

log = logging.getLogger("transmix")

#: offset added to the intensity total when forming beta values
INTENSITY_OFFSET = 100.0
DEFAULT_CUTOFF = 0.5
FORMATS = ("beta-csv", "intensity-csv")
MANIFEST = "run_manifest.txt"


class IngestError(ValueError):
    """Malformed input file; the message names the offending line."""


class IncompleteTriadError(IngestError):
    def __init__(self, missing):
        self.missing = list(missing)
        shown = ", ".join(f"({s}, {r}, {t})" for s, r, t in self.missing[:10])
        more = f" and {len(self.missing) - 10} more" if len(self.missing) > 10 else ""
        super().__init__(f"{len(self.missing)} missing (site, role, subject) cell(s): {shown}{more}")


# -- ingestion -----------------------------------------------------------------

def beta_from_intensity(methylated, unmethylated, offset: float = INTENSITY_OFFSET):
    """``beta = M / (c + M + U)``."""
    m = np.asarray(methylated, dtype=float)
    u = np.asarray(unmethylated, dtype=float)
    return m / (offset + m + u)


def ingest_triads(path, fmt: str = "beta-csv", offset: float = INTENSITY_OFFSET) -> TriadDataset:
    """Read a long-format triad file into a :class:`TriadDataset`.

    Sites and triads keep the order of their first appearance in the file.
    Values of exactly 0 or 1 are clipped into the open interval with a
    warning; anything outside [0, 1] is an error.
    """
    if fmt not in FORMATS:
        raise ValueError(f"format must be one of {FORMATS}")
    columns = ["site_id", "role", "subject_id"] + (["value"] if fmt == "beta-csv" else ["M", "U"])
    sites, subjects, cells = {}, {}, {}
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != columns:
            raise IngestError(f"line 1: expected header {','.join(columns)}, got {header}")
        for row in reader:
            line = reader.line_num
            if not row or all(not f.strip() for f in row):
                continue
            if len(row) != len(columns):
                raise IngestError(f"line {line}: expected {len(columns)} fields, got {len(row)}")
            site, role, subject = (f.strip() for f in row[:3])
            if role not in ROLES:
                raise IngestError(f"line {line}: unknown role {role!r}")
            try:
                nums = [float(f) for f in row[3:]]
            except ValueError:
                raise IngestError(f"line {line}: non-numeric value in {row[3:]}") from None
            if not all(math.isfinite(v) for v in nums):
                raise IngestError(f"line {line}: non-finite value")
            if fmt == "beta-csv":
                value = nums[0]
            else:
                if min(nums) < 0:
                    raise IngestError(f"line {line}: intensities must be nonnegative")
                value = float(beta_from_intensity(*nums, offset=offset))
            if not 0.0 <= value <= 1.0:
                raise IngestError(f"line {line}: value {value} outside [0, 1]")
            key = (site, role, subject)
            if key in cells:
                raise IngestError(f"line {line}: duplicate entry for {key}")
            sites.setdefault(site, len(sites))
            subjects.setdefault(subject, len(subjects))
            cells[key] = value
    if not cells:
        raise IngestError(f"{path}: no data rows")
    J, I = len(sites), len(subjects)
    mats = {r: np.full((J, I), np.nan) for r in ROLES}
    for (site, role, subject), v in cells.items():
        mats[role][sites[site], subjects[subject]] = v
    missing = [(s, r, t) for s in sites for r in ROLES for t in subjects
               if math.isnan(mats[r][sites[s], subjects[t]])]
    if missing:
        raise IncompleteTriadError(missing)
    return TriadDataset.from_arrays(mats["child"], mats["mother"], mats["father"], tuple(sites))


def export_triads(data: TriadDataset, path, subject_ids=None) -> None:
    """Write ``data`` as beta-csv; values are written exactly (``repr``)."""
    subject_ids = subject_ids or [f"t{i + 1}" for i in range(data.n_triads)]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["site_id", "role", "subject_id", "value"])
        for j, site in enumerate(data.site_ids):
            for role in ROLES:
                values = data.role(role)[j]
                for subject, v in zip(subject_ids, values):
                    w.writerow([site, role, subject, repr(float(v))])


# -- screening -----------------------------------------------------------------

@dataclass(frozen=True)
class ScreenReport:
    site_ids: tuple
    r_mother: np.ndarray
    r_father: np.ndarray
    status: tuple          # "pass" | "fail" | "degenerate"
    cutoff: float

    @property
    def kept(self) -> np.ndarray:
        return np.array([s == "pass" for s in self.status])

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["site_id", "r_mother_child", "r_father_child", "status"])
            for row in zip(self.site_ids, self.r_mother, self.r_father, self.status):
                w.writerow([row[0], f"{row[1]:.6f}", f"{row[2]:.6f}", row[3]])


def _rowwise_pearson(x, y):
    xc = x - x.mean(axis=1, keepdims=True)
    yc = y - y.mean(axis=1, keepdims=True)
    den = np.sqrt((xc * xc).sum(axis=1) * (yc * yc).sum(axis=1))
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.clip((xc * yc).sum(axis=1) / den, -1.0, 1.0)


def screen_sites(data: TriadDataset, cutoff: float = DEFAULT_CUTOFF):
    """Keep sites whose mother-child and father-child correlations reach ``cutoff``.

    Correlations are Pearson's r across triads.  Sites constant in any role
    are dropped as "degenerate".  A cutoff of 0 switches screening off, so
    every non-degenerate site is kept whatever the sign of its correlations.

    Returns ``(filtered_dataset, report)``.
    """
    if not 0.0 <= cutoff <= 1.0:
        raise ValueError("cutoff must lie in [0, 1]")
    degenerate = np.zeros(data.n_sites, dtype=bool)
    for role in ROLES:
        degenerate |= ~(data.role(role).std(axis=1) > 0)
    r_m = _rowwise_pearson(data.child, data.mother)
    r_f = _rowwise_pearson(data.child, data.father)
    # the slack keeps exactly collinear sites (r = 1 up to rounding) above any cutoff
    passed = (cutoff <= 0.0) | ((r_m >= cutoff - 1e-12) & (r_f >= cutoff - 1e-12))
    status = tuple("degenerate" if d else ("pass" if p else "fail") for d, p in zip(degenerate, passed))
    report = ScreenReport(data.site_ids, r_m, r_f, status, cutoff)
    keep = np.flatnonzero(report.kept)
    log.info("screening at r >= %g kept %d of %d sites", cutoff, keep.size, data.n_sites)
    return data.subset_sites(keep), report


# -- outputs -------------------------------------------------------------------

def _num(x) -> str:
    return repr(float(x))


def write_assignments(path, site_ids, responsibilities) -> None:
    labels = hard_assignments(responsibilities)
    K = responsibilities.shape[1]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["site_id", "cluster"] + [f"resp_{k + 1}" for k in range(K)])
        for site, lab, row in zip(site_ids, labels, responsibilities):
            w.writerow([site, int(lab) + 1] + [_num(v) for v in row])


def write_coefficients(path, coefficients, mixing, sizes, se=None) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["cluster", "gamma0", "gamma1", "gamma2", "se_gamma0", "se_gamma1", "se_gamma2",
                    "pi", "n_sites"])
        for k, g in enumerate(np.atleast_2d(coefficients)):
            ses = [_num(v) for v in se[k]] if se is not None else ["", "", ""]
            w.writerow([k + 1, *map(_num, g), *ses, _num(mixing[k]), int(sizes[k])])


def write_manifest(path, settings: dict) -> None:
    with open(path, "w") as fh:
        for key in sorted(settings):
            value = str(settings[key]).replace("\n", " ")
            fh.write(f"{key}={value}\n")


def read_manifest(path) -> dict:
    out = {}
    with open(path) as fh:
        for line in fh:
            if "=" in line:
                key, value = line.rstrip("\n").split("=", 1)
                out[key] = value
    return out


# -- commands ------------------------------------------------------------------

def _em_config(args, k=1) -> EmConfig:
    return EmConfig(k, tol=args.tol, max_iter=args.max_iter, n_restarts=args.restarts, seed=args.seed)


def _k_range(args):
    if args.k_min > args.k_max:
        raise ValueError("--k-min exceeds --k-max")
    return range(args.k_min, args.k_max + 1)


def _load(args, info):
    data = ingest_triads(args.input, args.format)
    info["n_sites_input"] = data.n_sites
    info["n_triads"] = data.n_triads
    data, report = screen_sites(data, args.cutoff)
    report.write_csv(os.path.join(args.output, "screening.csv"))
    info["n_sites_retained"] = data.n_sites
    if data.n_sites == 0:
        raise ValueError(f"no sites pass screening at cutoff {args.cutoff}")
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always", RuntimeWarning)
        scales = compute_site_scales(data)
    for w in caught:
        log.warning("%s", w.message)
    return data, SiteStats.build(data, scales)


def _write_fit(args, data, stats, state, se=None):
    out = args.output
    write_assignments(os.path.join(out, "assignments.csv"), data.site_ids, state.responsibilities)
    sizes = np.bincount(hard_assignments(state), minlength=state.n_clusters)
    write_coefficients(os.path.join(out, "coefficients.csv"), state.coefficients, state.mixing, sizes, se)


def cmd_fit(args, info):
    data, stats = _load(args, info)
    state = run_em(config=_em_config(args, args.k), stats=stats)
    bic = bic_value(state.loglik, stats.n_sites, args.k, stats.n_triads)
    with open(os.path.join(args.output, "bic_curve.csv"), "w", newline="") as fh:
        csv.writer(fh).writerows([["k", "bic"], [args.k, _num(bic)]])
    _write_fit(args, data, stats, state)
    info.update(loglik=_num(state.loglik), bic=_num(bic), iterations=state.iteration,
                converged=state.converged, null_clusters=len(state.null_clusters))
    return state


def cmd_sweep(args, info):
    data, stats = _load(args, info)
    result = sweep_k(k_range=_k_range(args), config=_em_config(args), stats=stats)
    write_bic_curve(os.path.join(args.output, "bic_curve.csv"), result)
    _write_fit(args, data, stats, result.selected_state)
    info.update(selected_k=result.selected_k, selection_rule=result.selection_rule,
                failed_k=" ".join(str(r.n_clusters) for r in result.records if r.failed))


def cmd_subsets(args, info):
    from .bigdata import cluster_by_subsets, plan_subsets
    data, stats = _load(args, info)
    size = min(args.subset_size, stats.n_sites)
    plan = plan_subsets(stats.n_sites, size, args.miss_budget, args.seed, n_subsets=args.n_subsets)
    res = cluster_by_subsets(plan=plan, config=_em_config(args), k_range=_k_range(args), stats=stats)
    post_hoc = set(res.post_hoc.tolist())
    with open(os.path.join(args.output, "assignments.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["site_id", "cluster", "post_hoc"])
        for j, (site, lab) in enumerate(zip(data.site_ids, res.final_assignments)):
            w.writerow([site, int(lab) + 1, int(j in post_hoc)])
    sizes = np.bincount(res.final_assignments, minlength=res.n_groups)
    write_coefficients(os.path.join(args.output, "coefficients.csv"), res.final_coefficients,
                       res.mixing, sizes)
    res.write_stage1_csv(os.path.join(args.output, "stage1_gammas.csv"))
    with open(os.path.join(args.output, "bic_curve.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["subset", "k", "bic"])
        for sub_id, curve in enumerate(res.subset_curves):
            w.writerows([sub_id, k, _num(b)] for k, b in curve)
    info.update(subset_size=size, n_subsets=plan.n_subsets, expected_miss_pct=_num(plan.expected_miss_pct),
                n_groups=res.n_groups, conflicts_resolved=res.conflicts_resolved,
                post_hoc_sites=res.post_hoc.size, subset_k=" ".join(map(str, res.subset_k)))


def cmd_bootstrap(args, info):
    from .simlab.study import bootstrap_se
    data, stats = _load(args, info)
    state = run_em(config=_em_config(args, args.k), stats=stats)
    boot = bootstrap_se(data, hard_assignments(state), state.coefficients, args.reps, args.seed,
                        full_refit=args.full_refit, config=_em_config(args, args.k))
    _write_fit(args, data, stats, state, se=boot.coefficient_se)
    info.update(loglik=_num(state.loglik), bootstrap_reps=boot.n_reps,
                bootstrap_skipped=boot.n_skipped)


def cmd_simulate(args, info):
    from .simlab import builtin_scenario, generate_dataset, run_mc_study
    spec = builtin_scenario(args.scenario, args.seed)
    if args.write_data:
        data, truth = generate_dataset(spec)
        export_triads(data, os.path.join(args.output, "data.csv"))
        with open(os.path.join(args.output, "truth.csv"), "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["site_id", "cluster"])
            w.writerows([s, int(t) + 1] for s, t in zip(data.site_ids, truth))
    if args.replicates > 0:
        report = run_mc_study(spec, args.replicates, _k_range(args), _em_config(args, spec.n_clusters),
                              n_jobs=args.jobs)
        report.write_tables(args.output)
        freq = report.k_frequency()
        info.update(k_frequency=" ".join(f"{k}:{n}" for k, n in freq.items()),
                    failed_replicates=report.n_failed)
    info.update(n_sites=spec.n_sites, n_triads=spec.n_triads)


COMMANDS = {"fit": cmd_fit, "sweep": cmd_sweep, "subsets": cmd_subsets,
            "bootstrap": cmd_bootstrap, "simulate": cmd_simulate}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="transmix",
        description="Cluster methylation sites by parent-to-offspring transmission pattern.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--output", required=True, help="directory for result files")
    common.add_argument("--seed", type=int, default=0, help="master seed for all randomness")
    common.add_argument("--tol", type=float, default=1e-7, help="EM log-likelihood stopping threshold")
    common.add_argument("--max-iter", type=int, default=500)
    common.add_argument("--restarts", type=int, default=5, help="EM restarts per fit")
    common.add_argument("-v", "--verbose", action="store_true")

    data_opts = argparse.ArgumentParser(add_help=False)
    data_opts.add_argument("--input", required=True, help="long-format triad CSV")
    data_opts.add_argument("--format", choices=FORMATS, default="beta-csv")
    data_opts.add_argument("--cutoff", type=float, default=DEFAULT_CUTOFF,
                           help="minimum mother-child and father-child correlation (0 disables; "
                                "0.4 is the relaxed alternative)")

    sweep_opts = argparse.ArgumentParser(add_help=False)
    sweep_opts.add_argument("--k-min", type=int, default=2)
    sweep_opts.add_argument("--k-max", type=int, default=8)

    p = sub.add_parser("fit", parents=[common, data_opts], help="fit the mixture at a fixed K")
    p.add_argument("--k", type=int, required=True)
    sub.add_parser("sweep", parents=[common, data_opts, sweep_opts],
                   help="fit over a K range and select K from the BIC curve")
    p = sub.add_parser("subsets", parents=[common, data_opts, sweep_opts],
                       help="subset-sampling clustering for large site counts")
    p.add_argument("--subset-size", type=int, default=2000)
    p.add_argument("--miss-budget", type=float, default=1.0,
                   help="tolerated expected percentage of never-sampled sites")
    p.add_argument("--n-subsets", type=int, default=None, help="force the number of subsets")
    p = sub.add_parser("bootstrap", parents=[common, data_opts],
                       help="fit at a fixed K and add bootstrap standard errors")
    p.add_argument("--k", type=int, required=True)
    p.add_argument("--reps", type=int, default=100)
    p.add_argument("--full-refit", action="store_true",
                   help="refit the whole mixture per replicate instead of holding assignments fixed")
    p = sub.add_parser("simulate", parents=[common, sweep_opts],
                       help="generate a built-in scenario and run a Monte Carlo study")
    p.add_argument("--scenario", default="S0")
    p.add_argument("--replicates", type=int, default=1)
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--write-data", action="store_true",
                   help="also write the scenario dataset (data.csv, truth.csv)")
    return parser


def _settings(args) -> dict:
    out = {k: v for k, v in vars(args).items() if k != "verbose"}
    out.update(transmix=__version__, numpy=np.__version__, python=platform.python_version(),
               kernel_backend=kernels.BACKEND)
    import scipy
    out["scipy"] = scipy.__version__
    return out


def run_pipeline(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        os.makedirs(args.output, exist_ok=True)
        info = {}
        COMMANDS[args.command](args, info)
        settings = _settings(args)
        settings.update(info)
        settings["argv"] = shlex.join(argv)
        write_manifest(os.path.join(args.output, MANIFEST), settings)
    except Exception as exc:
        record = {"status": "error", "command": args.command, "error": type(exc).__name__,
                  "message": str(exc)}
        if isinstance(exc, IncompleteTriadError):
            record["missing"] = [list(m) for m in exc.missing]
        text = json.dumps(record, sort_keys=True)
        print(text, file=sys.stderr)
        try:
            with open(os.path.join(args.output, "error.json"), "w") as fh:
                fh.write(text + "\n")
        except OSError:
            pass
        log.debug("pipeline failure", exc_info=True)
        return 1
    return 0


def rerun_from_manifest(manifest_path, output=None) -> int:
    """Repeat the run recorded in a manifest, optionally into another directory."""
    argv = shlex.split(read_manifest(manifest_path)["argv"])
    if output is not None:
        i = argv.index("--output")
        argv[i + 1] = str(output)
    return run_pipeline(argv)


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    if argv[:1] == ["rerun"]:
        p = argparse.ArgumentParser(prog="transmix rerun",
                                    description="repeat the run recorded in a manifest")
        p.add_argument("manifest")
        p.add_argument("--output", default=None)
        a = p.parse_args(argv[1:])
        return rerun_from_manifest(a.manifest, a.output)
    return run_pipeline(argv)


if __name__ == "__main__":
    sys.exit(main())
