"""Command-line front end: ``icdrisk {analyze,power,fit,score,simulate,report}``.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical
non-convergence.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import sys
import tempfile
import warnings
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
log = logging.getLogger("icdrisk")


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def write_atomic(path, payload):
    """Write text or bytes to ``path`` via a temporary file and rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    data = payload.encode("utf-8") if isinstance(payload, str) else payload
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def read_config(path) -> dict:
    """``key = value`` lines; ``#`` starts a comment; keys use flag names
    with dashes or underscores."""
    values = {}
    for lineno, raw in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        values[key.replace("-", "_")] = value
    return values


def _apply_config(subparser, values):
    actions = {a.dest: a for a in subparser._actions}
    defaults = {}
    for key, text in values.items():
        action = actions.get(key)
        if action is None or key in ("help", "config", "command"):
            raise UsageError(f"unknown config key {key!r}")
        if isinstance(action, (argparse._StoreTrueAction, argparse._StoreFalseAction)):
            lowered = text.lower()
            if lowered not in ("true", "false", "1", "0", "yes", "no"):
                raise UsageError(f"config key {key!r} expects a boolean")
            defaults[key] = lowered in ("true", "1", "yes")
        elif action.nargs in ("*", "+"):
            conv = action.type or str
            defaults[key] = [conv(v) for v in text.split()]
        else:
            try:
                defaults[key] = (action.type or str)(text)
            except (TypeError, ValueError):
                raise UsageError(f"config key {key!r}: invalid value {text!r}") from None
    subparser.set_defaults(**defaults)


# --------------------------------------------------------------------------
# analyze
# --------------------------------------------------------------------------

def _analyze_one(path):
    from .markers import analyze_file
    try:
        mv = analyze_file(path)
    except (OSError, ValueError) as exc:
        return str(path), None, f"{type(exc).__name__}: {exc}"
    return str(path), (mv.to_csv(), mv.to_json(), mv.annotations.to_csv()), None


def cmd_analyze(args) -> int:
    if not args.inputs:
        print("no inputs")
        return EXIT_OK
    out = Path(args.out)
    failures = 0
    combined = []
    if args.jobs > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            results = pool.map(_analyze_one, args.inputs)
    else:
        results = map(_analyze_one, args.inputs)
    for path, payload, error in results:
        if error is not None:
            failures += 1
            print(f"{path}: {error}", file=sys.stderr)
            if args.strict:
                return EXIT_DATA
            continue
        stem = Path(path).stem
        markers_csv, markers_json, beats_csv = payload
        write_atomic(out / f"{stem}.markers.csv", markers_csv)
        write_atomic(out / f"{stem}.markers.json", markers_json)
        if args.annotations:
            write_atomic(out / f"{stem}.beats.csv", beats_csv)
        lines = markers_csv.splitlines()
        combined.extend(lines[1:] if combined else lines)
        print(f"{path}: ok")
    if combined:
        write_atomic(out / "markers.csv", "\n".join(combined) + "\n")
    print(f"{len(args.inputs) - failures} of {len(args.inputs)} records analyzed")
    return EXIT_DATA if failures else EXIT_OK


# --------------------------------------------------------------------------
# power
# --------------------------------------------------------------------------

def cmd_power(args) -> int:
    from .survival import PowerSpec, detectable_hazard_ratio, schoenfeld_events, \
        schoenfeld_events_exact
    if args.invert:
        if args.events is None:
            raise UsageError("--invert requires --events")
        protective = detectable_hazard_ratio(args.events, args.alpha, args.power, args.alloc)
        print(f"events={args.events} alpha={args.alpha} power={args.power} alloc={args.alloc}")
        print(f"detectable_hr={protective:.4f} (inverse {1 / protective:.4f})")
        return EXIT_OK
    if args.hr is None:
        raise UsageError("--hr is required unless --invert is given")
    if args.hr == 1:
        raise UsageError("hazard ratio must differ from 1")
    spec = PowerSpec(args.alpha, args.power, args.hr, args.alloc)
    d = schoenfeld_events(spec, args.rounding)
    print(f"alpha={args.alpha} power={args.power} hr={args.hr} alloc={args.alloc}")
    print(f"required_events={d} (unrounded {schoenfeld_events_exact(spec):.2f})")
    return EXIT_OK


# --------------------------------------------------------------------------
# cohort helpers
# --------------------------------------------------------------------------

def _load_cohort(path):
    from .record_io import CohortError, load_cohort
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise DataError(f"{path}: {exc}") from None
    try:
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always")
            table = load_cohort(text)
        for w in caught:
            print(f"warning: {w.message}", file=sys.stderr)
    except CohortError as exc:
        raise DataError(f"{path}: {exc}") from None
    return table


ENDPOINTS = ("mortality", "shock", "scd", "cardiac_death", "noncardiac_death",
             "inappropriate_shock")


def _endpoint(table, endpoint):
    """``(time, event_code)``; cause-specific endpoints use code 1 for the
    cause and 2 for competing deaths."""
    f = table.followups
    if f is None:
        raise DataError("cohort has no follow-up columns")
    if endpoint == "mortality":
        time = [x.time_years for x in f]
        event = [int(x.died) for x in f]
    elif endpoint == "shock":
        time = [x.shock_time_years for x in f]
        event = [1 if x.shocked else (2 if x.died else 0) for x in f]
    elif endpoint == "inappropriate_shock":
        time = [x.first_inappropriate_shock_years if x.first_inappropriate_shock_years
                is not None else x.time_years for x in f]
        event = [1 if x.first_inappropriate_shock_years is not None else (2 if x.died else 0)
                 for x in f]
    else:
        time = [x.time_years for x in f]
        event = [1 if x.terminal_event == endpoint else (2 if x.died else 0) for x in f]
    time = np.maximum(np.asarray(time, dtype=float), 1e-6)
    return time, np.asarray(event, dtype=int)


def _covariate_matrix(table, names):
    from .risk import covariates_of
    rows = []
    for p in table.patients:
        cov = covariates_of(p)
        cov["icd"] = float(p.group == "icd")
        row = []
        for name in names:
            if name not in cov or cov[name] is None:
                raise DataError(f"patient {p.id}: missing covariate {name!r}")
            row.append(float(cov[name]))
        rows.append(row)
    return np.asarray(rows, dtype=float).reshape(len(rows), len(names))


# --------------------------------------------------------------------------
# fit
# --------------------------------------------------------------------------

def cmd_fit(args) -> int:
    from .survival import SurvivalData, cox_fit, fine_gray_fit
    table = _load_cohort(args.cohort)
    time, event = _endpoint(table, args.endpoint)
    names = tuple(args.covariates)
    x = _covariate_matrix(table, names)
    if args.model == "cox":
        data = SurvivalData(time, (event == 1).astype(int), x, names, np.array(table.ids))
        fit = cox_fit(data)
    else:
        data = SurvivalData(time, event, x, names, np.array(table.ids))
        fit = fine_gray_fit(data, 1)
    payload = fit.to_dict()
    payload["endpoint"] = args.endpoint
    text = json.dumps(payload, indent=2) + "\n"
    if args.out:
        write_atomic(args.out, text)
    else:
        sys.stdout.write(text)
    for k, name in enumerate(names):
        lo, hi = fit.ci95[k]
        print(f"{name}: HR {fit.hr[k]:.3f} (95% CI {lo:.3f}-{hi:.3f})", file=sys.stderr)
    return EXIT_OK


# --------------------------------------------------------------------------
# score
# --------------------------------------------------------------------------

def _read_marker_table(path) -> dict:
    """Combined marker CSV (``record`` column = patient id) to nested dict."""
    out = {}
    with open(path, newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            valid = row["valid"].lower() == "true" and row["value"] != ""
            out.setdefault(row["record"], {})[row["marker"]] = \
                float(row["value"]) if valid else None
    return out


def _score_table(table, mort_w, shock_w, markers, missing):
    from .risk import MissingCovariateError, compute_score, covariates_of
    mort, shock = [], []
    skipped = 0
    for p in table.patients:
        cov = covariates_of(p, markers.get(p.id))
        try:
            with warnings.catch_warnings(record=True) as caught:
                warnings.simplefilter("always")
                mort.append(compute_score(cov, mort_w, missing))
                shock.append(compute_score(cov, shock_w, missing))
            skipped += len(caught)
        except MissingCovariateError as exc:
            raise DataError(f"patient {p.id}: {exc.args[0]}") from None
        except ValueError as exc:
            raise DataError(f"patient {p.id}: {exc}") from None
    if skipped:
        print(f"warning: {skipped} score(s) computed with missing covariates skipped",
              file=sys.stderr)
    return np.asarray(mort), np.asarray(shock)


def _load_weights(path, default):
    from .risk import ScoreWeights
    if path is None:
        return default
    try:
        return ScoreWeights.from_json(Path(path).read_text(encoding="utf-8"))
    except (OSError, ValueError) as exc:
        raise DataError(f"{path}: {exc}") from None


def cmd_score(args) -> int:
    from .risk import MORTALITY_WEIGHTS, SHOCK_WEIGHTS, profiles_to_csv, risk_profiles
    table = _load_cohort(args.cohort)
    markers = _read_marker_table(args.markers) if args.markers else {}
    if args.precomputed:
        try:
            mort = table.extras_array("mortality_score")
            shock = table.extras_array("shock_score")
        except (KeyError, TypeError, ValueError) as exc:
            raise DataError(f"precomputed scores unavailable: {exc}") from None
    else:
        mort_w = _load_weights(args.mortality_weights, MORTALITY_WEIGHTS)
        shock_w = _load_weights(args.shock_weights, SHOCK_WEIGHTS)
        mort, shock = _score_table(table, mort_w, shock_w, markers, args.missing)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        profiles, mcat, scat = risk_profiles(table.ids, mort, shock,
                                             [p.group for p in table.patients])
    for w in caught:
        print(f"warning: {w.message}", file=sys.stderr)
    out = Path(args.out)
    write_atomic(out / "profiles.csv", profiles_to_csv(profiles))
    cuts = {"mortality": {"cuts": list(mcat.cuts), "counts": mcat.counts},
            "shock": {"cuts": list(scat.cuts), "counts": scat.counts},
            "rule": "score <= first cut: low; <= second cut: intermediate; else high"}
    write_atomic(out / "cuts.json", json.dumps(cuts, indent=2) + "\n")
    print(f"scored {len(profiles)} patients; mortality {mcat.counts}; shock {scat.counts}")
    return EXIT_OK


# --------------------------------------------------------------------------
# simulate
# --------------------------------------------------------------------------

def _replicate_summary(config_kwargs, seed):
    from .risk import score_correlation
    from .sim import SimConfig, simulate_cohort
    res = simulate_cohort(SimConfig(**dict(config_kwargs, seed=seed)))
    is_icd, time, died, shock_t, shocked = res.arrays()
    r, _ = score_correlation(res.mortality_scores, res.shock_scores)
    return (seed, int(died.sum()), float(time.sum()), int(shocked[is_icd].sum()),
            float(shock_t[is_icd].sum()), r)


class _ReplicateTask:
    def __init__(self, config_kwargs):
        self.config_kwargs = config_kwargs

    def __call__(self, seed):
        return _replicate_summary(self.config_kwargs, seed)


def _sim_kwargs(args):
    return dict(n_icd=args.n_icd, n_control=args.n_control,
                annual_mortality_hazard=args.mortality_hazard,
                annual_shock_hazard=args.shock_hazard, icd_mortality_hr=args.icd_hr,
                accrual_years=args.accrual_years, max_followup_years=args.followup_years,
                crossover_fraction=args.crossover, af_prevalence=args.af_prevalence,
                score_correlation_rho=args.rho,
                mortality_score_effect=args.mortality_effect,
                shock_score_effect=args.shock_effect)


def cmd_simulate(args) -> int:
    from .record_io import dump_cohort
    from .sim import SimConfig, calibration_csv, calibration_report, run_replicates, \
        simulate_cohort
    from .survival import expected_events
    out = Path(args.out)
    kwargs = _sim_kwargs(args)
    try:
        config = SimConfig(**dict(kwargs, seed=args.seed))
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        result = simulate_cohort(config)
    for w in caught:
        print(f"warning: {w.message}", file=sys.stderr)
    write_atomic(out / "cohort.csv", dump_cohort(result.table))
    write_atomic(out / "episodes.csv", result.episodes_csv())
    write_atomic(out / "calibration.csv", calibration_csv(calibration_report(result)))
    deaths = int(result.arrays()[2].sum())
    n = config.n_icd + config.n_control
    expected = expected_events(n, config.annual_mortality_hazard, config.accrual_years,
                               config.max_followup_years)
    print(f"simulated {n} patients: {deaths} deaths (closed form at HR 1: {expected:.1f})")
    if args.replicates > 1:
        rows = run_replicates(_ReplicateTask(kwargs), args.replicates, args.seed, args.jobs)
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["seed", "deaths", "person_years", "icd_shocks", "icd_shock_person_years",
                         "score_r"])
        for row in rows:
            writer.writerow([row[0], row[1], repr(row[2]), row[3], repr(row[4]), repr(row[5])])
        write_atomic(out / "replicates.csv", buf.getvalue())
        print(f"{args.replicates} replicates: mean deaths "
              f"{np.mean([r[1] for r in rows]):.1f}")
    return EXIT_OK


# --------------------------------------------------------------------------
# report
# --------------------------------------------------------------------------

def _read_profiles(path):
    from .risk import RiskProfile
    try:
        with open(path, newline="", encoding="utf-8") as fh:
            rows = list(csv.DictReader(fh))
        return [RiskProfile(r["id"], float(r["mortality_score"]), float(r["shock_score"]),
                            r["mortality_cat"], r["shock_cat"], r.get("group", "icd"))
                for r in rows]
    except (OSError, KeyError, ValueError) as exc:
        raise DataError(f"{path}: {exc}") from None


def _category_curves(time, event, labels):
    from .risk import CATEGORIES
    from .survival import kaplan_meier
    curves = {}
    for cat in CATEGORIES:
        sel = labels == cat
        if sel.any():
            curves[cat] = kaplan_meier(time[sel], event[sel])
    return curves


def _curves_csv(curves):
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["group", "time", "event_probability", "at_risk"])
    for label, c in curves.items():
        for t, v, n in zip(c.times, c.values, c.at_risk):
            writer.writerow([label, repr(float(t)), repr(float(1 - v)), int(n)])
    return buf.getvalue()


def _at_risk_text(title, curves, grid):
    lines = [title, "years " + " ".join(str(g) for g in grid)]
    lines += [c.at_risk_row(label) for label, c in curves.items()]
    return "\n".join(lines) + "\n"


def _calibration_text(path):
    try:
        with open(path, newline="", encoding="utf-8") as fh:
            rows = list(csv.DictReader(fh))
        lines = ["quantity target observed z"]
        worst = 0.0
        for r in rows:
            z = float(r["z"]) if r.get("z") not in (None, "") else float("nan")
            if np.isfinite(z):
                worst = max(worst, abs(z))
            lines.append(f"{r['quantity']} {float(r['target']):.4g} "
                         f"{float(r['observed']):.4g} {z:+.2f}")
    except (OSError, KeyError, ValueError) as exc:
        raise DataError(f"{path}: {exc}") from None
    lines.append(f"max |z| = {worst:.2f} over {len(rows)} targets")
    return "\n".join(lines) + "\n"


def cmd_report(args) -> int:
    from . import plotting
    from .risk import assign_categories, benefit_grid, categorize, score_correlation
    from .survival import SurvivalData, YEAR_GRID, bootstrap_bias_correct
    if 0 < args.bootstrap < 50:
        raise UsageError("--bootstrap needs at least 50 replicates (0 disables)")
    table = _load_cohort(args.cohort)
    profiles = _read_profiles(args.profiles)
    by_id = {p.id: p for p in profiles}
    if set(by_id) != set(table.ids):
        raise DataError("id mismatch between profiles and cohort")
    profiles = [by_id[i] for i in table.ids]
    mort = np.array([p.mortality_score for p in profiles])
    shock = np.array([p.shock_score for p in profiles])
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        mcat = categorize(mort)
        scat = categorize(shock)
    for w in caught:
        print(f"warning: {w.message}", file=sys.stderr)
    if table.followups is None:
        raise DataError("cohort has no follow-up columns")
    out = Path(args.out)
    grid = benefit_grid(profiles, dict(zip(table.ids, table.followups)))
    write_atomic(out / "benefit_grid.csv", grid.to_csv())
    write_atomic(out / "benefit_grid.txt", grid.to_text())
    plotting.benefit_grid_figure(grid, out / "benefit_grid.png")

    try:
        r, p = score_correlation(mort, shock)
    except ValueError:
        r, p = float("nan"), float("nan")
    write_atomic(out / "score_correlation.csv",
                 f"r,p,n\n{r!r},{p!r},{len(mort)}\n")
    plotting.score_scatter(mort, shock, out / "score_scatter.png",
                           r if np.isfinite(r) else None)

    summaries = []
    specs = (("mortality", "mortality", mcat.categories, None),
             ("shock", "shock", scat.categories, "icd"))
    for name, endpoint, labels, arm in specs:
        time, event = _endpoint(table, endpoint)
        event = (event == 1).astype(int)
        keep = np.ones(len(time), bool) if arm is None else \
            np.array([p.group == arm for p in table.patients])
        if not keep.any():
            continue
        curves = _category_curves(time[keep], event[keep], np.asarray(labels)[keep])
        write_atomic(out / f"{name}_curves.csv", _curves_csv(curves))
        summaries.append(_at_risk_text(f"{name}: patients at risk", curves, YEAR_GRID))
        plotting.cumulative_event_figure(curves, out / f"{name}_curves.png",
                                         f"{name} by {name} risk category")
        if args.bootstrap:
            data = SurvivalData(time[keep], event[keep],
                                np.column_stack([mort, shock])[keep], ("mortality", "shock"))
            col = 0 if name == "mortality" else 1

            def rule(train, col=col):
                cuts = categorize(train.covariates[:, col]).cuts
                return lambda d: assign_categories(d.covariates[:, col], cuts)

            with warnings.catch_warnings():
                warnings.simplefilter("ignore")
                res = bootstrap_bias_correct(data, rule, args.bootstrap, args.seed)
            buf = io.StringIO()
            writer = csv.writer(buf, lineterminator="\n")
            writer.writerow(["group", "year", "apparent", "optimism", "corrected", "optimism_se"])
            for g, label in enumerate(res.groups):
                for h, year in enumerate(res.horizons):
                    writer.writerow([label, repr(float(year)), repr(float(res.apparent[g, h])),
                                     repr(float(res.optimism[g, h])),
                                     repr(float(res.corrected[g, h])),
                                     repr(float(res.optimism_se[g, h]))])
            write_atomic(out / f"{name}_bootstrap.csv", buf.getvalue())
            summaries.append(f"{name}: {res.replicates} bootstrap replicates, "
                             f"{res.redraws} degenerate resamples redrawn\n")
    write_atomic(out / "at_risk.txt", "\n".join(summaries))
    if args.calibration:
        write_atomic(out / "calibration.txt", _calibration_text(args.calibration))
    sys.stdout.write(grid.to_text())
    return EXIT_OK


# --------------------------------------------------------------------------
# parser
# --------------------------------------------------------------------------

def build_parser():
    parser = _Parser(prog="icdrisk", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def add(name, func, help_):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--config", help="key = value file; command-line flags win")
        p.set_defaults(func=func)
        return p

    p = add("analyze", cmd_analyze, "run the Holter marker battery on header files")
    p.add_argument("inputs", nargs="*", help="header files (.hdr); data files sit alongside")
    p.add_argument("--out", default="markers_out")
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--strict", action="store_true", help="stop at the first bad file")
    p.add_argument("--annotations", action="store_true", help="also write beat CSVs")

    p = add("power", cmd_power, "required events or detectable hazard ratio")
    p.add_argument("--alpha", type=float, default=0.05)
    p.add_argument("--power", type=float, default=0.8)
    p.add_argument("--hr", type=float)
    p.add_argument("--alloc", type=float, default=0.5)
    p.add_argument("--rounding", choices=("nearest", "ceil"), default="nearest")
    p.add_argument("--invert", action="store_true")
    p.add_argument("--events", type=int)

    p = add("fit", cmd_fit, "Cox or Fine-Gray fit on a cohort CSV")
    p.add_argument("cohort")
    p.add_argument("--endpoint", choices=ENDPOINTS, default="mortality")
    p.add_argument("--model", choices=("cox", "fine-gray"), default="cox")
    p.add_argument("--covariates", nargs="+", default=["icd"])
    p.add_argument("--out")

    p = add("score", cmd_score, "dual risk scores and quintile categories")
    p.add_argument("cohort")
    p.add_argument("--markers", help="combined marker CSV from analyze (record = patient id)")
    p.add_argument("--mortality-weights")
    p.add_argument("--shock-weights")
    p.add_argument("--missing", choices=("skip", "reject"), default="skip")
    p.add_argument("--precomputed", action="store_true",
                   help="take mortality_score/shock_score from the cohort extras column")
    p.add_argument("--out", default="score_out")

    p = add("simulate", cmd_simulate, "simulate a trial cohort")
    p.add_argument("--out", default="sim_out")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--n-icd", type=int, default=1500)
    p.add_argument("--n-control", type=int, default=750)
    p.add_argument("--mortality-hazard", type=float, default=0.045)
    p.add_argument("--shock-hazard", type=float, default=0.045)
    p.add_argument("--icd-hr", type=float, default=1.0)
    p.add_argument("--accrual-years", type=float, default=0.0)
    p.add_argument("--followup-years", type=float, default=4.0)
    p.add_argument("--crossover", type=float, default=0.04)
    p.add_argument("--af-prevalence", type=float, default=0.12)
    p.add_argument("--rho", type=float, default=0.56)
    p.add_argument("--mortality-effect", type=float, default=0.0)
    p.add_argument("--shock-effect", type=float, default=0.0)
    p.add_argument("--replicates", type=int, default=1)
    p.add_argument("--jobs", type=int, default=1)

    p = add("report", cmd_report, "benefit grid, curves and figures")
    p.add_argument("cohort")
    p.add_argument("--profiles", required=True)
    p.add_argument("--out", default="report_out")
    p.add_argument("--calibration", help="calibration.csv written by simulate")
    p.add_argument("--bootstrap", type=int, default=0, help="replicates (0 disables)")
    p.add_argument("--seed", type=int, default=0)
    return parser


def main(argv=None) -> int:
    from .survival import ConvergenceError
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        if args.config:
            sub = parser._subparsers._group_actions[0].choices[args.command]
            _apply_config(sub, read_config(args.config))
            args = parser.parse_args(argv)
        if getattr(args, "jobs", 1) < 1:
            raise UsageError("--jobs must be >= 1")
        return args.func(args)
    except UsageError as exc:
        print(f"icdrisk: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:
        return int(exc.code or 0)
    except DataError as exc:
        print(f"icdrisk: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except ConvergenceError as exc:
        print(f"icdrisk: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as exc:
        print(f"icdrisk: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
