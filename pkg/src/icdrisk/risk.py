"""Dual mortality / shock risk scores, quintile categories, the 3x3 benefit
grid and stratified ICD-benefit analysis."""

from __future__ import annotations

import csv
import io
import json
import math
import warnings
from collections.abc import Mapping
from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from .record_io import CohortTable, FollowUp, Patient
from .survival import SurvivalData, cox_fit

CATEGORIES = ("low", "intermediate", "high")
# bottom two quintiles, middle two, top one
CATEGORY_FRACTIONS = (0.4, 0.4, 0.2)
ILLUSTRATIVE = "illustrative placeholder, not fitted to trial data"


class MissingCovariateError(KeyError):
    pass


class MissingCovariateWarning(UserWarning):
    pass


class DegenerateScoresWarning(UserWarning):
    pass


# --------------------------------------------------------------------------
# Weights and scores
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class Coefficient:
    coef: float
    unit: str = ""
    provenance: str = ILLUSTRATIVE


@dataclass
class ScoreWeights:
    name: str
    weights: dict
    intercept: float = 0.0
    provenance: str = ILLUSTRATIVE

    def __post_init__(self):
        parsed = {}
        for key, value in self.weights.items():
            if not isinstance(value, Coefficient):
                value = (Coefficient(**value) if isinstance(value, dict)
                         else Coefficient(float(value)))
            if not math.isfinite(value.coef):
                raise ValueError(f"weight {key!r} is not finite")
            parsed[key] = value
        self.weights = parsed
        if not math.isfinite(self.intercept):
            raise ValueError("intercept is not finite")

    def scaled(self, factor) -> "ScoreWeights":
        return ScoreWeights(self.name, {k: Coefficient(v.coef * factor, v.unit, v.provenance)
                                        for k, v in self.weights.items()},
                            self.intercept * factor, self.provenance)

    def to_json(self) -> str:
        return json.dumps({
            "name": self.name, "intercept": self.intercept, "provenance": self.provenance,
            "weights": {k: {"coef": v.coef, "unit": v.unit, "provenance": v.provenance}
                        for k, v in self.weights.items()},
        }, indent=2)

    @classmethod
    def from_json(cls, text) -> "ScoreWeights":
        raw = json.loads(text)
        try:
            return cls(raw["name"], raw["weights"], float(raw.get("intercept", 0.0)),
                       raw.get("provenance", ILLUSTRATIVE))
        except (KeyError, TypeError) as exc:
            raise ValueError(f"malformed weights file: {exc}") from None


MORTALITY_WEIGHTS = ScoreWeights("mortality", {
    "age_years": Coefficient(0.03, "per year"),
    "nyha": Coefficient(0.35, "per class"),
    "creatinine_mg_dl": Coefficient(0.30, "per mg/dl"),
    "af": Coefficient(0.35, "present"),
    "bnp_pg_ml": Coefficient(0.0004, "per pg/ml"),
    "lvef_percent": Coefficient(-0.03, "per %"),
})

SHOCK_WEIGHTS = ScoreWeights("shock", {
    "nsvt_episodes": Coefficient(0.15, "per episode"),
    "pvc_count": Coefficient(0.0002, "per beat"),
    "lvef_percent": Coefficient(-0.04, "per %"),
    "twa": Coefficient(0.02, "per uV"),
})


def covariates_of(patient: Patient, markers=None) -> dict:
    """Numeric covariate mapping for a patient plus optional Holter markers.

    ``markers`` may be a :class:`~icdrisk.markers.MarkerVector` (invalid
    markers are treated as missing) or a plain mapping.
    """
    values = {
        "age_years": patient.age_years,
        "lvef_percent": patient.lvef_percent,
        "nyha": patient.nyha_numeric,
        "af": float(patient.af),
        "diabetes": float(patient.diabetes),
        "male": float(patient.sex == "male"),
        "ischemic": float(patient.etiology == "ischemic"),
        "creatinine_mg_dl": patient.creatinine_mg_dl,
        "bnp_pg_ml": patient.bnp_pg_ml,
    }
    for key, raw in patient.extras.items():
        try:
            values.setdefault(key, float(raw))
        except (TypeError, ValueError):
            pass
    if markers is not None:
        rows = markers if isinstance(markers, Mapping) else markers.values
        for key, row in rows.items():
            if hasattr(row, "valid"):
                values[key] = row.value if row.valid else None
            else:
                values[key] = row
    return values


def compute_score(covariates, weights: ScoreWeights, missing="skip", markers=None) -> float:
    """Linear predictor ``intercept + sum(coef * covariate)``.

    ``covariates`` is a mapping or a :class:`Patient`. Missing (``None``)
    covariates are skipped with a warning, or raise when ``missing="reject"``.
    """
    if missing not in ("skip", "reject"):
        raise ValueError("missing policy must be 'skip' or 'reject'")
    if isinstance(covariates, Patient):
        covariates = covariates_of(covariates, markers)
    score = weights.intercept
    skipped = []
    for key, c in weights.weights.items():
        value = covariates.get(key)
        if value is None:
            if missing == "reject":
                raise MissingCovariateError(f"missing covariate {key!r}")
            skipped.append(key)
            continue
        value = float(value)
        if not math.isfinite(value):
            raise ValueError(f"non-finite covariate {key!r}")
        score += c.coef * value
    if skipped:
        warnings.warn(f"{weights.name} score: skipped missing {', '.join(skipped)}",
                      MissingCovariateWarning, stacklevel=2)
    return float(score)


# --------------------------------------------------------------------------
# Categories
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class Categorization:
    categories: np.ndarray
    cuts: tuple[float, float]
    counts: dict

    def apply(self, scores) -> np.ndarray:
        return assign_categories(scores, self.cuts)


def assign_categories(scores, cuts) -> np.ndarray:
    """Map scores to categories using upper-inclusive cut values."""
    s = np.asarray(scores, dtype=np.float64)
    idx = (s > cuts[0]).astype(int) + (s > cuts[1]).astype(int)
    return np.asarray(CATEGORIES, dtype=object)[idx]


def categorize(scores) -> Categorization:
    """Bottom 40% low, middle 40% intermediate, top 20% high.

    The cut values are the largest score of the low and intermediate groups;
    scores equal to a cut fall in the lower category, so tied scores never
    straddle two categories.
    """
    s = np.asarray(scores, dtype=np.float64)
    n = len(s)
    if n < 5:
        raise ValueError("at least 5 scores required")
    if not np.all(np.isfinite(s)):
        raise ValueError("scores must be finite")
    n_low = int(math.floor(CATEGORY_FRACTIONS[0] * n + 0.5))
    n_high = int(math.floor(CATEGORY_FRACTIONS[2] * n + 0.5))
    n_mid = n - n_low - n_high
    ordered = np.sort(s, kind="stable")
    cuts = (float(ordered[n_low - 1]), float(ordered[n_low + n_mid - 1]))
    cats = assign_categories(s, cuts)
    counts = {c: int(np.sum(cats == c)) for c in CATEGORIES}
    if (abs(counts["low"] - n_low) > 1 or abs(counts["intermediate"] - n_mid) > 1
            or abs(counts["high"] - n_high) > 1):
        warnings.warn("degenerate score distribution", DegenerateScoresWarning, stacklevel=2)
    return Categorization(cats, cuts, counts)


def annualized_rate(event_count, person_years) -> float:
    """Events per 100 person-years."""
    if not person_years > 0:
        raise ValueError("person_years must be positive")
    return 100.0 * event_count / person_years


# --------------------------------------------------------------------------
# Risk profiles and the benefit grid
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class RiskProfile:
    id: str
    mortality_score: float
    shock_score: float
    mortality_cat: str
    shock_cat: str
    group: str = "icd"


def risk_profiles(ids, mortality_scores, shock_scores, groups=None):
    """Profiles and the two categorizations (cut values reusable on new patients)."""
    mort = categorize(mortality_scores)
    shock = categorize(shock_scores)
    groups = ["icd"] * len(ids) if groups is None else list(groups)
    profiles = [RiskProfile(str(i), float(m), float(s), mc, sc, g)
                for i, m, s, mc, sc, g in zip(ids, mortality_scores, shock_scores,
                                                mort.categories, shock.categories, groups)]
    return profiles, mort, shock


def profiles_to_csv(profiles) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["id", "group", "mortality_score", "shock_score", "mortality_cat",
                     "shock_cat"])
    for p in profiles:
        writer.writerow([p.id, p.group, repr(p.mortality_score), repr(p.shock_score),
                         p.mortality_cat, p.shock_cat])
    return buf.getvalue()


@dataclass
class GridCell:
    count: int = 0
    person_years: float = 0.0
    deaths: int = 0
    shock_count: int = 0
    shock_person_years: float = 0.0
    shocks: int = 0

    @property
    def mortality_rate(self) -> float | None:
        return annualized_rate(self.deaths, self.person_years) if self.person_years > 0 else None

    @property
    def shock_rate(self) -> float | None:
        if self.shock_person_years <= 0:
            return None
        return annualized_rate(self.shocks, self.shock_person_years)


@dataclass
class BenefitGrid:
    cells: dict = field(default_factory=dict)  # (mortality_cat, shock_cat) -> GridCell

    def __getitem__(self, key) -> GridCell:
        return self.cells[key]

    @property
    def total_count(self) -> int:
        return sum(c.count for c in self.cells.values())

    @property
    def total_person_years(self) -> float:
        return math.fsum(c.person_years for c in self.cells.values())

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["mortality_cat", "shock_cat", "count", "person_years", "deaths",
                         "mortality_pct_per_year", "shock_patients", "shock_person_years",
                         "shocks", "shock_pct_per_year"])
        for m in CATEGORIES:
            for s in CATEGORIES:
                c = self.cells[(m, s)]
                writer.writerow([m, s, c.count, _fmt(c.person_years), c.deaths,
                                 _fmt(c.mortality_rate), c.shock_count,
                                 _fmt(c.shock_person_years), c.shocks, _fmt(c.shock_rate)])
        return buf.getvalue()

    def to_text(self) -> str:
        """Human-readable layout: mortality category rows (high on top) by
        shock category columns; each cell shows n, mortality and shock %/yr."""
        width = 26
        lines = ["mortality \\ shock".ljust(14) + "".join(s.center(width) for s in CATEGORIES)]
        for m in reversed(CATEGORIES):
            row1, row2 = m.ljust(14), "".ljust(14)
            for s in CATEGORIES:
                c = self.cells[(m, s)]
                row1 += f"n={c.count}".center(width)
                mr = "-" if c.mortality_rate is None else f"{c.mortality_rate:.1f}"
                sr = "-" if c.shock_rate is None else f"{c.shock_rate:.1f}"
                row2 += f"mort {mr} / shock {sr}".center(width)
            lines += [row1, row2]
        lines.append("rates in % per year (events per 100 person-years)")
        return "\n".join(lines) + "\n"


def _fmt(v):
    return "" if v is None else repr(float(v))


def benefit_grid(profiles, followups) -> BenefitGrid:
    """Counts and annualized mortality / first-shock rates per category cell.

    ``followups`` maps patient id to :class:`FollowUp`. Shock exposure counts
    ICD-arm patients only, from implant to first appropriate shock or end of
    follow-up.
    """
    followups = dict(followups)
    ids = [p.id for p in profiles]
    missing = set(ids) ^ set(followups)
    if missing or len(set(ids)) != len(ids):
        raise ValueError(f"id mismatch between profiles and follow-ups: "
                         f"{sorted(missing)[:5] if missing else 'duplicate ids'}")
    grid = BenefitGrid({(m, s): GridCell() for m in CATEGORIES for s in CATEGORIES})
    for p in profiles:
        f: FollowUp = followups[p.id]
        cell = grid.cells[(p.mortality_cat, p.shock_cat)]
        cell.count += 1
        cell.person_years += f.time_years
        cell.deaths += int(f.died)
        if p.group == "icd":
            cell.shock_count += 1
            cell.shock_person_years += f.shock_time_years
            cell.shocks += int(f.shocked)
    return grid


def score_correlation(x, y) -> tuple[float, float]:
    """Pearson r with a two-sided p value from the t transform."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or len(x) < 3:
        raise ValueError("need at least 3 paired values")
    xc, yc = x - x.mean(), y - y.mean()
    sxx, syy = xc @ xc, yc @ yc
    if sxx == 0 or syy == 0:
        raise ValueError("zero variance")
    r = float(np.clip((xc @ yc) / math.sqrt(sxx * syy), -1.0, 1.0))
    df = len(x) - 2
    if abs(r) == 1.0:
        return r, 0.0
    t = r * math.sqrt(df / (1 - r * r))
    return r, float(2 * stats.t.sf(abs(t), df))


# --------------------------------------------------------------------------
# Stratified benefit
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class StratumEffect:
    name: str
    hr: float
    ci95: tuple[float, float]
    n: int
    events: int


@dataclass(frozen=True)
class StratifiedBenefit:
    strata: dict
    interaction_p: float
    interaction_hr_ratio: float
    median_score: float


def stratified_benefit_arrays(is_icd, time, event, scores) -> StratifiedBenefit:
    """ICD-vs-control hazard ratios below / above the median score, and the
    Wald p value of the group x stratum interaction in a joint Cox model."""
    is_icd = np.asarray(is_icd, dtype=float)
    time = np.asarray(time, dtype=float)
    event = np.asarray(event, dtype=int)
    scores = np.asarray(scores, dtype=float)
    median = float(np.median(scores))
    above = (scores > median).astype(float)
    strata = {}
    for name, mask in (("below", above == 0), ("above", above == 1)):
        arms = set(is_icd[mask].tolist())
        if arms != {0.0, 1.0}:
            raise ValueError(f"stratum {name!r} lacks an ICD or a control arm")
        if not np.any(event[mask]):
            raise ValueError(f"stratum {name!r} has no events")
        fit = cox_fit(SurvivalData(time[mask], event[mask], is_icd[mask], ("icd",)))
        lo, hi = fit.ci95[0]
        strata[name] = StratumEffect(name, float(fit.hr[0]), (float(lo), float(hi)),
                                     int(mask.sum()), int(np.sum(event[mask] != 0)))
    x = np.column_stack([is_icd, above, is_icd * above])
    joint = cox_fit(SurvivalData(time, event, x, ("icd", "above_median", "icd_x_above")))
    return StratifiedBenefit(strata, joint.wald_p(2), float(joint.hr[2]), median)


def stratified_benefit(table: CohortTable, proportional_scores) -> StratifiedBenefit:
    """All-cause mortality benefit split at the median proportional score."""
    if table.followups is None:
        raise ValueError("cohort has no follow-up columns")
    is_icd = [p.group == "icd" for p in table.patients]
    time = [max(f.time_years, 1e-9) for f in table.followups]
    event = [int(f.died) for f in table.followups]
    return stratified_benefit_arrays(is_icd, time, event, proportional_scores)
