"""Synthetic trial cohorts with competing deaths, device episodes, crossover
and correlated dual risk scores.

The simulator is the reference oracle for the statistics modules: every
quantity it draws from a known distribution can be compared with an
estimator's output.
"""

from __future__ import annotations

import csv
import io
import math
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .record_io import AF_PREVALENCE_CAP, CohortTable, CohortWarning, FollowUp, Patient
from .risk import CATEGORIES, categorize, score_correlation

DEFAULT_ZONES = {"vt": 200.0, "vf": 240.0}
DEATH_CAUSES = ("scd", "cardiac_death", "noncardiac_death")
RHYTHMS = ("vt", "vf", "svt_af")


@dataclass
class SimConfig:
    n_icd: int = 1500
    n_control: int = 750
    annual_mortality_hazard: float = 0.045
    annual_shock_hazard: float = 0.045
    icd_mortality_hr: float = 1.0
    accrual_years: float = 0.0
    max_followup_years: float = 4.0
    death_cause_mix: tuple = (0.35, 0.35, 0.30)
    crossover_fraction: float = 0.04
    af_prevalence: float = 0.12
    score_correlation_rho: float = 0.56
    seed: int = 0
    # log hazard ratio per SD of the latent mortality / shock score
    mortality_score_effect: float = 0.0
    shock_score_effect: float = 0.0
    # ICD mortality HR below / above the median proportional score; overrides
    # icd_mortality_hr when set
    stratum_icd_hr: tuple | None = None
    # {(mortality_cat, shock_cat): (mortality_hazard, shock_hazard)}
    cell_hazards: dict | None = None
    svt_episode_rate: float = 0.03
    svt_episode_rate_af: float = 0.15
    slow_vt_fraction: float = 0.3
    zones: dict = field(default_factory=lambda: dict(DEFAULT_ZONES))

    def __post_init__(self):
        mix = np.asarray(self.death_cause_mix, dtype=float)
        if len(mix) != 3 or np.any(mix < 0) or not math.isclose(mix.sum(), 1.0, abs_tol=1e-9):
            raise ValueError("death_cause_mix must be 3 probabilities summing to 1")
        if self.annual_mortality_hazard < 0 or self.annual_shock_hazard < 0:
            raise ValueError("hazards must be >= 0")
        for name in ("crossover_fraction", "af_prevalence"):
            if not 0 <= getattr(self, name) <= 1:
                raise ValueError(f"{name} must lie in [0, 1]")
        if not -1 < self.score_correlation_rho < 1:
            raise ValueError("score_correlation_rho must lie in (-1, 1)")
        if self.accrual_years > self.max_followup_years or self.accrual_years < 0:
            raise ValueError("accrual must lie within [0, max_followup_years]")
        if self.n_icd < 0 or self.n_control < 0:
            raise ValueError("arm sizes must be >= 0")


@dataclass(frozen=True)
class DeviceEpisode:
    patient_id: str
    time_years: float
    rhythm: str
    rate_bpm: float
    therapy: str
    adjudication: str


def therapy_for(rate_bpm, zones=None) -> str:
    """Therapy delivered for a detected rate. VT-zone therapy is modeled as
    a shock, so both programmed zones end in ``"shock"``."""
    zones = zones or DEFAULT_ZONES
    if rate_bpm <= 0:
        raise ValueError("rate_bpm must be positive")
    return "none" if rate_bpm < zones["vt"] else "shock"


def adjudicate_episode(episode, zones=None) -> str:
    """``appropriate`` for treated VT/VF, ``inappropriate`` for treated
    SVT/AF, ``none`` when no therapy was delivered."""
    rhythm = episode.rhythm if hasattr(episode, "rhythm") else episode[0]
    rate = episode.rate_bpm if hasattr(episode, "rate_bpm") else episode[1]
    if rhythm not in RHYTHMS:
        raise ValueError(f"unknown rhythm {rhythm!r}")
    if therapy_for(rate, zones) == "none":
        return "none"
    return "appropriate" if rhythm in ("vt", "vf") else "inappropriate"


def make_episode(patient_id, time_years, rhythm, rate_bpm, zones=None) -> DeviceEpisode:
    therapy = therapy_for(rate_bpm, zones)
    return DeviceEpisode(patient_id, float(time_years), rhythm, float(rate_bpm), therapy,
                         adjudicate_episode((rhythm, rate_bpm), zones))


@dataclass
class SimResult:
    table: CohortTable
    episodes: list
    mortality_scores: np.ndarray
    shock_scores: np.ndarray
    proportional_scores: np.ndarray
    config: SimConfig

    @property
    def followups(self):
        return self.table.followups

    def arrays(self):
        """``(is_icd, time, died, shocked_time, shocked)`` as numpy arrays."""
        f = self.table.followups
        is_icd = np.array([p.group == "icd" for p in self.table.patients])
        time = np.array([x.time_years for x in f])
        died = np.array([x.died for x in f])
        shock_t = np.array([x.shock_time_years for x in f])
        shocked = np.array([x.shocked for x in f])
        return is_icd, time, died, shock_t, shocked

    def episodes_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["patient_id", "time_years", "rhythm", "rate_bpm", "therapy",
                         "adjudication"])
        for e in self.episodes:
            writer.writerow([e.patient_id, repr(e.time_years), e.rhythm, repr(e.rate_bpm),
                             e.therapy, e.adjudication])
        return buf.getvalue()


def _piecewise_exponential(unit_exp, rate_before, rate_after, switch):
    """Event times for hazards changing from ``rate_before`` to ``rate_after``
    at ``switch``, given unit-exponential draws (inverse cumulative hazard)."""
    with np.errstate(divide="ignore", invalid="ignore"):
        early = np.where(rate_before > 0, unit_exp / rate_before, np.inf)
        h_switch = np.where(np.isfinite(switch), rate_before * switch, np.inf)
        late = np.where(rate_after > 0, switch + (unit_exp - h_switch) / rate_after, np.inf)
    return np.where(early < switch, early, late)


def _baseline(rng, n, af_prevalence):
    age = np.clip(rng.normal(64.0, 10.0, n), 18.0, 90.0).round(1)
    male = rng.random(n) < 0.8
    ischemic = rng.random(n) < 0.6
    lvef = rng.uniform(15.0, 35.0, n).round(1)
    u = rng.random(n)
    nyha = np.where(u < 0.1, "I", np.where(u < 0.7, "II", "III"))
    nyha = np.where((nyha == "I") & (lvef > 30), "II", nyha)
    af = rng.random(n) < af_prevalence
    diabetes = rng.random(n) < 0.3
    creatinine = np.exp(rng.normal(np.log(1.1), 0.3, n)).round(2)
    bnp = np.exp(rng.normal(np.log(400.0), 0.8, n)).round(0)
    return age, male, ischemic, lvef, nyha, af, diabetes, creatinine, bnp


def simulate_cohort(config: SimConfig) -> SimResult:
    """Draw one cohort; fully determined by ``config.seed``."""
    cfg = config
    if cfg.af_prevalence > AF_PREVALENCE_CAP:
        warnings.warn(f"AF prevalence {cfg.af_prevalence:.0%} exceeds the "
                      f"{AF_PREVALENCE_CAP:.0%} cap", CohortWarning, stacklevel=2)
    rng = np.random.default_rng(np.random.SeedSequence(cfg.seed))
    n = cfg.n_icd + cfg.n_control
    is_icd = np.zeros(n, bool)
    is_icd[:cfg.n_icd] = True
    base = _baseline(rng, n, cfg.af_prevalence)

    rho = cfg.score_correlation_rho
    z1, z2, zp = rng.standard_normal((3, n))
    z_mort = z1
    z_shock = rho * z1 + math.sqrt(1 - rho * rho) * z2

    mort_rate = np.full(n, cfg.annual_mortality_hazard) * np.exp(cfg.mortality_score_effect * z_mort)
    shock_rate = np.full(n, cfg.annual_shock_hazard) * np.exp(cfg.shock_score_effect * z_shock)
    if cfg.cell_hazards and n >= 5:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            mc = categorize(z_mort).categories
            sc = categorize(z_shock).categories
        for (m, s), (hm, hs) in cfg.cell_hazards.items():
            sel = (mc == m) & (sc == s)
            mort_rate[sel] = hm
            shock_rate[sel] = hs
    if cfg.stratum_icd_hr is not None:
        above = zp > np.median(zp) if n else zp > 0
        icd_hr = np.where(above, cfg.stratum_icd_hr[1], cfg.stratum_icd_hr[0])
    else:
        icd_hr = np.full(n, cfg.icd_mortality_hr)

    entry = rng.uniform(0.0, cfg.accrual_years, n) if cfg.accrual_years > 0 else np.zeros(n)
    admin = cfg.max_followup_years - entry

    crossover = np.full(n, np.inf)
    crosses = (~is_icd) & (rng.random(n) < cfg.crossover_fraction)
    crossover[crosses] = rng.uniform(0.0, 1.0, n)[crosses] * admin[crosses]

    e_death, e_shock = rng.standard_exponential((2, n))
    # ICD patients carry the device effect from entry, crossovers from crossover on
    switch = np.where(is_icd, 0.0, crossover)
    death_t = _piecewise_exponential(e_death, mort_rate, mort_rate * icd_hr, switch)
    implant = np.where(is_icd, 0.0, crossover)
    with np.errstate(divide="ignore"):
        shock_t = implant + np.where(shock_rate > 0, e_shock / shock_rate, np.inf)

    end = np.minimum(death_t, admin)
    died = death_t <= admin
    causes = rng.choice(3, size=n, p=np.asarray(cfg.death_cause_mix, dtype=float))
    shocked = shock_t < end

    patients, followups, episodes = [], [], []
    age, male, ischemic, lvef, nyha, af, diabetes, creatinine, bnp = base
    svt_u = rng.random((n, 4))
    for i in range(n):
        pid = f"P{i + 1:05d}"
        patients.append(Patient(
            id=pid, age_years=float(age[i]), sex="male" if male[i] else "female",
            etiology="ischemic" if ischemic[i] else "dilated", lvef_percent=float(lvef[i]),
            nyha=str(nyha[i]), af=bool(af[i]), diabetes=bool(diabetes[i]),
            creatinine_mg_dl=float(creatinine[i]), bnp_pg_ml=float(bnp[i]),
            group="icd" if is_icd[i] else "control",
            extras={"mortality_score": round(float(z_mort[i]), 10),
                    "shock_score": round(float(z_shock[i]), 10),
                    "proportional_score": round(float(zp[i]), 10)}))
        t_end = float(end[i])
        has_device = implant[i] < t_end
        pat_episodes = _device_episodes(rng, pid, float(implant[i]), t_end, float(shock_t[i]),
                                        float(shock_rate[i]), bool(af[i]), cfg) \
            if has_device else []
        episodes.extend(pat_episodes)
        inappropriate = [e.time_years for e in pat_episodes if e.adjudication == "inappropriate"]
        followups.append(FollowUp(
            time_years=t_end,
            terminal_event=DEATH_CAUSES[causes[i]] if died[i] else "alive_censored",
            first_appropriate_shock_years=float(shock_t[i]) if shocked[i] else None,
            first_inappropriate_shock_years=min(inappropriate) if inappropriate else None,
            crossover_years=float(crossover[i]) if crossover[i] < t_end else None))
    table = CohortTable(patients, followups)
    return SimResult(table, episodes, z_mort, z_shock, zp, cfg)


def _device_episodes(rng, pid, implant, t_end, first_shock, shock_rate, af, cfg):
    """Episodes during device follow-up.

    Treatable VT/VF arrives as a Poisson process at the shock rate (its first
    event is the first appropriate shock), slow VT below the lower zone and
    supraventricular episodes are added as independent Poisson processes.
    """
    zones = cfg.zones
    out = []
    if first_shock < t_end:
        t = first_shock
        while t < t_end:
            if rng.random() < 0.7:
                out.append(make_episode(pid, t, "vt", rng.uniform(zones["vt"], zones["vf"]), zones))
            else:
                out.append(make_episode(pid, t, "vf", rng.uniform(zones["vf"], 320.0), zones))
            t += rng.exponential(1.0 / shock_rate)
    span = t_end - implant
    slow_rate = cfg.slow_vt_fraction * shock_rate
    for _ in range(rng.poisson(slow_rate * span) if slow_rate > 0 else 0):
        out.append(make_episode(pid, implant + rng.random() * span, "vt",
                                rng.uniform(150.0, zones["vt"] - 1e-6), zones))
    svt_rate = cfg.svt_episode_rate_af if af else cfg.svt_episode_rate
    for _ in range(rng.poisson(svt_rate * span)):
        out.append(make_episode(pid, implant + rng.random() * span, "svt_af",
                                rng.uniform(120.0, 260.0), zones))
    out.sort(key=lambda e: e.time_years)
    return out


# --------------------------------------------------------------------------
# Calibration
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class CalibrationRow:
    quantity: str
    target: float
    observed: float
    se: float

    @property
    def z(self) -> float:
        return (self.observed - self.target) / self.se if self.se > 0 else float("nan")


def calibration_report(result: SimResult) -> list[CalibrationRow]:
    """Observed vs configured rates (events per person-year), score
    correlation and crossover fraction, each with a Monte Carlo SE."""
    cfg = result.config
    is_icd, time, died, shock_t, shocked = result.arrays()
    rows = []
    control = ~is_icd
    if control.any():
        py = time[control].sum()
        d = died[control].sum()
        rows.append(CalibrationRow("control_mortality_per_year", cfg.annual_mortality_hazard,
                                   d / py, math.sqrt(max(d, 1)) / py))
    if is_icd.any():
        py = time[is_icd].sum()
        d = died[is_icd].sum()
        target = cfg.annual_mortality_hazard * cfg.icd_mortality_hr
        rows.append(CalibrationRow("icd_mortality_per_year", target, d / py,
                                   math.sqrt(max(d, 1)) / py))
        spy = shock_t[is_icd].sum()
        s = shocked[is_icd].sum()
        rows.append(CalibrationRow("icd_first_shock_per_year", cfg.annual_shock_hazard,
                                   s / spy, math.sqrt(max(s, 1)) / spy))
    n = len(time)
    if n >= 3:
        r, _ = score_correlation(result.mortality_scores, result.shock_scores)
        rho = cfg.score_correlation_rho
        rows.append(CalibrationRow("score_correlation", rho, r, (1 - rho ** 2) / math.sqrt(n)))
    if control.any():
        crossed = np.array([f.crossover_years is not None
                            for f, c in zip(result.followups, control) if c])
        p = cfg.crossover_fraction
        rows.append(CalibrationRow("crossover_fraction", p, crossed.mean(),
                                   math.sqrt(max(p * (1 - p), 1e-12) / control.sum())))
    return rows


def calibration_csv(rows) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["quantity", "target", "observed", "se", "z"])
    for r in rows:
        writer.writerow([r.quantity, repr(r.target), repr(float(r.observed)), repr(float(r.se)),
                         repr(float(r.z))])
    return buf.getvalue()


# --------------------------------------------------------------------------
# Replicates
# --------------------------------------------------------------------------

def replicate_seeds(root_seed, n) -> list[int]:
    """Independent per-replicate seeds derived from one root seed."""
    children = np.random.SeedSequence(root_seed).spawn(n)
    return [int(c.generate_state(1, dtype=np.uint64)[0]) for c in children]


def run_replicates(func, n, root_seed=0, jobs=1) -> list:
    """``[func(seed_k) for k in range(n)]`` with seeds from :func:`replicate_seeds`.

    Results are returned in replicate order, so output does not depend on
    ``jobs``. ``func`` must be picklable when ``jobs > 1``.
    """
    seeds = replicate_seeds(root_seed, n)
    if jobs <= 1:
        return [func(s) for s in seeds]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(func, seeds, chunksize=max(1, n // (4 * jobs))))


def stratified_trial_config(seed, n=1116, hr_below=1.0, hr_above=0.6, hazard=0.15,
                            years=5.0) -> SimConfig:
    """1:1 trial with a median-split treatment effect, no accrual or crossover."""
    return SimConfig(n_icd=n // 2, n_control=n - n // 2, annual_mortality_hazard=hazard,
                     annual_shock_hazard=0.0, accrual_years=0.0, max_followup_years=years,
                     crossover_fraction=0.0, stratum_icd_hr=(hr_below, hr_above), seed=seed)


def grid_hazards_example() -> dict:
    """Cell hazards increasing along both axes, used by calibration checks."""
    mort = {"low": 0.02, "intermediate": 0.05, "high": 0.10}
    shock = {"low": 0.02, "intermediate": 0.045, "high": 0.11}
    return {(m, s): (mort[m], shock[s]) for m in CATEGORIES for s in CATEGORIES}

