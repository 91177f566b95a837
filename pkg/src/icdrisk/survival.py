"""Survival estimators, Cox / Fine-Gray regression, concordance, bootstrap
optimism correction and event-count power calculations."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import special, stats

YEAR_GRID = tuple(range(7))


class ConvergenceError(RuntimeError):
    pass


class MonotoneLikelihoodError(ConvergenceError):
    """The partial likelihood keeps increasing as a coefficient diverges."""


@dataclass
class SurvivalData:
    """Per-subject follow-up. ``event`` is 0 for censored, otherwise a cause code."""

    time: np.ndarray
    event: np.ndarray
    covariates: np.ndarray | None = None
    names: tuple = ()
    ids: np.ndarray | None = None

    def __post_init__(self):
        self.time = np.asarray(self.time, dtype=np.float64)
        self.event = np.asarray(self.event, dtype=np.int64)
        if self.time.ndim != 1 or self.event.shape != self.time.shape:
            raise ValueError("time and event must be 1-D and aligned")
        if not np.all(np.isfinite(self.time)):
            raise ValueError("times must be finite")
        if np.any(self.time <= 0):
            raise ValueError("nonpositive time")
        if np.any(self.event < 0):
            raise ValueError("cause codes must be >= 0")
        if self.covariates is None:
            self.covariates = np.zeros((len(self.time), 0))
        self.covariates = np.asarray(self.covariates, dtype=np.float64)
        if self.covariates.ndim == 1:
            self.covariates = self.covariates[:, None]
        if self.covariates.shape[0] != len(self.time):
            raise ValueError("one covariate row per subject required")
        if not self.names:
            self.names = tuple(f"x{i}" for i in range(self.covariates.shape[1]))
        if self.ids is None:
            self.ids = np.arange(len(self.time))
        self.ids = np.asarray(self.ids)

    def __len__(self):
        return len(self.time)

    def subset(self, index) -> "SurvivalData":
        return SurvivalData(self.time[index], self.event[index], self.covariates[index],
                            self.names, self.ids[index])


# --------------------------------------------------------------------------
# Nonparametric curves
# --------------------------------------------------------------------------

@dataclass
class StepCurve:
    times: np.ndarray
    values: np.ndarray
    at_risk: np.ndarray
    grid: tuple = YEAR_GRID
    at_risk_grid: np.ndarray = field(default_factory=lambda: np.zeros(0, int))
    kind: str = "survival"

    def value_at(self, t):
        """Right-continuous step value at ``t`` (scalar or array)."""
        start = 1.0 if self.kind == "survival" else 0.0
        idx = np.searchsorted(self.times, np.asarray(t, dtype=float), side="right")
        padded = np.concatenate([[start], self.values])
        return padded[idx]

    def at_risk_row(self, label) -> str:
        return " ".join([str(label)] + [str(int(v)) for v in self.at_risk_grid])

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["time", "value", "at_risk"])
        for t, v, n in zip(self.times, self.values, self.at_risk):
            writer.writerow([repr(float(t)), repr(float(v)), int(n)])
        return buf.getvalue()


def _at_risk_counts(time, points):
    s = np.sort(time)
    return len(s) - np.searchsorted(s, np.asarray(points, dtype=float), side="left")


def _event_table(time, indicator):
    """Distinct times with at-risk counts and event counts (events are
    processed before censorings at the same time)."""
    order = np.argsort(time, kind="stable")
    t = time[order]
    uniq, first, counts = np.unique(t, return_index=True, return_counts=True)
    n_risk = len(t) - first
    d = np.add.reduceat(indicator[order].astype(np.int64), first) if len(t) else counts
    return uniq, n_risk, d


def kaplan_meier(time, event, grid=YEAR_GRID) -> StepCurve:
    """Product-limit survival; any nonzero ``event`` counts as an event."""
    time = np.asarray(time, dtype=np.float64)
    if len(time) == 0:
        raise ValueError("at least one subject required")
    if np.any(time <= 0):
        raise ValueError("nonpositive time")
    died = np.asarray(event) != 0
    uniq, n_risk, d = _event_table(time, died)
    surv = np.cumprod((n_risk - d) / n_risk)
    return StepCurve(uniq, surv, n_risk, tuple(grid), _at_risk_counts(time, grid))


def cumulative_incidence(time, event, cause, causes=None, grid=YEAR_GRID) -> StepCurve:
    """Aalen-Johansen cumulative incidence of ``cause``.

    ``causes`` declares the valid cause codes (default: those observed).
    """
    time = np.asarray(time, dtype=np.float64)
    event = np.asarray(event, dtype=np.int64)
    if len(time) == 0:
        raise ValueError("at least one subject required")
    if np.any(time <= 0):
        raise ValueError("nonpositive time")
    observed = set(np.unique(event[event > 0]).tolist())
    declared = set(causes) if causes is not None else observed | {cause}
    if cause not in declared or not observed <= declared:
        raise ValueError(f"unknown cause code {cause if cause not in declared else sorted(observed - declared)}")
    uniq, n_risk, d_all = _event_table(time, event > 0)
    _, _, d_k = _event_table(time, event == cause)
    surv = np.cumprod((n_risk - d_all) / n_risk)
    surv_before = np.concatenate([[1.0], surv[:-1]])
    cif = np.cumsum(surv_before * d_k / n_risk)
    return StepCurve(uniq, cif, n_risk, tuple(grid), _at_risk_counts(time, grid), "incidence")


def censoring_survival_before(time, event):
    """``G(t-)``: left limit of the censoring-time Kaplan-Meier, as a callable."""
    time = np.asarray(time, dtype=np.float64)
    censored = np.asarray(event) == 0
    uniq, n_risk, c = _event_table(time, censored)
    # events at a tied time leave the risk set before the censorings
    _, _, d = _event_table(time, ~censored)
    n_risk = n_risk - d
    with np.errstate(invalid="ignore", divide="ignore"):
        factor = np.where(c > 0, (n_risk - c) / np.where(n_risk > 0, n_risk, 1), 1.0)
    g = np.concatenate([[1.0], np.cumprod(factor)])

    def g_minus(t):
        return g[np.searchsorted(uniq, np.asarray(t, dtype=float), side="left")]

    return g_minus


# --------------------------------------------------------------------------
# Concordance
# --------------------------------------------------------------------------

class _Fenwick:
    def __init__(self, n):
        self.tree = [0] * (n + 1)

    def add(self, i, v=1):
        i += 1
        while i < len(self.tree):
            self.tree[i] += v
            i += i & -i

    def prefix(self, i):
        """Sum over positions ``< i``."""
        s = 0
        while i > 0:
            s += self.tree[i]
            i -= i & -i
        return s


def concordance_counts(scores, time, event):
    """``(concordant, discordant, tied_score)`` over usable pairs.

    A pair is usable when the shorter time is an event and the times differ;
    the subject failing first should carry the higher score.
    """
    s = np.asarray(scores, dtype=np.float64)
    t = np.asarray(time, dtype=np.float64)
    e = np.asarray(event) != 0
    ranks = np.unique(s, return_inverse=True)[1]
    tree = _Fenwick(int(ranks.max()) + 1 if len(ranks) else 1)
    order = np.argsort(-t, kind="stable")
    conc = disc = tied = 0
    inserted = 0
    i = 0
    n = len(order)
    while i < n:
        j = i
        while j < n and t[order[j]] == t[order[i]]:
            j += 1
        group = order[i:j]
        for k in group:
            if e[k]:
                r = int(ranks[k])
                below = tree.prefix(r)
                upto = tree.prefix(r + 1)
                conc += below
                tied += upto - below
                disc += inserted - upto
        for k in group:
            tree.add(int(ranks[k]))
        inserted += len(group)
        i = j
    return conc, disc, tied


def concordance(scores, time, event) -> float:
    """Harrell's C; score ties count one half."""
    conc, disc, tied = concordance_counts(scores, time, event)
    total = conc + disc + tied
    if total == 0:
        raise ValueError("no usable pairs")
    return (conc + 0.5 * tied) / total


# --------------------------------------------------------------------------
# Proportional hazards regression
# --------------------------------------------------------------------------

@dataclass
class SurvivalFit:
    names: tuple
    beta: np.ndarray
    se: np.ndarray
    loglik: float
    loglik_null: float
    c_statistic: float | None
    iterations: int
    converged: bool
    n: int
    n_events: int
    model: str = "cox"

    @property
    def hr(self) -> np.ndarray:
        return np.exp(self.beta)

    @property
    def ci95(self) -> np.ndarray:
        z = 1.959963984540054
        return np.column_stack([np.exp(self.beta - z * self.se), np.exp(self.beta + z * self.se)])

    def wald_p(self, k) -> float:
        if not self.se[k] > 0:
            return float("nan")
        return float(2.0 * stats.norm.sf(abs(self.beta[k] / self.se[k])))

    def to_dict(self) -> dict:
        ci = self.ci95
        return {
            "model": self.model,
            "n": self.n,
            "events": self.n_events,
            "loglik": self.loglik,
            "loglik_null": self.loglik_null,
            "c_statistic": self.c_statistic,
            "iterations": self.iterations,
            "converged": self.converged,
            "coefficients": [
                {"name": name, "beta": float(self.beta[k]), "se": float(self.se[k]),
                 "hr": float(self.hr[k]), "ci95": [float(ci[k, 0]), float(ci[k, 1])],
                 "p": self.wald_p(k)}
                for k, name in enumerate(self.names)],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, allow_nan=True)


class _PartialLikelihood:
    """Efron log partial likelihood with optional IPCW-weighted competing
    subjects (Fine-Gray). Without competing subjects it is the Cox likelihood.
    """

    def __init__(self, time, is_event, x, competing=None, g_minus=None):
        order = np.argsort(time, kind="stable")
        self.t = time[order]
        self.x = x[order]
        ev = is_event[order]
        self.ev_idx = np.flatnonzero(ev)
        self.uniq = np.unique(self.t[ev])
        self.group = np.searchsorted(self.uniq, self.t[self.ev_idx])
        self.d = np.bincount(self.group, minlength=len(self.uniq))
        first = np.searchsorted(self.group, np.arange(len(self.uniq)))
        self.rank = np.arange(len(self.ev_idx)) - first[self.group]
        self.frac = self.rank / self.d[self.group]
        self.risk_start = np.searchsorted(self.t, self.uniq, side="left")

        self.comp_idx = np.zeros(0, int)
        if competing is not None and np.any(competing):
            comp = competing[order]
            self.comp_idx = np.flatnonzero(comp)
            self.comp_w = 1.0 / g_minus(self.t[self.comp_idx])
            self.comp_pos = np.searchsorted(self.t[self.comp_idx], self.uniq, side="left")
            self.g_at_events = g_minus(self.uniq)

    def evaluate(self, beta):
        x = self.x
        p = x.shape[1]
        eta = x @ beta
        shift = eta.max() if len(eta) else 0.0
        r = np.exp(eta - shift)
        xr = x * r[:, None]
        xxr = x[:, :, None] * xr[:, None, :]

        def tail(a):
            return np.concatenate([np.cumsum(a[::-1], axis=0)[::-1], np.zeros((1,) + a.shape[1:])])

        s0 = tail(r)[self.risk_start]
        s1 = tail(xr)[self.risk_start]
        s2 = tail(xxr)[self.risk_start]
        if len(self.comp_idx):
            w = self.comp_w
            ci = self.comp_idx

            def head(a):
                return np.concatenate([np.zeros((1,) + a.shape[1:]), np.cumsum(a, axis=0)])

            g = self.g_at_events
            s0 = s0 + g * head(r[ci] * w)[self.comp_pos]
            s1 = s1 + g[:, None] * head(xr[ci] * w[:, None])[self.comp_pos]
            s2 = s2 + g[:, None, None] * head(xxr[ci] * w[:, None, None])[self.comp_pos]

        e = self.ev_idx
        grp = self.group
        n_groups = len(self.uniq)
        d0 = np.bincount(grp, weights=r[e], minlength=n_groups)
        d1 = np.zeros((n_groups, p))
        np.add.at(d1, grp, xr[e])
        d2 = np.zeros((n_groups, p, p))
        np.add.at(d2, grp, xxr[e])

        f = self.frac
        a0 = s0[grp] - f * d0[grp]
        a1 = s1[grp] - f[:, None] * d1[grp]
        a2 = s2[grp] - f[:, None, None] * d2[grp]
        loglik = float(np.sum(eta[e] - shift) - np.sum(np.log(a0)))
        mean = a1 / a0[:, None]
        grad = x[e].sum(axis=0) - mean.sum(axis=0)
        info = (a2 / a0[:, None, None]).sum(axis=0) - np.einsum("ki,kj->ij", mean, mean)
        return loglik, grad, info


MAX_LOG_HR_SPAN = 20.0


def _check_divergence(beta, span):
    # a hazard ratio above e^20 across the observed covariate range only
    # arises when the likelihood keeps increasing towards infinity
    if np.any(np.abs(beta) * span > MAX_LOG_HR_SPAN):
        raise MonotoneLikelihoodError(
            "monotone likelihood: coefficient diverging (perfect separation)")


def _newton(lik, p, max_iter=50, tol=1e-8, scale=None):
    beta = np.zeros(p)
    ll, grad, info = lik.evaluate(beta)
    ll_null = ll
    scale = np.ones(p) if scale is None else scale
    for it in range(1, max_iter + 1):
        if np.linalg.norm(grad) < tol:
            _check_divergence(beta, scale)
            return beta, ll, info, ll_null, it - 1, True
        try:
            step = np.linalg.solve(info, grad)
        except np.linalg.LinAlgError:
            step = np.linalg.lstsq(info, grad, rcond=None)[0]
        halvings = 0
        while True:
            cand = beta + step
            ll_new, grad_new, info_new = lik.evaluate(cand)
            if np.isfinite(ll_new) and ll_new >= ll - 1e-12 * abs(ll):
                break
            step = step / 2
            halvings += 1
            if halvings > 30:
                raise ConvergenceError("step halving failed to increase the likelihood")
        beta, ll, grad, info = cand, ll_new, grad_new, info_new
        _check_divergence(beta, scale)
    if np.linalg.norm(grad) < tol:
        return beta, ll, info, ll_null, max_iter, True
    raise ConvergenceError(f"no convergence after {max_iter} iterations")


def _fit(data, is_event, competing=None, g_minus=None, model="cox", max_iter=50, tol=1e-8):
    x = data.covariates
    p = x.shape[1]
    if not np.any(is_event):
        raise ValueError("at least one event required")
    # constant columns carry no information in a partial likelihood
    active = np.flatnonzero(np.ptp(x, axis=0) > 0) if len(x) else np.arange(0)
    xa = x[:, active]
    lik = _PartialLikelihood(data.time, is_event, xa, competing, g_minus)
    scale = np.ptp(xa, axis=0) if len(active) else None
    b, ll, info, ll0, iters, conv = _newton(lik, len(active), max_iter, tol, scale)
    beta = np.zeros(p)
    se = np.full(p, np.nan)
    beta[active] = b
    if len(active):
        try:
            cov = np.linalg.inv(info)
            se[active] = np.sqrt(np.clip(np.diag(cov), 0, None))
        except np.linalg.LinAlgError:
            pass
    c = None
    if p:
        try:
            c = concordance(x @ beta, data.time, is_event)
        except ValueError:
            c = None
    return SurvivalFit(tuple(data.names), beta, se, ll, ll0, c, iters, conv, len(data),
                       int(np.sum(is_event)), model)


def cox_fit(data: SurvivalData, max_iter=50, tol=1e-8) -> SurvivalFit:
    """Cox proportional hazards fit by Newton-Raphson (Efron ties). Any
    nonzero event code is treated as the event."""
    return _fit(data, data.event != 0, max_iter=max_iter, tol=tol)


def fine_gray_fit(data: SurvivalData, cause: int, max_iter=50, tol=1e-8) -> SurvivalFit:
    """Fine-Gray subdistribution hazards regression for ``cause``.

    Subjects failing from a competing cause stay in later risk sets with
    weight ``G(t-) / G(T_i-)``, ``G`` being the censoring Kaplan-Meier.
    """
    is_event = data.event == cause
    competing = (data.event != 0) & ~is_event
    g_minus = censoring_survival_before(data.time, data.event)
    return _fit(data, is_event, competing, g_minus, model=f"fine_gray[{cause}]",
                max_iter=max_iter, tol=tol)


# --------------------------------------------------------------------------
# Bootstrap optimism correction
# --------------------------------------------------------------------------

@dataclass
class BootstrapResult:
    groups: tuple
    horizons: np.ndarray
    apparent: np.ndarray     # (n_groups, n_horizons) event probability
    optimism: np.ndarray
    corrected: np.ndarray
    optimism_se: np.ndarray
    replicates: int
    redraws: int

    def separation(self, which="corrected") -> np.ndarray:
        m = getattr(self, which)
        return m[-1] - m[0]


def _group_event_probability(data, labels, groups, horizons):
    out = np.empty((len(groups), len(horizons)))
    for k, g in enumerate(groups):
        sel = labels == g
        if not sel.any():
            return None
        km = kaplan_meier(data.time[sel], data.event[sel])
        out[k] = 1.0 - km.value_at(horizons)
    return out


def bootstrap_bias_correct(data: SurvivalData, grouping_rule, n_boot=200, seed=0,
                           horizons=(1, 2, 3, 4, 5, 6), max_redraws=None) -> BootstrapResult:
    """Optimism-corrected per-group event probabilities.

    ``grouping_rule(train)`` returns a function that assigns a group label to
    every subject of a :class:`SurvivalData`. For each bootstrap resample the
    rule is refit, and the optimism is the resample's apparent event
    probabilities minus those obtained by applying its rule to the original
    data. Degenerate resamples (some group empty) are redrawn and counted.
    """
    if n_boot < 50:
        raise ValueError("at least 50 bootstrap replicates required")
    horizons = np.asarray(horizons, dtype=float)
    labels = np.asarray(grouping_rule(data)(data))
    groups = tuple(sorted(set(labels.tolist())))
    apparent = _group_event_probability(data, labels, groups, horizons)
    rng = np.random.default_rng(seed)
    n = len(data)
    diffs = []
    redraws = 0
    max_redraws = 10 * n_boot if max_redraws is None else max_redraws
    while len(diffs) < n_boot:
        sample = data.subset(rng.integers(0, n, n))
        rule = grouping_rule(sample)
        app = _group_event_probability(sample, np.asarray(rule(sample)), groups, horizons)
        test = _group_event_probability(data, np.asarray(rule(data)), groups, horizons)
        if app is None or test is None:
            redraws += 1
            if redraws > max_redraws:
                raise RuntimeError("too many degenerate bootstrap resamples")
            continue
        diffs.append(app - test)
    diffs = np.asarray(diffs)
    optimism = diffs.mean(axis=0)
    se = diffs.std(axis=0, ddof=1) / math.sqrt(n_boot)
    return BootstrapResult(groups, horizons, apparent, optimism, apparent - optimism, se,
                           n_boot, redraws)


# --------------------------------------------------------------------------
# Power and expected events
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class PowerSpec:
    alpha_two_sided: float = 0.05
    power: float = 0.8
    hazard_ratio: float = 2.0
    allocation_fraction: float = 0.5

    def __post_init__(self):
        for name in ("alpha_two_sided", "power", "allocation_fraction"):
            v = getattr(self, name)
            if not 0 < v < 1:
                raise ValueError(f"{name} must lie in (0, 1)")
        if not self.hazard_ratio > 0:
            raise ValueError("hazard_ratio must be positive")


def _z_sum(alpha, power):
    # ndtri is the standard normal quantile
    return float(special.ndtri(1 - alpha / 2) + special.ndtri(power))


def schoenfeld_events_exact(spec: PowerSpec) -> float:
    if spec.hazard_ratio == 1:
        raise ValueError("hazard ratio must differ from 1")
    p = spec.allocation_fraction
    return _z_sum(spec.alpha_two_sided, spec.power) ** 2 / (
        p * (1 - p) * math.log(spec.hazard_ratio) ** 2)


def schoenfeld_events(spec: PowerSpec, rounding="nearest") -> int:
    """Required number of events; ``rounding`` is ``"nearest"`` or ``"ceil"``."""
    d = schoenfeld_events_exact(spec)
    if rounding == "ceil":
        return int(math.ceil(d - 1e-9))
    if rounding == "nearest":
        return int(math.floor(d + 0.5))
    raise ValueError("rounding must be 'nearest' or 'ceil'")


def detectable_hazard_ratio(events, alpha_two_sided=0.05, power=0.8, allocation_fraction=0.5,
                            protective=True) -> float:
    """Hazard ratio detectable with ``events`` events (inverse of the event formula)."""
    if events <= 0:
        raise ValueError("events must be positive")
    PowerSpec(alpha_two_sided, power, 2.0, allocation_fraction)
    p = allocation_fraction
    log_hr = _z_sum(alpha_two_sided, power) / math.sqrt(events * p * (1 - p))
    return math.exp(-log_hr) if protective else math.exp(log_hr)


def expected_events(n, annual_hazard, accrual_years, total_years) -> float:
    """Expected events with uniform accrual over ``accrual_years`` and
    exponential event times, followed until ``total_years``."""
    lam, a, t = float(annual_hazard), float(accrual_years), float(total_years)
    if lam < 0:
        raise ValueError("hazard must be >= 0")
    if a > t:
        raise ValueError("accrual must not exceed total duration")
    if lam == 0:
        return 0.0
    if a == 0:
        return n * (1 - math.exp(-lam * t))
    return n * (1 - (math.exp(-lam * (t - a)) - math.exp(-lam * t)) / (lam * a))
