import math
from statistics import NormalDist

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import integrate

from icdrisk.survival import (
    MonotoneLikelihoodError, PowerSpec, SurvivalData, bootstrap_bias_correct,
    censoring_survival_before, concordance, concordance_counts, cox_fit,
    cumulative_incidence, detectable_hazard_ratio, expected_events, fine_gray_fit,
    kaplan_meier, schoenfeld_events, schoenfeld_events_exact,
)

GRID = np.arange(-30000, 30001) * 1e-4      # beta in [-3, 3], step 1e-4


# ---------------------------------------------------------------- oracles

def km_oracle(time, event, t):
    """Product-limit estimate at ``t`` by an explicit loop."""
    s = 1.0
    for u in sorted(set(time)):
        if u > t:
            break
        at_risk = sum(1 for x in time if x >= u)
        deaths = sum(1 for x, e in zip(time, event) if x == u and e)
        s *= 1 - deaths / at_risk
    return s


def g_minus_oracle(time, event, t):
    """Censoring survival just before ``t``; events leave before censorings."""
    g = 1.0
    for u in sorted(set(time)):
        if u >= t:
            break
        censored = sum(1 for x, e in zip(time, event) if x == u and e == 0)
        at_risk = sum(1 for x, e in zip(time, event) if x > u or (x == u and e == 0))
        if censored:
            g *= 1 - censored / at_risk
    return g


def efron_grid_loglik(time, is_event, x, weight_fn=None):
    """Log partial likelihood on the whole beta grid (one covariate).

    ``weight_fn(t)`` gives each subject's risk-set weight at event time ``t``;
    the default is the ordinary risk indicator.
    """
    time, x = np.asarray(time), np.asarray(x, dtype=float)
    r = np.exp(np.outer(GRID, x))                        # (grid, n)
    ll = np.zeros(len(GRID))
    for t in np.unique(time[is_event]):
        tied = np.flatnonzero((time == t) & is_event)
        w = (time >= t).astype(float) if weight_fn is None else weight_fn(t)
        s = r @ w
        dsum = r[:, tied].sum(axis=1)
        ll += GRID * x[tied].sum()
        for k in range(len(tied)):
            ll -= np.log(s - k / len(tied) * dsum)
    return ll


def brute_c(scores, time, event):
    conc = disc = tied = 0
    n = len(time)
    for i in range(n):
        if not event[i]:
            continue
        for j in range(n):
            if time[i] < time[j]:
                if scores[i] > scores[j]:
                    conc += 1
                elif scores[i] < scores[j]:
                    disc += 1
                else:
                    tied += 1
    return conc, disc, tied


def two_group(n, hr, seed, censor_rate=0.3):
    rng = np.random.default_rng(seed)
    x = rng.integers(0, 2, n).astype(float)
    t_event = rng.exponential(1 / (0.5 * hr ** x))
    t_cens = rng.exponential(1 / censor_rate, n)
    return np.minimum(t_event, t_cens), (t_event <= t_cens).astype(int), x


# ---------------------------------------------------------------- KM / AJ

def test_km_hand_values():
    km = kaplan_meier([1, 2, 3], [1, 0, 1])
    assert km.value_at([1, 2, 3]).tolist() == [2 / 3, 2 / 3, 0.0]


def test_km_all_censored():
    km = kaplan_meier([1, 2, 3], [0, 0, 0])
    assert np.all(km.value_at([0.5, 2, 10]) == 1.0)


def test_aj_hand_values():
    a = cumulative_incidence([1, 2], [1, 2], cause=1)
    b = cumulative_incidence([1, 2], [1, 2], cause=2)
    assert a.value_at(10) == 0.5 and b.value_at(10) == 0.5


def test_aj_single_cause_equals_one_minus_km():
    t, e, _ = two_group(80, 1.0, 3)
    cif = cumulative_incidence(t, e, 1)
    km = kaplan_meier(t, e)
    grid = np.linspace(0, t.max(), 50)
    np.testing.assert_allclose(cif.value_at(grid), 1 - km.value_at(grid), atol=1e-12)


def test_aj_absent_cause_is_zero():
    cif = cumulative_incidence([1, 2, 3], [1, 1, 0], cause=2, causes=(1, 2))
    assert np.all(cif.values == 0)
    with pytest.raises(ValueError, match="unknown cause code"):
        cumulative_incidence([1, 2], [1, 3], cause=1, causes=(1, 2))


times = st.lists(st.integers(1, 12).map(float), min_size=1, max_size=30)


@settings(max_examples=80, deadline=None)
@given(times, st.data())
def test_km_matches_loop(t, data):
    e = data.draw(st.lists(st.integers(0, 1), min_size=len(t), max_size=len(t)))
    km = kaplan_meier(t, e)
    for q in (0.5, 1, 3, 6.5, 12):
        assert km.value_at(q) == pytest.approx(km_oracle(t, e, q), abs=1e-12)


@settings(max_examples=80, deadline=None)
@given(times, st.data())
def test_aj_conservation(t, data):
    e = data.draw(st.lists(st.integers(0, 3), min_size=len(t), max_size=len(t)))
    grid = np.arange(0, 14, 0.5)
    total = sum(cumulative_incidence(t, e, k, causes=(1, 2, 3)).value_at(grid)
                for k in (1, 2, 3))
    np.testing.assert_allclose(total + kaplan_meier(t, e).value_at(grid), 1.0, atol=1e-12)


@settings(max_examples=60, deadline=None)
@given(times, st.data())
def test_censoring_km_matches_loop(t, data):
    e = data.draw(st.lists(st.integers(0, 2), min_size=len(t), max_size=len(t)))
    g = censoring_survival_before(np.array(t), np.array(e))
    for q in (1, 2.5, 7, 13):
        assert g(q) == pytest.approx(g_minus_oracle(t, e, q), abs=1e-12)


def test_at_risk_row_layout():
    km = kaplan_meier([0.5, 1.5, 2.5, 6.5], [1, 0, 1, 0])
    assert km.at_risk_row("low") == "low 4 3 2 1 1 1 1"


# ---------------------------------------------------------------- concordance

@settings(max_examples=100, deadline=None)
@given(st.integers(2, 200), st.integers(0, 10_000))
def test_concordance_matches_pairs(n, seed):
    rng = np.random.default_rng(seed)
    t = rng.integers(1, 20, n).astype(float)          # many tied times
    s = rng.integers(0, 8, n).astype(float)           # many tied scores
    e = rng.integers(0, 2, n)
    assert concordance_counts(s, t, e) == brute_c(s, t, e)


def test_concordance_perfect_and_random():
    t = np.arange(1.0, 51.0)
    assert concordance(-t, t, np.ones(50)) == 1.0
    rng = np.random.default_rng(1)
    t = rng.exponential(1, 500)
    assert concordance(rng.normal(size=500), t, np.ones(500)) == pytest.approx(0.5, abs=0.05)
    with pytest.raises(ValueError, match="no usable pairs"):
        concordance([1, 2], [1, 2], [0, 0])


# ---------------------------------------------------------------- Cox

@pytest.mark.parametrize("seed", range(5))
def test_cox_matches_grid_oracle(seed):
    t, e, x = two_group(50, 2.0, seed)
    t = np.round(t, 1) + 0.1                           # create ties for Efron
    fit = cox_fit(SurvivalData(t, e, x))
    ll = efron_grid_loglik(t, e.astype(bool), x)
    assert abs(fit.beta[0] - GRID[np.argmax(ll)]) < 1e-4
    assert fit.loglik == pytest.approx(ll.max(), abs=1e-6)


def test_cox_constant_covariate():
    t, e, _ = two_group(40, 1.0, 0)
    fit = cox_fit(SurvivalData(t, e, np.zeros(40)))
    assert fit.beta[0] == 0 and fit.loglik == fit.loglik_null


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000), st.floats(-50, 50), st.floats(0.1, 10))
def test_cox_affine_invariance(seed, shift, scale):
    t, e, x = two_group(60, 1.5, seed)
    if e.sum() < 3 or np.ptp(x) == 0:
        return
    base = cox_fit(SurvivalData(t, e, x))
    moved = cox_fit(SurvivalData(t, e, scale * x + shift))
    assert moved.beta[0] == pytest.approx(base.beta[0] / scale, rel=1e-6, abs=1e-8)
    assert moved.loglik == pytest.approx(base.loglik, rel=1e-9)


def test_cox_monte_carlo_unbiased():
    betas = [cox_fit(SurvivalData(*two_group(200, 2.0, 1000 + r)[:2],
                                  two_group(200, 2.0, 1000 + r)[2])).beta[0]
             for r in range(1000)]
    se = np.std(betas, ddof=1) / math.sqrt(len(betas))
    assert abs(np.mean(betas) - math.log(2)) < 3 * se + 0.01


def test_separation_raises():
    t = np.arange(1.0, 21.0)
    x = (t <= 10).astype(float)                        # all early failures have x = 1
    with pytest.raises(MonotoneLikelihoodError):
        cox_fit(SurvivalData(t, np.ones(20, int), x))


def test_nonpositive_time_rejected():
    with pytest.raises(ValueError, match="nonpositive time"):
        SurvivalData([0.0, 1.0], [1, 0])


# ---------------------------------------------------------------- Fine-Gray

def competing_data(n, seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=n)
    t1 = rng.exponential(1 / (0.4 * np.exp(0.7 * x)))
    t2 = rng.exponential(1 / 0.3, n)
    c = rng.exponential(1 / 0.2, n)
    t = np.minimum.reduce([t1, t2, c])
    event = np.select([t == t1, t == t2], [1, 2], 0)
    return t, event, x


def test_fine_gray_equals_cox_without_competition():
    t, e, x = two_group(120, 2.0, 7)
    data = SurvivalData(t, e, x)
    fg, cox = fine_gray_fit(data, 1), cox_fit(data)
    assert abs(fg.beta[0] - cox.beta[0]) < 1e-8
    assert abs(fg.se[0] - cox.se[0]) < 1e-8


@pytest.mark.parametrize("seed", range(4))
def test_fine_gray_matches_weighted_grid(seed):
    t, e, x = competing_data(50, seed)
    tl, el = t.tolist(), e.tolist()
    g_t = np.array([g_minus_oracle(tl, el, ti) for ti in tl])

    def weights(s):
        w = (t >= s).astype(float)
        late = (e == 2) & (t < s)
        w[late] = g_minus_oracle(tl, el, s) / g_t[late]
        return w

    ll = efron_grid_loglik(t, e == 1, x, weights)
    fit = fine_gray_fit(SurvivalData(t, e, x), 1)
    assert abs(fit.beta[0] - GRID[np.argmax(ll)]) < 1e-4


def test_fine_gray_sign():
    positive = sum(fine_gray_fit(SurvivalData(*competing_data(150, 100 + r)), 1).beta[0] > 0
                   for r in range(40))
    assert positive >= 36


# ---------------------------------------------------------------- bootstrap

def _random_groups(n, seed):
    labels = np.array(["low", "high"])[np.random.default_rng(seed).integers(0, 2, n)]
    return lambda train: (lambda d: labels[np.asarray(d.ids)])


def test_bootstrap_null_rule_has_no_optimism():
    t, e, x = two_group(300, 1.0, 11)
    data = SurvivalData(t, e, x)
    res = bootstrap_bias_correct(data, _random_groups(300, 0), n_boot=200, seed=1,
                                 horizons=(1, 2))
    shift = res.optimism[:, :]
    assert np.mean(np.abs(shift) < 2 * res.optimism_se + 1e-3) >= 0.75
    assert np.all(np.abs(shift) < 0.02)


def test_bootstrap_overfit_rule_shrinks():
    t, e, x = two_group(200, 1.0, 12)
    data = SurvivalData(t, e, e.astype(float))        # score = observed outcome

    def rule(train):
        cut = np.median(train.covariates[:, 0])
        return lambda d: np.where(d.covariates[:, 0] > cut, "high", "low")

    res = bootstrap_bias_correct(data, rule, n_boot=60, seed=0, horizons=(1, 2))
    assert np.all(np.abs(res.separation("corrected")) <= np.abs(res.separation("apparent")))


def test_bootstrap_deterministic():
    t, e, x = two_group(100, 1.0, 13)
    data = SurvivalData(t, e, x)
    a = bootstrap_bias_correct(data, _random_groups(100, 3), n_boot=50, seed=9)
    b = bootstrap_bias_correct(data, _random_groups(100, 3), n_boot=50, seed=9)
    assert a.corrected.tobytes() == b.corrected.tobytes()
    with pytest.raises(ValueError):
        bootstrap_bias_correct(data, _random_groups(100, 3), n_boot=20)


# ---------------------------------------------------------------- power

def test_schoenfeld_reference_values():
    assert schoenfeld_events(PowerSpec(0.05, 0.95, 2.0, 0.5)) == 108
    assert abs(schoenfeld_events(PowerSpec(0.05, 0.95, 2.0, 1 / 3)) - 122) <= 1
    assert schoenfeld_events(PowerSpec(0.05, 0.95, 2.0, 0.5), rounding="ceil") == 109
    assert detectable_hazard_ratio(279, 0.05, 0.80, 1 / 3) == pytest.approx(0.70, abs=0.02)


def test_schoenfeld_uses_normal_quantiles():
    nd = NormalDist()
    z = nd.inv_cdf(0.975) + nd.inv_cdf(0.95)
    expected = z ** 2 / (0.25 * math.log(2) ** 2)
    assert schoenfeld_events_exact(PowerSpec(0.05, 0.95, 2.0, 0.5)) == pytest.approx(expected)


@settings(max_examples=60, deadline=None)
@given(st.floats(0.2, 5.0).filter(lambda h: abs(math.log(h)) > 0.05),
       st.floats(0.1, 0.9), st.floats(0.6, 0.99))
def test_schoenfeld_symmetry_and_inversion(hr, alloc, power):
    a = schoenfeld_events_exact(PowerSpec(0.05, power, hr, alloc))
    b = schoenfeld_events_exact(PowerSpec(0.05, power, 1 / hr, 1 - alloc))
    assert a == pytest.approx(b)
    back = detectable_hazard_ratio(a, 0.05, power, alloc, protective=hr < 1)
    assert back == pytest.approx(hr, rel=1e-9)


def test_hr_one_rejected():
    with pytest.raises(ValueError, match="differ from 1"):
        schoenfeld_events(PowerSpec(0.05, 0.8, 1.0, 0.5))


def test_expected_events():
    assert expected_events(2250, 0.0, 0, 4) == 0
    assert expected_events(2250, 0.045, 0, 4) == pytest.approx(370.6, abs=0.05)
    # independent check: average the event probability over uniform entry times
    for accrual in (1.0, 4.0):
        prob, _ = integrate.quad(lambda s: 1 - math.exp(-0.045 * (4 - s)), 0, accrual)
        assert expected_events(2250, 0.045, accrual, 4) == pytest.approx(2250 * prob / accrual)
