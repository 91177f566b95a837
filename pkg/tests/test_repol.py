import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from icdrisk.hrv import MarkerError
from icdrisk.record_io import STANDARD_LEADS
from icdrisk.repol import (
    MmaTracker, fractionation_index, interval_markers, mma_twa, mma_twa_trace, prd, stv_qt,
    tangent_t_end, to_xyz, twave_svd_battery, weighted_t_vectors,
)

FS = 1000
T = np.arange(1000.0)


def gauss(mu, sigma):
    return np.exp(-0.5 * ((T - mu) / sigma) ** 2)


def triangle(mu, height, half_width):
    return height * np.clip(1 - np.abs(T - mu) / half_width, 0, None)


# ---------------------------------------------------------------- TWA

def _alternating_beats(n, alt_uv, template=None):
    template = 200 * gauss(600, 40) if template is None else template
    sign = np.where(np.arange(n) % 2 == 0, 1.0, -1.0)
    unit = gauss(600, 40)
    return template[None, :] + sign[:, None] * 0.5 * alt_uv * unit[None, :]


def test_identical_beats_no_alternans():
    assert mma_twa(_alternating_beats(100, 0.0)) == 0.0


def test_alternans_converges_to_peak_to_peak():
    trace = mma_twa_trace(_alternating_beats(128, 50.0))
    assert trace[-1] == pytest.approx(50.0, rel=0.10)
    assert mma_twa(_alternating_beats(128, 50.0)) == pytest.approx(50.0, rel=0.10)


def test_step_change_decays():
    beats = np.vstack([_alternating_beats(64, 0.0),
                       _alternating_beats(200, 0.0, 260 * gauss(600, 40))])
    trace = mma_twa_trace(beats)
    assert trace[70] > 1.0          # the two streams see the step one beat apart
    assert trace[-1] < 0.05 * trace[70:80].max()


def test_cap_limits_single_outlier():
    tracker = MmaTracker(cap_uv=32.0)
    tracker.update(np.zeros(5))
    tracker.update(np.zeros(5))
    tracker.update(np.full(5, 10_000.0))
    assert tracker.alternans() == 32.0


def test_twa_needs_beats():
    with pytest.raises(MarkerError):
        mma_twa(_alternating_beats(10, 50.0))


# ---------------------------------------------------------------- PRD

def _t_vectors(freq_hz, amp_deg, offset_deg=15.0, duration_s=1500.0, seed=0):
    """T vectors rotating in a plane; the successive angle dT oscillates
    around ``offset_deg`` with amplitude ``amp_deg``."""
    rng = np.random.default_rng(seed)
    times = np.cumsum(0.9 + 0.05 * rng.standard_normal(int(duration_s / 0.8)))
    times = times[times < duration_s]
    dt = offset_deg + amp_deg * np.sin(2 * np.pi * freq_hz * times)
    theta = np.radians(np.cumsum(dt))
    return 300 * np.stack([np.cos(theta), np.sin(theta), 0 * theta], axis=1), times


def test_constant_t_vectors_prd_zero():
    times = np.arange(0, 900, 0.9)
    v = np.tile([100.0, 50.0, 20.0], (len(times), 1))
    assert prd(v, times) == pytest.approx(0.0, abs=1e-12)


def test_prd_selects_low_frequencies():
    slow = prd(*_t_vectors(0.05, 5.0))
    fast = prd(*_t_vectors(0.30, 5.0))
    assert slow >= 5 * fast


def test_prd_quadratic_scaling():
    base = prd(*_t_vectors(0.05, 4.0))
    double = prd(*_t_vectors(0.05, 8.0))
    assert double / base == pytest.approx(4.0, rel=0.10)


def test_prd_needs_ten_minutes():
    v, t = _t_vectors(0.05, 5.0, duration_s=300.0)
    with pytest.raises(MarkerError):
        prd(v, t)


def test_prd_rejects_many_degenerate_vectors():
    v, t = _t_vectors(0.05, 5.0)
    v[: len(v) // 3] = 0.0
    with pytest.raises(MarkerError, match="degenerate"):
        prd(v, t)


# ---------------------------------------------------------------- STV-QT

def test_stv_hand_values():
    assert stv_qt(np.full(40, 400.0)) == 0.0
    assert stv_qt(np.tile([400.0, 410.0], 15)) == pytest.approx(290 / (30 * np.sqrt(2)))
    assert stv_qt(np.tile([400.0, 410.0], 15)) == pytest.approx(6.835, abs=1e-3)
    qt = np.full(30, 400.0)
    qt[15] = 500.0
    assert stv_qt(qt) == pytest.approx(4.714, abs=1e-3)


def test_stv_skips_invalid_beats():
    qt = np.tile([400.0, 410.0], 40)
    qt[5] = np.nan
    assert stv_qt(qt) == pytest.approx(290 / (30 * np.sqrt(2)))
    with pytest.raises(MarkerError):
        stv_qt(qt[:29])


def _stv_oracle(qt, n=30):
    sums = []
    for s in range(len(qt) - n + 1):
        w = qt[s:s + n]
        if np.all(np.isfinite(w)):
            sums.append(np.sum(np.abs(np.diff(w))))
    return np.median(sums) / (n * np.sqrt(2)) if sums else None


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(300, 500), min_size=30, max_size=120), st.data())
def test_stv_matches_window_loop(values, data):
    qt = np.array(values)
    holes = data.draw(st.lists(st.integers(0, len(qt) - 1), max_size=3))
    qt[holes] = np.nan
    expected = _stv_oracle(qt)
    if expected is None:
        with pytest.raises(MarkerError):
            stv_qt(qt)
    else:
        assert stv_qt(qt) == pytest.approx(expected)


# ---------------------------------------------------------------- intervals

def _median_beat(er_leads=(), er_uv=0.0):
    beat = np.tile(triangle(200, 1000, 20) + 200 * gauss(600, 40), (12, 1))
    for name in er_leads:
        i = STANDARD_LEADS.index(name)
        beat[i] += er_uv * np.where(T >= 220, np.exp(-(T - 220) / 150), 0)
    return beat


def test_tangent_t_end_constructed():
    # Gaussian T wave: steepest descent at peak + sigma, tangent hits zero at + 2 sigma
    t_peak, t_end = tangent_t_end(200 * gauss(600, 40), 0.0, 450, 900, FS)
    assert t_peak[0] == pytest.approx(600, abs=0.5)
    assert t_end[0] == pytest.approx(680, abs=0.5)


def test_interval_markers_flat_st():
    m = interval_markers(_median_beat(), FS, 200)
    assert m.tpte_ms == pytest.approx(80.0, abs=0.5)
    assert m.jpoint_uv == pytest.approx(0.0, abs=1e-6)
    assert not m.early_repol


def test_early_repolarization_inferior_leads():
    m = interval_markers(_median_beat(("II", "III", "aVF"), 120.0), FS, 200)
    assert m.early_repol
    assert m.j_elevation_uv["II"] >= 100 and m.j_elevation_uv["V1"] < 100


def test_single_lead_elevation_is_not_early_repol():
    assert not interval_markers(_median_beat(("II",), 150.0), FS, 200).early_repol


def test_unstable_baseline_rejected():
    beat = _median_beat()
    # steep drift in one lead: too slow to move QRS onset, too large for the PQ check
    beat[STANDARD_LEADS.index("V1")] += np.clip(8.0 * (T - 100), 0, 8.0 * 80)
    with pytest.raises(MarkerError, match="unstable baseline"):
        interval_markers(beat, FS, 200)


# ---------------------------------------------------------------- fractionation

def _direction_changes(x, ptp_fraction=0.05):
    """Reference: count sign changes between significant monotone pieces,
    walked sample by sample."""
    ptp = np.ptp(x)
    pieces, start = [], 0
    for i in range(1, len(x)):
        if i == len(x) - 1 or np.sign(x[i + 1] - x[i]) != np.sign(x[i] - x[i - 1]):
            change = x[i] - x[start]
            if abs(change) >= ptp_fraction * ptp and change != 0:
                if pieces and np.sign(pieces[-1]) == np.sign(change):
                    pieces[-1] += change
                else:
                    pieces.append(change)
            start = i
    return len(pieces) - 1 + (1 if np.ptp(x[-max(2, len(x) // 10):]) < ptp_fraction * ptp
                              else 0)


def test_fractionation_examples():
    mono = np.concatenate([np.zeros(20), np.linspace(0, 1000, 20),
                           np.linspace(1000, 0, 20), np.zeros(20)])
    rsr = np.concatenate([np.zeros(20), np.linspace(0, 800, 15), np.linspace(800, 300, 10),
                          np.linspace(300, 900, 10), np.linspace(900, 0, 15), np.zeros(20)])
    assert fractionation_index(mono, FS) == 2 == _direction_changes(mono)
    assert fractionation_index(rsr, FS) == 4 == _direction_changes(rsr)
    assert fractionation_index(np.zeros(60), FS) == 0


# ---------------------------------------------------------------- SVD battery

QRS, TW = slice(170, 231), slice(450, 760)


def _random_beat(rank, seed=0):
    rng = np.random.default_rng(seed)
    waves = [triangle(200, 1000, 20), 200 * gauss(600, 40), 80 * gauss(620, 25),
             40 * gauss(550, 60), 30 * gauss(680, 20)][:rank]
    return rng.normal(size=(8, rank)) @ np.array(waves)


def test_rank_one_signal():
    beat = np.outer(np.linspace(0.5, 1.5, 8), triangle(200, 1000, 20) + 200 * gauss(600, 40))
    res = twave_svd_battery(beat, QRS, TW)
    assert res.tcrt == pytest.approx(1.0)
    assert res.tmd_deg == pytest.approx(0.0, abs=1e-6)
    assert res.twr == pytest.approx(0.0, abs=1e-12)
    assert np.isnan(res.tld)


def test_rank_three_twr_zero():
    assert twave_svd_battery(_random_beat(3), QRS, TW).twr == pytest.approx(0.0, abs=1e-12)
    assert twave_svd_battery(_random_beat(5), QRS, TW).twr > 0


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.01, 100.0))
def test_svd_battery_scale_invariant(seed, scale):
    beat = _random_beat(5, seed)
    a, b = twave_svd_battery(beat, QRS, TW), twave_svd_battery(scale * beat, QRS, TW)
    assert b.tcrt == pytest.approx(a.tcrt, abs=1e-9)
    assert b.twr == pytest.approx(a.twr, rel=1e-6, abs=1e-12)
    assert b.tmd_deg == pytest.approx(a.tmd_deg, abs=1e-6)
    assert b.tld == pytest.approx(a.tld, abs=1e-6)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_svd_battery_bounds(seed):
    res = twave_svd_battery(_random_beat(5, seed), QRS, TW)
    assert -1 <= res.tcrt <= 1
    assert 0 <= res.twr <= 1
    assert 0 <= res.tmd_deg <= 180


def test_xyz_and_weighted_vectors():
    beat = np.zeros((8, 50))
    beat[0] = 1.0                              # lead I only
    xyz = to_xyz(beat)
    assert xyz.shape == (3, 50)
    stacked = to_xyz(np.stack([beat, 2 * beat]))
    np.testing.assert_allclose(stacked[1], 2 * xyz)
    vec = weighted_t_vectors(stacked, slice(10, 40))
    np.testing.assert_allclose(vec[1], 2 * vec[0])
    assert np.all(weighted_t_vectors(np.zeros((1, 3, 50)), slice(0, 50)) == 0)
