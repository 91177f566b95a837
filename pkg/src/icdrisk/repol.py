"""Repolarization markers computed from beat windows and median beats."""

from __future__ import annotations

from dataclasses import dataclass
from itertools import combinations

import numpy as np
from scipy import signal

from .hrv import MarkerError
from .record_io import STANDARD_LEADS

INDEPENDENT_LEADS = ("I", "II", "V1", "V2", "V3", "V4", "V5", "V6")

# Kors regression: rows X, Y, Z over (I, II, V1..V6)
KORS_MATRIX = np.array([
    [0.38, -0.07, -0.13, 0.05, -0.01, 0.14, 0.06, 0.54],
    [-0.07, 0.93, 0.06, -0.02, -0.05, 0.06, -0.17, 0.13],
    [0.11, -0.23, -0.43, -0.06, -0.14, -0.20, -0.11, 0.31],
])

# lead pairs regarded as contiguous for early repolarization
CONTIGUOUS_PAIRS = (("II", "III"), ("II", "aVF"), ("III", "aVF"),
                    ("I", "aVL"), ("V4", "V5"), ("V5", "V6"))
ER_LEADS = ("I", "II", "III", "aVL", "aVF", "V4", "V5", "V6")


# --------------------------------------------------------------------------
# Modified moving average T-wave alternans
# --------------------------------------------------------------------------

class MmaTracker:
    """Even/odd modified moving averages of beat waveforms.

    Each incoming beat moves its parity's average by ``fraction`` of the
    difference, limited to ``cap_uv`` per sample and beat.
    """

    def __init__(self, fraction=1 / 8, cap_uv=32.0):
        self.fraction = fraction
        self.cap_uv = cap_uv
        self.averages = [None, None]
        self.parity = 0
        self.count = 0

    def reset(self):
        self.averages = [None, None]
        self.parity = 0
        self.count = 0

    def update(self, beat):
        beat = np.asarray(beat, dtype=np.float64)
        avg = self.averages[self.parity]
        if avg is None:
            # both streams start from the first beat seen
            self.averages = [beat.copy(), beat.copy()]
        else:
            step = np.clip((beat - avg) * self.fraction, -self.cap_uv, self.cap_uv)
            avg += step
        self.parity ^= 1
        self.count += 1

    def alternans(self, segment=slice(None)) -> float:
        if self.averages[0] is None:
            return 0.0
        diff = np.abs(self.averages[0][..., segment] - self.averages[1][..., segment])
        return float(diff.max())


def mma_twa_trace(beats, jt=slice(None), fraction=1 / 8, cap_uv=32.0) -> np.ndarray:
    """Alternans magnitude after each beat; ``beats`` is ``(n_beats, ...)``."""
    tracker = MmaTracker(fraction, cap_uv)
    trace = np.empty(len(beats))
    for i, beat in enumerate(beats):
        tracker.update(beat)
        trace[i] = tracker.alternans(jt)
    return trace


def mma_twa(beats, jt=slice(None), min_beats=64, fraction=1 / 8, cap_uv=32.0) -> float:
    """Maximum MMA alternans (uV) over the JT segment after ``min_beats``
    beats of convergence."""
    beats = np.asarray(beats, dtype=np.float64)
    if len(beats) < min_beats:
        raise MarkerError("insufficient clean beats for TWA")
    trace = mma_twa_trace(beats, jt, fraction, cap_uv)
    return float(trace[min_beats - 1:].max())


# --------------------------------------------------------------------------
# Periodic repolarization dynamics
# --------------------------------------------------------------------------

def t_vector_angles(t_vectors, valid=None) -> tuple[np.ndarray, np.ndarray]:
    """Angle (deg) between successive T vectors; returns ``(angles, pair_ok)``
    where ``pair_ok[i]`` marks the pair ``(i, i + 1)``."""
    v = np.asarray(t_vectors, dtype=np.float64)
    ok = np.ones(len(v), bool) if valid is None else np.asarray(valid, bool)
    a, b = v[:-1], v[1:]
    norms = np.linalg.norm(a, axis=1) * np.linalg.norm(b, axis=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        cos = np.einsum("ij,ij->i", a, b) / norms
    angles = np.degrees(np.arccos(np.clip(cos, -1.0, 1.0)))
    pair_ok = ok[:-1] & ok[1:] & (norms > 0)
    return angles, pair_ok


def _morlet_power(y, fs, freqs, omega0=6.0):
    """Amplitude-normalised complex Morlet power; a sinusoid of amplitude A
    at the centre frequency yields ``|W|^2 = A^2``."""
    power = []
    for f in freqs:
        sigma = omega0 / (2 * np.pi * f)  # seconds
        half = int(np.ceil(4 * sigma * fs))
        t = np.arange(-half, half + 1) / fs
        envelope = np.exp(-0.5 * (t / sigma) ** 2)
        kernel = envelope * np.exp(2j * np.pi * f * t) / envelope.sum()
        w = 2.0 * signal.fftconvolve(y, kernel, mode="same")
        edge = int(np.ceil(2 * sigma * fs))
        if len(y) > 4 * edge:
            w = w[edge:len(y) - edge]
        power.append(np.abs(w) ** 2)
    return power


def prd(t_vectors, beat_times_s, valid=None, resample_hz=2.0, band_hz=(0.025, 0.1),
        n_scales=7, min_duration_s=600.0, noise_floor=1e-6, max_excluded=0.25) -> float:
    """Periodic repolarization dynamics (deg^2).

    Successive T-vector angles are resampled to ``resample_hz`` and their
    low-frequency (``band_hz``) wavelet power is averaged over time and scale.
    """
    v = np.asarray(t_vectors, dtype=np.float64)
    t = np.asarray(beat_times_s, dtype=np.float64)
    if len(v) != len(t):
        raise ValueError("t_vectors and beat_times_s must align")
    if len(t) < 3 or t[-1] - t[0] < min_duration_s:
        raise MarkerError("PRD needs at least 10 min of beats")
    ok = np.linalg.norm(v, axis=1) > noise_floor
    if valid is not None:
        ok &= np.asarray(valid, bool)
    if 1.0 - ok.mean() > max_excluded:
        raise MarkerError("too many degenerate T vectors")
    angles, pair_ok = t_vector_angles(v, ok)
    times = t[1:][pair_ok]
    angles = angles[pair_ok]
    grid = np.arange(times[0], times[-1], 1.0 / resample_hz)
    y = np.interp(grid, times, angles)
    y = y - y.mean()
    freqs = np.geomspace(band_hz[0], band_hz[1], n_scales)
    power = _morlet_power(y, resample_hz, freqs)
    return float(np.mean([p.mean() for p in power]))


# --------------------------------------------------------------------------
# Short-term QT variability
# --------------------------------------------------------------------------

def stv_qt(qt_series_ms, n=30) -> float:
    """Median over sliding ``n``-beat windows of sum|dQT| / (n * sqrt 2).

    Non-finite entries mark invalid beats; windows never span them.
    """
    qt = np.asarray(qt_series_ms, dtype=np.float64)
    if len(qt) < n:
        raise MarkerError(f"STV-QT needs {n} valid beats")
    bad = ~np.isfinite(qt)
    diffs = np.abs(np.diff(np.where(bad, 0.0, qt)))
    csum = np.concatenate([[0.0], np.cumsum(diffs)])
    window_sums = csum[n - 1:] - csum[:len(csum) - n + 1]
    bad_count = np.concatenate([[0], np.cumsum(bad)])
    clean = (bad_count[n:] - bad_count[:len(bad_count) - n]) == 0
    if not clean.any():
        raise MarkerError(f"STV-QT needs {n} consecutive valid beats")
    return float(np.median(window_sums[clean]) / (n * np.sqrt(2.0)))


# --------------------------------------------------------------------------
# Delineation and interval markers
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class Fiducials:
    q_on: int
    r_peak: int
    j_point: int
    t_peak: float
    t_end: float


@dataclass(frozen=True)
class IntervalMarkers:
    tpte_ms: float
    jpoint_uv: float
    early_repol: bool
    j_elevation_uv: dict
    fiducials: Fiducials


def _smooth(x, fs):
    win = max(5, int(round(11 * fs / 1000)) | 1)
    if x.shape[-1] <= win:
        return x
    return signal.savgol_filter(x, win, 2, axis=-1)


def _parabolic_peak(y, i):
    if 0 < i < len(y) - 1:
        a, b, c = y[i - 1], y[i], y[i + 1]
        denom = a - 2 * b + c
        if denom != 0:
            return i + 0.5 * (a - c) / denom
    return float(i)


def qrs_bounds(beat, fs, r_index, search_ms=150.0, fraction=0.1):
    """QRS onset and J point from the spatial velocity of a multi-lead beat."""
    beat = np.atleast_2d(np.asarray(beat, dtype=np.float64))
    velocity = np.sqrt((np.gradient(beat, axis=1) ** 2).sum(axis=0))
    span = int(search_ms * fs / 1000)
    lo, hi = max(r_index - span, 1), min(r_index + span, beat.shape[1] - 1)
    seg = velocity[lo:hi]
    above = np.flatnonzero(seg >= fraction * seg.max())
    return lo + int(above[0]), lo + int(above[-1])


def tangent_t_end(x, baseline, t_lo, t_hi, fs):
    """T peak and tangent-method T end for each row of ``x``.

    The T peak is the extremum of ``|x - baseline|`` in ``[t_lo, t_hi)``
    (parabolic refinement); T end is where the tangent at the steepest
    return slope after the peak crosses the baseline. Fractional sample
    positions; NaN where undefined.
    """
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    baseline = np.broadcast_to(np.asarray(baseline, dtype=np.float64), (x.shape[0],))
    xs = _smooth(x, fs)
    dev = xs - baseline[:, None]
    win = np.abs(dev[:, t_lo:t_hi])
    peak_i = t_lo + np.argmax(win, axis=1)
    rows = np.arange(x.shape[0])
    polarity = np.sign(dev[rows, peak_i])
    deriv = np.gradient(xs, axis=1)
    cols = np.arange(x.shape[1])
    after = cols[None, :] > peak_i[:, None]
    returning = np.where(after, -polarity[:, None] * deriv, -np.inf)
    s = np.argmax(returning, axis=1)
    slope = deriv[rows, s]
    with np.errstate(divide="ignore", invalid="ignore"):
        t_end = s - dev[rows, s] / slope
    bad = (polarity == 0) | ~np.isfinite(t_end) | (returning[rows, s] <= 0)
    t_end = np.where(bad, np.nan, t_end)
    t_peak = np.array([_parabolic_peak(np.abs(dev[r]), peak_i[r]) for r in rows])
    return t_peak, t_end


def delineate(beat, fs, r_index, lead_names=STANDARD_LEADS, t_lead="V5",
              baseline_max_sd_uv=40.0, t_search_ms=(40.0, 550.0)):
    """Fiducials and per-lead PQ baselines of a 12-lead median beat."""
    beat = np.asarray(beat, dtype=np.float64)
    ms = fs / 1000.0
    q_on, j = qrs_bounds(beat, fs, r_index)
    pq = beat[:, max(q_on - int(40 * ms), 0):max(q_on - int(10 * ms), 1)]
    if pq.shape[1] < 3:
        raise MarkerError("no PQ segment before QRS onset")
    if np.max(np.std(pq, axis=1)) > baseline_max_sd_uv:
        raise MarkerError("unstable baseline")
    baselines = np.median(pq, axis=1)
    li = list(lead_names).index(t_lead)
    t_lo = j + int(t_search_ms[0] * ms)
    t_hi = min(r_index + int(t_search_ms[1] * ms), beat.shape[1] - 1)
    if t_hi - t_lo < int(40 * ms):
        raise MarkerError("beat window too short for T wave")
    t_peak, t_end = tangent_t_end(beat[li], baselines[li], t_lo, t_hi, fs)
    if not np.isfinite(t_end[0]):
        raise MarkerError("T end not locatable")
    return Fiducials(q_on, r_index, j, float(t_peak[0]), float(t_end[0])), baselines


def interval_markers(median_beat, fs, r_index, lead_names=STANDARD_LEADS, t_lead="V5",
                     er_threshold_uv=100.0) -> IntervalMarkers:
    """Tpeak-Tend, J-point elevation and early repolarization of a median beat."""
    beat = np.asarray(median_beat, dtype=np.float64)
    fid, baselines = delineate(beat, fs, r_index, lead_names, t_lead)
    j_amp = beat[:, fid.j_point] - baselines
    elevation = {name: float(j_amp[i]) for i, name in enumerate(lead_names)}
    er_leads = [name for name in ER_LEADS if name in elevation]
    jpoint = max(elevation[name] for name in er_leads)
    elevated = {name for name in er_leads if elevation[name] >= er_threshold_uv}
    early = any(a in elevated and b in elevated for a, b in CONTIGUOUS_PAIRS)
    tpte = (fid.t_end - fid.t_peak) * 1000.0 / fs
    return IntervalMarkers(float(tpte), jpoint, early, elevation, fid)


# --------------------------------------------------------------------------
# Fractionation
# --------------------------------------------------------------------------

def fractionation_index(qrs_segment, fs=1000.0, cutoff_hz=150.0, min_fraction=0.05,
                        flat_fraction=0.02) -> int:
    """Number of slope reversals within the QRS.

    The segment is low-passed at ``cutoff_hz`` and split into monotone
    deflections; deflections smaller than ``min_fraction`` of the QRS
    peak-to-peak amplitude are ignored. The count is the number of direction
    changes between consecutive significant deflections, plus one for the
    terminal return to a flat tail when the segment ends flat.
    """
    x = np.asarray(qrs_segment, dtype=np.float64)
    if len(x) < 3:
        return 0
    if fs > 2 * cutoff_hz and len(x) > 15:
        sos = signal.butter(4, cutoff_hz, fs=fs, output="sos")
        x = signal.sosfiltfilt(sos, x, padlen=min(len(x) - 1, 30))
    ptp = np.ptp(x)
    if ptp == 0:
        return 0
    d = np.diff(x)
    eps = flat_fraction * np.abs(d).max()
    direction = np.where(d > eps, 1, np.where(d < -eps, -1, 0))

    # collapse into runs of equal direction with their amplitude change
    edges = np.flatnonzero(np.diff(direction)) + 1
    starts = np.concatenate([[0], edges])
    stops = np.concatenate([edges, [len(d)]])
    runs = [(int(direction[a]), float(x[b] - x[a])) for a, b in zip(starts, stops)]

    deflections = []
    for sign, change in runs:
        if sign == 0 or abs(change) < min_fraction * ptp:
            continue
        if deflections and deflections[-1][0] == sign:
            deflections[-1] = (sign, deflections[-1][1] + change)
        else:
            deflections.append((sign, change))
    if not deflections:
        return 0
    count = len(deflections) - 1
    tail = x[-max(2, len(x) // 10):]
    if np.ptp(tail) < min_fraction * ptp:
        count += 1
    return count


# --------------------------------------------------------------------------
# SVD T-wave morphology
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class SvdBattery:
    tcrt: float
    twr: float
    tmd_deg: float
    tld: float


def _svd(m, rel_tol=1e-10):
    u, s, vt = np.linalg.svd(m, full_matrices=False)
    s = np.where(s > rel_tol * (s[0] if s[0] > 0 else 1.0), s, 0.0)
    return u, s, vt


def _mean_pairwise_angle(vectors):
    norms = np.linalg.norm(vectors, axis=1)
    keep = norms > 0
    vectors, norms = vectors[keep], norms[keep]
    if len(vectors) < 2:
        return 0.0
    angles = []
    for i, j in combinations(range(len(vectors)), 2):
        c = vectors[i] @ vectors[j] / (norms[i] * norms[j])
        angles.append(np.degrees(np.arccos(np.clip(c, -1.0, 1.0))))
    return float(np.mean(angles))


def twave_svd_battery(eight_lead_beat, qrs, t_wave) -> SvdBattery:
    """TCRT, TWR, TMD and TLD of an 8-lead beat.

    ``qrs`` and ``t_wave`` are slices delimiting the segments in samples.
    """
    m = np.asarray(eight_lead_beat, dtype=np.float64)
    if m.shape[0] != 8:
        raise ValueError("expected 8 independent leads")
    qrs_lo, t_hi = qrs.start, t_wave.stop
    u, s, _ = _svd(m[:, qrs_lo:t_hi])
    if s[0] == 0:
        raise MarkerError("beat has no signal")
    basis = u[:, :3]
    loops = basis.T @ m
    qrs_loop = loops[:, qrs]
    t_loop = loops[:, t_wave]
    qrs_norm = np.linalg.norm(qrs_loop, axis=0)
    t_norm = np.linalg.norm(t_loop, axis=0)
    t_dir = t_loop[:, np.argmax(t_norm)] / t_norm.max()
    big = qrs_loop[:, qrs_norm > 0.7 * qrs_norm.max()]
    tcrt = float(np.mean((t_dir @ big) / np.linalg.norm(big, axis=0)))

    ut, st, _ = _svd(m[:, t_wave])
    energy = st ** 2
    if energy.sum() == 0:
        raise MarkerError("T wave has no signal")
    twr = float(energy[3:].sum() / energy.sum())
    rank = int(np.count_nonzero(st))
    recon2 = ut[:, :2] * st[:2]
    tmd = _mean_pairwise_angle(recon2)
    tld = _mean_pairwise_angle(ut[:, :3] * st[:3]) if rank >= 2 else float("nan")
    return SvdBattery(float(np.clip(tcrt, -1.0, 1.0)), twr, tmd, tld)


def to_xyz(eight_lead):
    """Kors-regression X, Y, Z from the 8 independent leads.

    Accepts ``(8, n)`` or ``(n_beats, 8, n)``.
    """
    m = np.asarray(eight_lead, dtype=np.float64)
    return np.einsum("xl,...ln->...xn", KORS_MATRIX, m)


def weighted_t_vectors(xyz_beats, t_window):
    """Magnitude-weighted mean T vector per beat; ``xyz_beats`` is (n, 3, L)."""
    seg = np.asarray(xyz_beats, dtype=np.float64)[:, :, t_window]
    mag = np.linalg.norm(seg, axis=1)
    total = mag.sum(axis=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        vec = np.einsum("bxn,bn->bx", seg, mag) / total[:, None]
    vec[total == 0] = 0.0
    return vec
