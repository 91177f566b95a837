"""Heart rate variability, heart rate turbulence and phase-rectified signal
averaging (acceleration / deceleration capacity)."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import signal

from .beats import VpcTachogram


class MarkerError(ValueError):
    """Raised when a marker cannot be computed validly from its input."""


@dataclass(frozen=True)
class HrvTimeDomain:
    sdnn_ms: float
    rmssd_ms: float
    n_intervals: int


@dataclass(frozen=True)
class HrvFrequencyDomain:
    vlf_ms2: float
    lf_ms2: float
    hf_ms2: float
    total_ms2: float
    window_count: int

    @property
    def lf_hf_ratio(self) -> float | None:
        return self.lf_ms2 / self.hf_ms2 if self.hf_ms2 > 0 else None


@dataclass(frozen=True)
class TurbulenceResult:
    to_percent: float
    ts_ms_per_beat: float
    tachogram_count: int
    averaged_post_rr: tuple[float, ...]


@dataclass(frozen=True)
class PrsaResult:
    capacity_ms: float
    anchor_count: int
    direction: str
    curve: np.ndarray  # X(k) for k in [-L, L)


def time_domain_hrv(nn_ms) -> HrvTimeDomain:
    nn = np.asarray(nn_ms, dtype=np.float64)
    if len(nn) < 2:
        raise MarkerError("insufficient intervals")
    sdnn = float(np.std(nn, ddof=1))
    rmssd = float(np.sqrt(np.mean(np.diff(nn) ** 2)))
    return HrvTimeDomain(sdnn, rmssd, len(nn))


BANDS_HZ = {"vlf": (0.0033, 0.04), "lf": (0.04, 0.15), "hf": (0.15, 0.40)}


def frequency_domain_hrv(nn_ms, beat_times_s, resample_hz=4.0, window_s=300.0,
                         min_coverage=0.8) -> HrvFrequencyDomain:
    """Band powers of the NN tachogram by an averaged Hann periodogram.

    The tachogram is linearly interpolated to ``resample_hz``; 5-min windows
    overlap by half. A window is dropped when its NN intervals cover less
    than ``min_coverage`` of its duration (i.e. too many beats filtered out).
    """
    nn = np.asarray(nn_ms, dtype=np.float64)
    t = np.asarray(beat_times_s, dtype=np.float64)
    if len(nn) != len(t):
        raise ValueError("nn_ms and beat_times_s must align")
    if len(nn) < 2 or t[-1] - t[0] < window_s:
        raise MarkerError("segment too short for spectral analysis")

    grid = np.arange(t[0], t[-1], 1.0 / resample_hz)
    tachogram = np.interp(grid, t, nn)
    nwin = int(round(window_s * resample_hz))
    step = nwin // 2
    spectra = []
    freqs = None
    for start in range(0, len(grid) - nwin + 1, step):
        t0, t1 = grid[start], grid[start] + window_s
        inside = (t > t0) & (t <= t1)
        if nn[inside].sum() / 1000.0 < min_coverage * window_s:
            continue
        freqs, pxx = signal.periodogram(tachogram[start:start + nwin], fs=resample_hz,
                                        window="hann", detrend="constant",
                                        scaling="density")
        spectra.append(pxx)
    if not spectra:
        raise MarkerError("no window with sufficient valid beats")
    psd = np.mean(spectra, axis=0)
    df = freqs[1] - freqs[0]

    def band(lo, hi):
        sel = (freqs >= lo) & (freqs < hi)
        return float(psd[sel].sum() * df)

    return HrvFrequencyDomain(vlf_ms2=band(*BANDS_HZ["vlf"]), lf_ms2=band(*BANDS_HZ["lf"]),
                              hf_ms2=band(*BANDS_HZ["hf"]), total_ms2=float(psd[1:].sum() * df),
                              window_count=len(spectra))


def _max_window_slope(series, width=5):
    x = np.arange(width, dtype=np.float64)
    xc = x - x.mean()
    windows = np.lib.stride_tricks.sliding_window_view(series, width)
    return (windows @ xc) / (xc @ xc)


def heart_rate_turbulence(tachograms: list[VpcTachogram], min_tachograms=5
                          ) -> TurbulenceResult:
    """Turbulence onset (mean per-tachogram, %) and slope (max 5-interval
    regression slope of the averaged post-pause tachogram, ms/beat)."""
    if len(tachograms) < min_tachograms:
        raise MarkerError("insufficient tachograms")
    onsets = []
    for tg in tachograms:
        before = tg.pre_rr[0] + tg.pre_rr[1]
        after = tg.post_rr[0] + tg.post_rr[1]
        onsets.append(100.0 * (after - before) / before)

    length = max(len(tg.post_rr) for tg in tachograms)
    total = np.zeros(length)
    count = np.zeros(length)
    for tg in tachograms:
        total[:len(tg.post_rr)] += tg.post_rr
        count[:len(tg.post_rr)] += 1
    averaged = total / count
    slope = float(np.max(_max_window_slope(averaged)))
    return TurbulenceResult(float(np.mean(onsets)), slope, len(tachograms),
                            tuple(float(v) for v in averaged))


def prsa_capacity(nn_ms, direction="deceleration", half_width=20, max_change=0.05,
                  min_anchors=100) -> PrsaResult:
    """Deceleration (or acceleration) capacity by phase-rectified averaging.

    Anchors are beats lengthening (shortening) relative to the previous beat
    by at most ``max_change`` of the pair mean; the capacity is
    ``(X(0) + X(1) - X(-1) - X(-2)) / 4`` of the anchor-aligned average.
    """
    if direction not in ("deceleration", "acceleration"):
        raise ValueError("direction must be 'deceleration' or 'acceleration'")
    nn = np.asarray(nn_ms, dtype=np.float64)
    L = half_width
    if len(nn) < 2 * L + 1:
        raise MarkerError("insufficient anchors")
    delta = nn[1:] - nn[:-1]
    pair_mean = 0.5 * (nn[1:] + nn[:-1])
    moving = delta > 0 if direction == "deceleration" else delta < 0
    ok = moving & (np.abs(delta) <= max_change * pair_mean)
    anchors = np.flatnonzero(ok) + 1
    anchors = anchors[(anchors >= L) & (anchors <= len(nn) - L)]
    if len(anchors) < min_anchors or len(anchors) == 0:
        raise MarkerError("insufficient anchors")
    windows = np.lib.stride_tricks.sliding_window_view(nn, 2 * L)[anchors - L]
    curve = windows.mean(axis=0)
    x0, x1, xm1, xm2 = curve[L], curve[L + 1], curve[L - 1], curve[L - 2]
    capacity = float((x0 + x1 - xm1 - xm2) / 4.0)
    return PrsaResult(capacity, len(anchors), direction, curve)
