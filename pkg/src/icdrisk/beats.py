"""QRS detection, beat labelling, ventricular ectopy counts and VPC tachograms."""

from __future__ import annotations

import csv
import io
from collections import deque
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage, signal

NORMAL = "N"
VENTRICULAR = "V"
ARTIFACT = "A"

MIN_RR_MS = 200.0
MAX_RR_MS = 3000.0


class NoActivityError(ValueError):
    pass


class InsufficientBeatsError(ValueError):
    pass


# --------------------------------------------------------------------------
# QRS detection
# --------------------------------------------------------------------------

@dataclass
class QrsDetectorConfig:
    band_hz: tuple[float, float] = (5.0, 25.0)
    integration_ms: float = 150.0
    refractory_ms: float = 200.0
    twave_window_ms: float = 360.0
    refine_ms: float = 75.0
    searchback_factor: float = 1.66
    noise_floor_uv: float = 10.0
    chunk_s: float = 60.0
    margin_s: float = 2.0


class _ThresholdState:
    """Adaptive dual-threshold bookkeeping carried across chunks."""

    def __init__(self, refractory, twave_window, searchback_factor):
        self.refractory = refractory
        self.twave_window = twave_window
        self.searchback_factor = searchback_factor
        self.spk = None
        self.npk = None
        self.last_beat = None
        self.last_slope = None
        self.rr = deque(maxlen=8)
        self.pending = []  # (pos, height, slope) rejected since the last beat
        self.beats = []

    @property
    def thr1(self):
        return self.npk + 0.25 * (self.spk - self.npk)

    def _accept(self, pos, height, slope, weight=0.125):
        if self.last_beat is not None:
            self.rr.append(pos - self.last_beat)
        self.spk = weight * height + (1 - weight) * self.spk
        self.last_beat = pos
        self.last_slope = slope
        self.beats.append(pos)
        self.pending = []

    def _searchback(self, pos):
        if self.last_beat is None or not self.rr:
            return
        if pos - self.last_beat <= self.searchback_factor * np.mean(self.rr):
            return
        thr2 = 0.5 * self.thr1
        eligible = [c for c in self.pending
                    if c[1] > thr2 and c[0] - self.last_beat >= self.refractory]
        if eligible:
            best = max(eligible, key=lambda c: c[1])
            self._accept(*best, weight=0.25)

    def feed(self, pos, height, slope):
        self._searchback(pos)
        if self.last_beat is not None and pos - self.last_beat < self.refractory:
            self.npk = 0.125 * height + 0.875 * self.npk
            return
        if height > self.thr1:
            if (self.last_beat is not None and pos - self.last_beat < self.twave_window
                    and slope < 0.5 * self.last_slope):
                self.npk = 0.125 * height + 0.875 * self.npk
                return
            self._accept(pos, height, slope)
        else:
            self.npk = 0.125 * height + 0.875 * self.npk
            self.pending.append((pos, height, slope))


def detect_qrs_stream(read, n_samples, sampling_rate_hz, config=None) -> np.ndarray:
    """Detect R peaks on a lead exposed through ``read(start, stop)``.

    The lead is processed in chunks with filter margins, so memory use is
    independent of record length. Returns sample indices of the fiducials.
    """
    cfg = config or QrsDetectorConfig()
    fs = float(sampling_rate_hz)
    if not 128 <= fs <= 2000:
        raise ValueError(f"sampling rate {fs:g} Hz outside [128, 2000]")
    if n_samples < 2 * fs:
        raise ValueError("signal too short: at least 2 s required")

    sos = signal.butter(2, cfg.band_hz, btype="bandpass", fs=fs, output="sos")
    integ_len = max(1, int(round(cfg.integration_ms * fs / 1000)))
    refine = int(round(cfg.refine_ms * fs / 1000))
    chunk = max(int(cfg.chunk_s * fs), int(4 * fs))
    margin = int(cfg.margin_s * fs)
    state = _ThresholdState(refractory=cfg.refractory_ms * fs / 1000,
                            twave_window=cfg.twave_window_ms * fs / 1000,
                            searchback_factor=cfg.searchback_factor)
    lo, hi = np.inf, -np.inf
    refined = []

    for c0 in range(0, n_samples, chunk):
        c1 = min(c0 + chunk, n_samples)
        if n_samples - c1 < fs:  # fold a short tail into this chunk
            c1 = n_samples
        e0, e1 = max(0, c0 - margin), min(n_samples, c1 + margin)
        x = np.asarray(read(e0, e1), dtype=np.float64)
        lo, hi = min(lo, x[c0 - e0:c1 - e0].min()), max(hi, x[c0 - e0:c1 - e0].max())

        y = signal.sosfiltfilt(sos, x)
        slope = np.abs(np.gradient(y))
        integ = ndimage.uniform_filter1d(slope ** 2, integ_len, mode="nearest")
        peaks, _ = signal.find_peaks(integ)
        peaks = peaks[(peaks >= c0 - e0) & (peaks < c1 - e0)]
        if state.spk is None:
            init = integ[c0 - e0:c0 - e0 + int(2 * fs)]
            state.spk = init.max() / 3.0
            state.npk = init.mean() / 2.0
        slope_max = ndimage.maximum_filter1d(slope, 2 * integ_len + 1, mode="nearest")
        n_before = len(state.beats)
        for p in peaks:
            state.feed(int(p) + e0, float(integ[p]), float(slope_max[p]))
        # searchback may have appended an earlier candidate; keep order
        new = sorted(state.beats[n_before:])
        for pos in new:
            a, b = max(pos - refine, e0), min(pos + refine + 1, e1)
            seg = x[a - e0:b - e0]
            dev = np.abs(seg - np.median(seg))
            refined.append(a + int(np.argmax(dev)))
        if c1 == n_samples:
            break

    if not hi - lo >= cfg.noise_floor_uv:
        raise NoActivityError("no detectable activity")
    beats = np.unique(np.asarray(refined, dtype=np.int64))
    keep = [0] if len(beats) else []
    min_gap = cfg.refractory_ms * fs / 1000
    for i in range(1, len(beats)):
        if beats[i] - beats[keep[-1]] >= min_gap:
            keep.append(i)
    return beats[keep]


def detect_qrs(lead_signal, sampling_rate_hz, config=None) -> np.ndarray:
    """R-peak sample indices of a single lead (band-pass, derivative energy,
    adaptive dual thresholds with a refractory period)."""
    x = np.asarray(lead_signal, dtype=np.float64)
    return detect_qrs_stream(lambda a, b: x[a:b], len(x), sampling_rate_hz, config)


def qrs_energy(lead_signal, sampling_rate_hz) -> float:
    """Mean band-passed derivative energy; ranks leads for detection fallback."""
    sos = signal.butter(2, (5.0, 25.0), btype="bandpass", fs=sampling_rate_hz, output="sos")
    y = signal.sosfiltfilt(sos, np.asarray(lead_signal, dtype=np.float64))
    return float(np.mean(np.gradient(y) ** 2))


# --------------------------------------------------------------------------
# Beat classification
# --------------------------------------------------------------------------

def _windows(x, centers, offsets):
    idx = np.clip(centers[:, None] + offsets[None, :], 0, len(x) - 1)
    return x[idx]


def beat_morphology(lead_signal, indices, sampling_rate_hz, template=None):
    """Per-beat QRS width (ms) and correlation against a normal template.

    Returns ``(widths_ms, correlations, template)``. The template defaults to
    the sample-wise median of all beats.
    """
    x = np.asarray(lead_signal, dtype=np.float64)
    idx = np.asarray(indices, dtype=np.int64)
    fs = float(sampling_rate_hz)
    ms = fs / 1000.0

    base = _windows(x, idx, np.arange(int(-150 * ms), int(-90 * ms)))
    baseline = np.median(base, axis=1)
    half = int(150 * ms)
    win = _windows(x, idx, np.arange(-half, half + 1)) - baseline[:, None]
    dev = np.abs(win)
    centre = half
    core = int(20 * ms)
    peak = dev[:, centre - core:centre + core + 1].max(axis=1)
    mask = dev > 0.1 * peak[:, None]
    gap = max(1, int(20 * ms))
    mask = ndimage.binary_closing(mask, structure=np.ones((1, gap), bool))
    mask[:, centre] = True
    left = mask[:, :centre + 1][:, ::-1]
    left_len = np.where(left.all(axis=1), left.shape[1], np.argmin(left, axis=1))
    right = mask[:, centre:]
    right_len = np.where(right.all(axis=1), right.shape[1], np.argmin(right, axis=1))
    widths = (left_len + right_len - 1) / ms

    tw = int(80 * ms)
    shape = win[:, centre - tw:centre + tw + 1]
    if template is None:
        template = np.median(shape, axis=0)
    a = shape - shape.mean(axis=1, keepdims=True)
    b = template - template.mean()
    denom = np.sqrt((a ** 2).sum(axis=1) * (b ** 2).sum())
    with np.errstate(invalid="ignore", divide="ignore"):
        corr = np.where(denom > 0, a @ b / np.where(denom > 0, denom, 1.0), 1.0)
    return widths, corr, template


def rr_intervals_ms(indices, sampling_rate_hz) -> np.ndarray:
    return np.diff(np.asarray(indices, dtype=np.float64)) * 1000.0 / sampling_rate_hz


def rr_context(rr_ms, prematurity=0.20, median_span=11):
    """Per-beat ``(premature, artifact)`` masks derived from RR intervals only.

    ``rr_ms[i]`` is the interval ending at beat ``i + 1``; a beat is premature
    when its coupling interval is at least ``prematurity`` shorter than the
    local median RR, and an artifact when that interval is physiologically
    impossible.
    """
    rr = np.asarray(rr_ms, dtype=np.float64)
    n = len(rr) + 1
    if n < 2:
        return np.zeros(n, bool), np.zeros(n, bool)
    rr_prev = np.concatenate([[rr[0]], rr])
    local = ndimage.median_filter(rr, size=median_span, mode="nearest")
    local_prev = np.concatenate([[local[0]], local])
    premature = rr_prev <= (1.0 - prematurity) * local_prev
    premature[0] = False
    artifact = (rr_prev < MIN_RR_MS) | (rr_prev > MAX_RR_MS)
    return premature, artifact


def label_beats(rr_ms, widths_ms, correlations, prematurity=0.20, max_width_ms=120.0,
                min_correlation=0.9, median_span=11) -> np.ndarray:
    """Label beats from RR context and morphology features."""
    premature, artifact = rr_context(rr_ms, prematurity, median_span)
    return apply_labels(premature, artifact, widths_ms, correlations, max_width_ms,
                        min_correlation)


def apply_labels(premature, artifact, widths_ms, correlations, max_width_ms=120.0,
                 min_correlation=0.9) -> np.ndarray:
    widths = np.asarray(widths_ms, dtype=np.float64)
    corr = np.asarray(correlations, dtype=np.float64)
    if not len(widths) == len(corr) == len(premature):
        raise ValueError("features must have one entry per beat")
    labels = np.full(len(widths), NORMAL, dtype="<U1")
    abnormal_shape = (widths > max_width_ms) | (corr < min_correlation)
    labels[premature & abnormal_shape] = VENTRICULAR
    labels[artifact] = ARTIFACT
    return labels


def classify_beats(lead_signal, indices, sampling_rate_hz, **rules) -> np.ndarray:
    """Label each detected beat normal / ventricular / artifact."""
    indices = np.asarray(indices, dtype=np.int64)
    if len(indices) < 10:
        raise InsufficientBeatsError("insufficient beats for template")
    widths, corr, _ = beat_morphology(lead_signal, indices, sampling_rate_hz)
    return label_beats(rr_intervals_ms(indices, sampling_rate_hz), widths, corr, **rules)


@dataclass
class BeatAnnotations:
    indices: np.ndarray
    labels: np.ndarray
    sampling_rate_hz: float
    rr_ms: np.ndarray = field(init=False)
    nn_mask: np.ndarray = field(init=False)

    def __post_init__(self):
        self.indices = np.asarray(self.indices, dtype=np.int64)
        self.labels = np.asarray(self.labels)
        if len(self.labels) != len(self.indices):
            raise ValueError("one label per beat required")
        if np.any(np.diff(self.indices) <= 0):
            raise ValueError("beat indices must be strictly increasing")
        self.rr_ms = rr_intervals_ms(self.indices, self.sampling_rate_hz)
        self.nn_mask = nn_mask(self.labels, self.rr_ms)

    @property
    def nn_ms(self) -> np.ndarray:
        return self.rr_ms[self.nn_mask]

    @property
    def times_s(self) -> np.ndarray:
        return self.indices / self.sampling_rate_hz

    @property
    def nn_times_s(self) -> np.ndarray:
        """Time of the beat closing each NN interval."""
        return self.times_s[1:][self.nn_mask]

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["sample_index", "time_s", "label", "rr_ms"])
        times = self.times_s
        for i, idx in enumerate(self.indices):
            rr = "" if i == 0 else f"{self.rr_ms[i - 1]:.3f}"
            writer.writerow([int(idx), f"{times[i]:.4f}", self.labels[i], rr])
        return buf.getvalue()


def nn_mask(labels, rr_ms) -> np.ndarray:
    """Intervals bounded by two normal beats and within physiological range."""
    labels = np.asarray(labels)
    rr = np.asarray(rr_ms, dtype=np.float64)
    normal = labels == NORMAL
    return normal[:-1] & normal[1:] & (rr >= MIN_RR_MS) & (rr <= MAX_RR_MS)


# --------------------------------------------------------------------------
# Ectopy counts
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class NsvtEpisode:
    start_index: int
    beat_count: int
    mean_rate_bpm: float
    duration_s: float


@dataclass(frozen=True)
class VentricularCounts:
    pvc_count: int
    nsvt_episodes: tuple[NsvtEpisode, ...]
    sustained_runs: tuple[NsvtEpisode, ...]

    @property
    def nsvt_count(self) -> int:
        return len(self.nsvt_episodes)

    @property
    def nsvt_max_rate_bpm(self) -> float | None:
        if not self.nsvt_episodes:
            return None
        return max(e.mean_rate_bpm for e in self.nsvt_episodes)


def _runs(mask):
    """(start, length) of maximal True runs."""
    padded = np.concatenate([[False], mask, [False]]).astype(np.int8)
    edges = np.flatnonzero(np.diff(padded))
    return list(zip(edges[::2], edges[1::2] - edges[::2]))


def count_markers(labels, rr_ms, min_beats=3, min_rate_bpm=120.0, max_duration_s=30.0
                  ) -> VentricularCounts:
    """PVC count plus NSVT episodes; runs lasting ``max_duration_s`` or more
    are reported as sustained instead."""
    labels = np.asarray(labels)
    rr = np.asarray(rr_ms, dtype=np.float64)
    if len(rr) != len(labels) - 1 and len(labels) > 0:
        raise ValueError("rr_ms must have len(labels) - 1 entries")
    ventricular = labels == VENTRICULAR
    nsvt, sustained = [], []
    for start, length in _runs(ventricular):
        if length < min_beats:
            continue
        # intervals ending at each beat of the run
        lo, hi = max(start - 1, 0), start + length - 1
        intervals = rr[lo:hi]
        duration = intervals.sum() / 1000.0
        rate = 60000.0 / intervals.mean()
        if rate < min_rate_bpm:
            continue
        episode = NsvtEpisode(int(start), int(length), float(rate), float(duration))
        (sustained if duration >= max_duration_s else nsvt).append(episode)
    return VentricularCounts(int(ventricular.sum()), tuple(nsvt), tuple(sustained))


# --------------------------------------------------------------------------
# VPC tachograms
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class VpcTachogram:
    beat_index: int
    pre_rr: tuple[float, float]
    post_rr: tuple[float, ...]
    coupling_ms: float
    pause_ms: float
    reference_ms: float


def extract_vpc_tachograms(labels, rr_ms, max_coupling=0.8, min_pause=1.2, tolerance=0.2,
                           rr_range=(300.0, 2000.0), n_post=15, min_post=5, n_reference=5
                           ) -> list[VpcTachogram]:
    """Tachograms around isolated VPCs that pass the turbulence filters.

    The reference RR is the mean of up to ``n_reference`` consecutive sinus
    intervals preceding the coupling interval (at least the two ``pre_rr``).
    """
    labels = np.asarray(labels)
    rr = np.asarray(rr_ms, dtype=np.float64)
    n = len(labels)
    sinus = nn_mask(labels, rr)  # interval k spans beats k, k+1
    lo_rr, hi_rr = rr_range
    out = []
    for v in np.flatnonzero(labels == VENTRICULAR):
        if v < 3 or v + 1 >= n:
            continue
        if not (sinus[v - 3] and sinus[v - 2]):
            continue
        ref_idx = []
        k = v - 2
        while k >= 0 and sinus[k] and len(ref_idx) < n_reference:
            ref_idx.append(k)
            k -= 1
        reference = rr[ref_idx].mean()
        coupling, pause = rr[v - 1], rr[v]
        if labels[v + 1] != NORMAL:
            continue
        if coupling > max_coupling * reference or pause < min_pause * reference:
            continue
        post_idx = np.arange(v + 1, min(v + 1 + n_post, len(rr)))
        if len(post_idx) < min_post:
            continue
        surround = np.concatenate([[v - 3, v - 2], post_idx])
        values = rr[surround]
        if not sinus[surround].all():
            continue
        if np.any((values < lo_rr) | (values > hi_rr)):
            continue
        if np.any(np.abs(values - reference) > tolerance * reference):
            continue
        out.append(VpcTachogram(int(v), (float(rr[v - 3]), float(rr[v - 2])),
                                tuple(float(x) for x in rr[post_idx]),
                                float(coupling), float(pause), float(reference)))
    return out
