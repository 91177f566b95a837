"""Streaming Holter analysis: beats, HRV/HRT and the repolarization battery.

A record is processed in two passes. The first pass runs the QRS detector
chunk-wise over one lead; the second pass walks the record in 5-minute
segments, reading all 12 leads for one segment at a time, so peak memory is
bounded by the segment size rather than the record length.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import beats as bp
from . import hrv, repol
from .hrv import MarkerError
from .record_io import STANDARD_LEADS, HolterReader, HolterRecord


class RecordSource:
    """Adapter exposing an in-memory :class:`HolterRecord` like a reader."""

    def __init__(self, record: HolterRecord):
        self.record = record
        self.header = record.header

    @property
    def n_samples(self) -> int:
        return self.header.sample_count_per_lead

    @property
    def sampling_rate_hz(self) -> int:
        return self.header.sampling_rate_hz

    def read(self, start=0, stop=None, leads=None, dtype=np.float32):
        stop = self.n_samples if stop is None else min(stop, self.n_samples)
        start = max(0, start)
        block = self.record.samples[:, start:stop]
        if leads is not None:
            block = block[[self.header.lead_index(x) if isinstance(x, str) else int(x)
                           for x in leads]]
        return block.astype(dtype)


@dataclass
class AnalysisConfig:
    segment_s: float = 300.0
    window_pre_ms: float = 250.0
    window_post_ms: float = 600.0
    detection_lead: str = "II"
    t_lead: str = "V5"
    twa_leads: tuple = ("II", "V1", "V5")
    twa_min_beats: int = 64
    twa_max_rate_bpm: float = 120.0
    min_segment_beats: int = 10
    min_anchors: int = 100
    min_tachograms: int = 5
    er_threshold_uv: float = 100.0
    detector: bp.QrsDetectorConfig = field(default_factory=bp.QrsDetectorConfig)


@dataclass(frozen=True)
class MarkerValue:
    marker: str
    value: float | None
    unit: str
    valid: bool
    support: int = 0
    note: str = ""


# Output order; every row is always emitted, flagged invalid when not computable.
MARKER_UNITS = {
    "pvc_count": "beats",
    "nsvt_episodes": "episodes",
    "nsvt_max_rate": "bpm",
    "sustained_vt_runs": "episodes",
    "twa": "uV",
    "prd": "deg^2",
    "sdnn": "ms",
    "rmssd": "ms",
    "vlf_power": "ms^2",
    "lf_power": "ms^2",
    "hf_power": "ms^2",
    "lf_hf_ratio": "1",
    "turbulence_onset": "%",
    "turbulence_slope": "ms/beat",
    "acceleration_capacity": "ms",
    "deceleration_capacity": "ms",
    "tpte": "ms",
    "jpoint_elevation": "uV",
    "fractionation_index": "count",
    "early_repolarization": "bool",
    "stv_qt": "ms",
    "tcrt": "1",
    "twr": "1",
    "tmd": "deg",
    "tld": "deg",
}


@dataclass
class MarkerVector:
    record_id: str
    values: dict
    annotations: bp.BeatAnnotations | None = None
    duration_s: float = 0.0

    def __getitem__(self, name) -> MarkerValue:
        return self.values[name]

    def rows(self):
        return [self.values[name] for name in MARKER_UNITS if name in self.values]

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["record", "marker", "value", "unit", "valid", "support", "note"])
        for row in self.rows():
            value = "" if row.value is None else repr(float(row.value))
            writer.writerow([self.record_id, row.marker, value, row.unit,
                             str(row.valid).lower(), row.support, row.note])
        return buf.getvalue()

    def to_json(self) -> str:
        return json.dumps({"record": self.record_id, "duration_s": self.duration_s,
                           "markers": [asdict(r) for r in self.rows()]}, indent=2)


def _value(name, value=None, support=0, note="", valid=None):
    if valid is None:
        valid = value is not None and math.isfinite(float(value))
    if not valid:
        value = None if value is None or not math.isfinite(float(value)) else value
    return MarkerValue(name, None if value is None else float(value), MARKER_UNITS[name],
                       bool(valid), int(support), note)


def _invalid(name, reason, support=0):
    return MarkerValue(name, None, MARKER_UNITS[name], False, int(support), reason)


# --------------------------------------------------------------------------
# Pass 1: detection
# --------------------------------------------------------------------------

def _detect(source, cfg: AnalysisConfig):
    """R-peak indices and the lead used; falls back to the most QRS-energetic
    lead when the preferred lead is silent or nearly so."""
    fs, n = source.sampling_rate_hz, source.n_samples
    names = source.header.lead_names

    def run(lead):
        return bp.detect_qrs_stream(
            lambda a, b: source.read(a, b, leads=[lead], dtype=np.float64)[0],
            n, fs, cfg.detector)

    preferred = cfg.detection_lead if cfg.detection_lead in names else names[0]
    try:
        idx = run(preferred)
        if len(idx) >= cfg.min_segment_beats:
            return idx, preferred
    except bp.NoActivityError:
        pass
    probe = source.read(0, min(n, int(cfg.segment_s * fs)), dtype=np.float64)
    energy = [bp.qrs_energy(row, fs) for row in probe]
    best = names[int(np.argmax(energy))]
    return run(best), best


# --------------------------------------------------------------------------
# Pass 2: segment-wise features
# --------------------------------------------------------------------------

@dataclass
class _SegmentResult:
    tpte: float = np.nan
    jpoint: float = np.nan
    early: float = np.nan
    fractionation: float = np.nan
    tcrt: float = np.nan
    twr: float = np.nan
    tmd: float = np.nan
    tld: float = np.nan


class _Analyzer:
    def __init__(self, source, cfg: AnalysisConfig, detection_lead):
        self.source = source
        self.cfg = cfg
        self.fs = float(source.sampling_rate_hz)
        names = tuple(source.header.lead_names)
        if sorted(names) != sorted(STANDARD_LEADS):
            raise ValueError("analysis requires the 12 standard leads")
        # reorder everything to the standard lead order
        self.lead_order = [names.index(x) for x in STANDARD_LEADS]
        self.idx8 = [STANDARD_LEADS.index(x) for x in repol.INDEPENDENT_LEADS]
        self.twa_idx = [STANDARD_LEADS.index(x) for x in cfg.twa_leads]
        self.t_idx = STANDARD_LEADS.index(cfg.t_lead)
        self.det_row = STANDARD_LEADS.index(detection_lead)
        ms = self.fs / 1000.0
        self.pre = int(round(cfg.window_pre_ms * ms))
        self.post = int(round(cfg.window_post_ms * ms))
        self.offsets = np.arange(-self.pre, self.post)

        self.template = None
        self.tracker = repol.MmaTracker()
        self.twa_run = 0
        self.twa_max = None
        self.twa_beats = 0
        self.jt = None

    def windows(self, block, local_idx):
        cols = np.clip(local_idx[:, None] + self.offsets[None, :], 0, block.shape[1] - 1)
        # (n_beats, 12, L)
        return np.transpose(block[:, cols], (1, 0, 2))

    def run(self, indices, premature, artifact):
        fs, cfg = self.fs, self.cfg
        n = self.source.n_samples
        seg_len = int(cfg.segment_s * fs)
        n_beats = len(indices)
        labels = np.full(n_beats, bp.NORMAL, dtype="<U1")
        qt = np.full(n_beats, np.nan)
        t_vectors = np.zeros((n_beats, 3))
        t_valid = np.zeros(n_beats, bool)
        rr_prev = np.concatenate([[np.nan], bp.rr_intervals_ms(indices, fs)])
        segments = []

        for s0 in range(0, n, seg_len):
            s1 = min(s0 + seg_len, n)
            lo, hi = np.searchsorted(indices, [s0, s1])
            if hi <= lo:
                continue
            a = max(0, s0 - self.pre - 1)
            b = min(n, s1 + self.post + 1)
            block = self.source.read(a, b, dtype=np.float32)[self.lead_order]
            local = indices[lo:hi] - a
            det_row = block[self.det_row]
            if self.template is None and hi - lo >= cfg.min_segment_beats:
                _, _, self.template = bp.beat_morphology(det_row, local, fs)
            widths, corr, _ = bp.beat_morphology(det_row, local, fs, self.template)
            seg_labels = bp.apply_labels(premature[lo:hi], artifact[lo:hi], widths, corr)
            labels[lo:hi] = seg_labels

            win = self.windows(block, local)
            normal = (seg_labels == bp.NORMAL) & np.isfinite(rr_prev[lo:hi]) \
                & (rr_prev[lo:hi] >= bp.MIN_RR_MS) & (rr_prev[lo:hi] <= bp.MAX_RR_MS)
            seg = _SegmentResult()
            fid = None
            if normal.sum() >= cfg.min_segment_beats:
                median = np.median(win[normal], axis=0).astype(np.float64)
                fid = self.median_markers(median, seg)
            segments.append(seg)
            if fid is not None:
                self.beat_markers(win, normal, fid, lo, qt, t_vectors, t_valid)
            self.update_twa(win, seg_labels, rr_prev[lo:hi], fid)
        return labels, qt, t_vectors, t_valid, segments

    def median_markers(self, median, seg):
        """Interval, fractionation and SVD markers of one segment median beat."""
        fs = self.fs
        try:
            im = repol.interval_markers(median, fs, self.pre, STANDARD_LEADS,
                                        self.cfg.t_lead, self.cfg.er_threshold_uv)
        except MarkerError:
            return None
        fid = im.fiducials
        seg.tpte, seg.jpoint, seg.early = im.tpte_ms, im.jpoint_uv, float(im.early_repol)
        seg.fractionation = max(
            repol.fractionation_index(median[i, fid.q_on:fid.j_point + 1], fs)
            for i in self.idx8)
        t_stop = int(math.ceil(fid.t_end)) + 1
        if t_stop - fid.j_point > 2:
            eight = median[self.idx8]
            try:
                svd = repol.twave_svd_battery(eight, slice(fid.q_on, fid.j_point + 1),
                                              slice(fid.j_point, t_stop))
                seg.tcrt, seg.twr, seg.tmd, seg.tld = svd.tcrt, svd.twr, svd.tmd_deg, svd.tld
            except MarkerError:
                pass
        if self.jt is None:
            self.jt = slice(fid.j_point, t_stop)
        return fid

    def _pq_baseline(self, win, fid):
        ms = self.fs / 1000.0
        lo = max(fid.q_on - int(40 * ms), 0)
        hi = max(fid.q_on - int(10 * ms), lo + 1)
        return np.median(win[..., lo:hi], axis=-1)

    def beat_markers(self, win, normal, fid, offset, qt, t_vectors, t_valid):
        """Per-beat QT (for STV) and weighted T vectors (for PRD)."""
        ms = self.fs / 1000.0
        sel = np.flatnonzero(normal)
        beats = win[sel].astype(np.float64)
        base = self._pq_baseline(beats, fid)                      # (k, 12)
        t_lo = fid.j_point + int(40 * ms)
        t_hi = min(self.pre + int(550 * ms), beats.shape[2] - 1)
        _, t_end = repol.tangent_t_end(beats[:, self.t_idx], base[:, self.t_idx],
                                       t_lo, t_hi, self.fs)
        plausible = (t_end > t_lo) & (t_end < beats.shape[2])
        qt[offset + sel] = np.where(plausible, (t_end - fid.q_on) / ms, np.nan)

        eight = beats[:, self.idx8] - base[:, self.idx8, None]
        xyz = repol.to_xyz(eight)
        t_stop = int(math.ceil(fid.t_end)) + 1
        vec = repol.weighted_t_vectors(xyz, slice(fid.j_point, t_stop))
        t_vectors[offset + sel] = vec
        t_valid[offset + sel] = np.linalg.norm(vec, axis=1) > 0

    def update_twa(self, win, seg_labels, rr_prev, fid):
        cfg = self.cfg
        min_rr = 60000.0 / cfg.twa_max_rate_bpm
        for k in range(len(seg_labels)):
            clean = (self.jt is not None and seg_labels[k] == bp.NORMAL
                     and np.isfinite(rr_prev[k]) and rr_prev[k] >= min_rr)
            if not clean:
                self.tracker.reset()
                self.twa_run = 0
                continue
            beat = win[k, self.twa_idx].astype(np.float64)
            if fid is not None:
                beat -= self._pq_baseline(beat, fid)[:, None]
            else:
                beat -= np.median(beat[:, :self.pre // 2], axis=1, keepdims=True)
            self.tracker.update(beat[:, self.jt])
            self.twa_run += 1
            if self.twa_run >= cfg.twa_min_beats:
                value = self.tracker.alternans()
                self.twa_beats += 1
                self.twa_max = value if self.twa_max is None else max(self.twa_max, value)


def _median_marker(name, values):
    v = np.asarray(values, dtype=float)
    v = v[np.isfinite(v)]
    if not len(v):
        return _invalid(name, "no segment with locatable fiducials")
    return _value(name, float(np.median(v)), support=len(v))


def analyze_source(source, record_id="record", config=None) -> MarkerVector:
    """Run the full marker battery over a reader-like ``source``."""
    cfg = config or AnalysisConfig()
    fs = float(source.sampling_rate_hz)
    indices, det_lead = _detect(source, cfg)
    if len(indices) < cfg.min_segment_beats:
        raise bp.InsufficientBeatsError("insufficient beats for template")
    rr = bp.rr_intervals_ms(indices, fs)
    premature, artifact = bp.rr_context(rr)

    an = _Analyzer(source, cfg, det_lead)
    labels, qt, t_vectors, t_valid, segments = an.run(indices, premature, artifact)
    ann = bp.BeatAnnotations(indices, labels, fs)
    out = {}

    counts = bp.count_markers(labels, rr)
    out["pvc_count"] = _value("pvc_count", counts.pvc_count, support=len(labels))
    out["nsvt_episodes"] = _value("nsvt_episodes", counts.nsvt_count, support=counts.nsvt_count)
    rate = counts.nsvt_max_rate_bpm
    out["nsvt_max_rate"] = (_value("nsvt_max_rate", rate, support=counts.nsvt_count)
                            if rate is not None else _invalid("nsvt_max_rate", "no NSVT episode"))
    out["sustained_vt_runs"] = _value("sustained_vt_runs", len(counts.sustained_runs))

    if an.twa_max is None:
        out["twa"] = _invalid("twa", "insufficient clean beats for TWA")
    else:
        out["twa"] = _value("twa", an.twa_max, support=an.twa_beats)

    times = ann.times_s
    try:
        valid = t_valid & (labels == bp.NORMAL)
        out["prd"] = _value("prd", repol.prd(t_vectors, times, valid=valid),
                            support=int(valid.sum()))
    except MarkerError as exc:
        out["prd"] = _invalid("prd", str(exc))

    nn = ann.nn_ms
    try:
        td = hrv.time_domain_hrv(nn)
        out["sdnn"] = _value("sdnn", td.sdnn_ms, support=td.n_intervals)
        out["rmssd"] = _value("rmssd", td.rmssd_ms, support=td.n_intervals)
    except MarkerError as exc:
        out["sdnn"] = _invalid("sdnn", str(exc), len(nn))
        out["rmssd"] = _invalid("rmssd", str(exc), len(nn))
    try:
        fd = hrv.frequency_domain_hrv(nn, ann.nn_times_s)
        out["vlf_power"] = _value("vlf_power", fd.vlf_ms2, support=fd.window_count)
        out["lf_power"] = _value("lf_power", fd.lf_ms2, support=fd.window_count)
        out["hf_power"] = _value("hf_power", fd.hf_ms2, support=fd.window_count)
        ratio = fd.lf_hf_ratio
        out["lf_hf_ratio"] = (_value("lf_hf_ratio", ratio, support=fd.window_count)
                              if ratio is not None else _invalid("lf_hf_ratio", "zero HF power"))
    except MarkerError as exc:
        for name in ("vlf_power", "lf_power", "hf_power", "lf_hf_ratio"):
            out[name] = _invalid(name, str(exc))

    tachograms = bp.extract_vpc_tachograms(labels, rr)
    try:
        hrt = hrv.heart_rate_turbulence(tachograms, cfg.min_tachograms)
        out["turbulence_onset"] = _value("turbulence_onset", hrt.to_percent,
                                         support=hrt.tachogram_count)
        out["turbulence_slope"] = _value("turbulence_slope", hrt.ts_ms_per_beat,
                                         support=hrt.tachogram_count)
    except MarkerError as exc:
        out["turbulence_onset"] = _invalid("turbulence_onset", str(exc), len(tachograms))
        out["turbulence_slope"] = _invalid("turbulence_slope", str(exc), len(tachograms))

    for name, direction in (("acceleration_capacity", "acceleration"),
                            ("deceleration_capacity", "deceleration")):
        try:
            res = hrv.prsa_capacity(nn, direction, min_anchors=cfg.min_anchors)
            out[name] = _value(name, res.capacity_ms, support=res.anchor_count)
        except MarkerError as exc:
            out[name] = _invalid(name, str(exc))

    out["tpte"] = _median_marker("tpte", [s.tpte for s in segments])
    out["jpoint_elevation"] = _median_marker("jpoint_elevation", [s.jpoint for s in segments])
    out["fractionation_index"] = _median_marker("fractionation_index",
                                                [s.fractionation for s in segments])
    er = np.array([s.early for s in segments], dtype=float)
    er = er[np.isfinite(er)]
    out["early_repolarization"] = (
        _value("early_repolarization", float(er.mean() >= 0.5), support=len(er))
        if len(er) else _invalid("early_repolarization", "no segment with locatable fiducials"))
    try:
        out["stv_qt"] = _value("stv_qt", repol.stv_qt(qt), support=int(np.isfinite(qt).sum()))
    except MarkerError as exc:
        out["stv_qt"] = _invalid("stv_qt", str(exc), int(np.isfinite(qt).sum()))
    for name, attr in (("tcrt", "tcrt"), ("twr", "twr"), ("tmd", "tmd"), ("tld", "tld")):
        out[name] = _median_marker(name, [getattr(s, attr) for s in segments])

    return MarkerVector(record_id, out, ann, source.n_samples / fs)


def analyze_record(record, record_id="record", config=None) -> MarkerVector:
    """Analyze an in-memory :class:`HolterRecord`."""
    return analyze_source(RecordSource(record), record_id, config)


def analyze_file(header_path, config=None) -> MarkerVector:
    """Analyze an on-disk container with bounded-memory chunked reads."""
    with HolterReader(header_path) as reader:
        return analyze_source(reader, Path(header_path).stem, config)
