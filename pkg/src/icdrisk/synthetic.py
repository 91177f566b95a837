"""Synthetic 12-lead ECG generator with known ground truth.

Each beat is a 3-D cardiac dipole (P, QRS and T components built from
Gaussians) projected onto fixed lead vectors, so the limb leads obey
Einthoven's relations and the 8 independent leads have rank 3.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path

import numpy as np

from .beats import NORMAL, VENTRICULAR
from .record_io import (STANDARD_LEADS, HolterHeader, format_header, make_record,
                        data_path_for)


def _precordial(theta_deg, gain):
    t = np.deg2rad(theta_deg)
    return gain * np.array([np.cos(t), 0.15, -np.sin(t)])


LEAD_VECTORS = np.array([
    [1.0, 0.0, 0.0],            # I
    [0.5, 0.866, 0.0],          # II
    [-0.5, 0.866, 0.0],         # III
    [-0.75, -0.433, 0.0],       # aVR
    [0.75, -0.433, 0.0],        # aVL
    [0.0, 0.866, 0.0],          # aVF
    _precordial(120, 1.1),      # V1
    _precordial(95, 1.3),       # V2
    _precordial(75, 1.4),       # V3
    _precordial(55, 1.3),       # V4
    _precordial(30, 1.1),       # V5
    _precordial(0, 1.0),        # V6
])


def _unit(v):
    v = np.asarray(v, dtype=float)
    return v / np.linalg.norm(v)


def _gauss(t, mu, sigma):
    return np.exp(-0.5 * ((t - mu) / sigma) ** 2)


@dataclass
class BeatShape:
    r_amp_uv: float = 1100.0
    qrs_sigma_ms: float = 12.0
    qrs_dir: tuple = (0.55, 0.75, -0.35)
    t_amp_uv: float = 320.0
    t_center_ms: float = 300.0
    t_sigma_ms: float = 45.0
    t_dir: tuple = (0.6, 0.7, -0.2)
    p_amp_uv: float = 110.0
    p_center_ms: float = -190.0


NORMAL_BEAT = BeatShape()
VENTRICULAR_BEAT = BeatShape(r_amp_uv=2000.0, qrs_sigma_ms=25.0, qrs_dir=(0.1, 0.95, 0.5),
                             t_amp_uv=450.0, t_center_ms=340.0, t_sigma_ms=60.0,
                             t_dir=(-0.1, -0.9, -0.5), p_amp_uv=0.0)


def beat_template(shape: BeatShape, fs: float, pre_ms=400.0, post_ms=650.0):
    """Return ``(qrs_part, t_part, offset)``: 12-lead arrays for one beat
    whose R peak sits at sample ``offset``."""
    t = np.arange(int(-pre_ms * fs / 1000), int(post_ms * fs / 1000)) * 1000.0 / fs
    qd, td = _unit(shape.qrs_dir), _unit(shape.t_dir)
    side = _unit(np.cross(qd, [0.0, 0.0, 1.0]) + 1e-3)
    s = shape.qrs_sigma_ms
    dipole = (np.outer(qd, shape.r_amp_uv * _gauss(t, 0.0, s))
              + np.outer(side, -0.12 * shape.r_amp_uv * _gauss(t, -1.8 * s, 0.6 * s))
              + np.outer(-qd + 0.5 * side, 0.2 * shape.r_amp_uv * _gauss(t, 2.2 * s, 0.7 * s)))
    if shape.p_amp_uv:
        dipole += np.outer(_unit([0.5, 0.8, 0.1]),
                           shape.p_amp_uv * _gauss(t, shape.p_center_ms, 22.0))
    t_wave = np.outer(td, shape.t_amp_uv * _gauss(t, shape.t_center_ms, shape.t_sigma_ms))
    return LEAD_VECTORS @ dipole, LEAD_VECTORS @ t_wave, int(pre_ms * fs / 1000)


@dataclass
class RhythmConfig:
    mean_rr_ms: float = 850.0
    hf_amp_ms: float = 25.0
    hf_hz: float = 0.25
    lf_amp_ms: float = 20.0
    lf_hz: float = 0.1
    jitter_ms: float = 5.0
    vpc_probability: float = 0.004
    vpc_coupling: float = 0.65
    nsvt_per_hour: float = 0.0
    min_vpc_spacing: int = 25
    turbulence: tuple = (-0.035, -0.025, -0.01, 0.0, 0.01, 0.02, 0.03, 0.035, 0.035,
                         0.03, 0.025, 0.02, 0.015, 0.01, 0.005)


@dataclass
class SyntheticTruth:
    r_indices: np.ndarray
    labels: np.ndarray
    t_scale: np.ndarray
    sampling_rate_hz: float
    extras: dict = field(default_factory=dict)


def beat_schedule(duration_s, config=None, seed=0, fs=1000.0):
    """Beat times (s) and labels for a rhythm with HRV, VPCs and turbulence."""
    cfg = config or RhythmConfig()
    rng = np.random.default_rng(seed)
    times, labels = [], []
    t = 0.6
    since_vpc = cfg.min_vpc_spacing
    pending = []  # scheduled post-VPC relative changes
    nsvt_p = cfg.nsvt_per_hour * cfg.mean_rr_ms / 3.6e6
    while t < duration_s - 1.0:
        base = (cfg.mean_rr_ms + cfg.hf_amp_ms * np.sin(2 * np.pi * cfg.hf_hz * t)
                + cfg.lf_amp_ms * np.sin(2 * np.pi * cfg.lf_hz * t)
                + cfg.jitter_ms * rng.standard_normal())
        times.append(t)
        labels.append(NORMAL)
        since_vpc += 1
        if since_vpc > cfg.min_vpc_spacing and rng.random() < nsvt_p:
            for _ in range(4):
                t += 0.4
                times.append(t)
                labels.append(VENTRICULAR)
            t += 1.2 * base / 1000.0
            since_vpc = 0
            continue
        if since_vpc > cfg.min_vpc_spacing and rng.random() < cfg.vpc_probability:
            coupling = cfg.vpc_coupling * base
            t += coupling / 1000.0
            times.append(t)
            labels.append(VENTRICULAR)
            t += (2.0 * base - coupling) / 1000.0
            pending = list(cfg.turbulence)
            since_vpc = 0
            continue
        if pending:
            base *= 1.0 + pending.pop(0)
        t += base / 1000.0
    times = np.asarray(times)
    keep = times < duration_s - 0.7
    return times[keep], np.asarray(labels)[keep]


class EcgSynthesizer:
    """Renders 12-lead microvolt chunks for a beat schedule."""

    def __init__(self, beat_times_s, labels, fs=1000.0, twa_uv=0.0, noise_uv=8.0,
                 t_scale=None, seed=0):
        self.fs = fs
        self.r_indices = np.round(np.asarray(beat_times_s) * fs).astype(np.int64)
        self.labels = np.asarray(labels)
        n = len(self.r_indices)
        if t_scale is None:
            t_scale = np.ones(n)
        t_scale = np.asarray(t_scale, dtype=float).copy()
        self.twa_uv = twa_uv
        self.t_scale = t_scale
        self.noise_uv = noise_uv
        self.seed = seed
        self._templates = {
            NORMAL: beat_template(NORMAL_BEAT, fs),
            VENTRICULAR: beat_template(VENTRICULAR_BEAT, fs),
        }
        # alternans as signed +/- half amplitude along the T-wave shape
        t_peak = np.abs(self._templates[NORMAL][1]).max(axis=1)
        self._t_unit = self._templates[NORMAL][1] / max(t_peak[1], 1e-12)
        self._alt_sign = np.where(np.arange(n) % 2 == 0, 1.0, -1.0)

    def render(self, start, stop, rng=None):
        rng = rng if rng is not None else np.random.default_rng([self.seed, start])
        out = np.zeros((12, stop - start))
        if self.noise_uv:
            out += self.noise_uv * rng.standard_normal((12, stop - start))
        qrs_n, t_n, off = self._templates[NORMAL]
        width = qrs_n.shape[1]
        lo = np.searchsorted(self.r_indices, start - (width - off))
        hi = np.searchsorted(self.r_indices, stop + off)
        for k in range(lo, hi):
            qrs, tw, off = self._templates[self.labels[k]]
            a = self.r_indices[k] - off
            s0, s1 = max(a, start), min(a + qrs.shape[1], stop)
            if s0 >= s1:
                continue
            beat = qrs[:, s0 - a:s1 - a] + self.t_scale[k] * tw[:, s0 - a:s1 - a]
            if self.twa_uv and self.labels[k] == NORMAL:
                beat = beat + self._alt_sign[k] * 0.5 * self.twa_uv * self._t_unit[:, s0 - a:s1 - a]
            out[:, s0 - start:s1 - start] += beat
        return out

    def truth(self):
        return SyntheticTruth(self.r_indices, self.labels, self.t_scale, self.fs,
                              {"twa_uv": self.twa_uv})


def synthesize_record(duration_s, fs=1000.0, seed=0, rhythm=None, twa_uv=0.0, noise_uv=8.0):
    """In-memory synthetic :class:`HolterRecord` and its ground truth."""
    times, labels = beat_schedule(duration_s, rhythm, seed=seed, fs=fs)
    synth = EcgSynthesizer(times, labels, fs=fs, twa_uv=twa_uv, noise_uv=noise_uv, seed=seed)
    n = int(round(duration_s * fs))
    samples = synth.render(0, n)
    return make_record(np.rint(samples), sampling_rate_hz=int(fs)), synth.truth()


def write_synthetic_holter(header_path, duration_s, fs=1000, seed=0, rhythm=None,
                           twa_uv=0.0, noise_uv=8.0, chunk_s=60.0):
    """Stream a synthetic container to disk chunk by chunk (bounded memory)."""
    header_path = Path(header_path)
    times, labels = beat_schedule(duration_s, rhythm, seed=seed, fs=fs)
    synth = EcgSynthesizer(times, labels, fs=fs, twa_uv=twa_uv, noise_uv=noise_uv, seed=seed)
    n = int(round(duration_s * fs))
    header = HolterHeader(lead_names=STANDARD_LEADS, sampling_rate_hz=int(fs),
                          resolution_uv=Fraction(1), sample_count_per_lead=n)
    chunk = int(chunk_s * fs)
    rng = np.random.default_rng(seed)
    data_path = data_path_for(header_path)
    data_path.parent.mkdir(parents=True, exist_ok=True)
    tmp = data_path.with_name(data_path.name + ".tmp")
    with open(tmp, "wb") as fh:
        for start in range(0, n, chunk):
            stop = min(start + chunk, n)
            block = synth.render(start, stop, rng=rng)
            np.clip(np.rint(block), -32768, 32767, out=block)
            fh.write(np.ascontiguousarray(block.T.astype("<i2")).tobytes())
    os.replace(tmp, data_path)
    header_path.write_bytes(format_header(header))
    return synth.truth()
