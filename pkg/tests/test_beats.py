import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from icdrisk.beats import (
    ARTIFACT, NORMAL, VENTRICULAR, BeatAnnotations, InsufficientBeatsError, NoActivityError,
    classify_beats, count_markers, detect_qrs, detect_qrs_stream, extract_vpc_tachograms,
    label_beats, nn_mask, rr_intervals_ms,
)
from icdrisk.synthetic import synthesize_record

FS = 1000


def pulse_train(duration_s=300, rr_s=1.0, fs=FS, width_ms=20, amp=1000.0, extra=()):
    """Triangular pulses at regular intervals plus optional extra positions (s)."""
    n = int(duration_s * fs)
    x = np.zeros(n)
    half = int(width_ms * fs / 2000)
    shape = amp * (1 - np.abs(np.arange(-half, half + 1)) / (half + 1))
    centres = list(np.arange(0.5, duration_s - 0.2, rr_s)) + list(extra)
    for c in centres:
        i = int(round(c * fs))
        x[i - half:i + half + 1] += shape
    return x, np.sort(np.round(np.asarray(centres) * fs).astype(int))


# ---------------------------------------------------------------- detection

def test_pulse_train_count():
    x, truth = pulse_train()
    beats = detect_qrs(x, FS)
    assert len(beats) == 300
    assert np.max(np.abs(beats - truth)) <= 2


def test_flat_line_has_no_activity():
    with pytest.raises(NoActivityError, match="no detectable activity"):
        detect_qrs(np.zeros(10 * FS), FS)


def test_too_short():
    with pytest.raises(ValueError, match="too short"):
        detect_qrs(np.zeros(FS), FS)


def test_refractory_suppresses_close_pulse():
    x, _ = pulse_train(60, extra=[30.65])
    beats = detect_qrs(x, FS)
    assert len(beats) == 60
    assert not np.any(np.abs(beats - 30650) <= 5)


@settings(max_examples=8, deadline=None)
@given(st.floats(0.2, 20.0), st.floats(-2000, 2000))
def test_detector_invariant_to_gain_and_offset(gain, offset):
    x, _ = pulse_train(60, rr_s=0.8)
    base = detect_qrs(x, FS)
    np.testing.assert_array_equal(detect_qrs(gain * x + offset, FS), base)


def test_streaming_matches_whole_signal_on_ecg():
    rec, truth = synthesize_record(180, seed=4)
    lead = rec.lead("II")
    whole = detect_qrs(lead, FS)
    from icdrisk.beats import QrsDetectorConfig
    small = detect_qrs_stream(lambda a, b: lead[a:b], len(lead), FS,
                              QrsDetectorConfig(chunk_s=7.0))
    assert abs(len(whole) - len(truth.r_indices)) <= 1
    matched = np.min(np.abs(small[:, None] - truth.r_indices[None, :]), axis=1)
    assert np.mean(matched <= 30) > 0.99


# ---------------------------------------------------------------- labelling

def test_uniform_beats_all_normal():
    rec, truth = synthesize_record(60, seed=1, rhythm=None)
    lead = rec.lead("II")
    idx = truth.r_indices[truth.labels == NORMAL]
    labels = classify_beats(lead, idx, FS)
    assert np.all(labels == NORMAL)


def test_insufficient_beats():
    with pytest.raises(InsufficientBeatsError, match="insufficient beats for template"):
        classify_beats(np.zeros(5000), [500, 1500, 2500], FS)


def test_wide_early_beat_is_ventricular():
    rr = np.full(30, 1000.0)
    rr[14], rr[15] = 700.0, 1300.0     # beat 15 arrives 30% early
    widths = np.full(31, 90.0)
    widths[15] = 160.0
    labels = label_beats(rr, widths, np.ones(31))
    assert labels[15] == VENTRICULAR
    assert np.sum(labels == VENTRICULAR) == 1


def test_narrow_early_beat_stays_normal():
    rr = np.full(30, 1000.0)
    rr[14], rr[15] = 700.0, 1300.0
    labels = label_beats(rr, np.full(31, 90.0), np.ones(31))
    assert np.all(labels == NORMAL)


def test_spike_rr_is_artifact():
    rr = np.full(30, 800.0)
    rr[10], rr[11] = 150.0, 650.0
    labels = label_beats(rr, np.full(31, 90.0), np.ones(31))
    assert labels[11] == ARTIFACT
    mask = nn_mask(labels, rr)
    assert not mask[10] and not mask[11]


def test_synthetic_vpcs_are_found():
    from icdrisk.synthetic import RhythmConfig
    rec, truth = synthesize_record(300, seed=2, rhythm=RhythmConfig(vpc_probability=0.03))
    labels = classify_beats(rec.lead("II"), truth.r_indices, FS)
    true_v = truth.labels == VENTRICULAR
    assert true_v.sum() >= 5
    assert np.array_equal(labels == VENTRICULAR, true_v)


# ---------------------------------------------------------------- counts

def _run(n_v, rr_v=400.0, n_normal=20):
    labels = np.array([NORMAL] * n_normal + [VENTRICULAR] * n_v + [NORMAL] * n_normal)
    rr = np.full(len(labels) - 1, 800.0)
    rr[n_normal - 1:n_normal + n_v - 1] = rr_v
    return labels, rr


def test_three_beat_nsvt():
    counts = count_markers(*_run(3))
    assert counts.nsvt_count == 1 and counts.nsvt_episodes[0].beat_count == 3
    assert counts.nsvt_max_rate_bpm == pytest.approx(150.0)


def test_couplet_is_not_nsvt():
    counts = count_markers(*_run(2))
    assert counts.nsvt_count == 0 and counts.pvc_count == 2


def test_long_run_is_sustained():
    counts = count_markers(*_run(100))
    assert counts.nsvt_count == 0 and len(counts.sustained_runs) == 1


def test_slow_run_is_not_nsvt():
    assert count_markers(*_run(5, rr_v=600.0)).nsvt_count == 0


# ---------------------------------------------------------------- tachograms

def _tachogram_sequence(coupling=600.0, extra_vpc_at=None):
    labels = [NORMAL] * 10 + [VENTRICULAR] + [NORMAL] * 20
    rr = [800.0] * 9 + [coupling, 1000.0] + [800.0] * 19
    if extra_vpc_at is not None:
        labels[11 + extra_vpc_at] = VENTRICULAR
    return np.array(labels), np.array(rr)


def test_constructed_tachogram():
    tgs = extract_vpc_tachograms(*_tachogram_sequence())
    assert len(tgs) == 1
    assert tgs[0].pre_rr == (800.0, 800.0)
    assert tgs[0].coupling_ms == 600.0 and tgs[0].pause_ms == 1000.0
    assert len(tgs[0].post_rr) == 15


def test_late_vpc_rejected():
    assert extract_vpc_tachograms(*_tachogram_sequence(coupling=760.0)) == []


def test_second_vpc_in_post_run_rejected():
    assert extract_vpc_tachograms(*_tachogram_sequence(extra_vpc_at=4)) == []


# ---------------------------------------------------------------- annotations

def test_annotations_csv_and_nn():
    ann = BeatAnnotations([0, 800, 1600, 2000, 3000], [NORMAL, NORMAL, NORMAL, VENTRICULAR,
                                                        NORMAL], 1000.0)
    assert ann.nn_ms.tolist() == [800.0, 800.0]
    lines = ann.to_csv().splitlines()
    assert lines[0] == "sample_index,time_s,label,rr_ms"
    assert lines[4] == "2000,2.0000,V,400.000"
    assert rr_intervals_ms([0, 500], 500).tolist() == [1000.0]
    with pytest.raises(ValueError):
        BeatAnnotations([0, 0], [NORMAL, NORMAL], 1000.0)
