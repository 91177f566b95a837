import csv
import io
import json

import numpy as np
import pytest

from icdrisk.markers import MARKER_UNITS, RecordSource, analyze_file, analyze_record
from icdrisk.record_io import load_holter, make_record
from icdrisk.synthetic import RhythmConfig, synthesize_record, write_synthetic_holter


@pytest.fixture(scope="module")
def ectopic():
    rec, truth = synthesize_record(720, seed=3, twa_uv=50,
                                   rhythm=RhythmConfig(vpc_probability=0.02, nsvt_per_hour=6))
    return rec, truth, analyze_record(rec, "ectopic")


def test_every_marker_present(ectopic):
    _, _, mv = ectopic
    assert [r.marker for r in mv.rows()] == list(MARKER_UNITS)
    rows = list(csv.DictReader(io.StringIO(mv.to_csv())))
    assert len(rows) == len(MARKER_UNITS)
    assert set(rows[0]) == {"record", "marker", "value", "unit", "valid", "support", "note"}
    payload = json.loads(mv.to_json())
    assert payload["record"] == "ectopic" and len(payload["markers"]) == len(MARKER_UNITS)


def test_invalid_markers_are_flagged_not_dropped():
    rec, _ = synthesize_record(420, seed=5)
    mv = analyze_record(rec, "short")
    # no VPCs, no NSVT and under 10 minutes: these cannot be computed
    for name in ("nsvt_max_rate", "turbulence_onset", "turbulence_slope", "prd"):
        assert not mv[name].valid and mv[name].value is None and mv[name].note
    assert mv["sdnn"].valid


def test_ectopy_counts_match_truth(ectopic):
    _, truth, mv = ectopic
    assert mv["pvc_count"].value == np.sum(truth.labels == "V")
    assert mv["nsvt_episodes"].value >= 1
    assert mv["nsvt_max_rate"].value == pytest.approx(150, abs=5)


def test_turbulence_sign(ectopic):
    _, _, mv = ectopic
    # the generator shortens RR after each VPC, then lengthens it
    assert mv["turbulence_onset"].value < 0
    assert mv["turbulence_slope"].value > 2.5


def test_alternans_detected():
    rec, _ = synthesize_record(720, seed=3)
    baseline = analyze_record(rec, "quiet")["twa"].value
    rec, _ = synthesize_record(720, seed=3, twa_uv=50)
    alternans = analyze_record(rec, "alt")["twa"].value
    assert alternans - baseline == pytest.approx(45, abs=15)


def test_file_and_memory_agree(tmp_path):
    write_synthetic_holter(tmp_path / "s.hdr", 400, seed=9)
    from_file = analyze_file(tmp_path / "s.hdr")
    in_memory = analyze_record(load_holter(tmp_path / "s.hdr"), "s")
    assert from_file.to_csv() == in_memory.to_csv()


def test_lead_fallback_when_ii_is_flat():
    rec, truth = synthesize_record(400, seed=4)
    samples = rec.samples.copy()
    samples[1] = 0.0                      # lead II disconnected
    mv = analyze_record(make_record(samples), "fallback")
    assert mv["sdnn"].valid
    assert abs(len(mv.annotations.indices) - len(truth.r_indices)) <= 2


def test_record_source_reads_leads():
    rec, _ = synthesize_record(10, seed=1)
    src = RecordSource(rec)
    assert src.n_samples == 10_000 and src.sampling_rate_hz == 1000
    block = src.read(100, 200, leads=["V5"])
    np.testing.assert_allclose(block[0], rec.lead("V5")[100:200])
