import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra import numpy as hnp

from icdrisk.record_io import (
    AF_PREVALENCE_CAP, AmplitudeRangeError, CohortError, CohortTable, CohortWarning, FollowUp,
    HolterFormatError, HolterReader, Patient, STANDARD_LEADS, check_eligibility, dump_cohort,
    format_header, load_cohort, load_holter, make_record, parse_header, parse_holter,
    save_holter, write_holter,
)


def _patient(**kw):
    base = dict(id="p1", age_years=60.0, sex="male", etiology="ischemic", lvef_percent=30.0,
                nyha="II")
    base.update(kw)
    return Patient(**base)


# ---------------------------------------------------------------- container

def test_identity_scaling():
    raw = np.tile([0, 100], (12, 1))
    rec = make_record(raw)
    header, data = write_holter(rec)
    parsed = parse_holter(header, data)
    assert parsed.samples.tolist() == [[0.0, 100.0]] * 12
    assert parsed.header.sample_count_per_lead == 2


def test_24h_header_duration():
    h = parse_header(b"version=1\nleads=" + ",".join(STANDARD_LEADS).encode()
                     + b"\nrate_hz=1000\nresolution_uv=1\nsamples=86400000\n")
    assert h.sample_count_per_lead == 86_400_000
    assert h.duration_s == 86_400
    assert h.is_canonical


def test_short_data_is_length_mismatch():
    header, data = write_holter(make_record(np.zeros((12, 5))))
    with pytest.raises(HolterFormatError, match="data-length mismatch"):
        parse_holter(header, data[:-24])


def test_amplitude_range_error_names_lead():
    samples = np.zeros((12, 3))
    samples[4, 1] = 40_000
    with pytest.raises(AmplitudeRangeError) as exc:
        write_holter(make_record(samples))
    assert exc.value.lead_index == 4


def test_empty_record_rejected():
    with pytest.raises(ValueError, match="sample_count_per_lead > 0 violated"):
        make_record(np.zeros((12, 0)))


@pytest.mark.parametrize("text, fragment", [
    (b"garbage\n", "malformed header"),
    (b"version=2\n", "malformed header"),
    (b"\xff\xfe", "UTF-8"),
])
def test_malformed_headers(text, fragment):
    with pytest.raises(HolterFormatError, match=fragment):
        parse_header(text)


def test_unsupported_version():
    text = format_header(make_record(np.zeros((12, 1))).header).replace(b"version=1",
                                                                          b"version=9")
    with pytest.raises(HolterFormatError, match="unsupported version"):
        parse_header(text)


@settings(max_examples=40, deadline=None)
@given(hnp.arrays(np.int16, st.tuples(st.just(12), st.integers(1, 40))),
       st.sampled_from([1, 2, 5]), st.sampled_from([250, 500, 1000]))
def test_round_trip(raw, resolution, rate):
    rec = make_record(raw.astype(np.float64) * resolution, sampling_rate_hz=rate,
                      resolution_uv=resolution)
    assert parse_holter(*write_holter(rec)) == rec


def test_reader_matches_in_memory(tmp_path):
    rng = np.random.default_rng(0)
    rec = make_record(rng.integers(-3000, 3000, (12, 5000)).astype(float))
    path = save_holter(rec, tmp_path / "r.hdr")
    assert load_holter(path) == rec
    with HolterReader(path) as reader:
        assert reader.n_samples == 5000
        block = reader.read(100, 200, leads=["II", "V5"])
        np.testing.assert_array_equal(block, rec.samples[[1, 10], 100:200])
        chunks = list(reader.iter_chunks(1300))
        assert [start for start, _ in chunks] == [0, 1300, 2600, 3900]
        np.testing.assert_array_equal(np.concatenate([c for _, c in chunks], axis=1),
                                      rec.samples)


# ---------------------------------------------------------------- cohort

def _cohort_csv(n, n_af):
    lines = ["id,age_years,sex,etiology,lvef_percent,nyha,af,diabetes,group"]
    for i in range(n):
        lines.append(f"p{i},60,male,ischemic,30,II,{'true' if i < n_af else 'false'},false,icd")
    return "\n".join(lines) + "\n"


def test_af_prevalence_warning():
    with pytest.warns(CohortWarning):
        table = load_cohort(_cohort_csv(100, 20))
    assert table.af_prevalence == pytest.approx(0.20)
    assert AF_PREVALENCE_CAP == 0.15


def test_empty_table_no_warning():
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        table = load_cohort(_cohort_csv(0, 0))
    assert len(table) == 0 and table.af_prevalence is None


def test_parse_error_names_row():
    text = _cohort_csv(3, 0).replace("p1,60,male,ischemic,30", "p1,60,male,ischemic,abc")
    with pytest.raises(CohortError) as exc:
        load_cohort(text)
    assert exc.value.row == 3 and exc.value.column == "lvef_percent"


def test_cohort_round_trip_with_followup():
    patients = [_patient(id="a", extras={"x": 1.5}), _patient(id="b", af=True,
                                                               bnp_pg_ml=300.0)]
    followups = [FollowUp(2.0, "scd", first_appropriate_shock_years=1.0),
                 FollowUp(3.5, crossover_years=0.5)]
    table = CohortTable(patients, followups)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        again = load_cohort(dump_cohort(table))
    assert again.patients == patients
    assert again.followups == followups
    assert again.patients[0].extras == {"x": 1.5}


# ---------------------------------------------------------------- eligibility

def test_eligibility_examples():
    assert check_eligibility(_patient()).eligible
    r = check_eligibility(_patient(lvef_percent=32, nyha="I"))
    assert not r.eligible and r.failed_criteria == ("NYHA I requires LVEF <= 30",)
    r = check_eligibility(_patient(prior_device=True))
    assert r.failed_criteria == ("previous device",)


EXCLUSION_FLAGS = ("secondary_prophylaxis", "crt_indicated", "unstable", "av_block",
                   "prior_device", "life_expectancy_le_1y")


@settings(max_examples=80, deadline=None)
@given(st.floats(10, 60), st.sampled_from(["I", "II", "III", "IV"]), st.floats(10, 90),
       st.sets(st.sampled_from(EXCLUSION_FLAGS)), st.sampled_from(EXCLUSION_FLAGS))
def test_exclusions_monotone(lvef, nyha, age, flags, extra):
    base = _patient(lvef_percent=lvef, nyha=nyha, age_years=age,
                    **{f: True for f in flags})
    more = _patient(lvef_percent=lvef, nyha=nyha, age_years=age,
                    **{f: True for f in flags | {extra}})
    if not check_eligibility(base).eligible:
        assert not check_eligibility(more).eligible
    assert not check_eligibility(more).eligible
