"""Holter container I/O, cohort tables and eligibility screening.

The Holter container is a pair of files:

* a UTF-8 header with one ``key=value`` per line (``version``, ``leads``,
  ``rate_hz``, ``resolution_uv``, ``samples``, optional ``start``);
* a raw data file of lead-interleaved signed 16-bit little-endian samples,
  i.e. frame ``k`` holds sample ``k`` of every lead in header order.
"""

from __future__ import annotations

import csv
import io
import math
import os
import warnings
from dataclasses import dataclass, field
from datetime import datetime
from fractions import Fraction
from pathlib import Path
from typing import Iterator

import numpy as np

FORMAT_VERSION = 1
STANDARD_LEADS = ("I", "II", "III", "aVR", "aVL", "aVF",
                  "V1", "V2", "V3", "V4", "V5", "V6")
CANONICAL_RATE_HZ = 1000
AF_PREVALENCE_CAP = 0.15

_SAMPLE_DTYPE = np.dtype("<i2")
_HEADER_KEYS = ("version", "leads", "rate_hz", "resolution_uv", "samples", "start")


class HolterFormatError(ValueError):
    """Malformed container; ``offset`` is the byte position of the problem."""

    def __init__(self, message, offset=None):
        self.offset = offset
        if offset is not None:
            message = f"{message} (byte offset {offset})"
        super().__init__(message)


class AmplitudeRangeError(ValueError):
    def __init__(self, lead_index, value_uv):
        self.lead_index = lead_index
        super().__init__(
            f"amplitude {value_uv:g} uV on lead index {lead_index} "
            "exceeds the 16-bit range at this resolution")


class CohortError(ValueError):
    def __init__(self, message, row=None, column=None):
        self.row = row
        self.column = column
        where = []
        if row is not None:
            where.append(f"row {row}")
        if column is not None:
            where.append(f"column {column!r}")
        if where:
            message = f"{message} ({', '.join(where)})"
        super().__init__(message)


class CohortWarning(UserWarning):
    pass


# --------------------------------------------------------------------------
# Holter records
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class HolterHeader:
    lead_names: tuple[str, ...]
    sampling_rate_hz: int
    resolution_uv: Fraction
    sample_count_per_lead: int
    format_version: int = FORMAT_VERSION
    start_time: datetime | None = None

    @property
    def n_leads(self) -> int:
        return len(self.lead_names)

    @property
    def duration_s(self) -> float:
        return self.sample_count_per_lead / self.sampling_rate_hz

    @property
    def is_canonical(self) -> bool:
        return (self.sampling_rate_hz == CANONICAL_RATE_HZ
                and self.n_leads == len(STANDARD_LEADS))

    def lead_index(self, name: str) -> int:
        try:
            return self.lead_names.index(name)
        except ValueError:
            raise KeyError(f"lead {name!r} not in record") from None


@dataclass(frozen=True, eq=False)
class HolterRecord:
    """Parsed record; ``samples`` has shape ``(n_leads, n)`` in microvolts."""

    header: HolterHeader
    samples: np.ndarray

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=np.float64)
        if samples.ndim != 2 or samples.shape[0] != self.header.n_leads:
            raise ValueError("samples must have shape (n_leads, n)")
        if samples.shape[1] != self.header.sample_count_per_lead:
            raise ValueError("every lead must hold sample_count_per_lead samples")
        samples.setflags(write=False)
        object.__setattr__(self, "samples", samples)

    @property
    def duration_s(self) -> float:
        return self.header.duration_s

    def lead(self, name: str) -> np.ndarray:
        return self.samples[self.header.lead_index(name)]

    def __eq__(self, other):
        if not isinstance(other, HolterRecord):
            return NotImplemented
        return self.header == other.header and np.array_equal(self.samples, other.samples)


def _parse_resolution(text: str) -> Fraction:
    value = Fraction(text.strip())
    if value <= 0:
        raise ValueError("resolution must be positive")
    return value


def _format_resolution(value: Fraction) -> str:
    return str(value.numerator) if value.denominator == 1 else f"{value.numerator}/{value.denominator}"


def parse_header(header_bytes: bytes) -> HolterHeader:
    try:
        text = header_bytes.decode("utf-8")
    except UnicodeDecodeError as exc:
        raise HolterFormatError("header is not valid UTF-8", exc.start) from None

    values: dict[str, tuple[str, int]] = {}
    offset = 0
    for raw_line in text.splitlines(keepends=True):
        line_offset = offset
        offset += len(raw_line.encode("utf-8"))
        line = raw_line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise HolterFormatError(f"malformed header line {line!r}", line_offset)
        key, _, value = line.partition("=")
        key = key.strip()
        if key not in _HEADER_KEYS:
            raise HolterFormatError(f"malformed header: unknown key {key!r}", line_offset)
        if key in values:
            raise HolterFormatError(f"malformed header: duplicate key {key!r}", line_offset)
        values[key] = (value.strip(), line_offset)

    for key in ("version", "leads", "rate_hz", "resolution_uv", "samples"):
        if key not in values:
            raise HolterFormatError(f"malformed header: missing key {key!r}", len(header_bytes))

    def convert(key, fn):
        value, pos = values[key]
        try:
            return fn(value)
        except (ValueError, ZeroDivisionError):
            raise HolterFormatError(f"malformed header: bad value for {key!r}", pos) from None

    version = convert("version", int)
    if version != FORMAT_VERSION:
        raise HolterFormatError(f"unsupported version {version}", values["version"][1])
    leads = tuple(name.strip() for name in values["leads"][0].split(","))
    if len(leads) != len(STANDARD_LEADS) or len(set(leads)) != len(leads):
        raise HolterFormatError("malformed header: expected 12 distinct lead names",
                                values["leads"][1])
    rate = convert("rate_hz", int)
    if rate <= 0:
        raise HolterFormatError("malformed header: rate_hz must be positive", values["rate_hz"][1])
    resolution = convert("resolution_uv", _parse_resolution)
    samples = convert("samples", int)
    if samples <= 0:
        raise HolterFormatError("sample_count_per_lead > 0 violated", values["samples"][1])
    start = convert("start", datetime.fromisoformat) if "start" in values else None
    return HolterHeader(lead_names=leads, sampling_rate_hz=rate, resolution_uv=resolution,
                        sample_count_per_lead=samples, format_version=version,
                        start_time=start)


def format_header(header: HolterHeader) -> bytes:
    lines = [
        f"version={header.format_version}",
        f"leads={','.join(header.lead_names)}",
        f"rate_hz={header.sampling_rate_hz}",
        f"resolution_uv={_format_resolution(Fraction(header.resolution_uv))}",
        f"samples={header.sample_count_per_lead}",
    ]
    if header.start_time is not None:
        lines.append(f"start={header.start_time.isoformat()}")
    return ("\n".join(lines) + "\n").encode("utf-8")


def _expected_data_length(header: HolterHeader) -> int:
    return _SAMPLE_DTYPE.itemsize * header.n_leads * header.sample_count_per_lead


def parse_holter(header_bytes: bytes, data_bytes: bytes) -> HolterRecord:
    """Parse an in-memory container into a :class:`HolterRecord`."""
    header = parse_header(header_bytes)
    expected = _expected_data_length(header)
    if len(data_bytes) != expected:
        raise HolterFormatError(
            f"data-length mismatch: expected {expected} bytes, got {len(data_bytes)}",
            min(len(data_bytes), expected))
    raw = np.frombuffer(data_bytes, dtype=_SAMPLE_DTYPE).reshape(-1, header.n_leads)
    samples = raw.T.astype(np.float64) * float(header.resolution_uv)
    return HolterRecord(header, samples)


def _to_raw(samples_uv: np.ndarray, resolution: Fraction) -> np.ndarray:
    raw = np.rint(np.asarray(samples_uv, dtype=np.float64) / float(resolution))
    bad = np.abs(raw + 0.5) > 32767.5  # outside [-32768, 32767]
    if bad.any():
        lead, pos = np.argwhere(bad)[0]
        raise AmplitudeRangeError(int(lead), float(samples_uv[lead, pos]))
    return raw.astype(_SAMPLE_DTYPE)


def write_holter(record: HolterRecord) -> tuple[bytes, bytes]:
    """Serialize a record; inverse of :func:`parse_holter`."""
    header = record.header
    if header.sample_count_per_lead <= 0 or record.samples.shape[1] == 0:
        raise ValueError("sample_count_per_lead > 0 violated")
    raw = _to_raw(record.samples, Fraction(header.resolution_uv))
    return format_header(header), np.ascontiguousarray(raw.T).tobytes()


def make_record(samples_uv, sampling_rate_hz=CANONICAL_RATE_HZ, resolution_uv=1,
                lead_names=STANDARD_LEADS, start_time=None) -> HolterRecord:
    samples_uv = np.asarray(samples_uv, dtype=np.float64)
    if samples_uv.ndim != 2 or samples_uv.shape[1] == 0:
        raise ValueError("sample_count_per_lead > 0 violated")
    header = HolterHeader(lead_names=tuple(lead_names), sampling_rate_hz=int(sampling_rate_hz),
                          resolution_uv=Fraction(resolution_uv),
                          sample_count_per_lead=samples_uv.shape[1], start_time=start_time)
    return HolterRecord(header, samples_uv)


def data_path_for(header_path) -> Path:
    return Path(header_path).with_suffix(".dat")


def _atomic_write_bytes(path: Path, payload: bytes):
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(payload)
    os.replace(tmp, path)


def save_holter(record: HolterRecord, header_path) -> Path:
    header_path = Path(header_path)
    header_bytes, data_bytes = write_holter(record)
    _atomic_write_bytes(data_path_for(header_path), data_bytes)
    _atomic_write_bytes(header_path, header_bytes)
    return header_path


class HolterReader:
    """Memory-mapped, chunk-wise access to an on-disk container.

    Nothing but the header is loaded up front; every accessor materialises
    only the requested sample range, so a 24 h record can be processed in
    bounded memory.
    """

    def __init__(self, header_path, data_path=None):
        self.header_path = Path(header_path)
        self.data_path = Path(data_path) if data_path else data_path_for(self.header_path)
        self.header = parse_header(self.header_path.read_bytes())
        size = self.data_path.stat().st_size
        expected = _expected_data_length(self.header)
        if size != expected:
            raise HolterFormatError(
                f"data-length mismatch: expected {expected} bytes, got {size}",
                min(size, expected))
        # positioned reads rather than a memory map: touched map pages count
        # toward resident memory, which would grow with the record length
        self._fh = open(self.data_path, "rb")
        self._frame_bytes = self.header.n_leads * _SAMPLE_DTYPE.itemsize
        self._scale = float(self.header.resolution_uv)

    @property
    def n_samples(self) -> int:
        return self.header.sample_count_per_lead

    @property
    def sampling_rate_hz(self) -> int:
        return self.header.sampling_rate_hz

    def read(self, start=0, stop=None, leads=None, dtype=np.float32) -> np.ndarray:
        """Samples ``[start, stop)`` as ``(n_leads, stop - start)`` microvolts."""
        stop = self.n_samples if stop is None else min(stop, self.n_samples)
        start = max(0, start)
        count = max(0, stop - start)
        block = np.empty((count, self.header.n_leads), dtype=_SAMPLE_DTYPE)
        self._fh.seek(start * self._frame_bytes)
        if self._fh.readinto(memoryview(block).cast("B")) != block.nbytes:
            raise HolterFormatError("data file truncated while reading", start * self._frame_bytes)
        if leads is not None:
            idx = [self.header.lead_index(name) if isinstance(name, str) else int(name)
                   for name in leads]
            block = block[:, idx]
        out = np.empty((block.shape[1], block.shape[0]), dtype=dtype)
        np.multiply(block.T, self._scale, out=out, casting="unsafe")
        return out

    def read_lead(self, name, start=0, stop=None, dtype=np.float64) -> np.ndarray:
        return self.read(start, stop, leads=[name], dtype=dtype)[0]

    def iter_chunks(self, chunk_samples, leads=None, dtype=np.float32
                    ) -> Iterator[tuple[int, np.ndarray]]:
        for start in range(0, self.n_samples, chunk_samples):
            yield start, self.read(start, start + chunk_samples, leads=leads, dtype=dtype)

    def to_record(self) -> HolterRecord:
        return HolterRecord(self.header, self.read(dtype=np.float64))

    def close(self):
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def load_holter(header_path) -> HolterRecord:
    header_path = Path(header_path)
    return parse_holter(header_path.read_bytes(), data_path_for(header_path).read_bytes())


# --------------------------------------------------------------------------
# Cohort tables
# --------------------------------------------------------------------------

NYHA_CLASSES = ("I", "II", "III", "IV")
TERMINAL_EVENTS = ("alive_censored", "scd", "cardiac_death", "noncardiac_death")


@dataclass(frozen=True)
class Patient:
    id: str
    age_years: float
    sex: str
    etiology: str
    lvef_percent: float
    nyha: str
    af: bool = False
    diabetes: bool = False
    creatinine_mg_dl: float | None = None
    bnp_pg_ml: float | None = None
    group: str = "icd"
    prior_device: bool = False
    crt_indicated: bool = False
    secondary_prophylaxis: bool = False
    unstable: bool = False
    av_block: bool = False
    life_expectancy_le_1y: bool = False
    extras: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        if not (0 < self.lvef_percent <= 100):
            raise ValueError(f"lvef_percent must be in (0, 100], got {self.lvef_percent}")
        if self.age_years < 0:
            raise ValueError("age_years must be >= 0")
        if self.sex not in ("female", "male"):
            raise ValueError(f"unknown sex {self.sex!r}")
        if self.nyha not in NYHA_CLASSES:
            raise ValueError(f"unknown NYHA class {self.nyha!r}")
        if self.group not in ("icd", "control"):
            raise ValueError(f"unknown group {self.group!r}")

    @property
    def nyha_numeric(self) -> int:
        return NYHA_CLASSES.index(self.nyha) + 1


@dataclass(frozen=True)
class FollowUp:
    time_years: float
    terminal_event: str = "alive_censored"
    first_appropriate_shock_years: float | None = None
    first_inappropriate_shock_years: float | None = None
    crossover_years: float | None = None

    def __post_init__(self):
        if not self.time_years >= 0:
            raise ValueError("time_years must be >= 0")
        if self.terminal_event not in TERMINAL_EVENTS:
            raise ValueError(f"unknown terminal_event {self.terminal_event!r}")
        for name in ("first_appropriate_shock_years", "first_inappropriate_shock_years",
                     "crossover_years"):
            value = getattr(self, name)
            if value is not None and not (0 <= value <= self.time_years):
                raise ValueError(f"{name} must lie within follow-up")

    @property
    def died(self) -> bool:
        return self.terminal_event != "alive_censored"

    @property
    def shocked(self) -> bool:
        return self.first_appropriate_shock_years is not None

    @property
    def shock_time_years(self) -> float:
        """Time to first appropriate shock, or end of follow-up when none."""
        if self.first_appropriate_shock_years is not None:
            return self.first_appropriate_shock_years
        return self.time_years


PATIENT_COLUMNS = (
    "id", "age_years", "sex", "etiology", "lvef_percent", "nyha", "af", "diabetes",
    "creatinine_mg_dl", "bnp_pg_ml", "group", "prior_device", "crt_indicated",
    "secondary_prophylaxis", "unstable", "av_block", "life_expectancy_le_1y",
)
FOLLOWUP_COLUMNS = (
    "time_years", "terminal_event", "first_appropriate_shock_years",
    "first_inappropriate_shock_years", "crossover_years",
)
EXTRAS_COLUMN = "extras"
COHORT_COLUMNS = PATIENT_COLUMNS + FOLLOWUP_COLUMNS + (EXTRAS_COLUMN,)
MANDATORY_COLUMNS = ("id", "age_years", "sex", "etiology", "lvef_percent", "nyha", "af",
                     "diabetes", "group")
_OPTIONAL_NUMERIC = ("creatinine_mg_dl", "bnp_pg_ml")
_BOOL_COLUMNS = ("af", "diabetes", "prior_device", "crt_indicated", "secondary_prophylaxis",
                 "unstable", "av_block", "life_expectancy_le_1y")
_TRUE = {"true", "1", "yes", "y", "t"}
_FALSE = {"false", "0", "no", "n", "f", ""}


@dataclass
class CohortTable:
    patients: list[Patient]
    followups: list[FollowUp] | None = None
    warnings: list[str] = field(default_factory=list)

    def __len__(self):
        return len(self.patients)

    @property
    def ids(self) -> list[str]:
        return [p.id for p in self.patients]

    @property
    def af_prevalence(self) -> float | None:
        if not self.patients:
            return None
        return sum(p.af for p in self.patients) / len(self.patients)

    def extras_array(self, key) -> np.ndarray:
        return np.array([float(p.extras[key]) for p in self.patients])


def _parse_bool(text, row, column):
    value = text.strip().lower()
    if value in _TRUE:
        return True
    if value in _FALSE:
        return False
    raise CohortError(f"unparseable boolean {text!r}", row, column)


def _parse_float(text, row, column, optional=False):
    text = text.strip()
    if text == "":
        if optional:
            return None
        raise CohortError("missing value", row, column)
    try:
        value = float(text)
    except ValueError:
        raise CohortError(f"unparseable numeric {text!r}", row, column) from None
    if not math.isfinite(value):
        raise CohortError(f"non-finite numeric {text!r}", row, column)
    return value


def _parse_extras(text):
    extras = {}
    for item in filter(None, (part.strip() for part in text.split(";"))):
        key, sep, value = item.partition("=")
        if not sep:
            raise ValueError(f"bad extras item {item!r}")
        try:
            extras[key.strip()] = float(value)
        except ValueError:
            extras[key.strip()] = value.strip()
    return extras


def _format_extras(extras):
    return ";".join(f"{k}={_format_value(v)}" for k, v in sorted(extras.items()))


def _format_value(value):
    if value is None:
        return ""
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def load_cohort(csv_text: str) -> CohortTable:
    """Parse cohort CSV text into typed patients (and follow-ups if present).

    Row numbers in errors count the header as row 1.
    """
    reader = csv.DictReader(io.StringIO(csv_text))
    columns = reader.fieldnames or []
    missing = [c for c in MANDATORY_COLUMNS if c not in columns]
    if missing:
        raise CohortError(f"missing mandatory column(s): {', '.join(missing)}")
    unknown = [c for c in columns if c not in COHORT_COLUMNS]
    if unknown:
        raise CohortError(f"unknown column(s): {', '.join(unknown)}")
    has_followup = "time_years" in columns

    patients, followups, seen = [], [], set()
    for rownum, row in enumerate(reader, start=2):
        pid = row["id"].strip()
        if not pid:
            raise CohortError("empty id", rownum, "id")
        if pid in seen:
            raise CohortError(f"duplicate id {pid!r}", rownum, "id")
        seen.add(pid)
        kwargs = {"id": pid}
        for column in PATIENT_COLUMNS[1:]:
            if column not in row or row[column] is None:
                continue
            text = row[column]
            if column in _BOOL_COLUMNS:
                kwargs[column] = _parse_bool(text, rownum, column)
            elif column in _OPTIONAL_NUMERIC:
                kwargs[column] = _parse_float(text, rownum, column, optional=True)
            elif column in ("age_years", "lvef_percent"):
                kwargs[column] = _parse_float(text, rownum, column)
            else:
                kwargs[column] = text.strip()
        if row.get(EXTRAS_COLUMN):
            try:
                kwargs["extras"] = _parse_extras(row[EXTRAS_COLUMN])
            except ValueError as exc:
                raise CohortError(str(exc), rownum, EXTRAS_COLUMN) from None
        try:
            patients.append(Patient(**kwargs))
        except ValueError as exc:
            raise CohortError(str(exc), rownum) from None
        if has_followup:
            fkw = {"time_years": _parse_float(row["time_years"], rownum, "time_years")}
            if row.get("terminal_event", "").strip():
                fkw["terminal_event"] = row["terminal_event"].strip()
            for column in FOLLOWUP_COLUMNS[2:]:
                if column in row:
                    fkw[column] = _parse_float(row[column] or "", rownum, column, optional=True)
            try:
                followups.append(FollowUp(**fkw))
            except ValueError as exc:
                raise CohortError(str(exc), rownum) from None

    table = CohortTable(patients, followups if has_followup else None)
    prevalence = table.af_prevalence
    if prevalence is not None and prevalence > AF_PREVALENCE_CAP:
        message = (f"atrial fibrillation prevalence {100 * prevalence:.1f}% exceeds "
                   f"the {100 * AF_PREVALENCE_CAP:.0f}% cap")
        table.warnings.append(message)
        warnings.warn(message, CohortWarning, stacklevel=2)
    return table


def dump_cohort(table: CohortTable) -> str:
    """Inverse of :func:`load_cohort`."""
    buf = io.StringIO()
    columns = list(PATIENT_COLUMNS)
    if table.followups is not None:
        columns += FOLLOWUP_COLUMNS
    columns.append(EXTRAS_COLUMN)
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(columns)
    for i, p in enumerate(table.patients):
        row = [_format_value(getattr(p, c)) for c in PATIENT_COLUMNS]
        if table.followups is not None:
            f = table.followups[i]
            row += [_format_value(getattr(f, c)) for c in FOLLOWUP_COLUMNS]
        row.append(_format_extras(p.extras))
        writer.writerow(row)
    return buf.getvalue()


# --------------------------------------------------------------------------
# Eligibility
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class EligibilityResult:
    eligible: bool
    failed_criteria: tuple[str, ...]


_EXCLUSIONS = (
    ("secondary_prophylaxis", "secondary prophylactic indication"),
    ("crt_indicated", "CRT planned or indicated"),
    ("unstable", "unstable cardiac condition"),
    ("av_block", "higher degree AV block"),
    ("prior_device", "previous device"),
    ("life_expectancy_le_1y", "life expectancy <= 1 year"),
)


def check_eligibility(patient: Patient) -> EligibilityResult:
    """Apply the inclusion and exclusion rules of the prospective study."""
    failed = []
    if patient.etiology not in ("ischemic", "dilated"):
        failed.append("ischemic or dilated cardiomyopathy")
    if not patient.lvef_percent <= 35:
        failed.append("LVEF <= 35")
    if patient.nyha == "I":
        if not patient.lvef_percent <= 30:
            failed.append("NYHA I requires LVEF <= 30")
    elif patient.nyha not in ("II", "III"):
        failed.append("NYHA II-III")
    if not patient.age_years >= 18:
        failed.append("age >= 18")
    for attr, label in _EXCLUSIONS:
        if getattr(patient, attr):
            failed.append(label)
    return EligibilityResult(not failed, tuple(failed))
