"""
Parse raw device-event streams and participant profiles.

Event streams arrive either as JSON lines (one object per line with keys
timestamp/ts, kind, value, duration_min, text) or as CSV with header
timestamp,kind,value,duration_min,text. Profiles are JSON documents.

Strict parsing raises on the first malformed row, naming its 1-based row number.
Lenient parsing collects malformed rows into a ParseReport instead.
"""

import io
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import IO, List, Optional, Tuple, Union

import numpy as np
import pandas as pd

from src.config.thresholds import CGM_MAX_MGDL, CGM_MIN_MGDL

logger = logging.getLogger(__name__)

EVENT_KINDS = ("cgm", "bolus", "temp_basal", "default_basal_schedule", "carbs", "note")
BASAL_KINDS = ("temp_basal", "default_basal_schedule")
CSV_HEADER = ["timestamp", "kind", "value", "duration_min", "text"]

Source = Union[str, Path, bytes, IO]


class ParseError(ValueError):
    """A malformed row; `row` is 1-based within the data rows."""

    def __init__(self, row: int, message: str, raw: str = ""):
        super().__init__(f"row {row}: {message}" + (f" ({raw})" if raw else ""))
        self.row = row
        self.raw = raw


class UnknownKindError(ParseError):
    pass


class NegativeValueError(ParseError):
    pass


class MissingProfileFieldError(ValueError):
    pass


@dataclass(frozen=True)
class RawEvent:
    timestamp: pd.Timestamp
    kind: str
    value: float = 0.0
    duration_min: Optional[int] = None
    text: Optional[str] = None


@dataclass
class PatientProfile:
    participant_id: str
    default_basal_schedule: List[Tuple[int, float]]   # (minute of day, U/h)
    weight_kg: Optional[float] = None
    mean_basal_rate: Optional[float] = None
    mean_total_daily_insulin: Optional[float] = None
    mean_daily_carbs: Optional[float] = None
    hcls_system: Optional[str] = None
    basal_log_style: Optional[str] = None

    def __post_init__(self):
        if self.weight_kg is not None and self.weight_kg <= 0:
            raise ValueError(f"weight_kg must be positive, got {self.weight_kg}")
        if not self.default_basal_schedule:
            raise MissingProfileFieldError("default_basal_schedule is empty")
        minutes = [m for m, _ in self.default_basal_schedule]
        if minutes[0] != 0:
            raise ValueError("default_basal_schedule must start at 00:00")
        if any(m % 30 for m in minutes) or any(b <= a for a, b in zip(minutes, minutes[1:])):
            raise ValueError("default_basal_schedule entries must be increasing half-hour marks")
        if any(m >= 24 * 60 for m in minutes):
            raise ValueError("default_basal_schedule entries must fall within one day")
        if any(rate < 0 for _, rate in self.default_basal_schedule):
            raise ValueError("default_basal_schedule rates must be non-negative")
        if self.mean_basal_rate is None:
            self.mean_basal_rate = float(self.half_hour_rates().mean())

    def half_hour_rates(self) -> np.ndarray:
        """Default basal rate for each of the 48 half-hours of the day."""
        rates = np.empty(48)
        entries = list(self.default_basal_schedule) + [(24 * 60, None)]
        for (start, rate), (end, _) in zip(entries, entries[1:]):
            rates[start // 30:end // 30] = rate
        return rates

    def to_dict(self) -> dict:
        return {
            "participant_id": self.participant_id,
            "weight_kg": self.weight_kg,
            "mean_basal_rate": self.mean_basal_rate,
            "mean_total_daily_insulin": self.mean_total_daily_insulin,
            "mean_daily_carbs": self.mean_daily_carbs,
            "hcls_system": self.hcls_system,
            "basal_log_style": self.basal_log_style,
            "default_basal_schedule": [
                {"time": f"{m // 60:02d}:{m % 60:02d}", "rate": r} for m, r in self.default_basal_schedule
            ],
        }


@dataclass
class ParseReport:
    n_rows: int = 0
    n_events: int = 0
    malformed: List[Tuple[int, str]] = field(default_factory=list)
    n_cgm_out_of_range: int = 0

    def summary(self) -> str:
        return (f"{self.n_rows} rows, {self.n_events} events, {len(self.malformed)} malformed, "
                f"{self.n_cgm_out_of_range} CGM readings outside [{CGM_MIN_MGDL:g}, {CGM_MAX_MGDL:g}]")


def _read_text(source: Source) -> str:
    if isinstance(source, bytes):
        return source.decode("utf-8")
    if hasattr(source, "read"):
        content = source.read()
        return content.decode("utf-8") if isinstance(content, bytes) else content
    return Path(source).read_text()


def _parse_timestamp(value) -> pd.Timestamp:
    ts = pd.Timestamp(value)
    if pd.isna(ts):
        raise ValueError("missing timestamp")
    # naive timestamps are taken as UTC
    ts = ts.tz_localize("UTC") if ts.tzinfo is None else ts.tz_convert("UTC")
    return ts.floor("s")


def _is_blank(value) -> bool:
    return value is None or (isinstance(value, float) and np.isnan(value)) or str(value).strip() == ""


def event_from_record(record: dict, row: int) -> RawEvent:
    """
    Validate one raw record into a RawEvent.

    Raises:
        UnknownKindError, NegativeValueError, ParseError
    """
    raw = json.dumps(record, default=str, sort_keys=True)
    kind = str(record.get("kind", "")).strip().lower()
    if kind not in EVENT_KINDS:
        raise UnknownKindError(row, f"unknown kind '{kind}'", raw)

    ts_value = record.get("timestamp", record.get("ts"))
    try:
        timestamp = _parse_timestamp(ts_value)
    except (ValueError, TypeError) as e:
        raise ParseError(row, f"bad timestamp: {e}", raw)

    value = record.get("value")
    if _is_blank(value):
        if kind != "note":
            raise ParseError(row, f"{kind} requires a value", raw)
        value = 0.0
    try:
        value = float(value)
    except (TypeError, ValueError):
        raise ParseError(row, f"non-numeric value '{value}'", raw)
    if not np.isfinite(value):
        raise ParseError(row, f"non-finite value '{value}'", raw)
    if value < 0:
        raise NegativeValueError(row, f"negative {kind} value {value}", raw)

    duration = record.get("duration_min")
    if kind == "temp_basal":
        if _is_blank(duration):
            raise ParseError(row, "temp_basal requires duration_min", raw)
        try:
            duration = float(duration)
        except (TypeError, ValueError):
            raise ParseError(row, f"non-numeric duration_min '{duration}'", raw)
        if duration < 0 or duration != int(duration):
            raise NegativeValueError(row, f"duration_min must be a non-negative integer, got {duration}", raw)
        duration = int(duration)
    elif not _is_blank(duration):
        raise ParseError(row, f"duration_min is only valid for temp_basal, not {kind}", raw)
    else:
        duration = None

    text = record.get("text")
    if kind == "note":
        text = "" if _is_blank(text) else str(text)
    else:
        text = None

    return RawEvent(timestamp=timestamp, kind=kind, value=value, duration_min=duration, text=text)


def _records(text: str, fmt: str):
    if fmt == "jsonl":
        for row, line in enumerate(text.splitlines(), start=1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as e:
                yield row, None, ParseError(row, f"invalid JSON: {e.msg}", line)
                continue
            if not isinstance(record, dict):
                yield row, None, ParseError(row, "expected a JSON object", line)
                continue
            yield row, record, None
    elif fmt == "csv":
        df = pd.read_csv(io.StringIO(text), dtype=str, keep_default_na=False)
        missing = [c for c in ("timestamp", "kind", "value") if c not in df.columns]
        if missing:
            raise ValueError(f"CSV stream is missing columns: {missing}")
        for row, record in enumerate(df.to_dict(orient="records"), start=1):
            yield row, record, None
    else:
        raise ValueError(f"Unknown stream format '{fmt}', expected jsonl or csv")


def parse_events(source: Source, fmt: str = "jsonl", strict: bool = True) -> Tuple[List[RawEvent], ParseReport]:
    """
    Parse an event stream into RawEvents sorted by timestamp.

    CGM readings outside the plausibility range are dropped as missing and counted.

    Args:
        source: Path, bytes, string path or open file
        fmt: 'jsonl' or 'csv'
        strict: Raise on the first malformed row instead of collecting it

    Returns:
        (events, report)
    """
    report = ParseReport()
    events = []
    for row, record, error in _records(_read_text(source), fmt):
        report.n_rows += 1
        if error is None:
            try:
                event = event_from_record(record, row)
            except ParseError as e:
                error = e
        if error is not None:
            if strict:
                raise error
            report.malformed.append((row, str(error)))
            logger.warning(f"Skipping malformed {error}")
            continue
        if event.kind == "cgm" and not CGM_MIN_MGDL <= event.value <= CGM_MAX_MGDL:
            report.n_cgm_out_of_range += 1
            continue
        events.append(event)

    if report.n_cgm_out_of_range:
        logger.warning(f"Treated {report.n_cgm_out_of_range} implausible CGM readings as missing")
    # stable: same-second events keep stream order
    events.sort(key=lambda e: e.timestamp)
    report.n_events = len(events)
    return events, report


def _parse_clock(value) -> int:
    if isinstance(value, (int, float)):
        return int(value)
    hours, minutes = str(value).split(":")[:2]
    return int(hours) * 60 + int(minutes)


def parse_profile(source: Union[Source, dict]) -> PatientProfile:
    """
    Parse a participant profile JSON document.

    The default basal schedule is a list of {"time": "HH:MM", "rate": U/h} entries
    at half-hour marks starting at 00:00, each holding until the next.

    Raises:
        MissingProfileFieldError: participant_id or default_basal_schedule absent
    """
    doc = source if isinstance(source, dict) else json.loads(_read_text(source))
    for name in ("participant_id", "default_basal_schedule"):
        if _is_blank(doc.get(name)) or doc.get(name) == []:
            raise MissingProfileFieldError(f"profile is missing required field '{name}'")

    schedule = []
    for entry in doc["default_basal_schedule"]:
        if isinstance(entry, dict):
            schedule.append((_parse_clock(entry["time"]), float(entry["rate"])))
        else:
            schedule.append((_parse_clock(entry[0]), float(entry[1])))

    def optional(name):
        value = doc.get(name)
        return None if _is_blank(value) else float(value)

    def optional_str(name):
        value = doc.get(name)
        return None if _is_blank(value) else str(value)

    return PatientProfile(
        participant_id=str(doc["participant_id"]),
        default_basal_schedule=schedule,
        weight_kg=optional("weight_kg"),
        mean_basal_rate=optional("mean_basal_rate"),
        mean_total_daily_insulin=optional("mean_total_daily_insulin"),
        mean_daily_carbs=optional("mean_daily_carbs"),
        hcls_system=optional_str("hcls_system"),
        basal_log_style=optional_str("basal_log_style"),
    )


def parse_raw(events_source: Source, profile_source: Union[Source, dict], fmt: str = "jsonl",
              strict: bool = True) -> Tuple[List[RawEvent], PatientProfile, ParseReport]:
    """Parse one participant's event stream together with its profile."""
    profile = parse_profile(profile_source)
    events, report = parse_events(events_source, fmt=fmt, strict=strict)
    return events, profile, report


@dataclass(frozen=True)
class CohortDecision:
    accepted: bool
    reason: str = ""


def apply_cohort_filters(profile: PatientProfile, requires_hcls: bool = False,
                         requires_androidaps_style_basal_log: bool = False,
                         requires_demographics: bool = False) -> CohortDecision:
    """
    Decide whether a participant enters the cohort.

    Returns:
        CohortDecision; reason names the first failed criterion
    """
    if requires_hcls and not profile.hcls_system:
        return CohortDecision(False, "hcls")
    if requires_androidaps_style_basal_log and (profile.basal_log_style or "").lower() != "androidaps":
        return CohortDecision(False, "androidaps_style_basal_log")
    if requires_demographics and profile.weight_kg is None:
        return CohortDecision(False, "demographics")
    return CohortDecision(True)


def events_to_frame(events: List[RawEvent]) -> pd.DataFrame:
    """Events as a table in CSV stream layout."""
    return pd.DataFrame([{
        "timestamp": e.timestamp.strftime("%Y-%m-%dT%H:%M:%SZ"),
        "kind": e.kind,
        "value": e.value,
        "duration_min": e.duration_min,
        "text": e.text,
    } for e in events], columns=CSV_HEADER)


def write_events_jsonl(events: List[RawEvent], path: Union[str, Path]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as f:
        for e in events:
            record = {"timestamp": e.timestamp.strftime("%Y-%m-%dT%H:%M:%SZ"), "kind": e.kind,
                      "value": round(float(e.value), 6)}
            if e.duration_min is not None:
                record["duration_min"] = e.duration_min
            if e.text is not None:
                record["text"] = e.text
            f.write(json.dumps(record, sort_keys=True) + "\n")
