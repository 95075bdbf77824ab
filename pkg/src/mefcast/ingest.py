"""Acquisition and validation of hourly balancing-authority observations.

Sources are either local CSV files (documented schema below) or a remote
EIA-style JSON API. Both paths produce ``HourlyObservation`` rows which
``validate_series`` turns into a contiguous, gap-annotated hourly series.

CSV schema (bit-exact, UTF-8, ``\\n`` line endings, empty cell = missing):

    timestamp,region,demand_mwh,demand_forecast_mwh,net_imports_mwh,
    gen_<fuel>_mwh...,co2_tonnes

Timestamps are ISO-8601 UTC truncated to the hour (``2023-01-01T08:00Z``).
"""

from __future__ import annotations

import math
import os
import time as _time
from dataclasses import dataclass, replace
from datetime import date, datetime, timedelta, timezone
from enum import Enum
from io import StringIO
from typing import Iterable, Mapping, Sequence

import csv

import httpx

from .errors import (
    AuthenticationError,
    ConfigError,
    DecodeError,
    RowError,
    SchemaError,
    SeriesError,
    TransportError,
)

HOUR = timedelta(hours=1)

#: Environment variable consulted when no API key is passed explicitly.
API_KEY_ENV = "MEFCAST_API_KEY"


class FuelKind(str, Enum):
    """Fuel categories a generation value can be attributed to."""

    coal = "coal"
    natural_gas = "natural_gas"
    petroleum = "petroleum"
    nuclear = "nuclear"
    hydro = "hydro"
    wind = "wind"
    solar = "solar"
    battery_storage = "battery_storage"
    imports = "imports"
    other = "other"


#: Fuels whose generation counts toward the fossil total.
FOSSIL_FUELS = frozenset({FuelKind.coal, FuelKind.natural_gas, FuelKind.petroleum})


def is_fossil(kind: FuelKind) -> bool:
    return kind in FOSSIL_FUELS


@dataclass
class HourlyObservation:
    """One UTC hour of grid data for a single balancing authority.

    ``demand``, ``net_imports`` and ``co2`` use NaN as the missing-value
    sentinel; ``demand_forecast`` uses ``None`` because the column is
    genuinely optional in source files. Fuels absent from ``generation``
    count as zero in sums but round-trip as absent through the CSV codec.
    """

    timestamp: datetime
    region: str
    demand: float
    demand_forecast: float | None
    net_imports: float
    generation: dict[FuelKind, float]
    co2: float

    def total_generation(self) -> float:
        return float(sum(self.generation.values()))

    def is_placeholder(self) -> bool:
        """True for the sentinel rows that stand in for missing hours."""
        return math.isnan(self.demand) and math.isnan(self.co2) and not self.generation


@dataclass(frozen=True)
class GapEntry:
    """One annotation in a gap report.

    ``method`` is ``interpolated`` or ``missing`` for filled holes, or
    ``duplicate`` when extra rows for the same hour were discarded
    (``length`` then counts discarded rows, not hours).
    """

    start: datetime
    length: int
    method: str


@dataclass
class ValidatedSeries:
    """A contiguous hourly series: ``observations[i].timestamp = start + i h``."""

    region: str
    start: datetime
    observations: list[HourlyObservation]
    gap_report: list[GapEntry]
    clamped_negative_generation: int = 0

    def __len__(self) -> int:
        return len(self.observations)

    @property
    def end(self) -> datetime:
        """Timestamp of the last observation."""
        return self.start + (len(self.observations) - 1) * HOUR

    def missing_mask(self) -> list[bool]:
        """Per-hour flag, True where the hour was filled with sentinels."""
        mask = [False] * len(self.observations)
        for entry in self.gap_report:
            if entry.method != "missing":
                continue
            first = int((entry.start - self.start) / HOUR)
            for i in range(first, first + entry.length):
                if 0 <= i < len(mask):
                    mask[i] = True
        return mask

    def fuels(self) -> list[FuelKind]:
        """Fuels present anywhere in the series, in enum declaration order."""
        seen = {fuel for obs in self.observations for fuel in obs.generation}
        return [fuel for fuel in FuelKind if fuel in seen]


# ---------------------------------------------------------------------------
# CSV parsing / serialization
# ---------------------------------------------------------------------------

#: Maps logical field names to the documented CSV column names.
DEFAULT_CSV_SCHEMA: dict[str, str] = {
    "timestamp": "timestamp",
    "region": "region",
    "demand": "demand_mwh",
    "demand_forecast": "demand_forecast_mwh",
    "net_imports": "net_imports_mwh",
    "co2": "co2_tonnes",
}

_REQUIRED_FIELDS = ("timestamp", "region", "demand", "co2")


def parse_timestamp(text: str) -> datetime:
    """Parse an ISO-8601 hour timestamp into an aware UTC datetime.

    Accepts ``Z`` suffixes, explicit offsets, naive strings (assumed UTC)
    and hour-precision strings such as ``2023-01-01T00``.
    """
    raw = text.strip()
    if raw.endswith(("Z", "z")):
        raw = raw[:-1] + "+00:00"
    if len(raw) == 13 and raw[10] in "T ":  # e.g. 2023-01-01T00
        raw += ":00"
    try:
        stamp = datetime.fromisoformat(raw)
    except ValueError as exc:
        raise ValueError(f"unparseable timestamp {text!r}") from exc
    if stamp.tzinfo is None:
        stamp = stamp.replace(tzinfo=timezone.utc)
    stamp = stamp.astimezone(timezone.utc)
    if stamp.minute or stamp.second or stamp.microsecond:
        raise ValueError(f"timestamp {text!r} is not aligned to the hour")
    return stamp


def format_timestamp(stamp: datetime) -> str:
    return stamp.astimezone(timezone.utc).strftime("%Y-%m-%dT%H:00Z")


def _parse_float(cell: str, column: str) -> float:
    try:
        return float(cell)
    except ValueError as exc:
        raise ValueError(f"column {column!r}: not a number: {cell!r}") from exc


def parse_csv(
    content: bytes | str,
    schema: Mapping[str, str] | None = None,
) -> list[HourlyObservation]:
    """Parse CSV content into observations, one per data row, in file order.

    ``schema`` maps logical field names (keys of ``DEFAULT_CSV_SCHEMA``) to
    column names. Generation columns are discovered as ``gen_<fuel>_mwh``
    for known fuels; unknown columns are ignored. Empty numeric cells become
    NaN (``None`` for the optional demand forecast). Duplicate timestamps
    are retained; ``validate_series`` resolves them.

    Raises ``SchemaError`` when a required mapped column is missing from the
    header and ``RowError`` (with a 1-based line number, header = line 1)
    for unparseable cells.
    """
    if isinstance(content, bytes):
        content = content.decode("utf-8")
    mapping = dict(DEFAULT_CSV_SCHEMA)
    if schema:
        mapping.update(schema)

    reader = csv.reader(StringIO(content, newline=""))
    try:
        header = next(reader)
    except StopIteration:
        raise SchemaError("empty input: no header row") from None
    header = [name.strip() for name in header]
    positions = {name: i for i, name in enumerate(header)}

    for logical in _REQUIRED_FIELDS:
        if mapping[logical] not in positions:
            raise SchemaError(f"missing required column {mapping[logical]!r}")

    fuel_columns: list[tuple[FuelKind, int]] = []
    for name, idx in positions.items():
        if name.startswith("gen_") and name.endswith("_mwh"):
            fuel_name = name[len("gen_") : -len("_mwh")]
            try:
                fuel_columns.append((FuelKind(fuel_name), idx))
            except ValueError:
                continue  # unknown fuel column: ignored

    def cell(row: list[str], logical: str) -> str:
        idx = positions.get(mapping[logical])
        if idx is None or idx >= len(row):
            return ""
        return row[idx].strip()

    observations: list[HourlyObservation] = []
    for line_number, row in enumerate(reader, start=2):
        if not row or all(not value.strip() for value in row):
            continue
        try:
            stamp = parse_timestamp(cell(row, "timestamp"))
            region = cell(row, "region")
            demand_cell = cell(row, "demand")
            demand = _parse_float(demand_cell, mapping["demand"]) if demand_cell else math.nan
            forecast_cell = cell(row, "demand_forecast")
            forecast = _parse_float(forecast_cell, mapping["demand_forecast"]) if forecast_cell else None
            imports_cell = cell(row, "net_imports")
            imports = _parse_float(imports_cell, mapping["net_imports"]) if imports_cell else math.nan
            co2_cell = cell(row, "co2")
            co2 = _parse_float(co2_cell, mapping["co2"]) if co2_cell else math.nan
            generation: dict[FuelKind, float] = {}
            for fuel, idx in fuel_columns:
                if idx < len(row) and row[idx].strip():
                    generation[fuel] = _parse_float(row[idx].strip(), header[idx])
        except ValueError as exc:
            raise RowError(str(exc), line_number) from exc
        observations.append(
            HourlyObservation(
                timestamp=stamp,
                region=region,
                demand=demand,
                demand_forecast=forecast,
                net_imports=imports,
                generation=generation,
                co2=co2,
            )
        )
    return observations


def _format_value(value: float | None) -> str:
    if value is None or (isinstance(value, float) and math.isnan(value)):
        return ""
    return repr(float(value))


def serialize_csv(series: ValidatedSeries | Sequence[HourlyObservation]) -> str:
    """Serialize observations to the documented CSV schema.

    The inverse of ``parse_csv``: ``parse_csv(serialize_csv(x))`` reproduces
    the observations exactly (floats via ``repr``, missing values as empty
    cells). Generation columns cover the union of fuels present, in enum
    declaration order.
    """
    if isinstance(series, ValidatedSeries):
        observations: Sequence[HourlyObservation] = series.observations
    else:
        observations = series
    seen = {fuel for obs in observations for fuel in obs.generation}
    fuels = [fuel for fuel in FuelKind if fuel in seen]

    out = StringIO()
    writer = csv.writer(out, lineterminator="\n")
    writer.writerow(
        ["timestamp", "region", "demand_mwh", "demand_forecast_mwh", "net_imports_mwh"]
        + [f"gen_{fuel.value}_mwh" for fuel in fuels]
        + ["co2_tonnes"]
    )
    for obs in observations:
        row = [
            format_timestamp(obs.timestamp),
            obs.region,
            _format_value(obs.demand),
            _format_value(obs.demand_forecast),
            _format_value(obs.net_imports),
        ]
        for fuel in fuels:
            value = obs.generation.get(fuel)
            row.append("" if value is None else _format_value(value))
        row.append(_format_value(obs.co2))
        writer.writerow(row)
    return out.getvalue()


# ---------------------------------------------------------------------------
# Validation and gap handling
# ---------------------------------------------------------------------------


def _placeholder(stamp: datetime, region: str) -> HourlyObservation:
    return HourlyObservation(
        timestamp=stamp,
        region=region,
        demand=math.nan,
        demand_forecast=None,
        net_imports=math.nan,
        generation={},
        co2=math.nan,
    )


def _interpolate(
    before: HourlyObservation,
    after: HourlyObservation,
    stamp: datetime,
    region: str,
) -> HourlyObservation:
    span = (after.timestamp - before.timestamp) / HOUR
    frac = ((stamp - before.timestamp) / HOUR) / span

    def lerp(a: float, b: float) -> float:
        return a + (b - a) * frac

    if before.demand_forecast is None or after.demand_forecast is None:
        forecast = None
    else:
        forecast = lerp(before.demand_forecast, after.demand_forecast)
    generation: dict[FuelKind, float] = {}
    for fuel in FuelKind:
        if fuel in before.generation or fuel in after.generation:
            generation[fuel] = lerp(before.generation.get(fuel, 0.0), after.generation.get(fuel, 0.0))
    return HourlyObservation(
        timestamp=stamp,
        region=region,
        demand=lerp(before.demand, after.demand),
        demand_forecast=forecast,
        net_imports=lerp(before.net_imports, after.net_imports),
        generation=generation,
        co2=lerp(before.co2, after.co2),
    )


def validate_series(
    observations: Iterable[HourlyObservation],
    gap_policy_hours: int = 3,
) -> ValidatedSeries:
    """Produce a contiguous hourly series from raw observations.

    Rows are sorted by timestamp; duplicate timestamps collapse to the last
    row seen (corrected republications win) and are recorded in the gap
    report. Internal holes up to ``gap_policy_hours`` long are filled by
    per-field linear interpolation and flagged ``interpolated``; longer
    holes become NaN placeholder rows flagged ``missing``. Negative
    generation values are clamped to zero and counted.

    Raises ``SeriesError`` on empty input or mixed regions.
    """
    rows = list(observations)
    if not rows:
        raise SeriesError("cannot validate an empty observation list")
    regions = sorted({obs.region for obs in rows})
    if len(regions) > 1:
        raise SeriesError(f"mixed regions in one series: {', '.join(regions)}")
    region = regions[0]

    # Last row wins per timestamp; placeholder rows re-enter as holes so
    # validation is idempotent over its own output.
    by_hour: dict[datetime, HourlyObservation] = {}
    duplicate_counts: dict[datetime, int] = {}
    for obs in sorted(rows, key=lambda o: o.timestamp):
        if obs.timestamp in by_hour:
            duplicate_counts[obs.timestamp] = duplicate_counts.get(obs.timestamp, 0) + 1
        by_hour[obs.timestamp] = obs

    present = {ts: obs for ts, obs in by_hour.items() if not obs.is_placeholder()}
    if not present:
        raise SeriesError("series contains no usable (non-placeholder) rows")

    clamped = 0
    for ts, obs in list(present.items()):
        if any(value < 0.0 for value in obs.generation.values()):
            generation = {}
            for fuel, value in obs.generation.items():
                if value < 0.0:
                    clamped += 1
                    value = 0.0
                generation[fuel] = value
            present[ts] = replace(obs, generation=generation)

    start = min(by_hour)
    end = max(by_hour)
    n_hours = int((end - start) / HOUR) + 1
    present_stamps = sorted(present)

    gap_report = [
        GapEntry(start=ts, length=count, method="duplicate")
        for ts, count in sorted(duplicate_counts.items())
    ]

    result: list[HourlyObservation] = []
    hole: list[datetime] = []
    prev_present: HourlyObservation | None = None

    def flush_hole(next_present: HourlyObservation | None) -> None:
        nonlocal hole
        if not hole:
            return
        fillable = (
            prev_present is not None
            and next_present is not None
            and len(hole) <= gap_policy_hours
        )
        if fillable:
            for stamp in hole:
                result.append(_interpolate(prev_present, next_present, stamp, region))
            gap_report.append(GapEntry(start=hole[0], length=len(hole), method="interpolated"))
        else:
            for stamp in hole:
                result.append(_placeholder(stamp, region))
            gap_report.append(GapEntry(start=hole[0], length=len(hole), method="missing"))
        hole = []

    for i in range(n_hours):
        stamp = start + i * HOUR
        obs = present.get(stamp)
        if obs is None:
            hole.append(stamp)
            continue
        flush_hole(obs)
        result.append(obs)
        prev_present = obs
    flush_hole(None)

    gap_report.sort(key=lambda entry: (entry.start, entry.method))
    first_present = present_stamps[0]
    # Leading placeholder-only hours carry no information; trim to the first
    # usable row so `start` always points at real data.
    offset = int((first_present - start) / HOUR)
    if offset:
        result = result[offset:]
        gap_report = [e for e in gap_report if e.start >= first_present]
        start = first_present
    return ValidatedSeries(
        region=region,
        start=start,
        observations=result,
        gap_report=gap_report,
        clamped_negative_generation=clamped,
    )


# ---------------------------------------------------------------------------
# Remote fetching
# ---------------------------------------------------------------------------


@dataclass
class FetchConfig:
    """Where and what to fetch from the EIA-style hourly API."""

    base_url: str
    region: str
    start: datetime
    end: datetime  # exclusive
    api_key: str = ""
    page_size: int = 5000
    max_attempts: int = 3
    backoff_seconds: float = 0.5
    timeout_seconds: float = 30.0

    def resolved_key(self) -> str:
        return self.api_key or os.environ.get(API_KEY_ENV, "")


def _row_to_observation(row: object, page_offset: int) -> HourlyObservation:
    if not isinstance(row, dict):
        raise DecodeError(f"page at offset {page_offset}: row is not an object: {row!r}")
    try:
        stamp = parse_timestamp(str(row["period"]))
        region = str(row["respondent"])
    except (KeyError, ValueError) as exc:
        raise DecodeError(f"page at offset {page_offset}: bad row {row!r}: {exc}") from exc

    def num(key: str) -> float:
        value = row.get(key)
        if value is None:
            return math.nan
        try:
            return float(value)
        except (TypeError, ValueError) as exc:
            raise DecodeError(
                f"page at offset {page_offset}: field {key!r} not numeric: {value!r}"
            ) from exc

    forecast_raw = row.get("demand_forecast_mwh")
    generation: dict[FuelKind, float] = {}
    raw_generation = row.get("generation_mwh", {})
    if not isinstance(raw_generation, dict):
        raise DecodeError(f"page at offset {page_offset}: generation_mwh is not an object")
    for fuel_name, value in raw_generation.items():
        try:
            fuel = FuelKind(fuel_name)
        except ValueError:
            continue
        if value is None:
            continue
        try:
            generation[fuel] = float(value)
        except (TypeError, ValueError) as exc:
            raise DecodeError(
                f"page at offset {page_offset}: generation {fuel_name!r} not numeric"
            ) from exc

    return HourlyObservation(
        timestamp=stamp,
        region=region,
        demand=num("demand_mwh"),
        demand_forecast=None if forecast_raw is None else num("demand_forecast_mwh"),
        net_imports=num("net_imports_mwh"),
        generation=generation,
        co2=num("co2_tonnes"),
    )


def _fetch_page(
    client: httpx.Client,
    config: FetchConfig,
    key: str,
    offset: int,
) -> tuple[list[HourlyObservation], int]:
    """Fetch one page with retry; returns (rows, reported total)."""
    params = {
        "api_key": key,
        "frequency": "hourly",
        "respondent": config.region,
        "start": format_timestamp(config.start),
        "end": format_timestamp(config.end),
        "offset": offset,
        "length": config.page_size,
    }
    last_error: Exception | None = None
    for attempt in range(config.max_attempts):
        if attempt:
            _time.sleep(config.backoff_seconds * (2 ** (attempt - 1)))
        try:
            response = client.get(config.base_url, params=params, timeout=config.timeout_seconds)
        except httpx.HTTPError as exc:
            last_error = exc
            continue
        if response.status_code in (401, 403):
            raise AuthenticationError(f"API rejected credentials (HTTP {response.status_code})")
        if response.status_code >= 500 or response.status_code == 429:
            last_error = TransportError(f"HTTP {response.status_code} at offset {offset}")
            continue
        if response.status_code != 200:
            raise TransportError(f"unexpected HTTP {response.status_code} at offset {offset}")
        try:
            body = response.json()
        except ValueError as exc:
            raise DecodeError(f"page at offset {offset}: body is not JSON") from exc
        try:
            payload = body["response"]
            data = payload["data"]
            total = int(payload["total"])
        except (TypeError, KeyError, ValueError) as exc:
            raise DecodeError(f"page at offset {offset}: missing response.data/total") from exc
        if not isinstance(data, list):
            raise DecodeError(f"page at offset {offset}: response.data is not a list")
        return [_row_to_observation(row, offset) for row in data], total
    raise TransportError(
        f"exhausted {config.max_attempts} attempts at offset {offset}: {last_error}"
    )


def fetch_remote(config: FetchConfig, client: httpx.Client | None = None) -> list[HourlyObservation]:
    """Fetch all pages of the hourly series for the configured range.

    Results are merged across pages and sorted by timestamp, so the output
    does not depend on page interleaving. The date range end is exclusive;
    an empty range short-circuits without issuing requests.
    """
    if config.start > config.end:
        raise ConfigError("fetch range start is after end")
    key = config.resolved_key()
    if not key:
        raise AuthenticationError(f"no API key given (set {API_KEY_ENV} or pass api_key)")
    if config.start == config.end:
        return []

    owns_client = client is None
    client = client or httpx.Client()
    rows: list[HourlyObservation] = []
    try:
        offset = 0
        while True:
            page, total = _fetch_page(client, config, key, offset)
            rows.extend(page)
            offset += config.page_size
            if len(rows) >= total or not page:
                break
    finally:
        if owns_client:
            client.close()
    rows.sort(key=lambda obs: obs.timestamp)
    return rows


def observations_in_range(rows: Sequence[HourlyObservation], start: datetime, end: datetime) -> list[HourlyObservation]:
    """Inclusive-start / exclusive-end timestamp filter."""
    return [obs for obs in rows if start <= obs.timestamp < end]


def day_bounds(day: date) -> tuple[datetime, datetime]:
    """UTC [midnight, next midnight) bounds of a calendar date."""
    start = datetime(day.year, day.month, day.day, tzinfo=timezone.utc)
    return start, start + timedelta(days=1)
