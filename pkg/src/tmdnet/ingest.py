"""Parsing of PLT trajectories and label files; trip and tripleg splitting."""
from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass
from datetime import datetime, timezone
from itertools import groupby

from .errors import ParseError, ValidationError

log = logging.getLogger(__name__)

TRIP_GAP = 1200.0
PLT_HEADER_LINES = 6


@dataclass(frozen=True)
class GpsPoint:
    latitude: float
    longitude: float
    timestamp: float
    mode: str | None = None

    def __post_init__(self):
        if not -90.0 <= self.latitude <= 90.0:
            raise ValidationError(f"latitude {self.latitude} outside [-90, 90]")
        if not -180.0 <= self.longitude <= 180.0:
            raise ValidationError(f"longitude {self.longitude} outside [-180, 180]")
        if self.timestamp != self.timestamp or self.timestamp in (float("inf"), float("-inf")):
            raise ValidationError("timestamp must be finite")


@dataclass(frozen=True)
class LabelSpan:
    start_time: float
    end_time: float
    mode: str

    def __post_init__(self):
        if not self.start_time < self.end_time:
            raise ValidationError(f"label span ends ({self.end_time}) before it starts ({self.start_time})")


@dataclass(frozen=True)
class Trip:
    points: tuple


@dataclass(frozen=True)
class Tripleg:
    points: tuple
    mode: str


def _epoch(text: str, fmt: str) -> float:
    return datetime.strptime(text, fmt).replace(tzinfo=timezone.utc).timestamp()


def parse_trajectory_file(content: str) -> list[GpsPoint]:
    """Parse a PLT file: 6 header lines, then ``lat,lon,flag,alt,days,date,time`` rows.

    Repeated timestamps keep the first fix only.
    """
    lines = content.splitlines()
    points: list[GpsPoint] = []
    last_t = None
    for lineno, line in enumerate(lines[PLT_HEADER_LINES:], start=PLT_HEADER_LINES + 1):
        if not line.strip():
            continue
        fields = line.strip().split(",")
        if len(fields) != 7:
            raise ParseError(f"expected 7 fields, found {len(fields)}", lineno)
        try:
            lat, lon = float(fields[0]), float(fields[1])
            t = _epoch(f"{fields[5].strip()} {fields[6].strip()}", "%Y-%m-%d %H:%M:%S")
        except ValueError as exc:
            raise ParseError(str(exc), lineno) from None
        try:
            point = GpsPoint(lat, lon, t)
        except ValidationError as exc:
            raise ValidationError(f"line {lineno}: {exc}") from None
        if last_t is not None and t == last_t:
            log.info("line %d: duplicate timestamp dropped", lineno)
            continue
        points.append(point)
        last_t = t
    return points


def parse_labels_file(content: str) -> list[LabelSpan]:
    """Parse a tab-separated ``start, end, mode`` label file with one header line."""
    spans = []
    rows = csv.reader(io.StringIO(content), delimiter="\t")
    for lineno, row in enumerate(rows, start=1):
        if lineno == 1 or not any(cell.strip() for cell in row):
            continue
        if len(row) != 3:
            raise ParseError(f"expected 3 tab-separated columns, found {len(row)}", lineno)
        try:
            start = _epoch(row[0].strip(), "%Y/%m/%d %H:%M:%S")
            end = _epoch(row[1].strip(), "%Y/%m/%d %H:%M:%S")
        except ValueError as exc:
            raise ParseError(str(exc), lineno) from None
        try:
            spans.append(LabelSpan(start, end, row[2].strip().lower()))
        except ValidationError as exc:
            raise ValidationError(f"line {lineno}: {exc}") from None
    return spans


def attach_labels(points: list[GpsPoint], spans: list[LabelSpan]) -> list[GpsPoint]:
    """Label each point by the half-open span [start, end) holding it; drop the rest."""
    ordered = sorted(spans, key=lambda s: s.start_time)
    for a, b in zip(ordered, ordered[1:]):
        if b.start_time < a.end_time:
            raise ValidationError(f"overlapping label spans: {a} and {b}")
    out = []
    i = 0
    for p in points:
        while i < len(ordered) and ordered[i].end_time <= p.timestamp:
            i += 1
        if i < len(ordered) and ordered[i].start_time <= p.timestamp:
            out.append(GpsPoint(p.latitude, p.longitude, p.timestamp, ordered[i].mode))
    return out


def split_trips(points: list[GpsPoint], trip_gap: float = TRIP_GAP) -> list[Trip]:
    """Cut the stream wherever consecutive points are ``trip_gap`` seconds or more apart."""
    trips = []
    current: list[GpsPoint] = []
    for p in points:
        if current and p.timestamp - current[-1].timestamp >= trip_gap:
            trips.append(Trip(tuple(current)))
            current = []
        current.append(p)
    if current:
        trips.append(Trip(tuple(current)))
    return trips


def split_triplegs(trip: Trip) -> list[Tripleg]:
    return [Tripleg(tuple(run), mode) for mode, run in
            ((m, list(g)) for m, g in groupby(trip.points, key=lambda p: p.mode))]
