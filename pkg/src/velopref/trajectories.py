"""Trip records, filtering, state-action trajectories, padded batches and trip statistics."""
from __future__ import annotations

import csv
import json
import math
from collections import Counter
import warnings
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from .world import Action, World, WorldError, action_for_offset

TRAJECTORY_FORMAT = "velopref.trajectories/1"
EARTH_RADIUS_M = 6_371_008.8


class TripFormatError(ValueError):
    pass


@dataclass
class RawTrip:
    order_id: str
    start_time: datetime | None
    end_time: datetime | None
    points: list[tuple[float, float, float]]   # (lon, lat, epoch seconds)


@dataclass
class Trajectory:
    """States s_0..s_T and actions a_0..a_{T-1}; step t is (states[t], actions[t])."""

    states: list[int]
    actions: list[int]
    order_id: str = ""
    terminated: bool = True
    start_time: datetime | None = None
    end_time: datetime | None = None
    length_m: float | None = None
    segments: list | None = None

    @property
    def origin(self) -> int:
        return self.states[0]

    @property
    def destination(self) -> int:
        return self.states[-1]

    @property
    def n_steps(self) -> int:
        return len(self.actions)

    @property
    def segment_count(self) -> int:
        """Distinct cells visited (the decision-frequency measure)."""
        return len(set(self.states))

    def steps(self):
        return list(zip(self.states[:-1], self.actions))

    def validate(self, world: World) -> None:
        if len(self.states) != len(self.actions) + 1:
            raise WorldError("trajectory needs exactly one more state than actions")
        for s, a, s2 in zip(self.states[:-1], self.actions, self.states[1:]):
            if world.next_state[s, a] != s2:
                raise WorldError(f"step ({s}, {Action(a).name}) does not lead to {s2}")


@dataclass
class TrajectoryBatch:
    states: np.ndarray     # (N, L) state per step, -1 on padding
    actions: np.ndarray    # (N, L), -1 on padding
    features: np.ndarray   # (N, L, d), all-zero on padding
    mask: np.ndarray       # (N, L) true on real steps
    origins: np.ndarray
    goals: np.ndarray

    @property
    def n_trajectories(self) -> int:
        return len(self.goals)

    @property
    def length(self) -> int:
        return self.states.shape[1]


# ---------------------------------------------------------------------------
# parsing

def parse_time(text: str | None) -> datetime | None:
    if text is None or str(text).strip() == "":
        return None
    text = str(text).strip()
    for fmt in ("%Y-%m-%d %H:%M:%S.%f", "%Y-%m-%d %H:%M:%S", "%Y-%m-%dT%H:%M:%S.%f", "%Y-%m-%dT%H:%M:%S"):
        try:
            return datetime.strptime(text, fmt)
        except ValueError:
            pass
    raise TripFormatError(f"unrecognized timestamp {text!r}")


def parse_points(text: str) -> list[tuple[float, float, float]]:
    """Decode 'lon,lat;epoch_ms#lon,lat;epoch_ms#...' into (lon, lat, seconds) tuples."""
    points = []
    for chunk in text.split("#"):
        chunk = chunk.strip()
        if not chunk:
            continue
        coords, _, stamp = chunk.partition(";")
        lon, lat = (float(v) for v in coords.split(","))
        if not stamp.strip():
            raise TripFormatError(f"point {chunk!r} has no timestamp")
        points.append((lon, lat, float(stamp) / 1000.0))
    return points


def _make_trip(rec: dict) -> RawTrip:
    pts = rec["points"]
    points = parse_points(pts) if isinstance(pts, str) else [
        (float(p[0]), float(p[1]), float(p[2]) / 1000.0) for p in pts]
    if len(points) < 2:
        raise TripFormatError("too few points")
    if any(b[2] < a[2] for a, b in zip(points, points[1:])):
        raise TripFormatError("points are not time-ordered")
    return RawTrip(str(rec["order_id"]), parse_time(rec.get("start_time")),
                   parse_time(rec.get("end_time")), points)


@dataclass
class ParseResult:
    trips: list[RawTrip]
    errors: list[tuple[int, str]] = field(default_factory=list)   # (line or record number, reason)


REQUIRED_FIELDS = ("order_id", "start_time", "end_time", "points")


def parse_trips(path, format: str | None = None) -> ParseResult:
    """Read raw trip records from CSV or JSON; malformed records are reported, not dropped silently."""
    path = Path(path)
    if format is None:
        format = "json" if path.suffix.lower() == ".json" else "csv"
    text = path.read_text()
    result = ParseResult([])
    if not text.strip():
        return result
    if format == "csv":
        reader = csv.DictReader(text.splitlines())
        missing = [f for f in REQUIRED_FIELDS if f not in (reader.fieldnames or [])]
        if missing:
            raise TripFormatError(f"CSV header is missing {missing}")
        records = ((reader.line_num, rec) for rec in reader)
    elif format == "json":
        doc = json.loads(text)
        if not isinstance(doc, list):
            raise TripFormatError("JSON trip file must hold an array of records")
        records = enumerate(doc, start=1)
    else:
        raise TripFormatError(f"unknown format {format!r}")
    for line, rec in records:
        try:
            if not isinstance(rec, dict) or any(f not in rec for f in REQUIRED_FIELDS):
                raise TripFormatError("record does not match the trip schema")
            result.trips.append(_make_trip(rec))
        except (TripFormatError, ValueError, TypeError) as exc:
            result.errors.append((line, str(exc)))
    return result


# ---------------------------------------------------------------------------
# filtering

def haversine(lon1, lat1, lon2, lat2) -> float:
    p1, p2 = math.radians(lat1), math.radians(lat2)
    dp, dl = p2 - p1, math.radians(lon2 - lon1)
    h = math.sin(dp / 2) ** 2 + math.cos(p1) * math.cos(p2) * math.sin(dl / 2) ** 2
    return 2 * EARTH_RADIUS_M * math.asin(math.sqrt(min(1.0, h)))


@dataclass
class FilterRules:
    min_segments: int = 6
    day_start_hour: float = 7.0
    day_end_hour: float = 19.0
    weekdays_only: bool = True
    max_speed_kmh: float = 30.0
    min_speed_kmh: float = 0.0
    min_duration_s: float = 60.0
    max_duration_s: float = 7200.0
    reject_coincident_od: bool = True
    od_min_distance_m: float = 1.0


def _utc(seconds: float) -> datetime:
    return datetime.fromtimestamp(seconds, tz=timezone.utc).replace(tzinfo=None)


def _trip_times(trip):
    if isinstance(trip, RawTrip):
        start = trip.start_time or _utc(trip.points[0][2])
        end = trip.end_time or _utc(trip.points[-1][2])
        return start, end
    return trip.start_time, trip.end_time


def _path_length(trip) -> float | None:
    if isinstance(trip, RawTrip):
        return sum(haversine(a[0], a[1], b[0], b[1]) for a, b in zip(trip.points, trip.points[1:]))
    return trip.length_m


def rejection_reason(trip, rules: FilterRules) -> str | None:
    if isinstance(trip, Trajectory):
        if rules.reject_coincident_od and trip.origin == trip.destination:
            return "coincident_od"
        if trip.segment_count < rules.min_segments:
            return "too_few_segments"
    elif rules.reject_coincident_od:
        a, b = trip.points[0], trip.points[-1]
        if haversine(a[0], a[1], b[0], b[1]) < rules.od_min_distance_m:
            return "coincident_od"
    start, end = _trip_times(trip)
    if start is not None:
        if rules.weekdays_only and start.weekday() >= 5:
            return "weekend"
        hour = start.hour + start.minute / 60 + start.second / 3600
        if not rules.day_start_hour <= hour < rules.day_end_hour:
            return "outside_daylight"
    if start is not None and end is not None:
        duration = (end - start).total_seconds()
        if duration < rules.min_duration_s:
            return "too_short"
        if duration > rules.max_duration_s:
            return "too_long"
        length = _path_length(trip)
        if length is not None and duration > 0:
            speed = length / duration * 3.6
            if speed > rules.max_speed_kmh:
                return "too_fast"
            if speed < rules.min_speed_kmh:
                return "too_slow"
    return None


def filter_trips(trips, rules: FilterRules | None = None):
    """Keep trips passing every rule; returns (kept, rejection counts per reason)."""
    rules = rules or FilterRules()
    kept, report = [], Counter()
    for trip in trips:
        reason = rejection_reason(trip, rules)
        if reason is None:
            kept.append(trip)
        else:
            report[reason] += 1
    return kept, dict(sorted(report.items()))


# ---------------------------------------------------------------------------
# conversion, padding

def to_trajectory(cells, world: World, **meta) -> Trajectory:
    """Turn a sequence of adjacent-or-equal (row, col) cells into a state-action trajectory."""
    cells = [tuple(int(v) for v in c) for c in cells]
    if not cells:
        raise WorldError("empty cell sequence")
    states = [world.state_of(*c) for c in cells]
    actions = [int(action_for_offset(b[0] - a[0], b[1] - a[1])) for a, b in zip(cells, cells[1:])]
    lengths = world.move_lengths()
    meta.setdefault("length_m", float(sum(lengths[a] for a in actions)))
    return Trajectory(states, actions, **meta)


def trajectory_cells(traj: Trajectory, world: World) -> list[tuple[int, int]]:
    return [world.cell_of(s) for s in traj.states]


def pad_and_mask(trajs, world: World) -> TrajectoryBatch:
    """Zero-pad every trajectory to the longest step count and mask the padding."""
    trajs = list(trajs)
    if not trajs:
        raise ValueError("cannot batch an empty trajectory list")
    n, L, d = len(trajs), max(t.n_steps for t in trajs), world.feature_dim
    states = np.full((n, L), -1, dtype=np.int64)
    actions = np.full((n, L), -1, dtype=np.int64)
    mask = np.zeros((n, L), dtype=bool)
    for i, t in enumerate(trajs):
        k = t.n_steps
        states[i, :k] = t.states[:-1]
        actions[i, :k] = t.actions
        mask[i, :k] = True
    features = np.zeros((n, L, d))
    features[mask] = world.features[states[mask]]
    origins = np.array([t.origin for t in trajs], dtype=np.int64)
    goals = np.array([t.destination for t in trajs], dtype=np.int64)
    return TrajectoryBatch(states, actions, features, mask, origins, goals)


# ---------------------------------------------------------------------------
# serialization

def _time_str(t: datetime | None):
    return None if t is None else t.strftime("%Y-%m-%d %H:%M:%S")


def trajectory_to_dict(traj: Trajectory, world: World) -> dict:
    cells = trajectory_cells(traj, world)
    doc = {
        "order_id": traj.order_id,
        "od": [list(cells[0]), list(cells[-1])],
        "cells": [list(c) for c in cells],
        "actions": [Action(a).name for a in traj.actions],
        "terminated": traj.terminated,
    }
    if traj.start_time is not None:
        doc["start_time"] = _time_str(traj.start_time)
    if traj.end_time is not None:
        doc["end_time"] = _time_str(traj.end_time)
    if traj.segments is not None:
        doc["segments"] = traj.segments
    return doc


def trajectory_from_dict(doc: dict, world: World) -> Trajectory:
    traj = to_trajectory(doc["cells"], world, order_id=str(doc.get("order_id", "")),
                         terminated=bool(doc.get("terminated", True)),
                         start_time=parse_time(doc.get("start_time")),
                         end_time=parse_time(doc.get("end_time")),
                         segments=doc.get("segments"))
    if "actions" in doc and [Action(a).name for a in traj.actions] != list(doc["actions"]):
        raise WorldError(f"trajectory {traj.order_id!r}: actions disagree with cells")
    return traj


def save_trajectories(trajs, world: World, path, **extra) -> None:
    doc = {"format": TRAJECTORY_FORMAT, **extra,
           "trajectories": [trajectory_to_dict(t, world) for t in trajs]}
    Path(path).write_text(json.dumps(doc, separators=(",", ":")))


def load_trajectories(path, world: World) -> list[Trajectory]:
    doc = json.loads(Path(path).read_text())
    if doc.get("format") != TRAJECTORY_FORMAT:
        raise TripFormatError(f"unsupported trajectory format {doc.get('format')!r}")
    return [trajectory_from_dict(t, world) for t in doc["trajectories"]]


# ---------------------------------------------------------------------------
# trip statistics

@dataclass
class TripStats:
    manhattan_m: list[float]
    log10_distance: list[float | None]
    labels: list[str]
    by_label: dict[str, dict]
    decision_histogram: dict[int, int]
    zero_distance_trips: int

    def to_dict(self) -> dict:
        return {
            "units": {"manhattan": "meters", "log_distance": "log10(meters)"},
            "by_label": self.by_label,
            "decision_histogram": {str(k): v for k, v in self.decision_histogram.items()},
            "zero_distance_trips": self.zero_distance_trips,
            "trips": [{"label": lab, "manhattan_m": m, "log10_distance": lg}
                      for lab, m, lg in zip(self.labels, self.manhattan_m, self.log10_distance)],
        }


def period_label(traj: Trajectory) -> str:
    if traj.start_time is None:
        return "all"
    return "weekend" if traj.start_time.weekday() >= 5 else "workday"


def trip_stats(trajs, world: World, labels=None) -> TripStats:
    """Manhattan OD distances, log10 summaries per label, decision-frequency histogram."""
    trajs = list(trajs)
    labels = [period_label(t) for t in trajs] if labels is None else list(labels)
    if len(labels) != len(trajs):
        raise ValueError("one label per trip is required")
    dist, logs = [], []
    for t in trajs:
        (r0, c0), (r1, c1) = world.cell_of(t.origin), world.cell_of(t.destination)
        m = (abs(r1 - r0) + abs(c1 - c0)) * world.cell_size
        dist.append(float(m))
        logs.append(math.log10(m) if m > 0 else None)
    zero = sum(v is None for v in logs)
    if zero:
        warnings.warn(f"{zero} trips have zero OD distance and are excluded from log statistics")
    by_label = {}
    for lab in sorted(set(labels)):
        vals = np.array([lg for lg, l2 in zip(logs, labels) if l2 == lab and lg is not None])
        by_label[lab] = {
            "trips": sum(l2 == lab for l2 in labels),
            "log_mean": float(vals.mean()) if vals.size else None,
            "log_variance": float(vals.var()) if vals.size else None,
            "mean_manhattan_m": float(np.mean([m for m, l2 in zip(dist, labels) if l2 == lab])),
        }
    hist = Counter(t.segment_count for t in trajs)
    return TripStats(dist, logs, labels, by_label, dict(sorted(hist.items())), zero)
