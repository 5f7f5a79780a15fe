import json
import math
from datetime import datetime, timedelta

import numpy as np
import pytest

from velopref.trajectories import (FilterRules, RawTrip, Trajectory, TripFormatError, filter_trips,
                                   load_trajectories, pad_and_mask, parse_trips, save_trajectories,
                                   to_trajectory, trip_stats)
from velopref.world import Action, WorldError

from conftest import make_world

HEADER = "order_id,bike_id,start_time,end_time,points\n"
TABLE_ROW = ('1628190,AA659656D9F8BD8F7B20,2017-11-07 08:16:41.0,2017-11-07 08:31:07.0,'
             '"114.267402,22.709543;1510013805840#114.2675,22.7096;1510013808840"\n')


def test_parse_table_record(tmp_path):
    path = tmp_path / "trips.csv"
    path.write_text(HEADER + TABLE_ROW)
    res = parse_trips(path)
    assert res.errors == []
    (trip,) = res.trips
    assert trip.order_id == "1628190"
    assert trip.start_time == datetime(2017, 11, 7, 8, 16, 41)
    assert trip.end_time == datetime(2017, 11, 7, 8, 31, 7)
    assert trip.points[0] == (114.267402, 22.709543, 1510013805.84)


def test_parse_empty_file(tmp_path):
    path = tmp_path / "empty.csv"
    path.write_text("")
    res = parse_trips(path)
    assert res.trips == [] and res.errors == []


def test_parse_reports_bad_records_with_line_numbers(tmp_path):
    path = tmp_path / "trips.csv"
    one_point = '7,x,2017-11-07 08:00:00,2017-11-07 08:10:00,"114.2,22.7;1510013805840"\n'
    garbage = '8,x,not-a-time,2017-11-07 08:10:00,"114.2,22.7;1#114.3,22.7;2"\n'
    path.write_text(HEADER + TABLE_ROW + one_point + garbage)
    res = parse_trips(path)
    assert len(res.trips) == 1
    assert res.errors[0] == (3, "too few points")
    assert res.errors[1][0] == 4


def test_parse_json_and_schema_errors(tmp_path):
    path = tmp_path / "trips.json"
    path.write_text(json.dumps([
        {"order_id": 1, "start_time": "2017-11-07 08:00:00", "end_time": None,
         "points": [[114.2, 22.7, 0], [114.21, 22.7, 60000]]},
        {"order_id": 2},
    ]))
    res = parse_trips(path)
    assert [t.order_id for t in res.trips] == ["1"]
    assert res.errors[0][0] == 2
    bad = tmp_path / "bad.csv"
    bad.write_text("a,b\n1,2\n")
    with pytest.raises(TripFormatError):
        parse_trips(bad)


def _traj(n_cells, start=datetime(2017, 11, 7, 9, 0), minutes=10.0, cell_size=100.0):
    world = make_world(1, max(n_cells, 2), cell_size=cell_size)
    cells = [(0, c) for c in range(n_cells)]
    return to_trajectory(cells, world, start_time=start,
                         end_time=start + timedelta(minutes=minutes))


def test_segment_threshold():
    kept, report = filter_trips([_traj(5), _traj(6)])
    assert [t.segment_count for t in kept] == [6]
    assert report == {"too_few_segments": 1}


def test_over_speed_rejected():
    # 10 cells of 1 km in 7.5 minutes is 80 km/h
    fast = _traj(11, minutes=7.5, cell_size=1000.0)
    kept, report = filter_trips([fast])
    assert kept == [] and report == {"too_fast": 1}
    assert not filter_trips([fast], FilterRules(max_speed_kmh=100))[1]


def test_weekend_and_night_rejected():
    sat = _traj(8, start=datetime(2017, 11, 11, 9, 0))
    night = _traj(8, start=datetime(2017, 11, 7, 22, 0))
    _, report = filter_trips([sat, night])
    assert report == {"outside_daylight": 1, "weekend": 1}


def test_filter_empty():
    assert filter_trips([]) == ([], {})


def test_filter_raw_trip_speed():
    # two points 1 km apart (along a meridian) in 60 s
    lat2 = 22.7 + 1000.0 / 111_195.0
    trip = RawTrip("1", datetime(2017, 11, 7, 9), datetime(2017, 11, 7, 9, 1),
                   [(114.0, 22.7, 0.0), (114.0, lat2, 60.0)])
    assert filter_trips([trip])[1] == {"too_fast": 1}


def test_to_trajectory_examples():
    w = make_world(3, 3)
    t = to_trajectory([(1, 1), (1, 1)], w)
    assert t.actions == [Action.ST]
    t = to_trajectory([(1, 1), (1, 2), (0, 2)], w)
    assert t.actions == [Action.R, Action.F]
    assert t.length_m == 200.0
    with pytest.raises(WorldError):
        to_trajectory([(0, 0), (2, 2)], w)


def test_pad_and_mask_examples():
    w = make_world(1, 6)
    a = to_trajectory([(0, 0), (0, 1), (0, 2), (0, 3)], w)
    b = to_trajectory([(0, 5), (0, 4), (0, 3), (0, 2)], w)
    batch = pad_and_mask([a, b], w)
    assert batch.length == 3 and batch.mask.all()
    c = to_trajectory([(0, 0), (0, 1), (0, 2)], w)
    d = to_trajectory([(0, 0), (0, 1), (0, 2), (0, 3), (0, 4)], w)
    batch = pad_and_mask([c, d], w)
    assert batch.length == 4
    assert batch.mask[0].tolist() == [True, True, False, False]
    assert np.all(batch.features[0, 2:] == 0) and np.all(batch.states[0, 2:] == -1)
    assert batch.goals.tolist() == [2, 4]


def test_trajectory_roundtrip(tmp_path):
    w = make_world(3, 4)
    t = to_trajectory([(0, 0), (1, 1), (2, 2), (2, 3)], w, order_id="abc",
                      start_time=datetime(2017, 11, 7, 8, 16, 41), terminated=False)
    save_trajectories([t], w, tmp_path / "t.json")
    (back,) = load_trajectories(tmp_path / "t.json", w)
    assert back.states == t.states and back.actions == t.actions
    assert back.order_id == "abc" and back.terminated is False
    assert back.start_time == t.start_time


def test_validate_detects_inconsistent_steps():
    w = make_world(2, 2)
    Trajectory([0, 1], [Action.R]).validate(w)
    with pytest.raises(WorldError):
        Trajectory([0, 1], [Action.B]).validate(w)


def test_trip_stats_single_distance():
    w = make_world(1, 5)
    t = to_trajectory([(0, 0), (0, 1), (0, 2), (0, 3)], w)
    stats = trip_stats([t], w)
    assert stats.manhattan_m == [300.0]
    assert stats.log10_distance[0] == pytest.approx(2.4771, abs=1e-4)


def test_trip_stats_log_mean():
    w = make_world(1, 11)
    t1 = to_trajectory([(0, 0), (0, 1)], w)
    t2 = to_trajectory([(0, c) for c in range(11)], w)
    stats = trip_stats([t1, t2], w)
    assert stats.by_label["all"]["log_mean"] == pytest.approx(2.5)
    assert sum(stats.decision_histogram.values()) == 2


def test_trip_stats_zero_distance_warns():
    w = make_world(1, 3)
    loop = to_trajectory([(0, 0), (0, 1), (0, 0)], w)
    with pytest.warns(UserWarning, match="zero OD distance"):
        stats = trip_stats([loop], w)
    assert stats.manhattan_m == [0.0] and stats.zero_distance_trips == 1
    assert stats.by_label["all"]["log_mean"] is None


def test_trip_stats_labels():
    w = make_world(1, 5)
    wk = to_trajectory([(0, 0), (0, 1)], w, start_time=datetime(2017, 11, 7, 9))
    we = to_trajectory([(0, 0), (0, 1), (0, 2)], w, start_time=datetime(2017, 11, 11, 9))
    stats = trip_stats([wk, we], w)
    assert set(stats.by_label) == {"workday", "weekend"}
    assert stats.by_label["weekend"]["log_mean"] == pytest.approx(math.log10(200))
