import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from landmarking.data import (
    Measurement,
    Subject,
    build_landmark,
    load_dataset,
    locf,
    write_dataset,
)
from landmarking.errors import DataError, EmptyDatasetError


def write(tmp_path, longitudinal, survival):
    lp, sp = tmp_path / "long.csv", tmp_path / "surv.csv"
    lp.write_text(longitudinal)
    sp.write_text(survival)
    return lp, sp


def test_load_maps_fields(tmp_path):
    lp, sp = write(tmp_path, "id,time,value\np1,0.1,70\np1,1.0,75.5\n", "id,survtime,status,arm\np1,4.2,1,0\n")
    (sub,) = load_dataset(lp, sp)
    assert sub.id == "p1" and sub.event_time == 4.2 and sub.status == 1 and sub.arm == 0
    assert [m.time for m in sub.measurements] == [0.1, 1.0]
    assert [m.value for m in sub.measurements] == [70.0, 75.5]


def test_empty_longitudinal_file_is_accepted(tmp_path):
    lp, sp = write(tmp_path, "id,time,value\n", "id,survtime,status,arm\na,2,0,1\nb,3,1,0\n")
    subs = load_dataset(lp, sp)
    assert [s.id for s in subs] == ["a", "b"]
    assert all(len(s.measurements) == 0 for s in subs)
    with pytest.raises(EmptyDatasetError):
        build_landmark(subs, 1.0, 1.0)


def test_comment_lines_and_line_numbers(tmp_path):
    lp, sp = write(tmp_path, "# produced by a script\nid,time,value\np1,0,x\n", "id,survtime,status,arm\np1,4,1,0\n")
    with pytest.raises(DataError, match=r"long.csv:3"):
        load_dataset(lp, sp)


@pytest.mark.parametrize("surv, match", [
    ("id,survtime,status,arm\np1,4,2,0\n", "status and arm"),
    ("id,survtime,status,arm\np1,4,1,0\np1,5,1,0\n", "duplicate survival row"),
    ("id,survtime,status\np1,4,1\n", "missing columns"),
    ("id,survtime,status,arm\np1,nan,1,0\n", "not finite"),
])
def test_survival_file_errors(tmp_path, surv, match):
    lp, sp = write(tmp_path, "id,time,value\n", surv)
    with pytest.raises(DataError, match=match):
        load_dataset(lp, sp)


def test_measurement_after_event_names_subject(tmp_path):
    lp, sp = write(tmp_path, "id,time,value\np7,5.0,60\n", "id,survtime,status,arm\np7,4,1,0\n")
    with pytest.raises(DataError, match="p7"):
        load_dataset(lp, sp)


def test_orphan_measurement(tmp_path):
    lp, sp = write(tmp_path, "id,time,value\nzz,1,60\n", "id,survtime,status,arm\np1,4,1,0\n")
    with pytest.raises(DataError, match="zz"):
        load_dataset(lp, sp)


def test_duplicate_occasion(tmp_path):
    lp, sp = write(tmp_path, "id,time,value,occasion\np1,1,60,1\np1,1,61,1\n", "id,survtime,status,arm\np1,4,1,0\n")
    with pytest.raises(DataError, match="duplicate"):
        load_dataset(lp, sp)


def test_roundtrip(tmp_path):
    subs = [Subject("a", 1, 3.25, 1, (Measurement(0.0, 70.125, 1), Measurement(1.5, 1 / 3, 2))),
            Subject("b", 0, 9.0, 0, ())]
    lp, sp = tmp_path / "l.csv", tmp_path / "s.csv"
    write_dataset(subs, lp, sp, comment="hello")
    assert lp.read_text().startswith("# hello\n")
    assert load_dataset(lp, sp) == subs


def subject(event_time, status=1, ms=((0.0, 60.0),)):
    return Subject("x", 0, event_time, status, tuple(Measurement(t, v, k + 1) for k, (t, v) in enumerate(ms)))


def test_landmark_inside_window():
    lm = build_landmark([subject(4.0)], 3.0, 2.0)
    assert (lm.time[0], lm.status[0]) == (4.0, 1)
    assert lm.event_grid.tolist() == [4.0]


def test_landmark_administrative_censoring():
    lm = build_landmark([subject(6.0)], 3.0, 2.0)
    assert (lm.time[0], lm.status[0]) == (5.0, 0)
    assert lm.event_grid.size == 0


def test_landmark_excludes_not_at_risk():
    subs = [subject(2.9), Subject("y", 0, 4.0, 1, (Measurement(0.0, 1.0, 1),))]
    lm = build_landmark(subs, 3.0, 2.0)
    assert lm.ids == ("y",)


def test_landmark_requires_history():
    subs = [subject(4.0, ms=((3.5, 1.0),)), Subject("y", 0, 4.0, 1, (Measurement(0.0, 1.0, 1),))]
    assert build_landmark(subs, 3.0, 2.0).ids == ("y",)


def test_landmark_rejects_bad_window():
    with pytest.raises(DataError):
        build_landmark([subject(4.0)], 3.0, 0.0)


def test_locf_examples():
    assert locf(subject(9, ms=((1, 70), (2.5, 85))), 3) == 85
    assert locf(subject(9, ms=((0, 60),)), 3) == 60
    tie = Subject("t", 0, 9.0, 0, (Measurement(2.5, 90, 2), Measurement(2.5, 85, 1)))
    assert locf(tie, 3) == 90


def test_locf_empty_history():
    with pytest.raises(DataError):
        locf(subject(9, ms=((4, 70),)), 3)


def test_subject_validation():
    with pytest.raises(DataError):
        Subject("a", 2, 1.0, 1, ())
    with pytest.raises(DataError):
        Measurement(-1.0, 1.0, 1)
    with pytest.raises(DataError):
        Measurement(1.0, float("inf"), 1)


def test_without_baseline():
    sub = subject(9, ms=((0, 60), (1, 61)))
    assert [m.time for m in sub.without_baseline().measurements] == [1.0]


subjects_strategy = st.lists(
    st.tuples(
        st.floats(0.05, 10, allow_nan=False),
        st.integers(0, 1),
        st.lists(st.floats(0, 10, allow_nan=False), min_size=0, max_size=6),
    ),
    min_size=1, max_size=15,
)


@settings(max_examples=60, deadline=None)
@given(subjects_strategy, st.floats(0, 6), st.floats(0.1, 4))
def test_landmark_invariants(raw, s, w):
    subs = []
    for i, (t, d, times) in enumerate(raw):
        ms = tuple(Measurement(x, 50.0 + x, k + 1) for k, x in enumerate(sorted(set(times))) if x <= t)
        subs.append(Subject(f"p{i:02d}", 0, t, d, ms))
    try:
        lm = build_landmark(subs, s, w)
    except EmptyDatasetError:
        assert all(sub.event_time < s or not sub.history(s) for sub in subs)
        return
    assert list(lm.ids) == sorted(lm.ids)
    assert np.all(lm.time >= s) and np.all(lm.time <= s + w)
    for i, sub in enumerate(lm.subjects):
        assert all(m.time <= s for m in lm.history(i))
        assert lm.status[i] == int(sub.status == 1 and sub.event_time <= s + w)
    deaths = lm.time[(lm.status == 1) & (lm.time > s)]
    assert set(lm.event_grid.tolist()) == set(deaths.tolist())
