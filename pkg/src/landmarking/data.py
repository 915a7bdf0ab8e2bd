"""Subjects, CSV ingestion and landmark datasets.

Times are in years since randomization throughout.
"""

from __future__ import annotations

import csv
import math
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import DataError, EmptyDatasetError

LONGITUDINAL_HEADER = ("id", "time", "value")
SURVIVAL_HEADER = ("id", "survtime", "status", "arm")


@dataclass(frozen=True)
class Measurement:
    time: float
    value: float
    occasion_id: int

    def __post_init__(self):
        object.__setattr__(self, "time", float(self.time))
        object.__setattr__(self, "value", float(self.value))
        object.__setattr__(self, "occasion_id", int(self.occasion_id))
        if not (math.isfinite(self.time) and self.time >= 0):
            raise DataError(f"measurement time must be finite and >= 0, got {self.time}")
        if not math.isfinite(self.value):
            raise DataError(f"measurement value must be finite, got {self.value}")


@dataclass(frozen=True)
class Subject:
    """Survival outcome plus the ordered marker history of one individual."""

    id: str
    arm: int
    event_time: float
    status: int
    measurements: tuple[Measurement, ...] = ()
    times: np.ndarray = field(init=False, repr=False, compare=False)
    values: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "id", str(self.id))
        object.__setattr__(self, "event_time", float(self.event_time))
        if self.arm not in (0, 1):
            raise DataError(f"subject {self.id}: arm must be 0 or 1, got {self.arm}")
        if self.status not in (0, 1):
            raise DataError(f"subject {self.id}: status must be 0 or 1, got {self.status}")
        if not (math.isfinite(self.event_time) and self.event_time > 0):
            raise DataError(f"subject {self.id}: event_time must be positive, got {self.event_time}")
        object.__setattr__(self, "arm", int(self.arm))
        object.__setattr__(self, "status", int(self.status))
        ms = tuple(sorted(self.measurements, key=lambda m: (m.time, m.occasion_id)))
        seen = set()
        for m in ms:
            if m.occasion_id in seen:
                raise DataError(f"subject {self.id}: duplicate occasion {m.occasion_id}")
            seen.add(m.occasion_id)
            if m.time > self.event_time:
                raise DataError(
                    f"subject {self.id}: measurement at t={m.time} after event_time={self.event_time}"
                )
        object.__setattr__(self, "measurements", ms)
        t = np.array([m.time for m in ms], dtype=float)
        v = np.array([m.value for m in ms], dtype=float)
        t.setflags(write=False)
        v.setflags(write=False)
        object.__setattr__(self, "times", t)
        object.__setattr__(self, "values", v)

    def history(self, s: float) -> tuple[Measurement, ...]:
        """Measurements observed in the closed interval [0, s]."""
        return tuple(m for m in self.measurements if m.time <= s)

    def without_baseline(self) -> "Subject":
        """Copy with measurements at t = 0 removed."""
        return Subject(
            self.id, self.arm, self.event_time, self.status,
            tuple(m for m in self.measurements if m.time > 0),
        )


def locf(subject: Subject, s: float) -> float:
    """Last observation at or before ``s``; the later occasion wins a time tie."""
    hist = subject.history(s)
    if not hist:
        raise DataError(f"subject {subject.id}: no measurement at or before s={s}")
    return hist[-1].value


@dataclass(frozen=True)
class LandmarkDataset:
    """Subjects at risk at ``s`` with follow-up administratively censored at ``s + w``.

    ``time`` and ``status`` hold the truncated outcomes, aligned with ``subjects``.
    """

    s: float
    w: float
    subjects: tuple[Subject, ...]
    time: np.ndarray
    status: np.ndarray
    event_grid: np.ndarray

    @property
    def horizon(self) -> float:
        return self.s + self.w

    @property
    def ids(self) -> tuple[str, ...]:
        return tuple(sub.id for sub in self.subjects)

    def __len__(self) -> int:
        return len(self.subjects)

    def history(self, i: int) -> tuple[Measurement, ...]:
        return self.subjects[i].history(self.s)

    def index(self, subject_id: str) -> int:
        return self.ids.index(subject_id)


def build_landmark(subjects: Iterable[Subject], s: float, w: float) -> LandmarkDataset:
    if not (s >= 0 and w > 0):
        raise DataError(f"landmark requires s >= 0 and w > 0, got s={s}, w={w}")
    horizon = s + w
    kept = [sub for sub in subjects if sub.event_time >= s and len(sub.history(s)) > 0]
    if not kept:
        raise EmptyDatasetError(f"no subjects at risk with a measurement at s={s}")
    kept.sort(key=lambda sub: sub.id)
    orig_t = np.array([sub.event_time for sub in kept])
    orig_d = np.array([sub.status for sub in kept])
    time = np.minimum(orig_t, horizon)
    status = (orig_d * (orig_t <= horizon)).astype(int)
    deaths = time[(status == 1) & (time > s)]
    grid = np.unique(deaths)
    for arr in (time, status, grid):
        arr.setflags(write=False)
    return LandmarkDataset(s, w, tuple(kept), time, status, grid)


def _read_rows(path: Path, header: Sequence[str], required: Sequence[str]) -> list[tuple[int, dict]]:
    with open(path, newline="", encoding="utf-8") as fh:
        lines = fh.readlines()
    skip = 0
    while skip < len(lines) and lines[skip].startswith("#"):
        skip += 1
    reader = csv.DictReader(lines[skip:])
    if reader.fieldnames is None:
        return []
    missing = [c for c in required if c not in reader.fieldnames]
    if missing:
        raise DataError(f"{path}: missing columns {missing}; expected header {','.join(header)}")
    return [(skip + n + 2, row) for n, row in enumerate(reader)]


def _parse_float(value: str, path: Path, lineno: int, column: str) -> float:
    try:
        out = float(value)
    except (TypeError, ValueError):
        raise DataError(f"{path}:{lineno}: column {column!r} is not a number: {value!r}") from None
    if not math.isfinite(out):
        raise DataError(f"{path}:{lineno}: column {column!r} is not finite: {value!r}")
    return out


def load_dataset(longitudinal_file: str | Path, survival_file: str | Path) -> list[Subject]:
    """Read the two-file CSV schema into subjects sorted by id.

    The longitudinal file may carry an optional ``occasion`` column; without it
    occasions are numbered by time order (file order within equal times).
    """
    lpath, spath = Path(longitudinal_file), Path(survival_file)
    surv = {}
    for lineno, row in _read_rows(spath, SURVIVAL_HEADER, SURVIVAL_HEADER):
        sid = row["id"]
        if sid in surv:
            raise DataError(f"{spath}:{lineno}: duplicate survival row for id {sid!r}")
        t = _parse_float(row["survtime"], spath, lineno, "survtime")
        status = _parse_float(row["status"], spath, lineno, "status")
        arm = _parse_float(row["arm"], spath, lineno, "arm")
        if status not in (0, 1) or arm not in (0, 1):
            raise DataError(f"{spath}:{lineno}: status and arm must be 0 or 1")
        surv[sid] = (t, int(status), int(arm))

    raw = defaultdict(list)
    for lineno, row in _read_rows(lpath, LONGITUDINAL_HEADER, LONGITUDINAL_HEADER):
        sid = row["id"]
        if sid not in surv:
            raise DataError(f"{lpath}:{lineno}: id {sid!r} has no survival record")
        t = _parse_float(row["time"], lpath, lineno, "time")
        if t < 0:
            raise DataError(f"{lpath}:{lineno}: negative time {t}")
        v = _parse_float(row["value"], lpath, lineno, "value")
        occ = row.get("occasion")
        occ = int(_parse_float(occ, lpath, lineno, "occasion")) if occ not in (None, "") else None
        raw[sid].append((t, v, occ, lineno))

    subjects = []
    for sid in sorted(surv):
        t_event, status, arm = surv[sid]
        rows = sorted(raw.get(sid, []), key=lambda r: (r[0], r[3]))
        seen = set()
        ms = []
        for k, (t, v, occ, lineno) in enumerate(rows):
            occ = k + 1 if occ is None else occ
            if (t, occ) in seen:
                raise DataError(f"{lpath}:{lineno}: duplicate (id, time, occasion) = ({sid}, {t}, {occ})")
            seen.add((t, occ))
            ms.append(Measurement(t, v, occ))
        subjects.append(Subject(sid, arm, t_event, status, tuple(ms)))
    return subjects


def write_dataset(subjects: Iterable[Subject], longitudinal_file: str | Path,
                  survival_file: str | Path, comment: str | None = None) -> None:
    subjects = list(subjects)
    with open(longitudinal_file, "w", newline="", encoding="utf-8") as fh:
        if comment:
            fh.write(f"# {comment}\n")
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(LONGITUDINAL_HEADER)
        for sub in subjects:
            for m in sub.measurements:
                wr.writerow([sub.id, repr(m.time), repr(m.value)])
    with open(survival_file, "w", newline="", encoding="utf-8") as fh:
        if comment:
            fh.write(f"# {comment}\n")
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(SURVIVAL_HEADER)
        for sub in subjects:
            wr.writerow([sub.id, repr(sub.event_time), sub.status, sub.arm])
