"""Behaviour records, trajectory tensors, splits, pairs and synthetic data.

File formats:

* ``records.jsonl``: one JSON object per line with integer fields
  ``student``, ``day``, ``slot``, ``location``.
* ``labels.csv``: header ``student,major,gpa``.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from itertools import combinations
from pathlib import Path
from typing import Iterable, Iterator, Mapping, Sequence

import numpy as np

from .ranking import PairSample, Ranking, true_ranking

# Location order of the reference campus dataset.
LOCATIONS = (
    "laundry_room", "bathroom", "teaching_building", "printing_center",
    "office_building", "library", "cafeteria", "school_bus", "supermarket",
    "hospital", "card_center", "dormitory",
)
STUDY_LOCATIONS = (2, 3, 5)


@dataclass(frozen=True)
class DatasetDims:
    n_d: int = 30
    n_t: int = 18
    n_l: int = 12

    def __post_init__(self):
        for name in ("n_d", "n_t", "n_l"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")

    @property
    def shape(self) -> tuple[int, int, int]:
        return (self.n_d, self.n_t, self.n_l)


@dataclass(frozen=True)
class BehaviorRecord:
    student: int
    day: int
    slot: int
    location: int


@dataclass(frozen=True)
class StudentLabel:
    student: int
    major: str
    gpa: float


# encoding -------------------------------------------------------------------------

def encode_trajectory(records: Iterable[BehaviorRecord], dims: DatasetDims) -> np.ndarray:
    """Binary (day, slot, location) tensor: 1 where the student was seen at least once."""
    x = np.zeros(dims.shape)
    for rec in records:
        if not (0 <= rec.day < dims.n_d and 0 <= rec.slot < dims.n_t
                and 0 <= rec.location < dims.n_l):
            raise ValueError(f"record {rec} is outside dimensions {dims.shape}")
        x[rec.day, rec.slot, rec.location] = 1.0
    return x


def encode_all(records: Iterable[BehaviorRecord], students: Iterable[int],
               dims: DatasetDims) -> dict[int, np.ndarray]:
    by_student: dict[int, list[BehaviorRecord]] = {s: [] for s in students}
    for rec in records:
        if rec.student in by_student:
            by_student[rec.student].append(rec)
    return {s: encode_trajectory(recs, dims) for s, recs in by_student.items()}


# splits and pairs --------------------------------------------------------------------

@dataclass
class DatasetSplit:
    """Per-major student ids for each split."""

    train: dict[str, list[int]] = field(default_factory=dict)
    val: dict[str, list[int]] = field(default_factory=dict)
    test: dict[str, list[int]] = field(default_factory=dict)

    def part(self, name: str) -> dict[str, list[int]]:
        if name not in ("train", "val", "test"):
            raise ValueError(f"unknown split {name!r}")
        return getattr(self, name)


def split_by_major(labels: Sequence[StudentLabel],
                   fractions: tuple[float, float, float] = (0.7, 0.1, 0.2),
                   seed: int = 0) -> DatasetSplit:
    """Random per-major partition: floor(0.7 n) train, floor(0.1 n) val, rest test."""
    if len(fractions) != 3 or abs(sum(fractions) - 1.0) > 1e-9 or min(fractions) < 0:
        raise ValueError(f"fractions must be three non-negative numbers summing to 1, got {fractions}")
    majors: dict[str, list[int]] = {}
    for lab in labels:
        majors.setdefault(lab.major, []).append(lab.student)
    rng = np.random.default_rng(seed)
    split = DatasetSplit()
    for major in sorted(majors):
        ids = sorted(majors[major])
        n = len(ids)
        if n < 5:
            raise ValueError(f"major {major!r} has {n} students; at least 5 are needed")
        perm = [ids[i] for i in rng.permutation(n)]
        # tolerance guards against products like 0.7 * 10 landing just below 7
        n_train = math.floor(fractions[0] * n + 1e-9)
        n_val = math.floor(fractions[1] * n + 1e-9)
        split.train[major] = sorted(perm[:n_train])
        split.val[major] = sorted(perm[n_train:n_train + n_val])
        split.test[major] = sorted(perm[n_train + n_val:])
    return split


def build_pairs(students: Sequence[int], truth: Ranking) -> list[PairSample]:
    """Every unordered pair once, ``u < v``, labelled by the true ranking."""
    ids = sorted(students)
    for s in ids:
        if s not in truth:
            raise KeyError(f"student {s} is not in the ranking")
    return [PairSample(u, v, 1 if truth[u] > truth[v] else -1, truth.major)
            for u, v in combinations(ids, 2)]


def rankings_for(part: Mapping[str, Sequence[int]],
                 gpa: Mapping[int, float]) -> dict[str, Ranking]:
    """True ranking of each major restricted to the given students."""
    return {m: true_ranking({s: gpa[s] for s in ids}, m) for m, ids in part.items() if ids}


# synthetic data -----------------------------------------------------------------------

@dataclass(frozen=True)
class SyntheticConfig:
    """Planted link between aptitude and visits to study locations.

    Each student draws an aptitude ``a ~ U(0, 1)`` and ``gpa = a + N(0, sigma)``.
    Each study location gets ``habit_slots`` fixed slots per student, each
    visited on each day with probability ``base_visit_rate + signal_strength * a``.
    On top, every (day, slot, location) cell is visited with probability
    ``base_visit_rate``.

    The defaults give about 5.1 records per student per day. A sparse noise
    floor with several habit slots keeps the planted signal well above the
    noise visits; with a single habit slot and a 0.02 noise rate the same
    record budget is mostly noise and a model trained on 42 students per
    major memorises it.
    """

    majors: int = 3
    students_per_major: int = 60
    dims: DatasetDims = DatasetDims()
    aptitude_noise: float = 0.05
    base_visit_rate: float = 0.005
    signal_strength: float = 0.9
    habit_slots: int = 3
    seed: int = 0

    def __post_init__(self):
        if self.majors < 1 or self.students_per_major < 1:
            raise ValueError("majors and students_per_major must be positive")
        if self.aptitude_noise < 0:
            raise ValueError("aptitude_noise must be non-negative")
        for name in ("base_visit_rate", "signal_strength"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")
        if not 1 <= self.habit_slots <= self.dims.n_t:
            raise ValueError(f"habit_slots must lie in [1, {self.dims.n_t}]")
        if self.dims.n_l <= max(STUDY_LOCATIONS):
            raise ValueError(f"need at least {max(STUDY_LOCATIONS) + 1} locations")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class SyntheticDataset:
    records: list[BehaviorRecord]
    labels: list[StudentLabel]
    aptitude: dict[int, float]


def generate_synthetic(cfg: SyntheticConfig) -> SyntheticDataset:
    n_d, n_t, n_l = cfg.dims.shape
    n_students = cfg.majors * cfg.students_per_major
    streams = np.random.SeedSequence(cfg.seed).spawn(n_students)
    records: list[BehaviorRecord] = []
    labels: list[StudentLabel] = []
    aptitude: dict[int, float] = {}
    for sid, stream in enumerate(streams):
        rng = np.random.default_rng(stream)
        major = f"m{sid // cfg.students_per_major}"
        a = float(rng.uniform(0.0, 1.0))
        gpa = a + float(rng.normal(0.0, cfg.aptitude_noise)) if cfg.aptitude_noise else a
        habit = [rng.choice(n_t, cfg.habit_slots, replace=False) for _ in STUDY_LOCATIONS]
        visits = rng.random((n_d, n_t, n_l)) < cfg.base_visit_rate
        p_study = min(1.0, cfg.base_visit_rate + cfg.signal_strength * a)
        study = rng.random((n_d, len(STUDY_LOCATIONS), cfg.habit_slots)) < p_study
        for k, loc in enumerate(STUDY_LOCATIONS):
            visits[:, habit[k], loc] |= study[:, k]
        for d, t, l in zip(*np.nonzero(visits)):
            records.append(BehaviorRecord(sid, int(d), int(t), int(l)))
        labels.append(StudentLabel(sid, major, gpa))
        aptitude[sid] = a
    return SyntheticDataset(records, labels, aptitude)


# file I/O -----------------------------------------------------------------------------

def write_records(path: str | Path, records: Iterable[BehaviorRecord]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for r in records:
            fh.write(json.dumps({"student": r.student, "day": r.day,
                                 "slot": r.slot, "location": r.location}) + "\n")


def load_records(path: str | Path) -> Iterator[BehaviorRecord]:
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                fields = [obj[k] for k in ("student", "day", "slot", "location")]
                if not all(isinstance(v, int) and not isinstance(v, bool) for v in fields):
                    raise TypeError("fields must be integers")
            except (ValueError, KeyError, TypeError) as exc:
                raise ValueError(f"{path}:{lineno}: malformed record ({exc})") from None
            yield BehaviorRecord(*fields)


def write_labels(path: str | Path, labels: Iterable[StudentLabel]) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["student", "major", "gpa"])
        for lab in labels:
            w.writerow([lab.student, lab.major, repr(float(lab.gpa))])


def load_labels(path: str | Path) -> Iterator[StudentLabel]:
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            return
        if header != ["student", "major", "gpa"]:
            raise ValueError(f"{path}:1: expected header student,major,gpa, got {header}")
        seen: set[int] = set()
        for lineno, row in enumerate(reader, 2):
            if not row:
                continue
            try:
                student, major, gpa = int(row[0]), row[1], float(row[2])
                if len(row) != 3 or not math.isfinite(gpa):
                    raise ValueError("expected three fields and a finite gpa")
            except (ValueError, IndexError) as exc:
                raise ValueError(f"{path}:{lineno}: malformed label ({exc})") from None
            if student in seen:
                raise ValueError(f"{path}:{lineno}: duplicate label for student {student}")
            seen.add(student)
            yield StudentLabel(student, major, gpa)


@dataclass
class Dataset:
    """Everything training and evaluation need, loaded in memory."""

    dims: DatasetDims
    labels: list[StudentLabel]
    tensors: dict[int, np.ndarray]

    @property
    def gpa(self) -> dict[int, float]:
        return {lab.student: lab.gpa for lab in self.labels}

    @property
    def major_of(self) -> dict[int, str]:
        return {lab.student: lab.major for lab in self.labels}

    @classmethod
    def from_parts(cls, records: Iterable[BehaviorRecord], labels: Sequence[StudentLabel],
                   dims: DatasetDims) -> Dataset:
        labels = list(labels)
        return cls(dims, labels, encode_all(records, [lab.student for lab in labels], dims))

    @classmethod
    def load(cls, data_dir: str | Path, dims: DatasetDims) -> Dataset:
        data_dir = Path(data_dir)
        return cls.from_parts(load_records(data_dir / "records.jsonl"),
                              list(load_labels(data_dir / "labels.csv")), dims)
