"""Gait trial model, CSV ingestion, normalization, subject-level folds and a
synthetic GRF cohort generator.

Trials are stored as ``(side, component, T)`` arrays with sides ordered
``L, R`` and components ordered ``AP, ML, V``.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from enum import IntEnum
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import (
    DegenerateCurve,
    EmptyDataset,
    EmptySelection,
    InsufficientSubjects,
    OutOfRangeAge,
    ParseError,
)

SIDES = ("L", "R")
COMPONENTS = ("AP", "ML", "V")
CHANNELS = tuple((s, c) for s in SIDES for c in COMPONENTS)
DEFAULT_T = 100


class AgeGroup(IntEnum):
    """Age classes; the integer value is the network's class index."""

    Young = 0
    MiddleAged = 1
    Older = 2


AGE_RANGES = {
    AgeGroup.Young: (20, 39),
    AgeGroup.MiddleAged: (40, 64),
    AgeGroup.Older: (65, 79),
}


def assign_age_group(age_years: int) -> AgeGroup:
    for group, (lo, hi) in AGE_RANGES.items():
        if lo <= age_years <= hi:
            return group
    raise OutOfRangeAge(age_years)


def resample_curve(curve, target: int) -> np.ndarray:
    """Linearly interpolate ``curve`` onto ``target`` equidistant points.

    Both endpoints are kept exactly; resampling to the same length returns
    an identical copy.
    """
    curve = np.asarray(curve, dtype=np.float64)
    if curve.ndim != 1 or curve.size < 2:
        raise DegenerateCurve(f"need at least 2 samples, got shape {curve.shape}")
    if target < 2:
        raise DegenerateCurve(f"target length must be >= 2, got {target}")
    if curve.size == target:
        return curve.copy()
    src = np.linspace(0.0, 1.0, curve.size)
    dst = np.linspace(0.0, 1.0, target)
    out = np.interp(dst, src, curve)
    out[0], out[-1] = curve[0], curve[-1]
    return out


@dataclass(frozen=True)
class GrfTrial:
    subject_id: str
    age_years: int
    signals: np.ndarray  # (2 sides, 3 components, T)
    trial: str = "0"

    def __post_init__(self):
        sig = np.array(self.signals, dtype=np.float64)
        if sig.ndim != 3 or sig.shape[:2] != (len(SIDES), len(COMPONENTS)):
            raise ValueError(f"signals must have shape (2, 3, T), got {sig.shape}")
        if sig.shape[2] < 2:
            raise DegenerateCurve("curves need T >= 2 samples")
        if not np.all(np.isfinite(sig)):
            raise ValueError(f"non-finite sample in trial {self.subject_id}/{self.trial}")
        sig.setflags(write=False)
        object.__setattr__(self, "signals", sig)

    @property
    def T(self) -> int:
        return self.signals.shape[2]

    def curve(self, side: str, component: str) -> np.ndarray:
        return self.signals[SIDES.index(side), COMPONENTS.index(component)]


@dataclass(frozen=True)
class Dataset:
    trials: tuple[GrfTrial, ...]
    labels: tuple[AgeGroup, ...] = field(init=False)
    subjects: dict[str, tuple[int, ...]] = field(init=False)

    def __post_init__(self):
        trials = tuple(self.trials)
        if not trials:
            raise EmptyDataset("dataset has no trials")
        lengths = {t.T for t in trials}
        if len(lengths) != 1:
            raise ValueError(f"trials have differing lengths {sorted(lengths)}")
        subjects: dict[str, list[int]] = {}
        for i, t in enumerate(trials):
            subjects.setdefault(t.subject_id, []).append(i)
        labels = tuple(assign_age_group(t.age_years) for t in trials)
        for sid, idx in subjects.items():
            if len({labels[i] for i in idx}) != 1:
                raise ValueError(f"subject {sid} has trials in different age groups")
        object.__setattr__(self, "trials", trials)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "subjects", {k: tuple(v) for k, v in subjects.items()})

    def __len__(self):
        return len(self.trials)

    @property
    def T(self) -> int:
        return self.trials[0].T

    def subject_label(self, subject_id: str) -> AgeGroup:
        return self.labels[self.subjects[subject_id][0]]

    def indices_for(self, subject_ids: Iterable[str]) -> list[int]:
        """Trial indices of the given subjects, in dataset order."""
        wanted = set(subject_ids)
        return [i for i, t in enumerate(self.trials) if t.subject_id in wanted]

    def label_array(self, indices=None) -> np.ndarray:
        labels = np.array([int(g) for g in self.labels], dtype=np.int64)
        return labels if indices is None else labels[np.asarray(indices, dtype=np.int64)]


# --------------------------------------------------------------------------
# normalization


@dataclass(frozen=True)
class NormParams:
    min_value: np.ndarray  # (2, 3)
    max_value: np.ndarray  # (2, 3)

    def to_dict(self):
        return {"min": self.min_value.tolist(), "max": self.max_value.tolist()}

    @classmethod
    def from_dict(cls, d):
        return cls(np.asarray(d["min"], dtype=np.float64), np.asarray(d["max"], dtype=np.float64))


def fit_norm_params(dataset: Dataset, subject_ids) -> NormParams:
    subject_ids = set(subject_ids)
    if not subject_ids:
        raise EmptySelection("cannot fit normalization on an empty subject set")
    missing = subject_ids - dataset.subjects.keys()
    if missing:
        raise EmptySelection(f"subjects not in dataset: {sorted(missing)[:5]}")
    stack = np.stack([dataset.trials[i].signals for i in dataset.indices_for(subject_ids)])
    return NormParams(stack.min(axis=(0, 3)), stack.max(axis=(0, 3)))


def _normalize(signals: np.ndarray, params: NormParams) -> np.ndarray:
    lo = params.min_value[..., None]
    span = (params.max_value - params.min_value)[..., None]
    degenerate = span == 0
    out = (signals - lo) / np.where(degenerate, 1.0, span)
    # constant channels sit at the centre of the unit range
    return np.where(degenerate, 0.5, out)


def normalize_and_concatenate(trial: GrfTrial, params: NormParams, order=CHANNELS) -> np.ndarray:
    """Min-max scale every channel with ``params`` and join them end to end.

    Test-fold values outside the fitted range are not clipped.
    """
    norm = _normalize(trial.signals, params)
    return np.concatenate([norm[SIDES.index(s), COMPONENTS.index(c)] for s, c in order])


def channel_names(sides: str = "both") -> list[tuple[str, str]]:
    """(side, component) labels of the network input rows."""
    if sides == "both":
        return list(CHANNELS)
    if sides == "average":
        return [("avg", c) for c in COMPONENTS]
    raise ValueError(f"unknown side mode {sides!r}")


def build_inputs(dataset: Dataset, indices, params: NormParams, layout="channels", sides="both"):
    """Network input array for the selected trials.

    ``layout="channels"`` gives ``(N, channels, T)``; ``"flat"`` gives the
    literal concatenation as one input row, ``(N, 1, channels * T)``.
    ``sides="average"`` merges left and right after normalization.
    """
    indices = list(indices)
    T = dataset.T
    if sides == "both":
        rows = [normalize_and_concatenate(dataset.trials[i], params) for i in indices]
        x = np.array(rows, dtype=np.float64).reshape(len(indices), len(CHANNELS), T)
    elif sides == "average":
        x = np.array([_normalize(dataset.trials[i].signals, params).mean(axis=0) for i in indices],
                     dtype=np.float64).reshape(len(indices), len(COMPONENTS), T)
    else:
        raise ValueError(f"unknown side mode {sides!r}")
    if layout == "flat":
        return x.reshape(len(indices), 1, -1)
    if layout != "channels":
        raise ValueError(f"unknown input layout {layout!r}")
    return x


# --------------------------------------------------------------------------
# folds


@dataclass(frozen=True)
class FoldSplit:
    folds: tuple[frozenset, ...]

    @property
    def k(self) -> int:
        return len(self.folds)

    def train_subjects(self, fold: int) -> frozenset:
        return frozenset().union(*(f for i, f in enumerate(self.folds) if i != fold))

    def test_subjects(self, fold: int) -> frozenset:
        return self.folds[fold]


def stratified_subject_kfold(dataset: Dataset, k: int, seed: int) -> FoldSplit:
    """Deal subjects of each class round-robin into ``k`` folds.

    Subjects are sorted by id, then permuted per class with ``seed``. The
    dealing position carries over between classes so fold sizes stay
    balanced overall as well as per class.
    """
    if k < 2:
        raise InsufficientSubjects(f"k must be >= 2, got {k}")
    by_class: dict[AgeGroup, list[str]] = {}
    for sid in sorted(dataset.subjects):
        by_class.setdefault(dataset.subject_label(sid), []).append(sid)
    rng = np.random.default_rng(seed)
    folds: list[set[str]] = [set() for _ in range(k)]
    pos = 0
    for group in sorted(by_class):
        members = by_class[group]
        if len(members) < k:
            raise InsufficientSubjects(
                f"class {group.name} has {len(members)} subjects, need at least k={k}")
        for j in rng.permutation(len(members)):
            folds[pos % k].add(members[j])
            pos += 1
    return FoldSplit(tuple(frozenset(f) for f in folds))


# --------------------------------------------------------------------------
# CSV format


def _header(n_samples: int) -> list[str]:
    return ["subject_id", "age", "trial", "side", "component"] + [f"v{i}" for i in range(n_samples)]


def write_dataset(dataset: Dataset, path) -> None:
    """Write one row per curve; floats use ``repr`` so reloading is exact."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(_header(dataset.T))
        for t in dataset.trials:
            for si, side in enumerate(SIDES):
                for ci, comp in enumerate(COMPONENTS):
                    w.writerow([t.subject_id, t.age_years, t.trial, side, comp]
                               + [repr(float(v)) for v in t.signals[si, ci]])


def load_dataset(path, T: int = DEFAULT_T) -> Dataset:
    """Parse the curve-per-row CSV format into a :class:`Dataset`.

    Rows may end in a run of empty cells when a curve is shorter than the
    header; every curve is resampled to ``T`` samples.
    """
    path = Path(path)
    trials: dict[tuple[str, str], dict] = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or not any(cell.strip() for cell in header):
            raise EmptyDataset(f"{path} is empty")
        header = [h.strip() for h in header]
        if header[:5] != _header(0) or len(header) < 7:
            raise ParseError("header must be subject_id,age,trial,side,component,v0,v1,...", 1)
        if header[5:] != [f"v{i}" for i in range(len(header) - 5)]:
            raise ParseError("sample columns must be named v0..v{L-1} in order", 1)
        width = len(header)
        for row in reader:
            line = reader.line_num
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != width:
                raise ParseError(f"expected {width} columns, found {len(row)}", line)
            sid, age_s, trial_id, side, comp = (c.strip() for c in row[:5])
            if not sid:
                raise ParseError("empty subject_id", line)
            try:
                age = int(age_s)
            except ValueError:
                raise ParseError(f"age {age_s!r} is not an integer", line) from None
            if side not in SIDES:
                raise ParseError(f"side must be one of {SIDES}, got {side!r}", line)
            if comp not in COMPONENTS:
                raise ParseError(f"component must be one of {COMPONENTS}, got {comp!r}", line)
            cells = [c.strip() for c in row[5:]]
            n = len(cells)
            while n and not cells[n - 1]:
                n -= 1
            if n < 2:
                raise ParseError("curve needs at least 2 samples", line)
            try:
                values = np.array([float(c) for c in cells[:n]], dtype=np.float64)
            except ValueError:
                raise ParseError("malformed or missing sample value", line) from None
            if not np.all(np.isfinite(values)):
                raise ParseError("non-finite sample value", line)
            rec = trials.setdefault((sid, trial_id), {"age": age, "line": line, "curves": {}})
            if rec["age"] != age:
                raise ParseError(f"age of subject {sid} changes within trial {trial_id}", line)
            if (side, comp) in rec["curves"]:
                raise ParseError(f"duplicate {side}/{comp} curve for {sid} trial {trial_id}", line)
            rec["curves"][(side, comp)] = values
    if not trials:
        raise EmptyDataset(f"{path} has no data rows")

    ages: dict[str, int] = {}
    out = []
    for (sid, trial_id), rec in trials.items():
        missing = [f"{s}/{c}" for s, c in CHANNELS if (s, c) not in rec["curves"]]
        if missing:
            raise ParseError(f"trial {sid}/{trial_id} lacks curves {missing}", rec["line"])
        if ages.setdefault(sid, rec["age"]) != rec["age"]:
            raise ParseError(f"subject {sid} has inconsistent ages", rec["line"])
        try:
            assign_age_group(rec["age"])
        except OutOfRangeAge as exc:
            raise ParseError(str(exc), rec["line"]) from None
        signals = np.array([[resample_curve(rec["curves"][(s, c)], T) for c in COMPONENTS]
                            for s in SIDES])
        out.append(GrfTrial(sid, rec["age"], signals, trial_id))
    return Dataset(tuple(out))


# --------------------------------------------------------------------------
# synthetic cohort


@dataclass(frozen=True)
class CohortSpec:
    subjects_per_class: int
    trials_per_subject: int
    T: int = DEFAULT_T
    noise: float = 0.05

    def __post_init__(self):
        if self.subjects_per_class < 1 or self.trials_per_subject < 1:
            raise ValueError("subject and trial counts must be >= 1")
        if self.T < 2:
            raise ValueError("T must be >= 2")
        if not (self.noise >= 0 and math.isfinite(self.noise)):
            raise ValueError("noise level must be a finite number >= 0")


# Generator constants, in body-weight units. These plant the class
# differences; they are not measured values.
FIRST_PEAK = 1.10
SECOND_PEAK = {AgeGroup.Young: 1.25, AgeGroup.MiddleAged: 1.07, AgeGroup.Older: 0.89}
PUSH_OFF = {AgeGroup.Young: 0.24, AgeGroup.MiddleAged: 0.20, AgeGroup.Older: 0.16}
BRAKING = 0.20
SUBJECT_SD = {AgeGroup.Young: 0.02, AgeGroup.MiddleAged: 0.03, AgeGroup.Older: 0.02}
TRIAL_SD = 0.01
PEAK_WIDTH = 0.09
PEAK_POS = (0.25, 0.75)


def _trial_curves(s, peak1, peak2, brake, push, shift, ml_amp):
    v = (peak1 * np.exp(-0.5 * ((s - PEAK_POS[0] - shift) / PEAK_WIDTH) ** 2)
         + peak2 * np.exp(-0.5 * ((s - PEAK_POS[1] - shift) / PEAK_WIDTH) ** 2))
    wave = np.sin(2 * np.pi * s)
    ap = np.where(s < 0.5, -brake * wave, -push * wave)
    ml = ml_amp * (np.sin(np.pi * s) + 0.3 * np.sin(3 * np.pi * s))
    return ap, ml, v


def synth_generate(spec: CohortSpec, seed: int) -> Dataset:
    """Deterministic synthetic cohort with M-shaped vertical GRF.

    Older subjects get a lower second vertical peak and weaker late-stance
    AP push-off; middle-aged subjects sit in between with wider spread.
    """
    rng = np.random.default_rng(seed)
    s = np.linspace(0.0, 1.0, spec.T)
    trials = []
    for group in AgeGroup:
        lo, hi = AGE_RANGES[group]
        sd = SUBJECT_SD[group]
        for n in range(spec.subjects_per_class):
            sid = f"{group.name[0]}{n:03d}"
            age = int(rng.integers(lo, hi + 1))
            subj_peak1 = FIRST_PEAK + rng.normal(0, 0.02)
            subj_peak2 = SECOND_PEAK[group] + rng.normal(0, sd)
            subj_push = PUSH_OFF[group] + rng.normal(0, sd)
            subj_ml = 0.06 + rng.normal(0, 0.005)
            for t in range(spec.trials_per_subject):
                signals = np.empty((2, 3, spec.T))
                for side in range(2):
                    jitter = rng.normal(0, TRIAL_SD, size=4)
                    curves = _trial_curves(
                        s,
                        subj_peak1 + jitter[0],
                        subj_peak2 + jitter[1],
                        BRAKING + 0.5 * jitter[2],
                        subj_push + 0.5 * jitter[2],
                        0.2 * jitter[3],
                        subj_ml * (1 if side else -1),
                    )
                    signals[side] = np.stack(curves)
                if spec.noise > 0:
                    signals += rng.normal(0, spec.noise, size=signals.shape)
                trials.append(GrfTrial(sid, age, signals, str(t)))
    return Dataset(tuple(trials))


def class_counts(labels: Sequence[int], n_classes: int = len(AgeGroup)) -> np.ndarray:
    return np.bincount(np.asarray(labels, dtype=np.int64), minlength=n_classes)
