"""Trajectory file parsing, expert selection by quantized learning gain,
and semester-based temporal fold construction.

The on-disk format is JSONL, one student per line:

    {"id": str, "semester": str, "pre": float, "post": float,
     "steps": [{"t": float, "state": [float, ...], "action": int}]}

Files are strict UTF-8. Under ``strict=True`` unknown fields are rejected.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .core import Dataset, FeatureSchema, Trajectory
from .errors import ConfigError, ParseError, SchemaError

_RECORD_FIELDS = {"id", "semester", "pre", "post", "steps"}
_STEP_FIELDS = {"t", "state", "action"}

GROUP_NAMES = ("low", "medium", "high")


@dataclass(frozen=True)
class StudentRecord:
    """One student's test scores plus their decision trajectory."""

    student_id: str
    semester: str
    pre: float
    post: float
    trajectory: Trajectory

    def __post_init__(self):
        for name, score in (("pre", self.pre), ("post", self.post)):
            if not 0.0 <= score <= 100.0:
                raise SchemaError(
                    f"{name}-test score {score} outside [0, 100] "
                    f"for student {self.student_id!r}")

    @property
    def gain(self) -> float:
        """Normalized learning gain (post - pre) / (100 - pre), clamped
        to [-1, 1]; 0 for students already at ceiling."""
        denom = 100.0 - self.pre
        if denom <= 0:
            return 0.0
        return float(np.clip((self.post - self.pre) / denom, -1.0, 1.0))


@dataclass(frozen=True)
class QLGLabel:
    """Pre/post performance-group transition and the derived binary label."""

    pre_group: str
    post_group: str

    def __post_init__(self):
        for g in (self.pre_group, self.post_group):
            if g not in GROUP_NAMES:
                raise SchemaError(f"unknown performance group {g!r}")

    @property
    def label(self) -> str:
        """High when the student reached or stayed in the high group,
        or moved strictly up; Low otherwise."""
        pre_i = GROUP_NAMES.index(self.pre_group)
        post_i = GROUP_NAMES.index(self.post_group)
        if self.post_group == "high" or post_i > pre_i:
            return "High"
        return "Low"


@dataclass(frozen=True)
class Quantizer:
    """Score-to-group rule: low is x <= low_cut, high is x > high_cut."""

    low_cut: float
    high_cut: float

    def __post_init__(self):
        if not self.low_cut <= self.high_cut:
            raise ConfigError(
                f"quantizer boundaries must be ordered, got "
                f"({self.low_cut}, {self.high_cut})")

    def group(self, score: float) -> str:
        if score <= self.low_cut:
            return "low"
        if score <= self.high_cut:
            return "medium"
        return "high"

    @classmethod
    def tertiles(cls, records: list[StudentRecord]) -> "Quantizer":
        """Boundaries at the 1/3 and 2/3 quantiles of the pooled pre-test
        scores. The same boundaries are applied to post scores."""
        pres = np.array([r.pre for r in records], dtype=np.float64)
        lo, hi = np.quantile(pres, [1.0 / 3.0, 2.0 / 3.0])
        return cls(low_cut=float(lo), high_cut=float(hi))


@dataclass(frozen=True)
class FoldPlan:
    """Ordered temporal folds: each trains on strictly earlier semesters."""

    folds: tuple[tuple[tuple[str, ...], str], ...]

    def __len__(self) -> int:
        return len(self.folds)

    def __iter__(self):
        return iter(self.folds)


def _parse_step(raw: dict, line_no: int, step_no: int,
                strict: bool) -> tuple[float, list[float], int]:
    if not isinstance(raw, dict):
        raise SchemaError(f"line {line_no}: step {step_no} is not an object")
    missing = _STEP_FIELDS - raw.keys()
    if missing:
        raise SchemaError(
            f"line {line_no}: step {step_no} missing field(s) "
            f"{sorted(missing)}")
    if strict:
        unknown = raw.keys() - _STEP_FIELDS
        if unknown:
            raise SchemaError(
                f"line {line_no}: step {step_no} has unknown field(s) "
                f"{sorted(unknown)}")
    if not isinstance(raw["action"], int) or isinstance(raw["action"], bool):
        raise SchemaError(
            f"line {line_no}: step {step_no} action must be an integer")
    return float(raw["t"]), raw["state"], raw["action"]


def parse_record(raw: dict, line_no: int, strict: bool = False) -> StudentRecord:
    missing = _RECORD_FIELDS - raw.keys()
    if missing:
        raise SchemaError(f"line {line_no}: missing field(s) {sorted(missing)}")
    if strict:
        unknown = raw.keys() - _RECORD_FIELDS
        if unknown:
            raise SchemaError(
                f"line {line_no}: unknown field(s) {sorted(unknown)}")
    if not raw["steps"]:
        raise SchemaError(f"line {line_no}: empty step list")
    times, states, actions = [], [], []
    for k, raw_step in enumerate(raw["steps"]):
        t, s, a = _parse_step(raw_step, line_no, k, strict)
        times.append(t)
        states.append(s)
        actions.append(a)
    dims = {len(s) for s in states}
    if len(dims) != 1:
        raise SchemaError(
            f"line {line_no}: inconsistent state dimensions {sorted(dims)}")
    try:
        traj = Trajectory(
            traj_id=str(raw["id"]),
            semester=str(raw["semester"]),
            states=np.array(states, dtype=np.float64),
            actions=np.array(actions, dtype=np.int64),
            times=np.array(times, dtype=np.float64),
        )
    except SchemaError as exc:
        raise SchemaError(f"line {line_no}: {exc}") from exc
    record = StudentRecord(
        student_id=str(raw["id"]),
        semester=str(raw["semester"]),
        pre=float(raw["pre"]),
        post=float(raw["post"]),
        trajectory=traj,
    )
    # attach the delayed return used by reward-redistribution baselines
    object.__setattr__(record, "trajectory",
                       Trajectory(traj_id=traj.traj_id, semester=traj.semester,
                                  states=traj.states, actions=traj.actions,
                                  times=traj.times, outcome=record.gain))
    return record


def parse_dataset(path, strict: bool = False) -> list[StudentRecord]:
    """Read a JSONL trajectory file; one StudentRecord per nonblank line.

    Raises ParseError (with the 1-based line number) on malformed JSON and
    SchemaError on structurally invalid records.
    """
    records: list[StudentRecord] = []
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                raw = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(
                    f"line {line_no}: invalid JSON ({exc.msg})",
                    line=line_no) from exc
            if not isinstance(raw, dict):
                raise SchemaError(f"line {line_no}: record is not an object")
            records.append(parse_record(raw, line_no, strict=strict))
    return records


def write_dataset(path, records: list[StudentRecord]) -> None:
    """Serialize records back to the JSONL format parse_dataset reads."""
    with open(path, "w", encoding="utf-8") as fh:
        for r in records:
            traj = r.trajectory
            doc = {
                "id": r.student_id,
                "semester": r.semester,
                "pre": r.pre,
                "post": r.post,
                "steps": [
                    {"t": float(traj.times[i]),
                     "state": [float(v) for v in traj.states[i]],
                     "action": int(traj.actions[i])}
                    for i in range(len(traj))
                ],
            }
            fh.write(json.dumps(doc) + "\n")


def qlg_label(record: StudentRecord, quantizer: Quantizer) -> QLGLabel:
    return QLGLabel(pre_group=quantizer.group(record.pre),
                    post_group=quantizer.group(record.post))


def records_to_dataset(records: list[StudentRecord],
                       schema: FeatureSchema | None = None) -> Dataset:
    if not records:
        raise SchemaError("cannot build a dataset from zero records")
    if schema is None:
        schema = FeatureSchema.flat(records[0].trajectory.state_dim)
    return Dataset(trajectories=tuple(r.trajectory for r in records),
                   schema=schema)


def qlg_filter(records: list[StudentRecord],
               quantizer: Quantizer | None = None,
               schema: FeatureSchema | None = None) -> Dataset:
    """Keep only High-QLG students (the expert demonstrators).

    The default quantizer puts group boundaries at the tertiles of the
    pooled pre-test distribution; both pre and post scores are grouped
    with the same boundaries. An empty result is permitted.
    """
    if quantizer is None:
        quantizer = Quantizer.tertiles(records)
    experts = [r for r in records if qlg_label(r, quantizer).label == "High"]
    if not experts:
        return Dataset(trajectories=(),
                       schema=schema or FeatureSchema.flat(
                           records[0].trajectory.state_dim if records else 1))
    return records_to_dataset(experts, schema=schema)


def temporal_folds(semesters: list[str], cumulative: bool = True) -> FoldPlan:
    """Build the temporal cross-validation plan.

    Fold k trains on the first k semesters (combined when ``cumulative``,
    else each prior semester becomes its own fold paired with the test
    semester) and tests on semester k+1.
    """
    if len(semesters) < 2:
        raise ConfigError(
            f"temporal folds need at least 2 semesters, got {len(semesters)}")
    if len(set(semesters)) != len(semesters):
        raise ConfigError(f"duplicate semester tags in {semesters}")
    folds: list[tuple[tuple[str, ...], str]] = []
    for k in range(1, len(semesters)):
        test = semesters[k]
        if cumulative:
            folds.append((tuple(semesters[:k]), test))
        else:
            folds.extend(((prev,), test) for prev in semesters[:k])
    return FoldPlan(folds=tuple(folds))
