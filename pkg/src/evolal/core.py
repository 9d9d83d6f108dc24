"""Domain types shared by every stage: trajectories, sliding windows,
feature standardization, action encoding.

All types are immutable after construction (arrays are marked read-only),
so they can be shared freely across worker processes and threads.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ConfigError, SchemaError

# Feature groups of the production 130-dimensional state schema.
REAL_FEATURE_GROUPS: dict[str, int] = {
    "autonomy": 10,
    "temporal": 22,
    "problem_solving": 31,
    "performance": 57,
    "hints": 10,
}
REAL_STATE_DIM = sum(REAL_FEATURE_GROUPS.values())


class Action(enum.IntEnum):
    """The three decision options a student picks from at each problem."""

    SOLO = 0
    COLLAB = 1
    EXAMPLE = 2


N_ACTIONS = len(Action)


@dataclass(frozen=True)
class FeatureSchema:
    """Declared layout of a state vector.

    ``groups`` maps a group name to its width; group widths must sum to
    ``dim``. Synthetic data uses a single anonymous group.
    """

    dim: int
    groups: dict[str, int] = field(default_factory=dict)

    def __post_init__(self):
        if self.dim <= 0:
            raise ConfigError(f"state dimension must be positive, got {self.dim}")
        if self.groups and sum(self.groups.values()) != self.dim:
            raise SchemaError(
                f"feature group sizes {self.groups} sum to "
                f"{sum(self.groups.values())}, expected {self.dim}")

    @classmethod
    def real(cls) -> "FeatureSchema":
        return cls(dim=REAL_STATE_DIM, groups=dict(REAL_FEATURE_GROUPS))

    @classmethod
    def flat(cls, dim: int) -> "FeatureSchema":
        return cls(dim=dim, groups={"features": dim})


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a, dtype=np.float64)
    a.flags.writeable = False
    return a


def validate_state(values: np.ndarray, schema: FeatureSchema) -> None:
    """Check one state vector against the schema; raise SchemaError if bad."""
    values = np.asarray(values)
    if values.shape != (schema.dim,):
        raise SchemaError(
            f"state has shape {values.shape}, schema expects ({schema.dim},)")
    if not np.all(np.isfinite(values)):
        raise SchemaError("state vector contains non-finite entries")


@dataclass(frozen=True)
class Step:
    """One decision point: the observed state, the action taken, and the
    elapsed seconds since the start of the trajectory."""

    state: np.ndarray
    action: int
    time: float


@dataclass(frozen=True)
class Trajectory:
    """An ordered (state, action) sequence for one student.

    States are stored as an (n, m) array, actions and times as length-n
    arrays. ``outcome`` holds the delayed return attached at ingest time
    (normalized learning gain), used by reward-redistribution baselines.
    """

    traj_id: str
    semester: str
    states: np.ndarray
    actions: np.ndarray
    times: np.ndarray
    outcome: float | None = None

    def __post_init__(self):
        states = _frozen(self.states)
        actions = np.ascontiguousarray(self.actions, dtype=np.int64)
        actions.flags.writeable = False
        times = _frozen(self.times)
        object.__setattr__(self, "states", states)
        object.__setattr__(self, "actions", actions)
        object.__setattr__(self, "times", times)
        n = len(self)
        if n < 1:
            raise SchemaError(f"trajectory {self.traj_id!r} is empty")
        if states.ndim != 2 or actions.shape != (n,) or times.shape != (n,):
            raise SchemaError(
                f"trajectory {self.traj_id!r} has inconsistent shapes "
                f"{states.shape}/{actions.shape}/{times.shape}")
        if not np.all(np.isfinite(states)):
            raise SchemaError(f"trajectory {self.traj_id!r} has non-finite states")
        if np.any(np.diff(times) < 0):
            raise SchemaError(f"trajectory {self.traj_id!r} has decreasing times")

    def __len__(self) -> int:
        return self.states.shape[0]

    @property
    def state_dim(self) -> int:
        return self.states.shape[1]

    @property
    def steps(self) -> tuple[Step, ...]:
        return tuple(
            Step(state=self.states[i], action=int(self.actions[i]),
                 time=float(self.times[i]))
            for i in range(len(self)))

    @classmethod
    def from_steps(cls, traj_id: str, semester: str, steps: list[Step],
                   outcome: float | None = None) -> "Trajectory":
        if not steps:
            raise SchemaError(f"trajectory {traj_id!r} is empty")
        return cls(
            traj_id=traj_id,
            semester=semester,
            states=np.stack([s.state for s in steps]),
            actions=np.array([s.action for s in steps]),
            times=np.array([s.time for s in steps]),
            outcome=outcome,
        )


@dataclass(frozen=True)
class Standardization:
    """Per-feature mean and standard deviation fitted on training data."""

    mean: np.ndarray
    std: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "mean", _frozen(self.mean))
        object.__setattr__(self, "std", _frozen(self.std))
        if self.mean.ndim != 1 or self.mean.shape != self.std.shape:
            raise SchemaError(
                f"mean/std shapes disagree: {self.mean.shape} vs "
                f"{self.std.shape}")

    @property
    def dim(self) -> int:
        return self.mean.shape[0]


@dataclass(frozen=True)
class Dataset:
    """A demonstration corpus with a shared feature schema.

    ``stats`` records the standardization applied to the stored states;
    ``None`` means the states are raw.
    """

    trajectories: tuple[Trajectory, ...]
    schema: FeatureSchema
    stats: Standardization | None = None

    def __post_init__(self):
        object.__setattr__(self, "trajectories", tuple(self.trajectories))
        for traj in self.trajectories:
            if traj.state_dim != self.schema.dim:
                raise SchemaError(
                    f"trajectory {traj.traj_id!r} has dimension "
                    f"{traj.state_dim}, dataset schema declares {self.schema.dim}")
        if self.stats is not None and self.stats.dim != self.schema.dim:
            raise SchemaError(
                f"standardization has dimension {self.stats.dim}, "
                f"dataset schema declares {self.schema.dim}")

    def __len__(self) -> int:
        return len(self.trajectories)

    def __iter__(self):
        return iter(self.trajectories)

    @property
    def semesters(self) -> list[str]:
        seen: list[str] = []
        for t in self.trajectories:
            if t.semester not in seen:
                seen.append(t.semester)
        return seen

    def all_states(self) -> np.ndarray:
        return np.concatenate([t.states for t in self.trajectories], axis=0)

    def subset(self, semesters: set[str] | list[str]) -> "Dataset":
        keep = tuple(t for t in self.trajectories if t.semester in set(semesters))
        return Dataset(trajectories=keep, schema=self.schema, stats=self.stats)


@dataclass(frozen=True)
class Window:
    """A stack of ``omega`` consecutive states from one trajectory.

    ``values`` concatenates the states oldest-first, so the window ending
    at step i holds (s_{i-omega+1}, ..., s_i). ``dt`` is the time gap from
    the previous window's end step; the first window of a trajectory
    carries 0.0 (it has no switch term).
    """

    traj_id: str
    end_index: int
    values: np.ndarray
    dt: float

    def __post_init__(self):
        object.__setattr__(self, "values", _frozen(self.values))


def window_trajectory(traj: Trajectory, omega: int) -> list[Window]:
    """Slide a width-``omega`` window over a trajectory.

    Returns n - omega + 1 windows in order. Windows never span trajectory
    boundaries; callers that need a label for the first omega - 1 steps
    inherit it from the first window.
    """
    if omega <= 0:
        raise ConfigError(f"window size must be positive, got {omega}")
    n = len(traj)
    if omega > n:
        raise ValueError(
            f"window size {omega} exceeds trajectory length {n} "
            f"({traj.traj_id!r})")
    stacked = stack_windows(traj.states, omega)
    end_times = traj.times[omega - 1:]
    dts = np.diff(end_times, prepend=end_times[0])
    return [
        Window(traj_id=traj.traj_id, end_index=omega - 1 + k,
               values=stacked[k], dt=float(dts[k]))
        for k in range(n - omega + 1)
    ]


def stack_windows(states: np.ndarray, omega: int) -> np.ndarray:
    """Vectorized window stacking: (n, m) -> (n - omega + 1, m * omega)."""
    n, m = states.shape
    if omega > n:
        raise ValueError(f"window size {omega} exceeds sequence length {n}")
    cols = [states[k:n - omega + 1 + k] for k in range(omega)]
    return np.concatenate(cols, axis=1)


def fit_standardization(data: Dataset) -> Standardization:
    """Per-feature mean/std over every state in the dataset."""
    x = data.all_states()
    return Standardization(mean=x.mean(axis=0), std=x.std(axis=0))


def standardize(data: Dataset,
                stats: Standardization | None = None
                ) -> tuple[Dataset, Standardization]:
    """Z-score every state vector.

    When ``stats`` is omitted they are fitted on ``data`` itself; passing
    training statistics is how test sets are standardized without leakage.
    Constant features (std below 1e-12) map to 0.
    """
    if stats is None:
        stats = fit_standardization(data)
    if stats.dim != data.schema.dim:
        raise SchemaError(
            f"statistics dimension {stats.dim} does not match "
            f"data dimension {data.schema.dim}")
    safe_std = np.where(stats.std < 1e-12, 1.0, stats.std)
    zero_mask = stats.std < 1e-12
    out = []
    for traj in data.trajectories:
        z = (traj.states - stats.mean) / safe_std
        z[:, zero_mask] = 0.0
        out.append(replace(traj, states=z))
    return Dataset(trajectories=tuple(out), schema=data.schema,
                   stats=stats), stats


def apply_standardization(states: np.ndarray, stats: Standardization) -> np.ndarray:
    """Z-score a raw (n, m) state block with fitted statistics."""
    if states.shape[1] != stats.dim:
        raise SchemaError(
            f"states have dimension {states.shape[1]}, statistics expect {stats.dim}")
    safe_std = np.where(stats.std < 1e-12, 1.0, stats.std)
    z = (states - stats.mean) / safe_std
    z[:, stats.std < 1e-12] = 0.0
    return z


def one_hot(actions: np.ndarray, n_actions: int = N_ACTIONS) -> np.ndarray:
    actions = np.asarray(actions, dtype=np.int64)
    if actions.size and (actions.min() < 0 or actions.max() >= n_actions):
        raise SchemaError(
            f"action ids must lie in [0, {n_actions}), got range "
            f"[{actions.min()}, {actions.max()}]")
    eye = np.eye(n_actions)
    return eye[actions]
