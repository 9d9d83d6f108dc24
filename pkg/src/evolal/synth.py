"""Ground-truth synthetic generators.

Two substrates: a regime emitter producing student-like trajectories with
known regime segments and latent intents (for partition / mixture
oracles), and a tabular gridworld with a Boltzmann expert (for IRL
oracles). Both are pure functions of (config, seed).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .core import Dataset, FeatureSchema, Trajectory
from .errors import ConfigError
from .hlirl import HighLevelMDP, value_iteration
from .ingest import StudentRecord, records_to_dataset

DEFAULT_SEMESTERS = ("S1", "S2", "S3", "S4")


def _default_action_table(k: int, q: int, n_actions: int) -> np.ndarray:
    """Deterministic intent x regime -> action rule: a = (c + z) mod |A|."""
    table = np.zeros((k, q, n_actions))
    for c in range(k):
        for z in range(q):
            table[c, z, (c + z) % n_actions] = 1.0
    return table


@dataclass(frozen=True)
class EmitterConfig:
    n_students: int = 30
    n_steps: int = 20
    m_s: int = 10
    q_true: int = 3
    k_true: int = 3
    n_actions: int = 3
    separation: float = 3.0
    action_table: tuple | None = None  # (K, Q, |A|) nested tuples
    change_points: tuple[int, ...] | None = None  # None: even q_true split
    switch_prob: float | None = None  # Markov alternative to fixed points
    intent_p: float = 1.0  # prob a segment keeps the dominant intent
    intent_weights: tuple[float, ...] | None = None  # dominant-intent dist
    intent_cue: float = 0.0  # mean shift on the last k_true dims per intent
    dt: float = 1.0
    semesters: tuple[str, ...] = DEFAULT_SEMESTERS
    pre_score: float = 50.0
    post_score: float = 90.0
    seed: int = 0

    def __post_init__(self):
        if self.separation <= 0:
            raise ConfigError(f"separation must be > 0, got {self.separation}")
        if self.q_true > self.m_s:
            raise ConfigError(
                f"q_true={self.q_true} regimes need at least that many "
                f"dimensions, got m_s={self.m_s}")
        if self.intent_cue > 0 and self.q_true + self.k_true > self.m_s:
            raise ConfigError(
                "intent cue dims overlap regime dims; increase m_s")
        if not 0.0 <= self.intent_p <= 1.0:
            raise ConfigError(f"intent_p must be in [0,1], got {self.intent_p}")
        if self.intent_weights is not None:
            w = np.asarray(self.intent_weights, dtype=np.float64)
            if w.shape != (self.k_true,) or np.any(w < 0) \
                    or abs(w.sum() - 1.0) > 1e-9:
                raise ConfigError(
                    f"intent_weights must be a {self.k_true}-way "
                    "distribution")
        if self.switch_prob is not None and not 0.0 <= self.switch_prob <= 1.0:
            raise ConfigError(
                f"switch_prob must be in [0,1], got {self.switch_prob}")
        tab = self.table()
        if tab.shape != (self.k_true, self.q_true, self.n_actions):
            raise ConfigError(
                f"action table shape {tab.shape} does not match "
                f"(K={self.k_true}, Q={self.q_true}, A={self.n_actions})")
        if np.any(tab < 0) or np.abs(tab.sum(axis=2) - 1.0).max() > 1e-9:
            raise ConfigError("action table rows must be distributions")

    def table(self) -> np.ndarray:
        if self.action_table is None:
            return _default_action_table(self.k_true, self.q_true,
                                         self.n_actions)
        return np.asarray(self.action_table, dtype=np.float64)

    def regime_means(self) -> np.ndarray:
        """Regime q sits at (separation/sqrt(2)) * e_q, so every pair of
        means is exactly `separation` apart under the identity covariance."""
        mu = np.zeros((self.q_true, self.m_s))
        for q in range(self.q_true):
            mu[q, q] = self.separation / np.sqrt(2.0)
        return mu


@dataclass(frozen=True)
class GroundTruth:
    regimes: tuple[np.ndarray, ...]  # per-step regime labels
    intents: tuple[np.ndarray, ...]  # per-step intent labels
    change_points: tuple[tuple[int, ...], ...]  # first index of each new segment

    def to_dict(self) -> dict:
        return {"regimes": [r.tolist() for r in self.regimes],
                "intents": [c.tolist() for c in self.intents],
                "change_points": [list(cp) for cp in self.change_points]}

    @classmethod
    def from_dict(cls, doc: dict) -> "GroundTruth":
        return cls(
            regimes=tuple(np.array(r, dtype=np.int64)
                          for r in doc["regimes"]),
            intents=tuple(np.array(c, dtype=np.int64)
                          for c in doc["intents"]),
            change_points=tuple(tuple(int(i) for i in cp)
                                for cp in doc["change_points"]))


def _regime_path(cfg: EmitterConfig, rng: np.random.Generator):
    """Per-step regime labels plus the segment start indices (> 0)."""
    n = cfg.n_steps
    if cfg.switch_prob is not None:
        z = np.empty(n, dtype=np.int64)
        z[0] = rng.integers(cfg.q_true)
        for t in range(1, n):
            if cfg.q_true > 1 and rng.random() < cfg.switch_prob:
                step = rng.integers(1, cfg.q_true)
                z[t] = (z[t - 1] + step) % cfg.q_true
            else:
                z[t] = z[t - 1]
        points = tuple(int(t) for t in range(1, n) if z[t] != z[t - 1])
        return z, points
    if cfg.change_points is None:
        points = tuple(int(np.floor(n * j / cfg.q_true))
                       for j in range(1, cfg.q_true))
    else:
        points = tuple(sorted(int(p) for p in cfg.change_points))
    if any(p <= 0 or p >= n for p in points):
        raise ConfigError(f"change points {points} outside (0, {n})")
    z = np.empty(n, dtype=np.int64)
    prev = rng.integers(cfg.q_true)
    start = 0
    for end in (*points, n):
        z[start:end] = prev
        if cfg.q_true > 1:
            step = rng.integers(1, cfg.q_true)
            prev = (prev + step) % cfg.q_true
        start = end
    return z, points


def gen_emitter_records(cfg: EmitterConfig
                        ) -> tuple[list[StudentRecord], GroundTruth]:
    table = cfg.table()
    means = cfg.regime_means()
    streams = np.random.SeedSequence(cfg.seed).spawn(cfg.n_students)
    records, regimes, intents, change_points = [], [], [], []
    for j, ss in enumerate(streams):
        rng = np.random.default_rng(ss)
        z, points = _regime_path(cfg, rng)
        if cfg.intent_weights is None:
            dominant = int(rng.integers(cfg.k_true))
        else:
            dominant = int(rng.choice(cfg.k_true,
                                      p=np.asarray(cfg.intent_weights)))
        c = np.empty(cfg.n_steps, dtype=np.int64)
        start = 0
        for end in (*points, cfg.n_steps):
            if cfg.k_true > 1 and rng.random() >= cfg.intent_p:
                shift = int(rng.integers(1, cfg.k_true))
                c[start:end] = (dominant + shift) % cfg.k_true
            else:
                c[start:end] = dominant
            start = end
        states = rng.standard_normal((cfg.n_steps, cfg.m_s)) + means[z]
        if cfg.intent_cue > 0:
            states[np.arange(cfg.n_steps), cfg.m_s - cfg.k_true + c] \
                += cfg.intent_cue
        probs = table[c, z]  # (n, |A|)
        u = rng.random(cfg.n_steps)
        actions = (u[:, None] > probs.cumsum(axis=1)).sum(axis=1)
        traj = Trajectory(
            traj_id=f"synth-{j:04d}",
            semester=cfg.semesters[j % len(cfg.semesters)],
            states=states,
            actions=actions.astype(np.int64),
            times=np.arange(cfg.n_steps, dtype=np.float64) * cfg.dt,
        )
        records.append(StudentRecord(
            student_id=traj.traj_id, semester=traj.semester,
            pre=cfg.pre_score, post=cfg.post_score, trajectory=traj))
        regimes.append(z)
        intents.append(c)
        change_points.append(points)
    truth = GroundTruth(regimes=tuple(regimes), intents=tuple(intents),
                        change_points=tuple(change_points))
    return records, truth


def gen_emitter(cfg: EmitterConfig) -> tuple[Dataset, GroundTruth]:
    records, truth = gen_emitter_records(cfg)
    data = records_to_dataset(records, schema=FeatureSchema.flat(cfg.m_s))
    return data, truth


def write_emitter(cfg: EmitterConfig, data_path, truth_path=None):
    """Emit the JSONL dataset plus the sidecar ground-truth JSON."""
    from .ingest import write_dataset
    records, truth = gen_emitter_records(cfg)
    write_dataset(data_path, records)
    if truth_path is not None:
        with open(truth_path, "w", encoding="utf-8") as fh:
            json.dump(truth.to_dict(), fh)
    return records, truth


# ---------------------------------------------------------------------------
# tabular MDPs with Boltzmann experts

def boltzmann_policy(q_table: np.ndarray, beta: float) -> np.ndarray:
    z = beta * q_table
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def boltzmann_demos(mdp: HighLevelMDP, reward: np.ndarray, beta: float,
                    n_episodes: int, ep_len: int,
                    seed: int = 0) -> list[tuple[np.ndarray, np.ndarray]]:
    """Sample (state, action) sequences from the Boltzmann(beta * Q*)
    expert of the given reward on the given MDP."""
    q_star = value_iteration(mdp, reward, tol=1e-12)
    pi = boltzmann_policy(q_star, beta)
    rng = np.random.default_rng(seed)
    demos = []
    for _ in range(n_episodes):
        s = int(rng.integers(mdp.n_states))
        states = np.empty(ep_len, dtype=np.int64)
        actions = np.empty(ep_len, dtype=np.int64)
        for t in range(ep_len):
            a = int(rng.choice(mdp.n_actions, p=pi[s]))
            states[t], actions[t] = s, a
            s = int(rng.choice(mdp.n_states, p=mdp.p[s, a]))
        demos.append((states, actions))
    return demos


def random_mdp(n_states: int, n_actions: int, gamma: float = 0.9,
               seed: int = 0, concentration: float = 0.5) -> HighLevelMDP:
    """Dirichlet-random transition tensor; handy oracle substrate."""
    rng = np.random.default_rng(seed)
    p = rng.dirichlet(np.full(n_states, concentration),
                      size=(n_states, n_actions))
    return HighLevelMDP(n_states=n_states, n_actions=n_actions,
                        p=p, gamma=gamma)


@dataclass(frozen=True)
class GridworldConfig:
    height: int = 5
    width: int = 5
    goal: int | None = None  # flat index; default bottom-right cell
    step_cost: float = -0.01
    goal_reward: float = 1.0
    state_rewards: tuple[float, ...] | None = None  # overrides the two above
    gamma: float = 0.9
    boltzmann_beta: float = 5.0
    n_episodes: int = 100
    ep_len: int = 30
    seed: int = 0

    def __post_init__(self):
        if self.height < 1 or self.width < 1:
            raise ConfigError("grid must be at least 1x1")
        if self.boltzmann_beta <= 0:
            raise ConfigError(
                f"boltzmann_beta must be > 0, got {self.boltzmann_beta}")
        n = self.height * self.width
        goal = n - 1 if self.goal is None else self.goal
        if not 0 <= goal < n:
            raise ConfigError(f"goal {goal} outside the {n}-state grid")
        if self.state_rewards is not None and len(self.state_rewards) != n:
            raise ConfigError(
                f"{len(self.state_rewards)} state rewards for {n} cells")


@dataclass(frozen=True)
class GridworldData:
    config: GridworldConfig
    mdp: HighLevelMDP
    reward: np.ndarray  # (S, A), reward for taking a at s
    q_star: np.ndarray  # (S, A)
    demos: tuple[tuple[np.ndarray, np.ndarray], ...]


# actions: 0=up 1=down 2=left 3=right
_MOVES = ((-1, 0), (1, 0), (0, -1), (0, 1))


def gen_gridworld(cfg: GridworldConfig) -> GridworldData:
    """Deterministic grid MDP, exact value iteration on the true reward,
    demonstrations from the Boltzmann(beta * Q*) expert."""
    h, w = cfg.height, cfg.width
    n, n_a = h * w, 4
    goal = n - 1 if cfg.goal is None else cfg.goal
    if cfg.state_rewards is None:
        state_r = np.full(n, cfg.step_cost)
        state_r[goal] = cfg.goal_reward
    else:
        state_r = np.asarray(cfg.state_rewards, dtype=np.float64)
    p = np.zeros((n, n_a, n))
    reward = np.zeros((n, n_a))
    for s in range(n):
        r, c = divmod(s, w)
        for a, (dr, dc) in enumerate(_MOVES):
            nr, nc = r + dr, c + dc
            s2 = s if not (0 <= nr < h and 0 <= nc < w) else nr * w + nc
            if s == goal:  # absorbing
                s2 = goal
            p[s, a, s2] = 1.0
            reward[s, a] = state_r[s2]
    mdp = HighLevelMDP(n_states=n, n_actions=n_a, p=p, gamma=cfg.gamma)
    q_star = value_iteration(mdp, reward, tol=1e-12)
    demos = boltzmann_demos(mdp, reward, cfg.boltzmann_beta,
                            cfg.n_episodes, cfg.ep_len, seed=cfg.seed)
    return GridworldData(config=cfg, mdp=mdp, reward=reward,
                         q_star=q_star, demos=tuple(demos))
