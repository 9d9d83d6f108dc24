"""Full pipeline: regulated partition -> sub-trajectory mixture ->
high-level reward regulator -> regulated partition again.

Variants:
  themes   alternate all three stages until labels and responsibilities
           settle (the fitted reward modulates the switch penalty)
  themes1  one pass, no reward feedback
  themes0  one pass, single intent cluster (plain EDM instead of EM-EDM)

Stage seeds are fixed across outer iterations. The regulated partition
refit warm-starts from the previous partition, and re-entering a converged
partition under unchanged penalties is a bitwise fixed point, so a run
whose regulation factor is identically 1 retraces the single-pass variant
exactly.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .core import Dataset, Trajectory, window_trajectory
from .edm import EDMConfig
from .emedm import MixtureModel, demo_loglik, fit_mixture
from .errors import ConfigError, DegenerateInputError
from .hlirl import (RegulatorConfig, RewardRegulator, fit_ml_irl,
                    step_rewards)
from .partition import (PartitionConfig, PartitionModel, assign_labels,
                        fit_partition, step_labels)
from .policynet import TrainConfig

VARIANTS = ("themes", "themes1", "themes0")


@dataclass(frozen=True)
class ThemesConfig:
    partition: PartitionConfig = field(default_factory=PartitionConfig)
    edm: EDMConfig = field(default_factory=EDMConfig)
    regulator: RegulatorConfig = field(default_factory=RegulatorConfig)
    n_intents: int = 3
    em_tol: float = 1e-3
    em_max_iter: int = 30
    outer_iters: int = 10
    change_tol: float = 0.01
    min_run: int = 2
    seed: int = 0

    def __post_init__(self):
        if self.n_intents < 1:
            raise ConfigError(f"n_intents must be >= 1, got {self.n_intents}")
        if self.outer_iters < 1:
            raise ConfigError(
                f"outer_iters must be >= 1, got {self.outer_iters}")
        if self.change_tol <= 0:
            raise ConfigError(
                f"change_tol must be > 0, got {self.change_tol}")
        if self.min_run < 1:
            raise ConfigError(f"min_run must be >= 1, got {self.min_run}")


@dataclass(frozen=True)
class SubTrajectory:
    traj_idx: int
    traj_id: str
    start: int  # first step index covered
    states: np.ndarray
    actions: np.ndarray
    times: np.ndarray
    label: int  # partition label of the run

    def __len__(self) -> int:
        return len(self.actions)


def _runs(labels: np.ndarray) -> list[list[int]]:
    """Maximal constant runs as [start, end, label] with end exclusive."""
    edges = np.flatnonzero(np.diff(labels)) + 1
    starts = np.concatenate([[0], edges])
    ends = np.concatenate([edges, [len(labels)]])
    return [[int(s), int(e), int(labels[s])] for s, e in zip(starts, ends)]


def merge_short_runs(labels: np.ndarray, min_run: int = 2,
                     scores: np.ndarray | None = None) -> np.ndarray:
    """Absorb runs shorter than min_run into a neighbor. The target is
    the neighbor whose profile scores the run's steps higher when a
    (n_steps, Q) score matrix is given, otherwise the longer neighbor;
    ties go left."""
    labels = np.asarray(labels, dtype=np.int64).copy()
    runs = _runs(labels)
    while len(runs) > 1:
        lengths = [e - s for s, e, _ in runs]
        shortest = int(np.argmin(lengths))
        if lengths[shortest] >= min_run:
            break
        s, e, _ = runs[shortest]
        left = runs[shortest - 1] if shortest > 0 else None
        right = runs[shortest + 1] if shortest < len(runs) - 1 else None
        if left is None:
            target = right
        elif right is None:
            target = left
        elif scores is not None:
            left_score = float(scores[s:e, left[2]].sum())
            right_score = float(scores[s:e, right[2]].sum())
            target = left if left_score >= right_score else right
        else:
            target = left if (left[1] - left[0]) >= (right[1] - right[0]) \
                else right
        labels[s:e] = target[2]
        runs = _runs(labels)
    return labels


def cut_subtrajectories(data: Dataset, step_label_seqs) -> list[SubTrajectory]:
    """Slice each trajectory at the label run boundaries, in trajectory
    order then left to right."""
    if len(step_label_seqs) != len(data.trajectories):
        raise ConfigError(
            f"{len(step_label_seqs)} label sequences for "
            f"{len(data.trajectories)} trajectories")
    out = []
    for j, (traj, lab) in enumerate(zip(data.trajectories, step_label_seqs)):
        lab = np.asarray(lab, dtype=np.int64)
        if lab.shape[0] != len(traj):
            raise ConfigError(
                f"trajectory {j}: {lab.shape[0]} labels for "
                f"{len(traj)} steps")
        for s, e, q in _runs(lab):
            out.append(SubTrajectory(
                traj_idx=j, traj_id=traj.traj_id, start=s,
                states=traj.states[s:e], actions=traj.actions[s:e],
                times=traj.times[s:e], label=q))
    return out


def partition_step_labels(part: PartitionModel, data: Dataset
                          ) -> list[np.ndarray]:
    omega = part.config.omega
    return [step_labels(lab, len(traj), omega)
            for lab, traj in zip(part.labels, data.trajectories)]


@dataclass(frozen=True)
class ThemesModel:
    config: ThemesConfig
    variant: str
    partition: PartitionModel
    mixture: MixtureModel
    regulator: RewardRegulator
    subtrajectories: tuple[SubTrajectory, ...]
    step_label_seqs: tuple[np.ndarray, ...]
    n_outer: int
    converged: bool
    diagnostics: tuple[dict, ...]

    def to_dict(self) -> dict:
        # sub-trajectory slices are views into the training data and are
        # recomputable from the partition; they are not serialized
        return {"variant": self.variant,
                "config": asdict(self.config),
                "n_outer": self.n_outer,
                "converged": self.converged,
                "partition": self.partition.to_dict(),
                "mixture": self.mixture.to_dict(),
                "regulator": self.regulator.to_dict(),
                "diagnostics": list(self.diagnostics)}

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_dict(cls, doc: dict) -> "ThemesModel":
        cfg = themes_config_from_dict(doc["config"])
        return cls(config=cfg, variant=str(doc["variant"]),
                   partition=PartitionModel.from_dict(doc["partition"]),
                   mixture=MixtureModel.from_dict(doc["mixture"]),
                   regulator=RewardRegulator.from_dict(doc["regulator"]),
                   subtrajectories=(), step_label_seqs=(),
                   n_outer=int(doc["n_outer"]),
                   converged=bool(doc["converged"]),
                   diagnostics=tuple(doc["diagnostics"]))

    @classmethod
    def from_json(cls, text: str) -> "ThemesModel":
        return cls.from_dict(json.loads(text))


def themes_config_from_dict(doc: dict) -> ThemesConfig:
    doc = dict(doc)
    part = PartitionConfig(**doc.pop("partition"))
    edm_doc = dict(doc.pop("edm"))
    edm = EDMConfig(**{**edm_doc, "train": TrainConfig(**edm_doc["train"])})
    reg = RegulatorConfig(**doc.pop("regulator"))
    return ThemesConfig(partition=part, edm=edm, regulator=reg, **doc)


def _infer_n_actions(data: Dataset) -> int:
    peak = 0
    for traj in data.trajectories:
        if len(traj.actions):
            peak = max(peak, int(traj.actions.max()))
    return peak + 1


def high_level_sequences(step_label_seqs, subtrajs, assignment
                         ) -> list[tuple[np.ndarray, np.ndarray]]:
    """Per trajectory: abstract states = step partition labels, abstract
    actions = the intent cluster of the covering sub-trajectory."""
    hl = [(np.asarray(lab, dtype=np.int64),
           np.full(len(lab), -1, dtype=np.int64))
          for lab in step_label_seqs]
    for sub, o in zip(subtrajs, assignment):
        hl[sub.traj_idx][1][sub.start:sub.start + len(sub)] = o
    return hl


def fit_themes(data: Dataset, config: ThemesConfig | None = None,
               variant: str = "themes",
               n_actions: int | None = None) -> ThemesModel:
    cfg = config or ThemesConfig()
    if variant not in VARIANTS:
        raise ConfigError(f"unknown variant {variant!r}, expected one of "
                          f"{VARIANTS}")
    if not data.trajectories:
        raise DegenerateInputError("no trajectories to fit")
    if n_actions is None:
        n_actions = _infer_n_actions(data)
    single_pass = variant in ("themes1", "themes0")
    n_intents = 1 if variant == "themes0" else cfg.n_intents

    part = fit_partition(data, cfg.partition)
    mixture = regulator = None
    subtrajs: list[SubTrajectory] = []
    step_labs: list[np.ndarray] = []
    prev_resp = None
    diags: list[dict] = []
    n_outer = 0
    converged = False
    for it in range(1, cfg.outer_iters + 1):
        n_outer = it
        step_labs = [merge_short_runs(lab, cfg.min_run)
                     for lab in partition_step_labels(part, data)]
        subtrajs = cut_subtrajectories(data, step_labs)
        mixture = fit_mixture(
            subtrajs, n_clusters=min(n_intents, len(subtrajs)),
            edm_config=cfg.edm, tol=cfg.em_tol, max_iter=cfg.em_max_iter,
            seed=cfg.seed, n_actions=n_actions)
        assignment = np.argmax(mixture.responsibilities, axis=1)
        hl = high_level_sequences(step_labs, subtrajs, assignment)
        regulator = fit_ml_irl(hl, cfg.partition.n_clusters,
                               mixture.n_clusters, cfg.regulator)
        entry = {"iteration": it, "n_demos": len(subtrajs),
                 "em_loglik": mixture.loglik,
                 "irl_loglik": regulator.loglik}
        if single_pass:
            diags.append(entry)
            break
        rewards = [step_rewards(regulator, s, a) for s, a in hl]
        new_part = fit_partition(data, cfg.partition, rewards=rewards,
                                 init=part)
        old_all = np.concatenate(part.labels)
        new_all = np.concatenate(new_part.labels)
        label_change = float(np.mean(old_all != new_all))
        if prev_resp is not None \
                and prev_resp.shape == mixture.responsibilities.shape:
            resp_change = float(
                np.abs(mixture.responsibilities - prev_resp).mean())
        else:
            resp_change = 1.0
        entry["label_change"] = label_change
        entry["resp_change"] = resp_change
        diags.append(entry)
        part = new_part
        prev_resp = mixture.responsibilities
        if label_change < cfg.change_tol and resp_change < cfg.change_tol:
            converged = True
            break
    return ThemesModel(
        config=cfg, variant=variant, partition=part, mixture=mixture,
        regulator=regulator, subtrajectories=tuple(subtrajs),
        step_label_seqs=tuple(np.asarray(s) for s in step_labs),
        n_outer=n_outer, converged=converged, diagnostics=tuple(diags))


def predict_themes(model: ThemesModel, traj: Trajectory, t: int,
                   return_posterior: bool = False):
    """Causal action distribution at 1-based step t. The steps before t
    are re-partitioned with the fitted profiles (no reward feedback is
    available for unseen data), the trailing run is treated as the
    active sub-trajectory, and its pairs weight the cluster posterior."""
    if not 1 <= t <= len(traj):
        raise IndexError(f"step {t} outside 1..{len(traj)}")
    pcfg = model.partition.config
    mix = model.mixture
    hist = t - 1
    log_post = np.log(np.maximum(mix.priors, 1e-300)).copy()
    if hist >= pcfg.omega:
        sub = Trajectory(traj_id=traj.traj_id, semester=traj.semester,
                         states=traj.states[:hist],
                         actions=traj.actions[:hist],
                         times=traj.times[:hist])
        ws = window_trajectory(sub, pcfg.omega)
        vals = np.array([w.values for w in ws])
        decay = np.exp(-np.array([w.dt for w in ws[1:]]) / model.partition.tau)
        wlab = assign_labels(vals, list(model.partition.profiles),
                             pcfg.beta, decay=decay)
        slab = step_labels(wlab, hist, pcfg.omega)
        r0 = hist - 1
        while r0 > 0 and slab[r0 - 1] == slab[r0]:
            r0 -= 1
        run = traj.states[r0:hist], traj.actions[r0:hist]
        for o, net in enumerate(mix.policies):
            log_post[o] += demo_loglik(net, run)
    log_post -= log_post.max()
    post = np.exp(log_post)
    post /= post.sum()
    probs = np.zeros(mix.policies[0].n_actions)
    for o, net in enumerate(mix.policies):
        probs += post[o] * net.probs(traj.states[t - 1][None, :])[0]
    if return_posterior:
        return probs, post
    return probs


def step_posteriors(model: ThemesModel) -> list[np.ndarray]:
    """Training-time cluster posterior per step, broadcast from the
    sub-trajectory responsibilities."""
    if not model.subtrajectories:
        raise ConfigError("model was deserialized without sub-trajectories")
    n_traj = max(s.traj_idx for s in model.subtrajectories) + 1
    out = [None] * n_traj
    for j, lab in enumerate(model.step_label_seqs):
        out[j] = np.zeros((len(lab), model.mixture.n_clusters))
    for row, sub in zip(model.mixture.responsibilities,
                        model.subtrajectories):
        out[sub.traj_idx][sub.start:sub.start + len(sub)] = row
    return out
