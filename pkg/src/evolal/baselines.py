"""Reference baselines: plain behavioral cloning, and Gaussian-process
return redistribution feeding an offline fitted-Q learner.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from .core import Dataset
from .errors import ConditioningError, ConfigError, DegenerateInputError, \
    SchemaError
from .edm import train_weighted_bc
from .policynet import Adam, PolicyNet, TrainConfig


def _flatten(data: Dataset) -> tuple[np.ndarray, np.ndarray]:
    states = np.vstack([t.states for t in data.trajectories])
    actions = np.concatenate([t.actions for t in data.trajectories])
    return states, actions


def train_bc(data: Dataset, config: TrainConfig | None = None,
             loss: str = "ce", n_actions: int | None = None) -> PolicyNet:
    """Supervised policy fit on the pooled (state, action) pairs."""
    if not data.trajectories:
        raise DegenerateInputError("no trajectories to fit")
    states, actions = _flatten(data)
    res = train_weighted_bc(states, actions, config=config, loss=loss,
                            n_actions=n_actions)
    return res.net


# ---------------------------------------------------------------------------
# GP return redistribution

@dataclass(frozen=True)
class GPConfig:
    lengthscale: float = 1.0
    signal_var: float = 1.0
    noise_var: float = 1e-4
    cond_max: float = 1e12

    def __post_init__(self):
        if self.lengthscale <= 0 or self.signal_var <= 0 \
                or self.noise_var <= 0:
            raise ConfigError("GP hyperparameters must be positive")


def rbf_kernel(a: np.ndarray, b: np.ndarray, lengthscale: float,
               signal_var: float) -> np.ndarray:
    sq = (np.sum(a * a, axis=1)[:, None] + np.sum(b * b, axis=1)[None, :]
          - 2.0 * a @ b.T)
    np.maximum(sq, 0.0, out=sq)
    return signal_var * np.exp(-sq / (2.0 * lengthscale ** 2))


def gp_redistribute(data: Dataset, config: GPConfig | None = None
                    ) -> list[np.ndarray]:
    """Spread each trajectory return over its steps.

    Model: the return is the sum of a latent per-step value f(x) plus
    observation noise. With an RBF prior on f the joint is Gaussian, so
    each step's posterior mean conditions on all observed returns:
        K_yy[j,l] = sum_t sum_u k(x_jt, x_lu) + noise_var * delta_jl
        r_hat(x)  = k_sum(x, .) @ K_yy^-1 y
    """
    cfg = config or GPConfig()
    if not data.trajectories:
        raise DegenerateInputError("no trajectories to redistribute over")
    for traj in data.trajectories:
        if traj.outcome is None:
            raise SchemaError(
                f"trajectory {traj.traj_id} has no return to redistribute")
    y = np.array([t.outcome for t in data.trajectories], dtype=np.float64)
    states = np.vstack([t.states for t in data.trajectories])
    sizes = [len(t) for t in data.trajectories]
    bounds = np.cumsum([0, *sizes])
    k_ss = rbf_kernel(states, states, cfg.lengthscale, cfg.signal_var)
    # C[i, l] = cov(f(x_i), y_l); summing columns per trajectory
    c = np.add.reduceat(k_ss, bounds[:-1], axis=1)
    k_yy = np.add.reduceat(c, bounds[:-1], axis=0)
    k_yy[np.diag_indices_from(k_yy)] += cfg.noise_var
    cond = float(np.linalg.cond(k_yy))
    if not np.isfinite(cond) or cond > cfg.cond_max:
        raise ConditioningError(
            f"return covariance condition number {cond:.3e} exceeds "
            f"{cfg.cond_max:.1e}; increase noise_var")
    alpha = cho_solve(cho_factor(k_yy, lower=True), y)
    means = c @ alpha
    return [means[bounds[j]:bounds[j + 1]] for j in range(len(sizes))]


# ---------------------------------------------------------------------------
# offline fitted-Q

@dataclass(frozen=True)
class DQNConfig:
    gamma: float = 0.9
    sync_every: int = 100
    train: TrainConfig = field(default_factory=TrainConfig)

    def __post_init__(self):
        if not 0.0 <= self.gamma < 1.0:
            raise ConfigError(f"gamma must be in [0,1), got {self.gamma}")
        if self.sync_every < 1:
            raise ConfigError(
                f"sync_every must be >= 1, got {self.sync_every}")


@dataclass
class DQNResult:
    net: PolicyNet  # logits are Q-values
    losses: list[float] = field(default_factory=list)
    n_updates: int = 0


def build_transitions(data: Dataset, rewards: list[np.ndarray]):
    """(s, a, r, s', done) arrays; the last step of each trajectory is
    terminal and bootstraps to zero."""
    if len(rewards) != len(data.trajectories):
        raise ConfigError(
            f"{len(rewards)} reward sequences for "
            f"{len(data.trajectories)} trajectories")
    s, a, r, s2, done = [], [], [], [], []
    for traj, rew in zip(data.trajectories, rewards):
        rew = np.asarray(rew, dtype=np.float64)
        if rew.shape[0] != len(traj):
            raise ConfigError(
                f"trajectory {traj.traj_id}: {rew.shape[0]} rewards for "
                f"{len(traj)} steps")
        n = len(traj)
        s.append(traj.states)
        a.append(traj.actions)
        r.append(rew)
        nxt = np.vstack([traj.states[1:], traj.states[-1:]])
        s2.append(nxt)
        flag = np.zeros(n, dtype=bool)
        flag[-1] = True
        done.append(flag)
    return (np.vstack(s), np.concatenate(a), np.concatenate(r),
            np.vstack(s2), np.concatenate(done))


def train_dqn(data: Dataset, rewards: list[np.ndarray],
              config: DQNConfig | None = None,
              n_actions: int | None = None) -> DQNResult:
    """Fitted Q iteration over the fixed transition set with a frozen
    target copy refreshed every ``sync_every`` gradient updates."""
    cfg = config or DQNConfig()
    if not data.trajectories:
        raise DegenerateInputError("no transitions to fit")
    s, a, r, s2, done = build_transitions(data, rewards)
    n = s.shape[0]
    if n_actions is None:
        n_actions = int(a.max()) + 1
    init_ss, shuffle_ss = np.random.SeedSequence(cfg.train.seed).spawn(2)
    rng_shuffle = np.random.default_rng(shuffle_ss)
    net = PolicyNet.init(s.shape[1], max(n_actions, 2),
                         np.random.default_rng(init_ss))
    target = net.copy()
    opt = Adam(lr=cfg.train.lr, weight_decay=cfg.train.weight_decay)
    losses = []
    updates = 0
    for _ in range(cfg.train.epochs):
        order = rng_shuffle.permutation(n)
        epoch_loss = 0.0
        for start in range(0, n, cfg.train.batch_size):
            idx = order[start:start + cfg.train.batch_size]
            q_next = target.logits(s2[idx]).max(axis=1)
            targets = r[idx] + cfg.gamma * np.where(done[idx], 0.0, q_next)
            logits, cache = net.forward(s[idx])
            picked = logits[np.arange(len(idx)), a[idx]]
            diff = picked - targets
            epoch_loss += float(diff @ diff) / len(idx)
            grad_logits = np.zeros_like(logits)
            grad_logits[np.arange(len(idx)), a[idx]] = 2.0 * diff / len(idx)
            gw, gb, _ = net.backward(cache, grad_logits)
            opt.step(net.params(), [*gw, *gb])
            updates += 1
            if updates % cfg.sync_every == 0:
                target = net.copy()
        losses.append(epoch_loss)
    return DQNResult(net=net, losses=losses, n_updates=updates)


def greedy_actions(net: PolicyNet, states: np.ndarray) -> np.ndarray:
    return np.argmax(net.logits(states), axis=1)
