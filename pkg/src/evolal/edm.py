"""Energy-based distribution matching for strictly offline policy
induction.

One trainer covers both methods: behavioral cloning is the alpha_e = 0
case, where the objective reduces exactly to the weighted imitation loss
and no energy machinery runs. With alpha_e > 0 the state marginal of the
demonstrations is matched by pushing energy down on data states and up on
Langevin-sampled negatives drawn from a persistent buffer. The energy is
read off the policy logits, E(s) = -logsumexp(logits(s)), so one network
carries both heads.

The three RNG streams (init, shuffle, energy) are spawned independently
from one seed, so enabling the energy term never perturbs the shuffle
order or the initialization.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
from scipy.special import softmax

from .errors import ConfigError, DegenerateInputError
from .policynet import (Adam, PolicyNet, TrainConfig, cross_entropy_grad,
                        squared_loss_grad)

ENERGY_REG = 1e-3


@dataclass(frozen=True)
class EDMConfig:
    alpha_e: float = 1.0
    sgld_steps: int = 20
    sgld_step_size: float = 0.01
    sgld_noise: float = 0.005
    buffer_size: int = 512
    reinit_prob: float = 0.05
    loss: str = "ce"  # "ce" or "squared"
    train: TrainConfig = field(default_factory=TrainConfig)

    def __post_init__(self):
        if self.alpha_e < 0:
            raise ConfigError(f"alpha_e must be >= 0, got {self.alpha_e}")
        if self.sgld_steps < 0:
            raise ConfigError(
                f"sgld_steps must be >= 0, got {self.sgld_steps}")
        if self.sgld_step_size <= 0 or self.sgld_noise <= 0:
            raise ConfigError("SGLD step size and noise scale must be > 0")
        if self.buffer_size < 1 or not 0.0 <= self.reinit_prob <= 1.0:
            raise ConfigError("invalid negative-buffer parameters")
        if self.loss not in ("ce", "squared"):
            raise ConfigError(f"unknown loss {self.loss!r}")


@dataclass
class EDMResult:
    net: PolicyNet
    losses: list[float] = field(default_factory=list)
    buffer: np.ndarray | None = None

    @property
    def final_loss(self) -> float:
        return self.losses[-1]


def sgld_negatives(net: PolicyNet, init: np.ndarray, k: int, step: float,
                   noise: float,
                   seed: int | np.random.Generator = 0) -> np.ndarray:
    """K steps of x <- x - step * dE/dx + noise * xi, xi ~ N(0, I)."""
    rng = seed if isinstance(seed, np.random.Generator) \
        else np.random.default_rng(seed)
    x = np.array(init, dtype=np.float64, copy=True)
    for _ in range(k):
        x -= step * net.grad_energy_x(x)
        x += noise * rng.standard_normal(x.shape)
    return x


def predict(net: PolicyNet, s: np.ndarray):
    """(argmax action, probability vector); ties go to the lowest id."""
    p = net.probs(s)[0]
    return int(np.argmax(p)), p


def _lse(z):
    m = z.max(axis=1, keepdims=True)
    return m + np.log(np.exp(z - m).sum(axis=1, keepdims=True))


def _data_term(net: PolicyNet, x, actions, weights, loss_kind):
    logits, cache = net.forward(x)
    if loss_kind == "ce":
        logp = logits - _lse(logits)
        loss, grad = cross_entropy_grad(logp, actions, weights)
    else:
        loss, grad = squared_loss_grad(softmax(logits, axis=1),
                                       actions, weights)
    return loss, grad, logits, cache


def train_edm(states: np.ndarray, actions: np.ndarray,
              weights: np.ndarray | None = None,
              config: EDMConfig | None = None,
              net: PolicyNet | None = None,
              buffer: np.ndarray | None = None,
              n_actions: int | None = None) -> EDMResult:
    """Fit the policy. ``weights`` are per-example responsibilities.

    Loss per epoch:
        sum_i w_i * imitation(s_i, a_i)
        + alpha_e * (mean E(data batch) - mean E(sampled batch))
        + 1e-3 * mean(E^2 over both batches)
    with the energy terms active only when alpha_e > 0.
    """
    config = config or EDMConfig()
    states = np.asarray(states, dtype=np.float64)
    actions = np.asarray(actions, dtype=np.int64)
    n = states.shape[0]
    if n == 0:
        raise DegenerateInputError("cannot train a policy on zero examples")
    if weights is None:
        weights = np.ones(n, dtype=np.float64)
    weights = np.asarray(weights, dtype=np.float64)
    if weights.shape != (n,):
        raise ConfigError(
            f"weights shape {weights.shape} does not match {n} examples")
    if np.any(weights < 0):
        raise ConfigError("negative example weights")
    if float(weights.sum()) <= 0.0:
        raise DegenerateInputError("all example weights are zero")

    init_ss, shuffle_ss, energy_ss = np.random.SeedSequence(
        config.train.seed).spawn(3)
    rng_shuffle = np.random.default_rng(shuffle_ss)
    rng_energy = np.random.default_rng(energy_ss)

    if net is None:
        if n_actions is None:
            n_actions = int(actions.max()) + 1
        net = PolicyNet.init(states.shape[1], max(n_actions, 2),
                             np.random.default_rng(init_ss))
    else:
        net = net.copy()

    use_energy = config.alpha_e > 0.0
    if use_energy:
        buffer = (rng_energy.standard_normal(
            (config.buffer_size, states.shape[1]))
            if buffer is None else buffer.copy())

    opt = Adam(lr=config.train.lr, weight_decay=config.train.weight_decay)
    losses = []
    for _ in range(config.train.epochs):
        order = rng_shuffle.permutation(n)
        epoch_loss = 0.0
        for start in range(0, n, config.train.batch_size):
            idx = order[start:start + config.train.batch_size]
            x, a, w = states[idx], actions[idx], weights[idx]
            loss, grad_logits, logits, cache = _data_term(
                net, x, a, w, config.loss)

            if use_energy:
                pick = rng_energy.integers(0, config.buffer_size,
                                           size=len(idx))
                neg0 = buffer[pick]
                fresh = rng_energy.random(len(idx)) < config.reinit_prob
                if fresh.any():
                    neg0[fresh] = rng_energy.standard_normal(
                        (int(fresh.sum()), states.shape[1]))
                neg = sgld_negatives(net, neg0, config.sgld_steps,
                                     config.sgld_step_size,
                                     config.sgld_noise, rng_energy)
                buffer[pick] = neg

                logits_neg, cache_neg = net.forward(neg)
                e_pos = -_lse(logits).ravel()
                e_neg = -_lse(logits_neg).ravel()
                n_pos, n_neg = len(e_pos), len(e_neg)
                n_all = n_pos + n_neg
                loss += config.alpha_e * (e_pos.mean() - e_neg.mean())
                loss += ENERGY_REG * float(
                    (e_pos @ e_pos + e_neg @ e_neg) / n_all)

                # dE/dlogits = -softmax(logits)
                coef_pos = (config.alpha_e / n_pos
                            + ENERGY_REG * 2.0 * e_pos / n_all)
                coef_neg = (-config.alpha_e / n_neg
                            + ENERGY_REG * 2.0 * e_neg / n_all)
                grad_logits += coef_pos[:, None] * (-softmax(logits, axis=1))
                gw2, gb2, _ = net.backward(
                    cache_neg, coef_neg[:, None] * (-softmax(logits_neg,
                                                             axis=1)))
            gw, gb, _ = net.backward(cache, grad_logits)
            if use_energy:
                gw = [g1 + g2 for g1, g2 in zip(gw, gw2)]
                gb = [g1 + g2 for g1, g2 in zip(gb, gb2)]
            opt.step(net.params(), [*gw, *gb])
            epoch_loss += loss
        losses.append(epoch_loss)
    return EDMResult(net=net, losses=losses,
                     buffer=buffer if use_energy else None)


def train_weighted_bc(states, actions, weights=None,
                      config: EDMConfig | TrainConfig | None = None,
                      loss: str | None = None, **kwargs) -> EDMResult:
    """The alpha_e = 0 corner of the same trainer.

    Accepts either a full EDMConfig or a bare TrainConfig.
    """
    if config is None:
        config = EDMConfig()
    elif isinstance(config, TrainConfig):
        config = EDMConfig(train=config)
    config = replace(config, alpha_e=0.0)
    if loss is not None:
        config = replace(config, loss=loss)
    return train_edm(states, actions, weights, config=config, **kwargs)


def weighted_loglik(net: PolicyNet, states, actions,
                    weights=None, floor: float = -30.0) -> float:
    """sum_i w_i * log pi(a_i | s_i), each log-prob floored."""
    states = np.asarray(states, dtype=np.float64)
    actions = np.asarray(actions, dtype=np.int64)
    logp = net.log_probs(states)[np.arange(len(actions)), actions]
    logp = np.maximum(logp, floor)
    if weights is None:
        return float(logp.sum())
    return float(np.asarray(weights, dtype=np.float64) @ logp)
