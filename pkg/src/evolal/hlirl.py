"""High-level reward regulator.

Works on the abstracted decision process whose states are partition
labels and whose actions are mixture-cluster ids. The empirical MDP is
Laplace-smoothed from the high-level demonstrations, the expert is
modeled as Boltzmann-rational in the optimal Q of a tabular reward, and
that reward is fit by maximum likelihood with finite-difference
gradients. The fitted per-step rewards feed back into the partition's
switch penalty.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DegenerateInputError

LOGP_FLOOR = -30.0


@dataclass(frozen=True)
class HighLevelMDP:
    n_states: int
    n_actions: int
    p: np.ndarray  # (S, A, S), rows sum to 1
    gamma: float = 0.9

    def __post_init__(self):
        if self.n_states < 1 or self.n_actions < 1:
            raise ConfigError("need at least one state and one action")
        if not 0.0 <= self.gamma < 1.0:
            raise ConfigError(f"gamma must be in [0,1), got {self.gamma}")
        p = np.asarray(self.p, dtype=np.float64)
        if p.shape != (self.n_states, self.n_actions, self.n_states):
            raise ConfigError(
                f"transition tensor shape {p.shape}, expected "
                f"({self.n_states}, {self.n_actions}, {self.n_states})")
        if np.any(p < 0) or np.abs(p.sum(axis=2) - 1.0).max() > 1e-12:
            raise ConfigError("transition rows must be distributions")
        object.__setattr__(self, "p", p)
        self.p.setflags(write=False)


def _check_demos(demos, n_states: int, n_actions: int):
    if not demos:
        raise DegenerateInputError("no high-level demonstrations")
    out = []
    for k, (s_seq, a_seq) in enumerate(demos):
        s = np.asarray(s_seq, dtype=np.int64)
        a = np.asarray(a_seq, dtype=np.int64)
        if s.shape != a.shape or s.ndim != 1 or s.size == 0:
            raise ConfigError(f"demo {k}: malformed state/action sequences")
        if s.min() < 0 or s.max() >= n_states:
            raise ConfigError(f"demo {k}: state label outside [0,{n_states})")
        if a.min() < 0 or a.max() >= n_actions:
            raise ConfigError(f"demo {k}: action label outside [0,{n_actions})")
        out.append((s, a))
    return out


def build_high_level_mdp(demos, n_states: int, n_actions: int,
                         gamma: float = 0.9) -> HighLevelMDP:
    """Laplace-smoothed empirical transitions:
    p(s'|s,a) = (count(s,a,s') + 1) / (count(s,a) + n_states)."""
    demos = _check_demos(demos, n_states, n_actions)
    counts = np.zeros((n_states, n_actions, n_states))
    for s, a in demos:
        np.add.at(counts, (s[:-1], a[:-1], s[1:]), 1.0)
    p = (counts + 1.0) / (counts.sum(axis=2, keepdims=True) + n_states)
    return HighLevelMDP(n_states=n_states, n_actions=n_actions,
                        p=p, gamma=gamma)


def value_iteration(mdp: HighLevelMDP, reward: np.ndarray,
                    tol: float = 1e-8, max_iter: int = 100000) -> np.ndarray:
    """Exact hard-max Q iteration to sup-norm tolerance `tol`."""
    reward = np.asarray(reward, dtype=np.float64)
    if reward.shape != (mdp.n_states, mdp.n_actions):
        raise ConfigError(
            f"reward shape {reward.shape}, expected "
            f"({mdp.n_states}, {mdp.n_actions})")
    q = np.zeros((mdp.n_states, mdp.n_actions))
    for _ in range(max_iter):
        v = q.max(axis=1)
        q_new = reward + mdp.gamma * mdp.p @ v
        if np.abs(q_new - q).max() < tol:
            return q_new
        q = q_new
    return q


def bellman_residual(mdp: HighLevelMDP, reward: np.ndarray,
                     q: np.ndarray) -> float:
    v = q.max(axis=1)
    return float(np.abs(reward + mdp.gamma * mdp.p @ v - q).max())


def _log_policy(q: np.ndarray, beta: float) -> np.ndarray:
    z = beta * q
    z = z - z.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def boltzmann_loglik(mdp: HighLevelMDP, reward: np.ndarray, demos,
                     beta: float, vi_tol: float = 1e-8) -> float:
    """Sum over demo steps of log softmax(beta * Q_R)(a|s)."""
    q = value_iteration(mdp, reward, tol=vi_tol)
    logp = _log_policy(q, beta)
    total = 0.0
    for s, a in demos:
        total += float(np.maximum(logp[s, a], LOGP_FLOOR).sum())
    return total


@dataclass(frozen=True)
class RegulatorConfig:
    beta_b: float = 5.0
    gamma: float = 0.9
    steps: int = 200
    lr: float = 0.1
    fd_eps: float = 1e-5
    vi_tol: float = 1e-8
    grad_tol: float = 1e-6
    min_lr: float = 1e-12

    def __post_init__(self):
        if self.beta_b <= 0:
            raise ConfigError(f"beta_b must be > 0, got {self.beta_b}")
        if self.lr <= 0 or self.fd_eps <= 0:
            raise ConfigError("lr and fd_eps must be > 0")
        if self.steps < 0:
            raise ConfigError(f"steps must be >= 0, got {self.steps}")


@dataclass(frozen=True)
class RewardRegulator:
    r_bar: np.ndarray  # (Q, O), zero mean, max |.| <= 1 (unless all zero)
    beta_b: float
    mdp: HighLevelMDP
    loglik: float
    trace: tuple[float, ...] = ()
    converged: bool = True

    def __post_init__(self):
        r = np.asarray(self.r_bar, dtype=np.float64)
        object.__setattr__(self, "r_bar", r)
        self.r_bar.setflags(write=False)

    def policy(self) -> np.ndarray:
        q = value_iteration(self.mdp, self.r_bar)
        return np.exp(_log_policy(q, self.beta_b))

    def to_dict(self) -> dict:
        return {"r_bar": self.r_bar.tolist(), "beta_b": self.beta_b,
                "gamma": self.mdp.gamma, "p": self.mdp.p.tolist(),
                "loglik": self.loglik}

    @classmethod
    def from_dict(cls, doc: dict) -> "RewardRegulator":
        p = np.array(doc["p"], dtype=np.float64)
        mdp = HighLevelMDP(n_states=p.shape[0], n_actions=p.shape[1],
                           p=p, gamma=float(doc["gamma"]))
        return cls(r_bar=np.array(doc["r_bar"], dtype=np.float64),
                   beta_b=float(doc["beta_b"]), mdp=mdp,
                   loglik=float(doc["loglik"]))


def normalize_reward(r: np.ndarray) -> np.ndarray:
    """Center then scale so max |r| is 1; the Boltzmann policy is
    invariant to the shift and the scale is absorbed into beta_b."""
    r = r - r.mean()
    peak = np.abs(r).max()
    return r / peak if peak > 0 else r


def _fd_grad(mdp, r, demos, beta, eps, vi_tol):
    grad = np.zeros_like(r)
    for idx in np.ndindex(*r.shape):
        bump = np.zeros_like(r)
        bump[idx] = eps
        up = boltzmann_loglik(mdp, r + bump, demos, beta, vi_tol)
        dn = boltzmann_loglik(mdp, r - bump, demos, beta, vi_tol)
        grad[idx] = (up - dn) / (2.0 * eps)
    return grad


def fit_ml_irl(demos, n_states: int, n_actions: int,
               config: RegulatorConfig | None = None,
               mdp: HighLevelMDP | None = None) -> RewardRegulator:
    """Maximum-likelihood tabular reward under the Boltzmann expert
    model. Finite-difference ascent with backtracking: a step that would
    lower the likelihood halves the rate instead, so the trace is
    nondecreasing."""
    cfg = config or RegulatorConfig()
    demos = _check_demos(demos, n_states, n_actions)
    if mdp is None:
        mdp = build_high_level_mdp(demos, n_states, n_actions, cfg.gamma)
    if n_actions == 1:
        # a single cluster admits no preference signal
        r = np.zeros((n_states, 1))
        ll = boltzmann_loglik(mdp, r, demos, cfg.beta_b, cfg.vi_tol)
        return RewardRegulator(r_bar=r, beta_b=cfg.beta_b, mdp=mdp,
                               loglik=ll, trace=(ll,))
    r = np.zeros((n_states, n_actions))
    ll = boltzmann_loglik(mdp, r, demos, cfg.beta_b, cfg.vi_tol)
    trace = [ll]
    lr = cfg.lr
    converged = False
    for _ in range(cfg.steps):
        grad = _fd_grad(mdp, r, demos, cfg.beta_b, cfg.fd_eps, cfg.vi_tol)
        gnorm = float(np.abs(grad).max())
        if gnorm < cfg.grad_tol:
            converged = True
            break
        while lr >= cfg.min_lr:
            cand = r + lr * grad
            cand_ll = boltzmann_loglik(mdp, cand, demos, cfg.beta_b,
                                       cfg.vi_tol)
            if cand_ll >= ll:
                r, ll = cand, cand_ll
                break
            lr *= 0.5
        else:
            converged = True
            break
        trace.append(ll)
    r = normalize_reward(r)
    ll = boltzmann_loglik(mdp, r, demos, cfg.beta_b, cfg.vi_tol)
    return RewardRegulator(r_bar=r, beta_b=cfg.beta_b, mdp=mdp, loglik=ll,
                           trace=tuple(trace), converged=converged)


def step_rewards(regulator: RewardRegulator, s_seq, a_seq) -> np.ndarray:
    """Fitted reward along one high-level trajectory."""
    s = np.asarray(s_seq, dtype=np.int64)
    a = np.asarray(a_seq, dtype=np.int64)
    if s.shape != a.shape:
        raise ConfigError("state/action sequences differ in length")
    return regulator.r_bar[s, a].astype(np.float64)
