"""EM mixture of energy-regularized policies.

Demonstrations (whole trajectories or sub-trajectories) are soft-assigned
to latent intent clusters; each cluster's policy is a weighted EDM fit.
The E-step is exact given the policies, the M-step is SGD, so the
likelihood trace is monotone only up to optimizer slack: an iteration
that lowers it rolls back to the previous iterate and stops.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .edm import EDMConfig, train_edm
from .errors import ConfigError, DegenerateInputError
from .policynet import PolicyNet

LOGP_FLOOR = -30.0


def _demo_arrays(demo) -> tuple[np.ndarray, np.ndarray]:
    if isinstance(demo, tuple):
        states, actions = demo
    else:
        states, actions = demo.states, demo.actions
    states = np.asarray(states, dtype=np.float64)
    actions = np.asarray(actions, dtype=np.int64)
    if states.ndim != 2 or actions.ndim != 1 \
            or states.shape[0] != actions.shape[0] or states.shape[0] == 0:
        raise ConfigError("demo must pair a (n,m) state block with n actions")
    return states, actions


def demo_loglik(net: PolicyNet, demo) -> float:
    """Sum of per-step log pi(a|s), each floored at -30."""
    states, actions = _demo_arrays(demo)
    logp = net.log_probs(states)[np.arange(len(actions)), actions]
    return float(np.maximum(logp, LOGP_FLOOR).sum())


def e_step(priors: np.ndarray, loglik_matrix: np.ndarray
           ) -> tuple[np.ndarray, float]:
    """Posterior over clusters per demo and the total data loglik.
    z_jo is proportional to prior_o * exp(loglik_jo), stabilized via
    logsumexp."""
    priors = np.asarray(priors, dtype=np.float64)
    ll = np.asarray(loglik_matrix, dtype=np.float64)
    if ll.ndim != 2 or ll.shape[1] != priors.shape[0]:
        raise ConfigError("loglik matrix must be (n_demos, n_clusters)")
    log_w = np.log(np.maximum(priors, 1e-300))[None, :] + ll
    peak = log_w.max(axis=1, keepdims=True)
    lse = peak + np.log(np.exp(log_w - peak).sum(axis=1, keepdims=True))
    z = np.exp(log_w - lse)
    return z, float(lse.sum())


@dataclass(frozen=True)
class MixtureModel:
    n_clusters: int
    priors: np.ndarray  # (O,)
    policies: tuple[PolicyNet, ...]
    responsibilities: np.ndarray  # (n_demos, O) for the training demos
    loglik: float
    trace: tuple[float, ...]
    n_iter: int
    reason: str  # converged | empty-cluster | max-iter

    def to_dict(self) -> dict:
        return {"n_clusters": self.n_clusters,
                "priors": self.priors.tolist(),
                "policies": [p.to_dict() for p in self.policies],
                "responsibilities": self.responsibilities.tolist(),
                "loglik": self.loglik, "trace": list(self.trace),
                "n_iter": self.n_iter, "reason": self.reason}

    @classmethod
    def from_dict(cls, doc: dict) -> "MixtureModel":
        return cls(n_clusters=int(doc["n_clusters"]),
                   priors=np.array(doc["priors"], dtype=np.float64),
                   policies=tuple(PolicyNet.from_dict(p)
                                  for p in doc["policies"]),
                   responsibilities=np.array(doc["responsibilities"],
                                             dtype=np.float64),
                   loglik=float(doc["loglik"]),
                   trace=tuple(float(v) for v in doc["trace"]),
                   n_iter=int(doc["n_iter"]), reason=str(doc["reason"]))


def _loglik_matrix(policies, demos) -> np.ndarray:
    ll = np.empty((len(demos), len(policies)))
    for o, net in enumerate(policies):
        for j, demo in enumerate(demos):
            ll[j, o] = demo_loglik(net, demo)
    return ll


def fit_mixture(demos, n_clusters: int = 3,
                edm_config: EDMConfig | None = None,
                tol: float = 1e-3, max_iter: int = 30, seed: int = 0,
                n_actions: int | None = None) -> MixtureModel:
    if not demos:
        raise DegenerateInputError("no demonstrations to cluster")
    if n_clusters < 1:
        raise ConfigError(f"n_clusters must be >= 1, got {n_clusters}")
    if n_clusters > len(demos):
        raise ConfigError(
            f"{n_clusters} clusters exceed the {len(demos)} demos")
    if max_iter < 1:
        raise ConfigError(f"max_iter must be >= 1, got {max_iter}")
    base = edm_config or EDMConfig()
    pairs = [_demo_arrays(d) for d in demos]
    states = np.vstack([s for s, _ in pairs])
    actions = np.concatenate([a for _, a in pairs])
    sizes = np.array([len(a) for _, a in pairs])
    if n_actions is None:
        n_actions = int(actions.max()) + 1
    cluster_cfgs = [
        replace(base, train=replace(base.train, seed=seed + o))
        for o in range(n_clusters)]

    if n_clusters == 1:
        # degenerates to a single weighted fit; matches train_edm exactly
        res = train_edm(states, actions, weights=np.ones(len(actions)),
                        config=cluster_cfgs[0], n_actions=n_actions)
        ll = _loglik_matrix((res.net,), pairs)
        z, total = e_step(np.array([1.0]), ll)
        return MixtureModel(n_clusters=1, priors=np.array([1.0]),
                            policies=(res.net,), responsibilities=z,
                            loglik=total, trace=(total,), n_iter=1,
                            reason="converged")

    rng = np.random.default_rng(seed)
    z = np.zeros((len(demos), n_clusters))
    for i, j in enumerate(rng.permutation(len(demos))):
        z[j, i % n_clusters] = 1.0

    nets = [None] * n_clusters
    buffers = [None] * n_clusters
    prev = None  # (priors, nets, z, loglik, n_iter)
    trace: list[float] = []

    def _model(snap, reason):
        priors, policies, resp, total, it = snap
        return MixtureModel(n_clusters=n_clusters, priors=priors,
                            policies=tuple(policies), responsibilities=resp,
                            loglik=total, trace=tuple(trace), n_iter=it,
                            reason=reason)

    for it in range(1, max_iter + 1):
        priors = z.mean(axis=0)
        for o in range(n_clusters):
            w = np.repeat(z[:, o], sizes)
            res = train_edm(states, actions, weights=w,
                            config=cluster_cfgs[o], net=nets[o],
                            buffer=buffers[o], n_actions=n_actions)
            nets[o], buffers[o] = res.net, res.buffer
        ll = _loglik_matrix(nets, pairs)
        z_new, total = e_step(priors, ll)
        snap = (priors, list(nets), z_new, total, it)
        if prev is not None:
            if total < prev[3]:  # M-step slack, keep the better iterate
                return _model(prev, "converged")
            trace.append(total)
            if total - prev[3] < tol:
                return _model(snap, "converged")
        else:
            trace.append(total)
        if z_new.sum(axis=0).min() < 1.0:
            return _model(prev if prev is not None else snap, "empty-cluster")
        prev = snap
        z = z_new
    return _model(prev, "max-iter")


def cluster_posterior(model: MixtureModel, demos) -> np.ndarray:
    """Responsibilities of held-out demos under a fitted mixture."""
    ll = _loglik_matrix(model.policies, [_demo_arrays(d) for d in demos])
    z, _ = e_step(model.priors, ll)
    return z


def predict_stepwise(model: MixtureModel, demo, t: int,
                     return_posterior: bool = False):
    """Causal action distribution at 1-based step t: the cluster
    posterior uses only the pairs strictly before t, then the cluster
    policies are mixed at state t."""
    states, actions = _demo_arrays(demo)
    if not 1 <= t <= len(actions):
        raise IndexError(f"step {t} outside 1..{len(actions)}")
    log_post = np.log(np.maximum(model.priors, 1e-300)).copy()
    if t > 1:
        hist = states[:t - 1], actions[:t - 1]
        for o, net in enumerate(model.policies):
            log_post[o] += demo_loglik(net, hist)
    log_post -= log_post.max()
    post = np.exp(log_post)
    post /= post.sum()
    probs = np.zeros(model.policies[0].n_actions)
    for o, net in enumerate(model.policies):
        probs += post[o] * net.probs(states[t - 1][None, :])[0]
    if return_posterior:
        return probs, post
    return probs
