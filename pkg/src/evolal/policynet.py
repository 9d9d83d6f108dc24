"""Small dense policy network with analytic gradients.

Architecture is fixed: input -> 64 -> 64 -> n_actions, ReLU activations,
float64 throughout. The network doubles as an energy model: the energy of
a state is the negative logsumexp of its logits, so gradients with respect
to both parameters and inputs are exposed.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp, softmax

from .errors import ConfigError, ModelStateError

HIDDEN = (64, 64)


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-3
    epochs: int = 100
    batch_size: int = 32
    weight_decay: float = 1e-5
    seed: int = 0

    def __post_init__(self):
        if self.lr <= 0 or self.epochs <= 0 or self.batch_size <= 0:
            raise ConfigError(
                f"lr, epochs and batch_size must be positive, got "
                f"({self.lr}, {self.epochs}, {self.batch_size})")
        if self.weight_decay < 0:
            raise ConfigError(
                f"weight_decay must be >= 0, got {self.weight_decay}")


def _init_layer(rng: np.random.Generator, fan_in: int, fan_out: int):
    # He initialization, appropriate for ReLU
    w = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(fan_in, fan_out))
    return w.astype(np.float64), np.zeros(fan_out, dtype=np.float64)


@dataclass
class PolicyNet:
    """Feed-forward categorical policy over actions given a state vector."""

    in_dim: int
    n_actions: int
    weights: list[np.ndarray] = field(default_factory=list)
    biases: list[np.ndarray] = field(default_factory=list)

    @classmethod
    def init(cls, in_dim: int, n_actions: int,
             rng: np.random.Generator) -> "PolicyNet":
        if in_dim <= 0 or n_actions <= 0:
            raise ConfigError(
                f"invalid network shape in_dim={in_dim} n_actions={n_actions}")
        dims = (in_dim, *HIDDEN, n_actions)
        ws, bs = [], []
        for fan_in, fan_out in zip(dims[:-1], dims[1:]):
            w, b = _init_layer(rng, fan_in, fan_out)
            ws.append(w)
            bs.append(b)
        return cls(in_dim=in_dim, n_actions=n_actions, weights=ws, biases=bs)

    # ---- forward ----

    def _check_input(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.ndim == 1:
            x = x[None, :]
        if x.shape[1] != self.in_dim:
            raise ModelStateError(
                f"input dim {x.shape[1]} does not match network dim "
                f"{self.in_dim}")
        return x

    def forward(self, x: np.ndarray):
        """Return (logits, cache). Cache holds pre/post activations for
        backward passes."""
        x = self._check_input(x)
        acts = [x]
        pre = []
        h = x
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            z = h @ w + b
            pre.append(z)
            h = z if i == last else np.maximum(z, 0.0)
            acts.append(h)
        return acts[-1], (acts, pre)

    def logits(self, x: np.ndarray) -> np.ndarray:
        out, _ = self.forward(x)
        return out

    def log_probs(self, x: np.ndarray) -> np.ndarray:
        z = self.logits(x)
        return z - logsumexp(z, axis=1, keepdims=True)

    def probs(self, x: np.ndarray) -> np.ndarray:
        return softmax(self.logits(x), axis=1)

    def energy(self, x: np.ndarray) -> np.ndarray:
        """E(s) = -logsumexp(logits(s)); low energy = in-distribution."""
        return -logsumexp(self.logits(x), axis=1)

    # ---- backward ----

    def backward(self, cache, grad_logits: np.ndarray):
        """Parameter gradients given d(loss)/d(logits). Returns
        (grad_ws, grad_bs, grad_x) with grad_x = d(loss)/d(input)."""
        acts, pre = cache
        grad_ws = [None] * len(self.weights)
        grad_bs = [None] * len(self.biases)
        delta = grad_logits
        for i in range(len(self.weights) - 1, -1, -1):
            grad_ws[i] = acts[i].T @ delta
            grad_bs[i] = delta.sum(axis=0)
            if i > 0:
                delta = (delta @ self.weights[i].T) * (pre[i - 1] > 0.0)
            else:
                delta = delta @ self.weights[0].T
        return grad_ws, grad_bs, delta

    def grad_energy_x(self, x: np.ndarray) -> np.ndarray:
        """d E(x) / d x, rows aligned with x. Used by Langevin sampling."""
        logits, cache = self.forward(x)
        # dE/dlogits = -softmax(logits)
        _, _, gx = self.backward(cache, -softmax(logits, axis=1))
        return gx

    # ---- parameter plumbing ----

    def params(self) -> list[np.ndarray]:
        return [*self.weights, *self.biases]

    def get_flat(self) -> np.ndarray:
        return np.concatenate([p.ravel() for p in self.params()])

    def set_flat(self, flat: np.ndarray) -> None:
        total = sum(p.size for p in self.params())
        if flat.size != total:
            raise ModelStateError(
                f"flat vector length {flat.size} does not match parameter "
                f"count {total}")
        offset = 0
        for p in self.params():
            n = p.size
            p[...] = flat[offset:offset + n].reshape(p.shape)
            offset += n

    def copy(self) -> "PolicyNet":
        return PolicyNet(in_dim=self.in_dim, n_actions=self.n_actions,
                         weights=[w.copy() for w in self.weights],
                         biases=[b.copy() for b in self.biases])

    def to_dict(self) -> dict:
        return {
            "in_dim": self.in_dim,
            "n_actions": self.n_actions,
            "hidden": list(HIDDEN),
            "weights": [w.tolist() for w in self.weights],
            "biases": [b.tolist() for b in self.biases],
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "PolicyNet":
        if tuple(doc.get("hidden", ())) != HIDDEN:
            raise ModelStateError(
                f"serialized hidden sizes {doc.get('hidden')} do not match "
                f"this build ({list(HIDDEN)})")
        net = cls(in_dim=int(doc["in_dim"]), n_actions=int(doc["n_actions"]),
                  weights=[np.array(w, dtype=np.float64)
                           for w in doc["weights"]],
                  biases=[np.array(b, dtype=np.float64)
                          for b in doc["biases"]])
        dims = (net.in_dim, *HIDDEN, net.n_actions)
        for i, (fan_in, fan_out) in enumerate(zip(dims[:-1], dims[1:])):
            if net.weights[i].shape != (fan_in, fan_out):
                raise ModelStateError(
                    f"layer {i} weight shape {net.weights[i].shape} "
                    f"does not match ({fan_in}, {fan_out})")
        return net


@dataclass
class Adam:
    """Adam with decoupled weight decay applied after the adaptive step."""

    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    t: int = 0
    m: list[np.ndarray] | None = None
    v: list[np.ndarray] | None = None

    def step(self, params: list[np.ndarray], grads: list[np.ndarray]) -> None:
        if self.m is None:
            self.m = [np.zeros_like(p) for p in params]
            self.v = [np.zeros_like(p) for p in params]
        self.t += 1
        b1t = 1.0 - self.beta1 ** self.t
        b2t = 1.0 - self.beta2 ** self.t
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p -= self.lr * (m / b1t) / (np.sqrt(v / b2t) + self.eps)
            if self.weight_decay > 0.0:
                p -= self.lr * self.weight_decay * p


def grad_check(net: PolicyNet, loss_fn, n_probes: int = 50,
               h: float = 1e-5, seed: int = 0) -> float:
    """Max relative error between analytic and central-difference
    gradients over ``n_probes`` randomly probed parameters.

    ``loss_fn(net)`` must return (scalar loss, gradient list aligned with
    net.params()).
    """
    _, grads = loss_fn(net)
    flat_grad = np.concatenate([g.ravel() for g in grads])
    flat = net.get_flat()
    rng = np.random.default_rng(seed)
    idx = rng.choice(flat.size, size=min(n_probes, flat.size), replace=False)
    worst = 0.0
    probe = net.copy()
    for i in idx:
        bumped = flat.copy()
        bumped[i] += h
        probe.set_flat(bumped)
        hi, _ = loss_fn(probe)
        bumped[i] -= 2.0 * h
        probe.set_flat(bumped)
        lo, _ = loss_fn(probe)
        numeric = (hi - lo) / (2.0 * h)
        denom = max(abs(numeric), abs(flat_grad[i]), 1e-8)
        worst = max(worst, abs(numeric - flat_grad[i]) / denom)
    return worst


def cross_entropy_grad(log_probs: np.ndarray, actions: np.ndarray,
                       weights: np.ndarray):
    """Weighted sum of per-example CE, plus d(loss)/d(logits).

    loss = sum_i w_i * (-log p(a_i | s_i)).
    """
    n = log_probs.shape[0]
    picked = log_probs[np.arange(n), actions]
    loss = float(-(weights * picked).sum())
    grad = np.exp(log_probs)  # softmax
    grad[np.arange(n), actions] -= 1.0
    grad *= weights[:, None]
    return loss, grad


def squared_loss_grad(probs: np.ndarray, actions: np.ndarray,
                      weights: np.ndarray):
    """Weighted sum of ||p(.|s_i) - onehot(a_i)||^2 and its logits grad."""
    n, k = probs.shape
    target = np.zeros_like(probs)
    target[np.arange(n), actions] = 1.0
    diff = probs - target
    loss = float((weights * (diff * diff).sum(axis=1)).sum())
    # d||p - y||^2/dz = 2 J_softmax^T (p - y); J = diag(p) - p p^T
    inner = 2.0 * diff
    grad = probs * (inner - (inner * probs).sum(axis=1, keepdims=True))
    grad *= weights[:, None]
    return loss, grad
