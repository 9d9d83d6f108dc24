"""Time-aware sub-trajectory partitioning.

Stacked windows are clustered into Q high-level states. Each state is a
Gaussian profile (mean, sparse block-Toeplitz inverse covariance) fitted
by ADMM; labels are assigned per trajectory by exact dynamic programming
under a temporal-consistency penalty

    beta_t = beta * exp(-dt_t / tau) * exp(-alpha * |dr_t|)

so switching is cheaper across long time gaps and across large shifts in
the regulated high-level reward. With no reward signal the last factor
is exactly 1 (unregulated mode).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.linalg import eigh

from .core import Dataset, window_trajectory
from .errors import (ConfigError, ConvergenceError, DegenerateInputError,
                     ModelStateError)

LOG2PI = float(np.log(2.0 * np.pi))
COV_RIDGE = 1e-6


# ---------------------------------------------------------------------------
# profiles

@dataclass(frozen=True)
class ClusterProfile:
    """Gaussian cluster profile over window vectors."""

    mean: np.ndarray
    theta: np.ndarray
    logdet: float = field(init=False)

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=np.float64)
        theta = np.asarray(self.theta, dtype=np.float64)
        if theta.shape != (mean.size, mean.size):
            raise ModelStateError(
                f"theta shape {theta.shape} does not match mean size "
                f"{mean.size}")
        if np.abs(theta - theta.T).max() > 1e-8:
            raise ModelStateError("theta is not symmetric")
        theta = 0.5 * (theta + theta.T)
        try:
            chol = np.linalg.cholesky(theta)
        except np.linalg.LinAlgError as exc:
            raise ModelStateError(
                "theta is not positive definite") from exc
        for name, arr in (("mean", mean), ("theta", theta)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        object.__setattr__(self, "logdet",
                           float(2.0 * np.log(np.diag(chol)).sum()))

    @property
    def dim(self) -> int:
        return self.mean.size

    def loglik(self, x: np.ndarray) -> np.ndarray:
        """Gaussian log density of each row of x under (mean, theta)."""
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        if x.shape[1] != self.dim:
            raise ModelStateError(
                f"window dim {x.shape[1]} does not match profile dim "
                f"{self.dim}")
        xc = x - self.mean
        quad = np.einsum("ij,jk,ik->i", xc, self.theta, xc)
        return -0.5 * quad + 0.5 * self.logdet - 0.5 * self.dim * LOG2PI


def window_loglik(values: np.ndarray, profile: ClusterProfile) -> float:
    """Log likelihood of a single window vector under a profile."""
    return float(profile.loglik(np.asarray(values, dtype=np.float64))[0])


def offdiag_l1(theta: np.ndarray) -> float:
    return float(np.abs(theta).sum() - np.abs(np.diag(theta)).sum())


# ---------------------------------------------------------------------------
# block-Toeplitz equivalence classes for the ADMM Z-step

def _class_groups(m: int, omega: int, toeplitz: bool):
    """Groups of index arrays; entries in one class must share a value.

    Returns a list of (rows, cols, n_offdiag) with rows/cols shaped
    (n_classes, class_size), classes batched by size so the Z-step is a
    handful of vectorized gathers.
    """
    d = m * omega
    classes = []
    if not toeplitz:
        for i in range(d):
            classes.append(([i], [i], 0))
            for j in range(i + 1, d):
                classes.append(([i, j], [j, i], 2))
    else:
        for a in range(m):
            for b in range(a, m):
                rows, cols = [], []
                for i in range(omega):
                    rows.append(i * m + a)
                    cols.append(i * m + b)
                    if a != b:
                        rows.append(i * m + b)
                        cols.append(i * m + a)
                classes.append((rows, cols, 0 if a == b else len(rows)))
        for k in range(1, omega):
            for a in range(m):
                for b in range(m):
                    rows, cols = [], []
                    for i in range(omega - k):
                        rows.append(i * m + a)
                        cols.append((i + k) * m + b)
                        rows.append((i + k) * m + b)
                        cols.append(i * m + a)
                    classes.append((rows, cols, len(rows)))
    by_size: dict[int, list] = {}
    for rows, cols, n_od in classes:
        by_size.setdefault(len(rows), []).append((rows, cols, n_od))
    groups = []
    for size, cls in sorted(by_size.items()):
        groups.append((np.array([c[0] for c in cls]),
                       np.array([c[1] for c in cls]),
                       np.array([c[2] for c in cls], dtype=np.float64)))
    return groups


def _z_step(a: np.ndarray, groups, lam: float, rho: float) -> np.ndarray:
    """Prox of the l1-penalized structural constraint: per equivalence
    class, average then soft-threshold at lam*n_offdiag/(rho*size)."""
    z = np.empty_like(a)
    for rows, cols, n_od in groups:
        vals = a[rows, cols].mean(axis=1)
        thr = (lam / rho) * n_od / rows.shape[1]
        shrunk = np.sign(vals) * np.maximum(np.abs(vals) - thr, 0.0)
        z[rows, cols] = shrunk[:, None]
    return z


def fit_inverse_covariance(s: np.ndarray, lam: float, omega: int,
                           rho: float = 1.0, tol: float = 1e-4,
                           max_iter: int = 1000,
                           toeplitz: bool = True) -> np.ndarray:
    """ADMM for min over structured PD Theta of
    -logdet(Theta) + tr(S Theta) + lam * sum_offdiag |Theta_ij|.

    The returned matrix is the structured iterate, so block-Toeplitz
    equality and soft-threshold zeros are exact; positive definiteness is
    repaired by a diagonal shift if needed.
    """
    d = s.shape[0]
    if s.shape != (d, d):
        raise ConfigError(f"covariance must be square, got {s.shape}")
    if toeplitz and d % omega != 0:
        raise ConfigError(
            f"window dim {d} is not divisible by omega={omega}")
    if lam < 0 or rho <= 0:
        raise ConfigError(f"need lam >= 0 and rho > 0, got {lam}, {rho}")
    m = d // omega if toeplitz else d
    groups = _class_groups(m, omega if toeplitz else 1, toeplitz)

    z = np.diag(1.0 / np.maximum(np.diag(s), 1e-8)).astype(np.float64)
    u = np.zeros_like(z)
    converged = False
    primal = dual = np.inf
    for _ in range(max_iter):
        g = rho * (z - u) - s
        g = 0.5 * (g + g.T)
        evals, evecs = eigh(g)
        new_evals = (evals + np.sqrt(evals * evals + 4.0 * rho)) / (2.0 * rho)
        theta = (evecs * new_evals) @ evecs.T
        theta = 0.5 * (theta + theta.T)
        z_prev = z
        z = _z_step(theta + u, groups, lam, rho)
        u = u + theta - z
        primal = float(np.linalg.norm(theta - z))
        dual = float(rho * np.linalg.norm(z - z_prev))
        scale = max(1.0, float(np.linalg.norm(theta)),
                    float(np.linalg.norm(z)))
        if primal < tol * scale and dual < tol * max(
                1.0, rho * float(np.linalg.norm(u))):
            converged = True
            break
    if not converged:
        raise ConvergenceError(
            f"ADMM did not reach tol={tol} in {max_iter} iterations",
            primal_residual=primal, dual_residual=dual)
    evals = np.linalg.eigvalsh(0.5 * (z + z.T))
    if evals.min() <= 0.0:
        z = z + (abs(float(evals.min())) + 1e-8) * np.eye(d)
    return z


def fit_profile(windows: np.ndarray, lam: float, omega: int,
                rho: float = 1.0, tol: float = 1e-4, max_iter: int = 1000,
                toeplitz: bool = True) -> ClusterProfile:
    """Sample mean plus ADMM-fitted sparse block-Toeplitz precision."""
    windows = np.asarray(windows, dtype=np.float64)
    if windows.ndim != 2 or windows.shape[0] < 2:
        raise DegenerateInputError(
            f"profile fit needs >= 2 windows, got shape {windows.shape}")
    mu = windows.mean(axis=0)
    xc = windows - mu
    s = xc.T @ xc / windows.shape[0] + COV_RIDGE * np.eye(windows.shape[1])
    theta = fit_inverse_covariance(s, lam, omega, rho=rho, tol=tol,
                                   max_iter=max_iter, toeplitz=toeplitz)
    return ClusterProfile(mean=mu, theta=theta)


# ---------------------------------------------------------------------------
# label assignment

def switch_penalties(beta: float, decay: np.ndarray | None,
                     reward_gaps: np.ndarray | None,
                     alpha: float, n_bounds: int) -> np.ndarray:
    pen = np.full(n_bounds, float(beta))
    if decay is not None:
        decay = np.asarray(decay, dtype=np.float64)
        if decay.shape != (n_bounds,):
            raise ConfigError(
                f"decay weights shape {decay.shape}, expected ({n_bounds},)")
        pen = pen * decay
    if reward_gaps is not None:
        gaps = np.abs(np.asarray(reward_gaps, dtype=np.float64))
        if gaps.shape != (n_bounds,):
            raise ConfigError(
                f"reward gaps shape {gaps.shape}, expected ({n_bounds},)")
        pen = pen * np.exp(-alpha * gaps)
    return pen


def _viterbi(nll: np.ndarray, penalties: np.ndarray) -> np.ndarray:
    """Exact minimizer of sum_t nll[t, q_t] + sum_t pen[t-1]*[q_t != q_{t-1}].

    Ties break toward staying, then toward the lowest label index.
    """
    big_t, n_q = nll.shape
    back = np.zeros((big_t, n_q), dtype=np.int64)
    cost = nll[0].copy()
    idx = np.arange(n_q)
    for t in range(1, big_t):
        j = int(np.argmin(cost))
        if n_q > 1:
            order = np.argsort(cost, kind="stable")
            j2 = int(order[1])
            other = np.full(n_q, cost[j] + penalties[t - 1])
            other[j] = cost[j2] + penalties[t - 1]
        else:
            other = np.full(1, np.inf)
            j2 = j
        stay = cost <= other
        back[t] = np.where(stay, idx, np.where(idx != j, j, j2))
        cost = nll[t] + np.where(stay, cost, other)
    labels = np.empty(big_t, dtype=np.int64)
    q = int(np.argmin(cost))
    labels[-1] = q
    for t in range(big_t - 1, 0, -1):
        q = back[t, q]
        labels[t - 1] = q
    return labels


def assign_labels(values: np.ndarray, profiles: list[ClusterProfile],
                  beta: float, decay: np.ndarray | None = None,
                  reward_gaps: np.ndarray | None = None,
                  alpha: float = 1.0) -> np.ndarray:
    """Optimal label sequence for one trajectory's window matrix."""
    values = np.atleast_2d(np.asarray(values, dtype=np.float64))
    if values.shape[0] == 0:
        raise DegenerateInputError("empty window sequence")
    nll = -np.column_stack([p.loglik(values) for p in profiles])
    pen = switch_penalties(beta, decay, reward_gaps, alpha,
                           values.shape[0] - 1)
    return _viterbi(nll, pen)


def step_labels(labels: np.ndarray, n_steps: int, omega: int) -> np.ndarray:
    """Spread window labels back onto original steps: step i takes the
    label of the window ending at i; the first omega-1 steps take the
    first window's label."""
    labels = np.asarray(labels, dtype=np.int64)
    if len(labels) != n_steps - omega + 1:
        raise ConfigError(
            f"{len(labels)} window labels cannot cover {n_steps} steps "
            f"at omega={omega}")
    return np.concatenate([np.full(omega - 1, labels[0]), labels])


# ---------------------------------------------------------------------------
# the sweep loop

@dataclass(frozen=True)
class PartitionConfig:
    n_clusters: int = 6
    omega: int = 2
    lam: float = 1e-3
    beta: float = 4.0
    tau: float | None = None  # None: median inter-step gap of the data
    alpha: float = 1.0
    max_sweeps: int = 30
    admm_tol: float = 1e-4
    admm_iter: int = 1000
    rho: float = 1.0
    toeplitz: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.n_clusters < 1:
            raise ConfigError(f"Q must be >= 1, got {self.n_clusters}")
        if self.omega < 1:
            raise ConfigError(f"omega must be >= 1, got {self.omega}")
        if self.lam < 0 or self.beta < 0 or self.alpha < 0:
            raise ConfigError("lam, beta and alpha must be >= 0")
        if self.tau is not None and not self.tau > 0:
            raise ConfigError(f"tau must be > 0, got {self.tau}")
        if self.max_sweeps < 1:
            raise ConfigError("max_sweeps must be >= 1")


@dataclass(frozen=True)
class PartitionModel:
    config: PartitionConfig
    profiles: tuple[ClusterProfile, ...]
    labels: tuple[np.ndarray, ...]
    converged: bool
    objective: float
    objective_trace: tuple[float, ...]
    loglik: float
    tau: float

    def __post_init__(self):
        for lab in self.labels:
            lab.setflags(write=False)

    @property
    def n_clusters(self) -> int:
        return len(self.profiles)

    def to_dict(self) -> dict:
        return {
            "config": {k: getattr(self.config, k)
                       for k in self.config.__dataclass_fields__},
            "means": [p.mean.tolist() for p in self.profiles],
            "thetas": [p.theta.tolist() for p in self.profiles],
            "labels": [lab.tolist() for lab in self.labels],
            "converged": self.converged,
            "objective": self.objective,
            "objective_trace": list(self.objective_trace),
            "loglik": self.loglik,
            "tau": self.tau,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_dict(cls, doc: dict) -> "PartitionModel":
        return cls(
            config=PartitionConfig(**doc["config"]),
            profiles=tuple(
                ClusterProfile(mean=np.array(m, dtype=np.float64),
                               theta=np.array(t, dtype=np.float64))
                for m, t in zip(doc["means"], doc["thetas"])),
            labels=tuple(np.array(lab, dtype=np.int64)
                         for lab in doc["labels"]),
            converged=bool(doc["converged"]),
            objective=float(doc["objective"]),
            objective_trace=tuple(doc["objective_trace"]),
            loglik=float(doc["loglik"]),
            tau=float(doc["tau"]),
        )

    @classmethod
    def from_json(cls, text: str) -> "PartitionModel":
        return cls.from_dict(json.loads(text))


def _kmeanspp_labels(x: np.ndarray, k: int,
                     rng: np.random.Generator) -> np.ndarray:
    """k-means++ seeding, then one nearest-center assignment."""
    n = x.shape[0]
    centers = np.empty((k, x.shape[1]))
    centers[0] = x[int(rng.integers(n))]
    d2 = ((x - centers[0]) ** 2).sum(axis=1)
    for j in range(1, k):
        total = d2.sum()
        if total <= 0.0:
            pick = int(rng.integers(n))
        else:
            pick = int(rng.choice(n, p=d2 / total))
        centers[j] = x[pick]
        d2 = np.minimum(d2, ((x - centers[j]) ** 2).sum(axis=1))
    dist = ((x[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
    return dist.argmin(axis=1).astype(np.int64)


def _pooled_gaps(dataset: Dataset) -> np.ndarray:
    gaps = [np.diff(t.times) for t in dataset.trajectories if len(t) > 1]
    return np.concatenate(gaps) if gaps else np.array([])


def default_tau(dataset: Dataset) -> float:
    """Median inter-step gap; 1.0 when no positive gap exists."""
    gaps = _pooled_gaps(dataset)
    med = float(np.median(gaps)) if gaps.size else 0.0
    return med if med > 0 else 1.0


def _fit_all_profiles(x_all, lbl_all, cfg: PartitionConfig,
                      prev: list[ClusterProfile] | None):
    q_n = cfg.n_clusters
    fit = lambda rows: fit_profile(  # noqa: E731
        rows, cfg.lam, cfg.omega, rho=cfg.rho, tol=cfg.admm_tol,
        max_iter=cfg.admm_iter, toeplitz=cfg.toeplitz)
    profiles: list[ClusterProfile | None] = [None] * q_n
    degenerate = []
    for q in range(q_n):
        rows = x_all[lbl_all == q]
        if rows.shape[0] >= 2:
            profiles[q] = fit(rows)
        else:
            degenerate.append(q)
    if degenerate:
        fitted = [p for p in profiles if p is not None]
        if not fitted:
            # all clusters collapsed; everything refits from the pool
            pool = fit(x_all)
            return [pool] * q_n
        # reseed each degenerate cluster from the windows the fitted
        # profiles explain worst
        best = np.max(np.column_stack([p.loglik(x_all) for p in fitted]),
                      axis=1)
        order = np.argsort(best, kind="stable")
        chunk = max(2, x_all.shape[0] // (5 * q_n))
        for slot, q in enumerate(degenerate):
            pick = order[slot * chunk:(slot + 1) * chunk]
            if pick.size < 2:
                profiles[q] = prev[q] if prev is not None else fitted[0]
            else:
                profiles[q] = fit(x_all[pick])
    return profiles


def fit_partition(data: Dataset, cfg: PartitionConfig = PartitionConfig(),
                  rewards: list[np.ndarray] | None = None,
                  init: PartitionModel | None = None) -> PartitionModel:
    """Alternate profile fitting and DP label assignment until labels
    stabilize, the sweep cap is reached, or a sweep fails to improve the
    objective (that sweep is discarded).

    ``rewards`` is an optional per-step regulated-reward sequence per
    trajectory, aligned with ``data.trajectories``; absent rewards mean
    the regulation factor is exactly 1.

    ``init`` warm-starts the alternation from a previously fitted model
    (same data, omega and cluster count): its state is re-scored under
    the current penalties and kept unless a sweep improves on it, so a
    converged model re-entered under identical penalties is returned
    unchanged.
    """
    per_traj = [window_trajectory(t, cfg.omega) for t in data.trajectories]
    values = [np.array([w.values for w in ws]) for ws in per_traj]
    total = sum(v.shape[0] for v in values)
    if cfg.n_clusters > total:
        raise ConfigError(
            f"Q={cfg.n_clusters} exceeds the {total} available windows")
    tau = cfg.tau if cfg.tau is not None else default_tau(data)

    decays = [np.exp(-np.array([w.dt for w in ws[1:]]) / tau)
              for ws in per_traj]
    if rewards is None:
        gaps = [None] * len(per_traj)
    else:
        if len(rewards) != len(per_traj):
            raise ConfigError(
                f"{len(rewards)} reward sequences for "
                f"{len(per_traj)} trajectories")
        gaps = []
        for j, (ws, r) in enumerate(zip(per_traj, rewards)):
            r = np.asarray(r, dtype=np.float64)
            if r.shape[0] != len(data.trajectories[j]):
                raise ConfigError(
                    f"reward sequence {j} has {r.shape[0]} steps, "
                    f"trajectory has {len(data.trajectories[j])}")
            ends = np.array([w.end_index for w in ws])
            gaps.append(np.abs(np.diff(r[ends])))

    x_all = np.vstack(values)
    sizes = [v.shape[0] for v in values]
    pens = [switch_penalties(cfg.beta, decays[j], gaps[j], cfg.alpha,
                             values[j].shape[0] - 1)
            for j in range(len(values))]

    def score(profs, labels_list):
        obj = cfg.lam * sum(offdiag_l1(p.theta) for p in profs)
        ll = 0.0
        for j, vals in enumerate(values):
            nll = -np.column_stack([p.loglik(vals) for p in profs])
            lab = labels_list[j]
            picked = nll[np.arange(len(lab)), lab]
            obj += float(picked.sum())
            obj += float(pens[j][lab[1:] != lab[:-1]].sum())
            ll -= float(picked.sum())
        return obj, ll

    trace: list[float] = []
    if init is not None:
        if init.config.omega != cfg.omega:
            raise ConfigError(
                f"warm-start omega {init.config.omega} != {cfg.omega}")
        if init.n_clusters != cfg.n_clusters:
            raise ConfigError(
                f"warm-start has {init.n_clusters} clusters, "
                f"config wants {cfg.n_clusters}")
        warm = [np.asarray(lab, dtype=np.int64) for lab in init.labels]
        if [len(lab) for lab in warm] != sizes:
            raise ConfigError("warm-start labels do not match the windowing")
        profiles = list(init.profiles)
        obj0, ll0 = score(profiles, warm)
        state = (profiles, warm, obj0, ll0)
        trace.append(obj0)
        lbl_all = np.concatenate(warm)
    else:
        rng = np.random.default_rng(cfg.seed)
        lbl_all = (_kmeanspp_labels(x_all, cfg.n_clusters, rng)
                   if cfg.n_clusters > 1 else np.zeros(total, dtype=np.int64))
        profiles = None
        state = None  # accepted (profiles, labels, objective, loglik)
    converged = False
    for _ in range(cfg.max_sweeps):
        profiles = _fit_all_profiles(x_all, lbl_all, cfg, profiles)
        sparsity = cfg.lam * sum(offdiag_l1(p.theta) for p in profiles)
        new_labels, obj, ll = [], sparsity, 0.0
        for j, vals in enumerate(values):
            nll = -np.column_stack([p.loglik(vals) for p in profiles])
            lab = _viterbi(nll, pens[j])
            new_labels.append(lab)
            picked = nll[np.arange(len(lab)), lab]
            obj += float(picked.sum())
            obj += float(pens[j][lab[1:] != lab[:-1]].sum())
            ll -= float(picked.sum())
        if state is not None and obj > state[2] + 1e-9:
            converged = True  # stopped on non-improvement; keep prior state
            break
        state = (profiles, new_labels, obj, ll)
        trace.append(obj)
        new_all = np.concatenate(new_labels)
        if np.array_equal(new_all, lbl_all):
            converged = True
            break
        lbl_all = new_all

    profiles, labels, obj, ll = state
    return PartitionModel(
        config=cfg, profiles=tuple(profiles),
        labels=tuple(np.asarray(lab) for lab in labels),
        converged=converged, objective=obj,
        objective_trace=tuple(trace), loglik=ll, tau=tau)


def predict_labels(model: PartitionModel, data: Dataset,
                   rewards: list[np.ndarray] | None = None
                   ) -> list[np.ndarray]:
    """DP label assignment for held-out trajectories under fitted profiles."""
    cfg = model.config
    out = []
    for j, traj in enumerate(data.trajectories):
        ws = window_trajectory(traj, cfg.omega)
        vals = np.array([w.values for w in ws])
        decay = np.exp(-np.array([w.dt for w in ws[1:]]) / model.tau)
        gap = None
        if rewards is not None:
            r = np.asarray(rewards[j], dtype=np.float64)
            ends = np.array([w.end_index for w in ws])
            gap = np.abs(np.diff(r[ends]))
        out.append(assign_labels(vals, list(model.profiles), cfg.beta,
                                 decay=decay, reward_gaps=gap,
                                 alpha=cfg.alpha))
    return out


# ---------------------------------------------------------------------------
# model selection

def bic_score(model: PartitionModel, data: Dataset) -> float:
    """-2 * assigned loglik + k * log(#windows); k counts nonzero
    upper-triangular precision entries plus one mean parameter per
    dimension per cluster."""
    total = sum(len(lab) for lab in model.labels)
    if total == 0:
        raise ModelStateError("model carries no training labels")
    k = 0
    for p in model.profiles:
        k += int((np.abs(np.triu(p.theta)) > 1e-12).sum())
        k += p.dim
    return -2.0 * model.loglik + k * float(np.log(total))


def select_q(data: Dataset, q_values, cfg: PartitionConfig = PartitionConfig(),
             rewards: list[np.ndarray] | None = None):
    """Fit one model per Q and keep the BIC minimizer (ties: smaller Q)."""
    q_values = sorted(set(int(q) for q in q_values))
    if not q_values:
        raise ConfigError("empty Q sweep")
    scores: dict[int, float] = {}
    best = None
    for q in q_values:
        model = fit_partition(data, replace(cfg, n_clusters=q),
                              rewards=rewards)
        scores[q] = bic_score(model, data)
        if best is None or scores[q] < scores[best[0]]:
            best = (q, model)
    return best[1], scores
