"""Baselines: return redistribution through a GP, and offline fitted-Q."""

import numpy as np
import pytest

from evolal import (
    ConditioningError,
    ConfigError,
    Dataset,
    DegenerateInputError,
    DQNConfig,
    FeatureSchema,
    GPConfig,
    SchemaError,
    Trajectory,
    TrainConfig,
    gp_redistribute,
    train_bc,
    train_dqn,
)
from evolal.baselines import build_transitions, greedy_actions, rbf_kernel


def traj_from(states, actions, outcome=None, tid="t0", semester="S21"):
    states = np.atleast_2d(np.asarray(states, dtype=np.float64))
    n = states.shape[0]
    return Trajectory(traj_id=tid, semester=semester, states=states,
                      actions=np.asarray(actions, dtype=np.int64),
                      times=np.arange(n, dtype=np.float64),
                      outcome=outcome)


def dataset_of(trajs):
    dim = trajs[0].states.shape[1]
    return Dataset(trajectories=tuple(trajs), schema=FeatureSchema.flat(dim))


# ---------------------------------------------------------------------------
# GP redistribution

def test_rbf_kernel_values():
    a = np.zeros((1, 2))
    b = np.array([[0.0, 0.0], [1.0, 0.0]])
    k = rbf_kernel(a, b, lengthscale=1.0, signal_var=2.0)
    np.testing.assert_allclose(k, [[2.0, 2.0 * np.exp(-0.5)]], atol=1e-15)


def test_symmetric_trajectory_gets_g_over_n():
    # one trajectory of n identical states: symmetry forces an even split
    n, g = 5, 2.0
    traj = traj_from(np.zeros((n, 2)), np.zeros(n), outcome=g)
    out = gp_redistribute(dataset_of([traj]))
    np.testing.assert_allclose(out[0], g / n, atol=1e-4)


def test_two_far_symmetric_trajectories_split_independently():
    n = 4
    a = traj_from(np.zeros((n, 2)), np.zeros(n), outcome=1.0, tid="a")
    b = traj_from(np.full((n, 2), 50.0), np.zeros(n), outcome=-0.5, tid="b")
    out = gp_redistribute(dataset_of([a, b]))
    np.testing.assert_allclose(out[0], 1.0 / n, atol=1e-4)
    np.testing.assert_allclose(out[1], -0.5 / n, atol=1e-4)


def test_two_by_two_hand_solution():
    # two one-step trajectories with kernel overlap 0.5
    d = np.sqrt(2.0 * np.log(2.0))
    eps = 1e-2
    a = traj_from([[0.0, 0.0]], [0], outcome=1.0, tid="a")
    b = traj_from([[d, 0.0]], [0], outcome=2.0, tid="b")
    out = gp_redistribute(dataset_of([a, b]),
                          GPConfig(noise_var=eps))
    det = (1.0 + eps) ** 2 - 0.25
    alpha = np.array([(1.0 + eps) * 1.0 - 0.5 * 2.0,
                      -0.5 * 1.0 + (1.0 + eps) * 2.0]) / det
    expected = np.array([[1.0, 0.5], [0.5, 1.0]]) @ alpha
    assert abs(out[0][0] - expected[0]) < 1e-8
    assert abs(out[1][0] - expected[1]) < 1e-8


def test_posterior_sums_recover_the_returns():
    rng = np.random.default_rng(0)
    trajs = [traj_from(rng.normal(size=(6, 3)), rng.integers(0, 2, size=6),
                       outcome=float(rng.normal()), tid=f"t{j}")
             for j in range(4)]
    cfg = GPConfig()
    out = gp_redistribute(dataset_of(trajs), cfg)
    sigma_n = np.sqrt(cfg.noise_var)
    for traj, r in zip(trajs, out):
        assert abs(r.sum() - traj.outcome) <= 3.0 * sigma_n


def test_redistribution_conditioning_guard():
    # identical trajectories with negligible noise: numerically singular
    t1 = traj_from(np.zeros((5, 2)), np.zeros(5), outcome=1.0, tid="a")
    t2 = traj_from(np.zeros((5, 2)), np.zeros(5), outcome=1.0, tid="b")
    with pytest.raises(ConditioningError):
        gp_redistribute(dataset_of([t1, t2]), GPConfig(noise_var=1e-18))


def test_redistribution_requires_outcomes():
    traj = traj_from(np.zeros((3, 2)), np.zeros(3))  # no outcome
    with pytest.raises(SchemaError):
        gp_redistribute(dataset_of([traj]))
    with pytest.raises(DegenerateInputError):
        gp_redistribute(Dataset(trajectories=(),
                                schema=FeatureSchema.flat(2)))


def test_gp_config_validation():
    with pytest.raises(ConfigError):
        GPConfig(lengthscale=0.0)
    with pytest.raises(ConfigError):
        GPConfig(noise_var=-1.0)


# ---------------------------------------------------------------------------
# transitions

def test_build_transitions_layout():
    a = traj_from(np.arange(6, dtype=np.float64).reshape(3, 2),
                  [0, 1, 0], tid="a")
    b = traj_from(np.arange(4, dtype=np.float64).reshape(2, 2) + 10,
                  [1, 1], tid="b")
    s, act, r, s2, done = build_transitions(
        dataset_of([a, b]), [np.array([1.0, 2.0, 3.0]),
                             np.array([4.0, 5.0])])
    assert s.shape == (5, 2) and s2.shape == (5, 2)
    np.testing.assert_array_equal(act, [0, 1, 0, 1, 1])
    np.testing.assert_array_equal(r, [1, 2, 3, 4, 5])
    np.testing.assert_array_equal(done, [False, False, True, False, True])
    # next-state rows shift by one, terminal rows repeat themselves
    np.testing.assert_array_equal(s2[0], a.states[1])
    np.testing.assert_array_equal(s2[2], a.states[2])
    np.testing.assert_array_equal(s2[3], b.states[1])
    np.testing.assert_array_equal(s2[4], b.states[1])


def test_build_transitions_validation():
    a = traj_from(np.zeros((3, 2)), [0, 1, 0])
    with pytest.raises(ConfigError):
        build_transitions(dataset_of([a]), [])
    with pytest.raises(ConfigError):
        build_transitions(dataset_of([a]), [np.zeros(2)])


# ---------------------------------------------------------------------------
# fitted-Q on a discrete fixture

def chain_fixture():
    """Five one-hot states. Action 0 advances (capped at 4), action 1
    stays. Advancing from 3 pays 1, staying at 4 pays 0.1."""
    eye = np.eye(5)

    def reward(s, a):
        if a == 0 and s == 3:
            return 1.0
        if a == 1 and s == 4:
            return 0.1
        return 0.0

    trajs, rewards = [], []
    for start in range(5):
        path = list(range(start, 5)) + [4]
        states = eye[path]
        actions = np.zeros(len(path), dtype=np.int64)
        trajs.append(traj_from(states, actions, tid=f"adv{start}"))
        rewards.append(np.array([reward(s, 0) for s in path]))
    for s in range(5):
        states = eye[[s, s, s]]
        actions = np.ones(3, dtype=np.int64)
        trajs.append(traj_from(states, actions, tid=f"stay{s}"))
        rewards.append(np.array([reward(s, 1)] * 3))
    return dataset_of(trajs), rewards


def empirical_q(data, rewards, gamma, tol=1e-14):
    """Exact fixed point of the empirical Bellman operator over the
    observed transition set (the thing fitted-Q regresses toward)."""
    s, a, r, s2, done = build_transitions(data, rewards)
    sid, s2id = s.argmax(axis=1), s2.argmax(axis=1)
    q = np.zeros((5, 2))
    while True:
        v = q.max(axis=1)
        targets = r + gamma * np.where(done, 0.0, v[s2id])
        q_new = np.zeros_like(q)
        counts = np.zeros_like(q)
        np.add.at(q_new, (sid, a), targets)
        np.add.at(counts, (sid, a), 1.0)
        q_new = np.where(counts > 0, q_new / np.maximum(counts, 1.0), q)
        if np.abs(q_new - q).max() < tol:
            return q_new
        q = q_new


def test_dqn_greedy_matches_exact_fitted_q():
    data, rewards = chain_fixture()
    gamma = 0.9
    q_tab = empirical_q(data, rewards, gamma)
    # fixed point of the averaged empirical operator to tabular precision
    s, a, r, s2, done = build_transitions(data, rewards)
    sid, s2id = s.argmax(axis=1), s2.argmax(axis=1)
    v = q_tab.max(axis=1)
    targets = r + gamma * np.where(done, 0.0, v[s2id])
    backed = np.zeros_like(q_tab)
    counts = np.zeros_like(q_tab)
    np.add.at(backed, (sid, a), targets)
    np.add.at(counts, (sid, a), 1.0)
    assert counts.min() > 0  # the fixture covers every (state, action)
    assert np.abs(backed / counts - q_tab).max() < 1e-8

    res = train_dqn(data, rewards,
                    DQNConfig(gamma=gamma, sync_every=50,
                              train=TrainConfig(lr=3e-3, epochs=300,
                                                batch_size=16, seed=0)))
    got = greedy_actions(res.net, np.eye(5))
    np.testing.assert_array_equal(got, q_tab.argmax(axis=1))
    # the greedy policy: advance everywhere except the absorbing end
    np.testing.assert_array_equal(q_tab.argmax(axis=1), [0, 0, 0, 0, 1])


def test_dqn_is_seed_deterministic():
    data, rewards = chain_fixture()
    cfg = DQNConfig(train=TrainConfig(epochs=3, seed=2))
    a = train_dqn(data, rewards, cfg)
    b = train_dqn(data, rewards, cfg)
    np.testing.assert_array_equal(a.net.get_flat(), b.net.get_flat())
    assert a.losses == b.losses
    assert a.n_updates == b.n_updates


def test_dqn_config_validation():
    with pytest.raises(ConfigError):
        DQNConfig(gamma=1.0)
    with pytest.raises(ConfigError):
        DQNConfig(sync_every=0)
    with pytest.raises(DegenerateInputError):
        train_dqn(Dataset(trajectories=(), schema=FeatureSchema.flat(2)), [])


# ---------------------------------------------------------------------------
# behavioral cloning wrapper

def test_train_bc_learns_the_pooled_mapping():
    rng = np.random.default_rng(1)
    trajs = []
    for j in range(6):
        states = rng.normal(size=(20, 3))
        actions = (states[:, 0] > 0).astype(np.int64)
        trajs.append(traj_from(states, actions, tid=f"t{j}"))
    data = dataset_of(trajs)
    net = train_bc(data, TrainConfig(lr=3e-3, epochs=40, batch_size=32))
    states = np.vstack([t.states for t in trajs])
    actions = np.concatenate([t.actions for t in trajs])
    acc = (net.probs(states).argmax(axis=1) == actions).mean()
    assert acc >= 0.95


def test_train_bc_rejects_empty_data():
    with pytest.raises(DegenerateInputError):
        train_bc(Dataset(trajectories=(), schema=FeatureSchema.flat(2)))
