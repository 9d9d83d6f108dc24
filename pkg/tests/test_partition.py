"""Window clustering: Gaussian profiles, ADMM precision fits, exact DP
label assignment, and the sweep loop."""

import itertools

import numpy as np
import pytest
from scipy.stats import multivariate_normal

from evolal import (
    ClusterProfile,
    ConfigError,
    Dataset,
    DegenerateInputError,
    FeatureSchema,
    ModelStateError,
    PartitionConfig,
    PartitionModel,
    Trajectory,
    assign_labels,
    bic_score,
    default_tau,
    fit_inverse_covariance,
    fit_partition,
    fit_profile,
    predict_labels,
    select_q,
    step_labels,
    switch_penalties,
    window_loglik,
)
from evolal.partition import _viterbi, offdiag_l1


def random_spd(d, seed):
    rng = np.random.default_rng(seed)
    a = rng.normal(size=(d, d))
    return a @ a.T + d * np.eye(d)


def make_dataset(n_traj=4, n_steps=12, dim=3, seed=0, dt=1.0):
    rng = np.random.default_rng(seed)
    trajs = []
    for j in range(n_traj):
        trajs.append(Trajectory(
            traj_id=f"s{j}",
            semester="S21",
            states=rng.normal(size=(n_steps, dim)),
            actions=rng.integers(0, 3, size=n_steps),
            times=np.arange(n_steps, dtype=np.float64) * dt,
        ))
    return Dataset(trajectories=tuple(trajs), schema=FeatureSchema.flat(dim))


# ---------------------------------------------------------------------------
# profiles

def test_profile_loglik_matches_dense_gaussian():
    d = 4
    cov = random_spd(d, 1)
    theta = np.linalg.inv(cov)
    mean = np.arange(d, dtype=np.float64)
    prof = ClusterProfile(mean=mean, theta=theta)
    rng = np.random.default_rng(2)
    x = rng.normal(size=(6, d))
    expected = multivariate_normal(mean=mean, cov=cov).logpdf(x)
    np.testing.assert_allclose(prof.loglik(x), expected, atol=1e-9)
    assert window_loglik(x[0], prof) == pytest.approx(expected[0], abs=1e-9)


def test_profile_rejects_bad_theta():
    with pytest.raises(ModelStateError):
        ClusterProfile(mean=np.zeros(2), theta=np.zeros((3, 3)))
    with pytest.raises(ModelStateError):
        ClusterProfile(mean=np.zeros(2),
                       theta=np.array([[1.0, 0.5], [0.0, 1.0]]))
    with pytest.raises(ModelStateError):
        ClusterProfile(mean=np.zeros(2), theta=-np.eye(2))


# ---------------------------------------------------------------------------
# ADMM

def test_admm_unpenalized_matches_matrix_inverse():
    # lam=0 without structure: argmin -logdet(T) + tr(ST) is exactly S^-1
    s = random_spd(6, 3)
    theta = fit_inverse_covariance(s, lam=0.0, omega=1, tol=1e-6,
                                   toeplitz=False)
    err = np.linalg.norm(theta - np.linalg.inv(s))
    assert err < 1e-4


def test_admm_heavy_penalty_kills_offdiagonals():
    s = random_spd(4, 4)
    theta = fit_inverse_covariance(s, lam=1e6, omega=1, toeplitz=False)
    off = theta - np.diag(np.diag(theta))
    assert np.abs(off).max() == 0.0


def test_admm_result_is_exactly_block_toeplitz():
    m, omega = 2, 3
    rng = np.random.default_rng(5)
    x = rng.normal(size=(60, m * omega))
    s = np.cov(x, rowvar=False, bias=True) + 1e-6 * np.eye(m * omega)
    theta = fit_inverse_covariance(s, lam=1e-2, omega=omega, toeplitz=True)
    # symmetric, PD
    np.testing.assert_array_equal(theta, theta.T)
    assert np.linalg.eigvalsh(theta).min() > 0.0
    # sub-block (i, j) depends only on j - i, exactly
    blocks = {}
    for i in range(omega):
        for j in range(omega):
            b = theta[i * m:(i + 1) * m, j * m:(j + 1) * m]
            key = j - i
            if key in blocks:
                np.testing.assert_array_equal(b, blocks[key])
            else:
                blocks[key] = b


def test_admm_rejects_bad_arguments():
    s = random_spd(4, 6)
    with pytest.raises(ConfigError):
        fit_inverse_covariance(s, lam=-1.0, omega=1, toeplitz=False)
    with pytest.raises(ConfigError):
        fit_inverse_covariance(s, lam=0.1, omega=3, toeplitz=True)  # 4 % 3
    with pytest.raises(ConfigError):
        fit_inverse_covariance(np.zeros((2, 3)), lam=0.1, omega=1)


def test_fit_profile_recovers_sparse_structure():
    rng = np.random.default_rng(7)
    x = rng.normal(size=(400, 4))
    prof = fit_profile(x, lam=0.5, omega=2, toeplitz=True)
    # independent data + strong penalty: off-diagonals vanish
    assert offdiag_l1(prof.theta) == 0.0
    np.testing.assert_allclose(prof.mean, x.mean(axis=0), atol=1e-12)


def test_fit_profile_needs_two_windows():
    with pytest.raises(DegenerateInputError):
        fit_profile(np.zeros((1, 4)), lam=0.1, omega=2)


# ---------------------------------------------------------------------------
# DP assignment

def brute_force_labels(nll, penalties):
    big_t, n_q = nll.shape
    best, best_cost = None, np.inf
    for seq in itertools.product(range(n_q), repeat=big_t):
        cost = sum(nll[t, q] for t, q in enumerate(seq))
        cost += sum(penalties[t - 1]
                    for t in range(1, big_t) if seq[t] != seq[t - 1])
        # mirror the DP tie-break: lexicographically smallest among minima
        if cost < best_cost - 1e-12:
            best, best_cost = seq, cost
    return np.array(best)


def test_viterbi_matches_brute_force_enumeration():
    rng = np.random.default_rng(11)
    betas = [0.0, 1.0, 1e12]
    mismatches = 0
    for case in range(100):
        big_t = int(rng.integers(1, 9))
        n_q = int(rng.integers(1, 4))
        nll = rng.normal(size=(big_t, n_q)) * 3.0
        beta = betas[case % 3]
        pen = np.full(max(big_t - 1, 0), beta)
        got = _viterbi(nll, pen)
        ref = brute_force_labels(nll, pen)
        ref_cost = (sum(nll[t, q] for t, q in enumerate(ref))
                    + sum(pen[t - 1] for t in range(1, big_t)
                          if ref[t] != ref[t - 1]))
        got_cost = (sum(nll[t, q] for t, q in enumerate(got))
                    + sum(pen[t - 1] for t in range(1, big_t)
                          if got[t] != got[t - 1]))
        if abs(got_cost - ref_cost) > 1e-9:
            mismatches += 1
    assert mismatches == 0


def test_viterbi_huge_penalty_forces_constant_path():
    rng = np.random.default_rng(13)
    nll = rng.normal(size=(10, 3))
    lab = _viterbi(nll, np.full(9, 1e12))
    assert len(set(lab.tolist())) == 1
    assert lab[0] == nll.sum(axis=0).argmin()


def test_viterbi_zero_penalty_is_pointwise_argmin():
    rng = np.random.default_rng(17)
    nll = rng.normal(size=(12, 3))
    lab = _viterbi(nll, np.zeros(11))
    np.testing.assert_array_equal(lab, nll.argmin(axis=1))


def test_assign_labels_prefers_staying_on_ties():
    prof = [ClusterProfile(mean=np.zeros(2), theta=np.eye(2)),
            ClusterProfile(mean=np.zeros(2), theta=np.eye(2))]
    vals = np.zeros((5, 2))
    lab = assign_labels(vals, prof, beta=1.0)
    np.testing.assert_array_equal(lab, 0)


def test_assign_labels_rejects_empty_input():
    prof = [ClusterProfile(mean=np.zeros(2), theta=np.eye(2))]
    with pytest.raises(DegenerateInputError):
        assign_labels(np.zeros((0, 2)), prof, beta=1.0)


def test_switch_penalties_composition():
    decay = np.array([1.0, 0.5])
    gaps = np.array([0.0, 2.0])
    pen = switch_penalties(3.0, decay, gaps, alpha=0.7, n_bounds=2)
    np.testing.assert_allclose(
        pen, 3.0 * decay * np.exp(-0.7 * np.abs(gaps)))
    # absent inputs mean factors of exactly one
    np.testing.assert_array_equal(
        switch_penalties(3.0, None, None, 1.0, 2), [3.0, 3.0])
    with pytest.raises(ConfigError):
        switch_penalties(3.0, np.ones(3), None, 1.0, 2)
    with pytest.raises(ConfigError):
        switch_penalties(3.0, None, np.ones(3), 1.0, 2)


def test_step_labels_prepends_first_window_label():
    lab = np.array([2, 2, 1])
    out = step_labels(lab, n_steps=5, omega=3)
    np.testing.assert_array_equal(out, [2, 2, 2, 2, 1])
    with pytest.raises(ConfigError):
        step_labels(lab, n_steps=7, omega=2)


# ---------------------------------------------------------------------------
# sweep loop

def two_regime_dataset(n_traj=6, n_steps=16, dim=2, seed=0, sep=4.0):
    rng = np.random.default_rng(seed)
    trajs = []
    for j in range(n_traj):
        half = n_steps // 2
        means = np.concatenate([np.zeros((half, dim)),
                                np.full((n_steps - half, dim), sep)])
        trajs.append(Trajectory(
            traj_id=f"s{j}",
            semester="S21",
            states=rng.normal(size=(n_steps, dim)) + means,
            actions=rng.integers(0, 3, size=n_steps),
            times=np.arange(n_steps, dtype=np.float64),
        ))
    return Dataset(trajectories=tuple(trajs), schema=FeatureSchema.flat(dim))


def test_fit_partition_objective_trace_never_increases():
    data = two_regime_dataset()
    model = fit_partition(data, PartitionConfig(n_clusters=2, omega=2,
                                                beta=2.0, seed=0))
    trace = np.array(model.objective_trace)
    assert np.all(np.diff(trace) <= 1e-9)
    assert model.objective == pytest.approx(trace.min())


def test_fit_partition_is_seed_deterministic():
    data = two_regime_dataset()
    cfg = PartitionConfig(n_clusters=2, omega=2, seed=3)
    a = fit_partition(data, cfg)
    b = fit_partition(data, cfg)
    for la, lb in zip(a.labels, b.labels):
        np.testing.assert_array_equal(la, lb)
    for pa, pb in zip(a.profiles, b.profiles):
        np.testing.assert_array_equal(pa.theta, pb.theta)


def test_fit_partition_separates_two_regimes():
    data = two_regime_dataset(sep=5.0)
    model = fit_partition(data, PartitionConfig(n_clusters=2, omega=2,
                                                beta=2.0))
    for lab in model.labels:
        half = len(lab) // 2
        assert len(set(lab[:half].tolist())) == 1
        assert len(set(lab[half + 1:].tolist())) == 1
        assert lab[0] != lab[-1]


def test_fit_partition_q_exceeding_windows_is_an_error():
    data = make_dataset(n_traj=1, n_steps=4)
    with pytest.raises(ConfigError):
        fit_partition(data, PartitionConfig(n_clusters=10, omega=2))


def test_fit_partition_rewards_must_align():
    data = two_regime_dataset(n_traj=2)
    with pytest.raises(ConfigError):
        fit_partition(data, PartitionConfig(n_clusters=2),
                      rewards=[np.zeros(16)])
    with pytest.raises(ConfigError):
        fit_partition(data, PartitionConfig(n_clusters=2),
                      rewards=[np.zeros(16), np.zeros(3)])


def test_fit_partition_warm_start_is_a_fixed_point():
    data = two_regime_dataset()
    cfg = PartitionConfig(n_clusters=2, omega=2, seed=0)
    model = fit_partition(data, cfg)
    assert model.converged
    again = fit_partition(data, cfg, init=model)
    for la, lb in zip(model.labels, again.labels):
        np.testing.assert_array_equal(la, lb)
    for pa, pb in zip(model.profiles, again.profiles):
        np.testing.assert_array_equal(pa.theta, pb.theta)
        np.testing.assert_array_equal(pa.mean, pb.mean)


def test_fit_partition_warm_start_validates_compatibility():
    data = two_regime_dataset()
    model = fit_partition(data, PartitionConfig(n_clusters=2, omega=2))
    with pytest.raises(ConfigError):
        fit_partition(data, PartitionConfig(n_clusters=3, omega=2),
                      init=model)
    with pytest.raises(ConfigError):
        fit_partition(data, PartitionConfig(n_clusters=2, omega=3),
                      init=model)


def test_predict_labels_reproduces_training_labels():
    data = two_regime_dataset()
    model = fit_partition(data, PartitionConfig(n_clusters=2, omega=2))
    assert model.converged
    out = predict_labels(model, data)
    for got, ref in zip(out, model.labels):
        np.testing.assert_array_equal(got, ref)


def test_default_tau_is_median_gap():
    data = make_dataset(dt=3.0)
    assert default_tau(data) == pytest.approx(3.0)
    # constant-time trajectories fall back to 1.0
    traj = Trajectory(traj_id="x", semester="S21",
                      states=np.zeros((3, 2)),
                      actions=np.zeros(3, dtype=np.int64),
                      times=np.zeros(3))
    flat = Dataset(trajectories=(traj,), schema=FeatureSchema.flat(2))
    assert default_tau(flat) == 1.0


def test_partition_model_round_trip():
    data = two_regime_dataset()
    model = fit_partition(data, PartitionConfig(n_clusters=2, omega=2))
    back = PartitionModel.from_json(model.to_json())
    assert back.config == model.config
    assert back.objective == model.objective
    for la, lb in zip(model.labels, back.labels):
        np.testing.assert_array_equal(la, lb)
    for pa, pb in zip(model.profiles, back.profiles):
        np.testing.assert_allclose(pa.theta, pb.theta, atol=1e-15)


# ---------------------------------------------------------------------------
# model selection

def test_bic_hand_case():
    model = PartitionModel(
        config=PartitionConfig(n_clusters=1, omega=1),
        profiles=(ClusterProfile(mean=np.zeros(2), theta=np.eye(2)),),
        labels=(np.zeros(3, dtype=np.int64),),
        converged=True,
        objective=0.0,
        objective_trace=(0.0,),
        loglik=-5.0,
        tau=1.0,
    )
    # k = 2 nonzero upper-tri precision entries + 2 mean entries
    assert bic_score(model, None) == pytest.approx(10.0 + 4.0 * np.log(3.0))


def test_select_q_picks_the_generating_cluster_count():
    data = two_regime_dataset(n_traj=8, sep=5.0)
    model, scores = select_q(data, [1, 2, 3],
                             PartitionConfig(omega=2, beta=2.0))
    assert set(scores) == {1, 2, 3}
    assert model.n_clusters == min(scores, key=scores.get)
    assert scores[2] < scores[1]


def test_config_validation():
    with pytest.raises(ConfigError):
        PartitionConfig(n_clusters=0)
    with pytest.raises(ConfigError):
        PartitionConfig(omega=0)
    with pytest.raises(ConfigError):
        PartitionConfig(lam=-0.1)
    with pytest.raises(ConfigError):
        PartitionConfig(tau=0.0)
