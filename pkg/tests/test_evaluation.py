"""Metrics, rank statistics, and the leakage-guarded harness."""

import warnings
from dataclasses import replace

import numpy as np
import pytest

from evolal import (
    ConfigError,
    DegenerateInputError,
    EmitterConfig,
    LeakageError,
    MethodConfigs,
    TrainConfig,
    adjusted_rand_index,
    build_methods,
    compare_methods,
    compute_metrics,
    conover_posthoc,
    friedman_test,
    gen_emitter_records,
    run_temporal_cv,
)
from evolal.evaluation import (
    METRIC_NAMES,
    Method,
    accuracy_score,
    aggregate_values,
    check_leakage,
    evaluate_on,
    macro_ap,
    macro_auc,
    macro_jaccard,
    macro_prf,
    matrix_from_reports,
    reports_to_csv,
    reports_to_markdown,
    semester_order,
)


# ---------------------------------------------------------------------------
# metric oracles

def test_auc_three_quarters_case():
    y = np.array([1, 1, 0, 0])
    scores = np.array([[0.1, 0.9], [0.6, 0.4], [0.4, 0.6], [0.9, 0.1]])
    assert macro_auc(y, scores) == pytest.approx(0.75)


def test_jaccard_half_case():
    y = np.array([1, 1, 1, 1, 1, 0, 0, 0, 0])
    yhat = np.array([1, 1, 1, 0, 0, 0, 0, 0, 1])
    assert macro_jaccard(y, yhat) == pytest.approx(0.5)


def test_friedman_statistic_eight_case():
    # four blocks, three methods, perfectly consistent ordering
    matrix = np.array([[0.9, 0.5, 0.1],
                       [0.8, 0.6, 0.2],
                       [0.7, 0.5, 0.3],
                       [0.9, 0.4, 0.2]])
    stat, p, mean_ranks = friedman_test(matrix, higher_better=True)
    assert stat == pytest.approx(8.0)
    np.testing.assert_allclose(mean_ranks, [1.0, 2.0, 3.0])
    assert 0.0 < p < 0.05


def test_perfect_prediction_scores_one_everywhere():
    y = np.array([0, 1, 2, 0, 1, 2, 2])
    probs = np.eye(3)[y]
    scores = compute_metrics(y, probs)
    assert set(scores) == set(METRIC_NAMES)
    for name, value in scores.items():
        assert value == pytest.approx(1.0), name


def test_aggregate_mean_and_population_std():
    mean, std = aggregate_values([0.8, 0.9, 1.0])
    assert mean == pytest.approx(0.9)
    assert std == pytest.approx(np.sqrt(0.02 / 3.0))


def test_accuracy_and_prf_hand_case():
    y = np.array([0, 0, 1, 1])
    yhat = np.array([0, 1, 1, 1])
    assert accuracy_score(y, yhat) == pytest.approx(0.75)
    prec, rec, f1 = macro_prf(y, yhat)
    # class 0: P=1, R=.5, F1=2/3 ; class 1: P=2/3, R=1, F1=.8
    assert prec == pytest.approx((1.0 + 2.0 / 3.0) / 2.0)
    assert rec == pytest.approx(0.75)
    assert f1 == pytest.approx((2.0 / 3.0 + 0.8) / 2.0)


def test_average_precision_hand_case():
    y = np.array([1, 0, 1, 0])
    scores = np.array([[0.0, 0.9], [0.0, 0.8], [0.0, 0.7], [0.0, 0.1]])
    # class 1 hits at ranks 1 and 3: AP = (1/1 + 2/3) / 2
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        got = macro_ap(y[y >= 0], scores)
    per_class_1 = (1.0 + 2.0 / 3.0) / 2.0
    # class 0 scores are constant; stable descending order keeps input
    # order, so hits land at ranks 2 and 4: AP = (1/2 + 2/4) / 2
    per_class_0 = 0.5
    assert got == pytest.approx((per_class_0 + per_class_1) / 2.0)


def test_absent_class_warns_and_scores_zero():
    y = np.array([0, 0, 1])
    yhat = np.array([0, 1, 1])
    with pytest.warns(RuntimeWarning, match="class 2"):
        prec, rec, f1 = macro_prf(y, yhat, n_classes=3)
    assert prec == pytest.approx((1.0 + 0.5) / 3.0)


def test_single_class_auc_is_zero_with_warning():
    y = np.zeros(4, dtype=np.int64)
    scores = np.tile([0.7, 0.3], (4, 1))
    with pytest.warns(RuntimeWarning):
        assert macro_auc(y, scores) == 0.0


def test_metric_validation():
    with pytest.raises(ConfigError):
        compute_metrics(np.array([0, 1]), np.ones((3, 2)))
    with pytest.raises(DegenerateInputError):
        accuracy_score(np.array([]), np.array([]))
    with pytest.raises(ConfigError):
        accuracy_score(np.array([0, 1]), np.array([0]))


def test_adjusted_rand_index_cases():
    assert adjusted_rand_index([0, 0, 1, 1], [1, 1, 0, 0]) == 1.0
    assert adjusted_rand_index([0, 0, 1, 1], [5, 5, 9, 9]) == 1.0
    assert adjusted_rand_index([0, 0, 1, 1], [0, 1, 0, 1]) \
        == pytest.approx(-0.5)
    assert adjusted_rand_index([0, 0, 0], [0, 0, 0]) == 1.0
    with pytest.raises(ConfigError):
        adjusted_rand_index([0, 1], [0, 1, 1])
    with pytest.raises(ConfigError):
        adjusted_rand_index([], [])


# ---------------------------------------------------------------------------
# rank statistics

def test_conover_separates_a_consistent_ordering():
    rng = np.random.default_rng(0)
    base = np.array([0.9, 0.5, 0.1])
    matrix = base + rng.normal(scale=0.01, size=(8, 3))
    p = conover_posthoc(matrix, higher_better=True)
    np.testing.assert_array_equal(np.diag(p), 1.0)
    np.testing.assert_allclose(p, p.T)
    assert p[0, 1] < 0.05 and p[1, 2] < 0.05 and p[0, 2] < 0.05


def test_conover_fully_tied_blocks_return_ones():
    matrix = np.tile([0.5, 0.5, 0.5], (4, 1))
    np.testing.assert_array_equal(conover_posthoc(matrix), 1.0)


def test_compare_methods_groups():
    rng = np.random.default_rng(1)
    base = np.array([0.9, 0.5, 0.1])
    matrix = base + rng.normal(scale=0.01, size=(8, 3))
    cmp = compare_methods(matrix, ["a", "b", "c"])
    assert cmp.groups == (("a",), ("b",), ("c",))
    assert cmp.friedman_p < 0.05
    doc = cmp.to_dict()
    assert doc["names"] == ["a", "b", "c"]

    tied = compare_methods(np.tile([0.5, 0.5], (4, 1)), ["x", "y"])
    assert tied.groups == (("x", "y"),)


def test_rank_test_validation():
    with pytest.raises(ConfigError):
        friedman_test(np.ones((1, 3)))
    with pytest.raises(ConfigError):
        friedman_test(np.ones(4))
    with pytest.raises(ConfigError):
        conover_posthoc(np.ones((3, 1)))
    with pytest.raises(ConfigError):
        compare_methods(np.ones((3, 2)), ["only-one"])


def test_friedman_lower_is_better_flips_ranks():
    matrix = np.array([[0.1, 0.9], [0.2, 0.8], [0.3, 0.7]])
    _, _, hi = friedman_test(matrix, higher_better=True)
    _, _, lo = friedman_test(matrix, higher_better=False)
    np.testing.assert_array_equal(hi, lo[::-1])


# ---------------------------------------------------------------------------
# harness

def emitter_records(n_students=12, seed=0):
    cfg = EmitterConfig(n_students=n_students, n_steps=8,
                        semesters=("S1", "S2"), seed=seed)
    records, _ = gen_emitter_records(cfg)
    return records


def uniform_method(name="uniform", k=3):
    return Method(name=name, fit=lambda data, seed: None,
                  predict=lambda state, traj, t: np.full(k, 1.0 / k))


def oracle_method(name="oracle", k=3):
    return Method(name=name, fit=lambda data, seed: None,
                  predict=lambda state, traj, t: np.eye(k)[
                      traj.actions[t - 1]])


def test_semester_order_is_first_seen():
    records = emitter_records()
    assert semester_order(records) == ["S1", "S2"]


def test_check_leakage_trips_on_shared_ids():
    records = emitter_records()
    train = [r for r in records if r.semester == "S1"]
    test = [r for r in records if r.semester == "S2"]
    check_leakage(train, test)  # disjoint: fine
    with pytest.raises(LeakageError, match=train[0].student_id):
        check_leakage(train, test + [replace(train[0], semester="S2")])


def test_run_temporal_cv_guards_injected_overlap():
    records = emitter_records()
    leaky = records + [replace(records[0], semester="S2")]
    with pytest.raises(LeakageError):
        run_temporal_cv(leaky, [uniform_method()])


def test_oracle_method_scores_one_and_uniform_does_not():
    records = emitter_records()
    reports = run_temporal_cv(records, [oracle_method(), uniform_method()])
    by_name = {r.method: r for r in reports}
    assert by_name["oracle"].aggregate["accuracy"][0] == pytest.approx(1.0)
    assert by_name["uniform"].aggregate["accuracy"][0] < 0.9
    assert by_name["oracle"].folds == ("S2",)


def test_reports_are_reproducible_byte_for_byte():
    records = emitter_records(n_students=10)
    cfgs = MethodConfigs(bc=TrainConfig(epochs=3))
    a = run_temporal_cv(records, build_methods(["bc"], cfgs), seeds=(0, 1))
    b = run_temporal_cv(records, build_methods(["bc"], cfgs), seeds=(0, 1))
    assert reports_to_csv(a) == reports_to_csv(b)
    assert reports_to_markdown(a) == reports_to_markdown(b)


def test_report_layout_and_matrix_extraction():
    records = emitter_records()
    reports = run_temporal_cv(records, [uniform_method(), oracle_method()],
                              seeds=(0, 1))
    assert len(reports) == 4  # 2 methods x 2 seeds
    matrix, names = matrix_from_reports(reports, "accuracy")
    assert names == ["uniform", "oracle"]
    assert matrix.shape == (2, 2)  # (fold, seed) cells x methods
    csv = reports_to_csv(reports)
    lines = csv.strip().split("\n")
    assert lines[0] == "method,seed,fold,metric,value"
    # per report: 7 metrics x (1 fold + mean + std)
    assert len(lines) == 1 + 4 * 7 * 3
    md = reports_to_markdown(reports)
    assert md.count("\n") == 4  # header, rule, two method rows
    with pytest.raises(ConfigError):
        matrix_from_reports(reports, "nope")


def test_matrix_extraction_rejects_ragged_coverage():
    records = emitter_records()
    a = run_temporal_cv(records, [uniform_method()], seeds=(0,))
    b = run_temporal_cv(records, [oracle_method()], seeds=(0, 1))
    with pytest.raises(ConfigError):
        matrix_from_reports(a + b, "accuracy")


def test_evaluate_on_walks_every_step():
    records = emitter_records(n_students=4)
    seen = []

    def spy_predict(state, traj, t):
        seen.append((traj.traj_id, t))
        return np.full(3, 1.0 / 3.0)

    method = Method(name="spy", fit=lambda data, seed: None,
                    predict=spy_predict)
    run_temporal_cv(records, [method])
    test_ids = {r.student_id for r in records if r.semester == "S2"}
    assert {tid for tid, _ in seen} == test_ids
    per_traj = {tid: max(t for x, t in seen if x == tid) for tid in test_ids}
    assert all(v == 8 for v in per_traj.values())


def test_expert_filter_toggle():
    # emitter records all pass the gain filter, so both paths run; the
    # split sizes stay identical for this corpus
    records = emitter_records()
    on = run_temporal_cv(records, [uniform_method()])
    off = run_temporal_cv(records, [uniform_method()], expert_filter=False)
    assert on[0].folds == off[0].folds


def test_unknown_method_name_rejected():
    with pytest.raises(ConfigError):
        build_methods(["nope"])
