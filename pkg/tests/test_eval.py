import json
import math

import numpy as np
import pytest
from conftest import toy_cohort
from hypothesis import given, settings
from hypothesis import strategies as st
from oracles import pair_count_auroc
from sklearn.metrics import average_precision_score

from stratrisk.boosting import HyperParams
from stratrisk.cohort import KEY_LABS_WUHAN
from stratrisk.eval import (
    UndefinedMetricError,
    aupr,
    auroc,
    daily_baseline_experiment,
    fold_partitions,
    importance_drift,
    per_stratum_eval,
    run_cv,
    stratified_group_kfold,
    threshold_metrics,
    write_table4,
    write_table5,
)
from stratrisk.predictor import InsufficientDataError
from stratrisk.strata import StrataDefinition
from stratrisk.synthetic import synthetic_cohort

FAST = HyperParams(n_rounds=12, early_stopping_rounds=5)
FAST_CLF = HyperParams(n_rounds=12, early_stopping_rounds=5, l2_lambda=0.02)


# ---------------------------------------------------------------------------
# ranking metrics
# ---------------------------------------------------------------------------


def test_auroc_examples():
    assert auroc([0.1, 0.4, 0.35, 0.8], [0, 0, 1, 1]) == 0.75
    assert auroc([0.1, 0.2, 0.8, 0.9], [0, 0, 1, 1]) == 1.0
    assert auroc([0.3] * 6, [0, 1, 0, 1, 1, 0]) == 0.5
    with pytest.raises(UndefinedMetricError):
        auroc([0.1, 0.2], [1, 1])


def test_auroc_matches_pair_count_exactly():
    rng = np.random.default_rng(0)
    for i in range(1000):
        n = int(rng.integers(2, 501 if i < 50 else 60))
        labels = rng.integers(0, 2, n)
        if labels.min() == labels.max():
            labels[0] = 1 - labels[0]
        # coarse rounding on half the draws to exercise ties
        scores = rng.random(n)
        if i % 2:
            scores = np.round(scores, 1)
        assert auroc(scores, labels) == pair_count_auroc(scores.tolist(), labels.tolist())


@settings(max_examples=100, deadline=None)
@given(st.lists(st.tuples(st.integers(-1000, 1000), st.booleans()), min_size=2, max_size=60))
def test_auroc_invariance_and_complement(pairs):
    # integer scores keep the transforms strictly increasing in floating point
    s = np.array([p for p, _ in pairs], dtype=float)
    y = np.array([b for _, b in pairs])
    if y.all() or not y.any():
        return
    a = auroc(s, y)
    assert auroc(s ** 3 + 5 * s, y) == a
    assert auroc(np.exp(s / 100), y) == a
    assert a + auroc(s, ~y) == pytest.approx(1.0, abs=1e-12)
    assert a == pytest.approx(auroc(-s, ~y), abs=1e-12)


def test_aupr_examples():
    assert aupr([0.9, 0.8, 0.2, 0.1], [1, 1, 0, 0]) == 1.0
    assert aupr(np.linspace(1, 0, 10), [1] + [0] * 9) == 1.0
    with pytest.raises(UndefinedMetricError):
        aupr([0.1, 0.2], [0, 0])


def test_aupr_matches_average_precision():
    rng = np.random.default_rng(1)
    for _ in range(200):
        n = int(rng.integers(2, 300))
        y = rng.integers(0, 2, n)
        y[0] = 1
        s = np.round(rng.random(n), int(rng.integers(1, 4)))
        assert aupr(s, y) == pytest.approx(average_precision_score(y, s), abs=1e-12)


@pytest.mark.parametrize("prevalence", [0.1, 0.3, 0.5, 0.8])
def test_aupr_random_scores_near_prevalence(prevalence):
    rng = np.random.default_rng(int(prevalence * 100))
    y = rng.random(10000) < prevalence
    assert abs(aupr(rng.random(10000), y) - y.mean()) <= 0.05


# ---------------------------------------------------------------------------
# threshold metrics
# ---------------------------------------------------------------------------


def test_hand_confusion_matrix():
    # TP=2, FN=1, FP=1, TN=6
    labels = [1, 1, 1, 0, 0, 0, 0, 0, 0, 0]
    scores = [0.9, 0.7, 0.2, 0.6, 0.1, 0.1, 0.3, 0.2, 0.4, 0.0]
    m = threshold_metrics(scores, labels)
    assert m.precision == pytest.approx(2 / 3) and m.recall == pytest.approx(2 / 3)
    assert m.f1 == pytest.approx(2 / 3)
    assert m.specificity == pytest.approx(6 / 7) and m.accuracy == pytest.approx(0.8)
    assert (m.n_pos, m.n_neg) == (3, 7)
    s = threshold_metrics(scores, labels, positive="survived")
    # survivors as positives: TP=6, FN=1, FP=1, TN=2
    assert s.precision == pytest.approx(6 / 7) and s.recall == pytest.approx(6 / 7)
    assert s.specificity == pytest.approx(2 / 3)
    assert s.auroc == pytest.approx(m.auroc)


def test_threshold_extremes():
    m = threshold_metrics([0, 1, 1, 0], [0, 1, 1, 0])
    assert m.precision == m.recall == m.f1 == 1.0
    m = threshold_metrics([0.9, 0.8, 0.7, 0.6], [1, 0, 1, 0], threshold=0.0)
    assert m.recall == 1.0 and m.specificity == 0.0
    m = threshold_metrics([0.2, 0.3], [0, 0])
    assert math.isnan(m.recall) and math.isnan(m.auroc) and m.specificity == 1.0


@settings(max_examples=100, deadline=None)
@given(st.lists(st.tuples(st.floats(0, 1), st.booleans()), min_size=1, max_size=40))
def test_f1_is_harmonic_mean(pairs):
    m = threshold_metrics([p for p, _ in pairs], [b for _, b in pairs])
    for v in (m.accuracy, m.precision, m.recall, m.specificity, m.f1):
        assert math.isnan(v) or 0 <= v <= 1
    if m.precision > 0 and m.recall > 0:
        assert m.f1 == pytest.approx(2 * m.precision * m.recall / (m.precision + m.recall))


# ---------------------------------------------------------------------------
# folds
# ---------------------------------------------------------------------------


def test_kfold_ten_patients():
    ids = [f"p{i}" for i in range(10)]
    y = [1, 1, 1, 1, 0, 0, 0, 0, 0, 0]
    folds = stratified_group_kfold(ids, y, 5, seed=3)
    assert np.bincount(folds, minlength=5).tolist() == [2] * 5
    deaths = np.bincount(folds, weights=y, minlength=5)
    assert deaths.max() - deaths.min() <= 1
    assert np.array_equal(folds, stratified_group_kfold(ids, y, 5, seed=3))


def test_kfold_errors():
    with pytest.raises(InsufficientDataError):
        stratified_group_kfold(["a", "b"], [0, 1], 3, seed=0)
    with pytest.raises(ValueError):
        stratified_group_kfold(["a", "a", "b"], [0, 0, 1], 2, seed=0)


@settings(max_examples=100, deadline=None)
@given(st.integers(2, 120), st.integers(2, 10), st.integers(0, 2**31), st.floats(0, 1))
def test_kfold_partition_properties(n, k, seed, rate):
    if k > n:
        return
    rng = np.random.default_rng(seed)
    y = (rng.random(n) < rate).astype(int)
    folds = stratified_group_kfold([str(i) for i in range(n)], y, k, seed)
    assert folds.min() >= 0 and folds.max() < k
    for cls in (0, 1):
        c = np.bincount(folds[y == cls], minlength=k)
        assert c.max() - c.min() <= 1
    sizes = np.bincount(folds, minlength=k)
    assert sizes.max() - sizes.min() <= 2


def test_fold_partitions_rotate():
    folds = np.repeat(np.arange(5), 3)
    seen_test = np.zeros(15, int)
    for tr, va, te in fold_partitions(folds, 5):
        assert not (tr & va).any() and not (tr & te).any() and not (va & te).any()
        assert (tr | va | te).all()
        assert te.sum() == 3 and va.sum() == 3 and tr.sum() == 9
        seen_test += te
    assert (seen_test == 1).all()
    with pytest.raises(ValueError):
        list(fold_partitions(folds, 2))


# ---------------------------------------------------------------------------
# cross-validation
# ---------------------------------------------------------------------------


@pytest.fixture(scope="module")
def cv_cohort():
    return synthetic_cohort(n_patients=60, n_deaths=26, n_labs=8, seed=21)


def test_run_cv_single_repetition(cv_cohort):
    rep = run_cv(cv_cohort, StrataDefinition([-3]), FAST_CLF, FAST, k=2, repeats=1, split=(0.5, 0.0, 0.5))
    assert rep.se["auroc"] == 0.0
    assert any(f.startswith("n=1") for f in rep.flags)
    assert 0.5 < rep.mean["auroc"] <= 1.0


def test_run_cv_deterministic_and_parallel_safe(cv_cohort, default_strata):
    kw = dict(k=5, repeats=3, seed=11)
    a = run_cv(cv_cohort, default_strata, FAST_CLF, FAST, **kw)
    b = run_cv(cv_cohort, default_strata, FAST_CLF, FAST, **kw)
    c = run_cv(cv_cohort, default_strata, FAST_CLF, FAST, jobs=2, **kw)
    assert a.to_json() == b.to_json() == c.to_json()
    vals = [r["auroc"] for r in a.per_repetition]
    assert a.mean["auroc"] == pytest.approx(np.mean(vals))
    assert a.se["auroc"] == pytest.approx(np.std(vals, ddof=1))
    assert run_cv(cv_cohort, default_strata, FAST_CLF, FAST, k=5, repeats=3, seed=12).to_json() != a.to_json()


def test_run_cv_baseline_modes(cv_cohort, default_strata):
    for mode in ("unstratified", "retrospective"):
        rep = run_cv(cv_cohort, default_strata, FAST_CLF, FAST, repeats=1, mode=mode)
        assert rep.mode == mode and not math.isnan(rep.mean["auroc"])


def test_run_cv_needs_both_outcomes(cv_cohort, default_strata):
    survivors = cv_cohort.subset([p.patient_id for p in cv_cohort.patients if p.outcome == 0])
    with pytest.raises(InsufficientDataError):
        run_cv(survivors, default_strata, repeats=1)


def test_cv_report_json(tmp_path, cv_cohort, default_strata):
    rep = run_cv(cv_cohort, default_strata, FAST_CLF, FAST, repeats=2)
    d = json.loads(rep.to_json())
    assert set(d["mean"]) == {"auroc", "aupr", "accuracy", "f1", "precision", "recall", "specificity"}
    write_table5(rep, tmp_path / "t5.csv")
    lines = (tmp_path / "t5.csv").read_text().splitlines()
    assert lines[0].startswith("statistic,auroc") and lines[1].startswith("mean,")


# ---------------------------------------------------------------------------
# stratum-wise evaluation
# ---------------------------------------------------------------------------


def test_per_stratum_single_class_flagged(tmp_path):
    cohort = toy_cohort(
        [(f"s{i}", 0, {-9: float(i), -1: float(i)}) for i in range(6)]
        + [(f"d{i}", 1, {-1: 50.0 + i}) for i in range(6)])
    tiny = HyperParams(n_rounds=12, subsample=1.0, min_child_hessian=0.0, early_stopping_rounds=None)
    res = per_stratum_eval(cohort, StrataDefinition([-3]), tiny, k=2, split=(0.5, 0.0, 0.5))
    early, late = res
    assert (early.patients, early.deaths) == (6, 0)
    assert any("single outcome" in f for f in early.flags) and math.isnan(early.died.auroc)
    # the last stratum is perfectly separable
    assert late.died.auroc == 1.0 and late.died.recall == 1.0 and late.died.precision == 1.0
    assert late.survived.f1 == 1.0
    write_table4(res, tmp_path / "t4.csv")
    assert "single outcome" in (tmp_path / "t4.csv").read_text()


def test_per_stratum_counts(small_cohort, default_strata):
    res = per_stratum_eval(small_cohort, default_strata, FAST)
    assert [r.window for r in res] == ["(-inf, -13]", "(-13, -7]", "(-7, -4]", "(-4, -2]", "(-2, 0)"]
    for r in res:
        assert r.patients > 0 and 0 <= r.deaths <= r.patients
        if r.importance:
            assert sum(s for s, _ in r.importance.values()) == pytest.approx(1.0)


# ---------------------------------------------------------------------------
# per-day baselines
# ---------------------------------------------------------------------------


def test_daily_baseline(full_cohort):
    res = daily_baseline_experiment(full_cohort, min_patients=5)
    assert res.features == KEY_LABS_WUHAN
    days = res.importance_by_day()
    assert len(days) > 5
    for day, imp in days.items():
        assert set(imp) == set(KEY_LABS_WUHAN)
    for s in res.skipped:
        if "patients <" in s["reason"]:
            assert int(s["reason"].split()[0]) < 5
    drift = importance_drift(days)
    assert drift["drift"]


def test_daily_baseline_calendar_mode(small_cohort):
    res = daily_baseline_experiment(small_cohort, day_mode="calendar", min_patients=5)
    assert all(isinstance(d, str) and len(d) == 10 for d in res.importance_by_day())


def test_importance_drift_rules():
    same = {"a": {"x": 0.6, "y": 0.4}, "b": {"x": 0.55, "y": 0.45}}
    assert not importance_drift(same)["drift"]
    flipped = {"a": {"x": 0.6, "y": 0.4}, "b": {"x": 0.45, "y": 0.55}}
    assert importance_drift(flipped)["drift"]
    gap = {"a": {"x": 0.9, "y": 0.1}, "b": {"x": 0.7, "y": 0.3}}
    d = importance_drift(gap)
    assert d["drift"] and d["max_share_gap"] == pytest.approx(0.2)
