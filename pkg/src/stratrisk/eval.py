"""Metrics, patient-grouped cross-validation and the experiment suites."""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from datetime import timedelta
from typing import Sequence

import numpy as np
from scipy.stats import rankdata

from . import boosting
from .boosting import HyperParams
from .cohort import KEY_LABS_WUHAN, AlignedCohort, Design, feature_matrix, last_record_matrix
from .predictor import InsufficientDataError, fit, predict_cohort
from .seeding import substream, subseed
from .strata import StrataDefinition, truncated_training_set, windows

logger = logging.getLogger(__name__)

METRIC_NAMES = ("auroc", "aupr", "accuracy", "f1", "precision", "recall", "specificity")


class UndefinedMetricError(ValueError):
    pass


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------


def auroc(scores, labels) -> float:
    """Mann-Whitney AUC: share of (positive, negative) pairs ranked correctly, ties 0.5."""
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels).astype(bool)
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("AUROC needs both classes")
    ranks = rankdata(scores)
    u = ranks[labels].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def aupr(scores, labels) -> float:
    """Average precision: sum over thresholds of recall increment times precision."""
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels).astype(bool)
    n_pos = int(labels.sum())
    if n_pos == 0:
        raise UndefinedMetricError("AUPR needs at least one positive")
    order = np.argsort(-scores, kind="mergesort")
    s, y = scores[order], labels[order]
    tp = np.cumsum(y)
    fp = np.cumsum(~y)
    # last index of each run of equal scores
    ends = np.r_[np.flatnonzero(np.diff(s)), s.size - 1]
    tp, fp = tp[ends], fp[ends]
    precision = tp / (tp + fp)
    recall = tp / n_pos
    return float(np.sum(np.diff(np.r_[0.0, recall]) * precision))


@dataclass
class Metrics:
    auroc: float = math.nan
    aupr: float = math.nan
    accuracy: float = math.nan
    f1: float = math.nan
    precision: float = math.nan
    recall: float = math.nan
    specificity: float = math.nan
    n_pos: int = 0
    n_neg: int = 0

    @property
    def sensitivity(self) -> float:
        return self.recall

    def to_dict(self) -> dict:
        return {k: (None if isinstance(v, float) and math.isnan(v) else v) for k, v in asdict(self).items()}


def _ratio(a, b) -> float:
    return a / b if b else math.nan


def threshold_metrics(scores, labels, threshold: float = 0.5, positive: str = "died") -> Metrics:
    """Confusion-matrix metrics at ``score >= threshold`` (predicts death).

    ``positive="survived"`` flips the labels and the predictions, giving the
    survivor-as-positive reading of the same decisions.
    """
    if not 0 <= threshold <= 1:
        raise ValueError("threshold must lie in [0, 1]")
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels).astype(bool)
    pred = scores >= threshold
    if positive == "survived":
        labels, pred, rank_scores = ~labels, ~pred, -scores
    elif positive == "died":
        rank_scores = scores
    else:
        raise ValueError("positive must be 'died' or 'survived'")
    tp = int((pred & labels).sum())
    fp = int((pred & ~labels).sum())
    fn = int((~pred & labels).sum())
    tn = int((~pred & ~labels).sum())
    precision = _ratio(tp, tp + fp)
    recall = _ratio(tp, tp + fn)
    f1 = _ratio(2 * tp, 2 * tp + fp + fn)
    m = Metrics(
        accuracy=_ratio(tp + tn, labels.size),
        f1=f1,
        precision=precision,
        recall=recall,
        specificity=_ratio(tn, tn + fp),
        n_pos=tp + fn,
        n_neg=tn + fp,
    )
    if m.n_pos and m.n_neg:
        m.auroc = auroc(rank_scores, labels)
    if m.n_pos:
        m.aupr = aupr(rank_scores, labels)
    return m


# ---------------------------------------------------------------------------
# folds
# ---------------------------------------------------------------------------


def stratified_group_kfold(groups: Sequence, outcomes: Sequence[int], k: int, seed: int) -> np.ndarray:
    """Assign each patient (one entry per patient) to one of ``k`` folds.

    Patients are shuffled, then dealt greedily: each goes to the fold holding
    the fewest patients of its outcome class, then the fewest patients, then
    the lowest index.  Per-fold class counts differ by at most one.
    """
    groups = list(groups)
    outcomes = np.asarray(outcomes).astype(np.int64)
    if len(set(groups)) != len(groups):
        raise ValueError("groups must list each patient once")
    if k < 2:
        raise ValueError("k must be at least 2")
    if k > len(groups):
        raise InsufficientDataError(f"k={k} folds exceed the {len(groups)} patients")
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(groups))
    folds = np.full(len(groups), -1, dtype=np.int64)
    by_class = np.zeros((2, k), dtype=np.int64)
    total = np.zeros(k, dtype=np.int64)
    for cls in (1, 0):
        for i in order[outcomes[order] == cls]:
            f = min(range(k), key=lambda j: (by_class[cls, j], total[j], j))
            folds[i] = f
            by_class[cls, f] += 1
            total[f] += 1
    return folds


def _fold_roles(k: int, split: Sequence[float]) -> tuple[int, int]:
    if len(split) != 3 or abs(sum(split) - 1) > 1e-9 or min(split) < 0:
        raise ValueError(f"split fractions must be three non-negative numbers summing to 1, got {split}")
    n_val = int(round(split[1] * k))
    n_test = int(round(split[2] * k))
    if n_test < 1 or n_val + n_test >= k:
        raise ValueError(f"split {split} leaves no training folds with k={k}")
    return n_val, n_test


def fold_partitions(folds: np.ndarray, k: int, split: Sequence[float] = (0.6, 0.2, 0.2)):
    """Yield (train, validation, test) boolean masks, rotating the test folds."""
    n_val, n_test = _fold_roles(k, split)
    for i in range(k):
        test = np.isin(folds, [(i + j) % k for j in range(n_test)])
        val = np.isin(folds, [(i + n_test + j) % k for j in range(n_val)])
        yield ~(test | val), val, test


# ---------------------------------------------------------------------------
# cross-validated combined model
# ---------------------------------------------------------------------------


@dataclass
class CVReport:
    mode: str
    k: int
    repeats: int
    split: tuple[float, float, float]
    seed: int
    per_repetition: list[dict]
    mean: dict = field(default_factory=dict)
    se: dict = field(default_factory=dict)
    n_valid: dict = field(default_factory=dict)
    flags: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["split"] = list(self.split)
        return _jsonable(d)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n"


def _jsonable(x):
    if isinstance(x, dict):
        return {k: _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, (float, np.floating)):
        return None if math.isnan(x) else float(x)
    if isinstance(x, np.integer):
        return int(x)
    return x


def _aggregate(per_rep: list[dict]) -> tuple[dict, dict, dict, list[str]]:
    mean, se, n_valid, flags = {}, {}, {}, []
    for name in METRIC_NAMES:
        vals = np.array([r[name] for r in per_rep], dtype=float)
        ok = vals[~np.isnan(vals)]
        n_valid[name] = int(ok.size)
        if ok.size < vals.size:
            flags.append(f"{name}: {vals.size - ok.size} repetitions undefined and excluded")
        mean[name] = float(ok.mean()) if ok.size else math.nan
        se[name] = float(ok.std(ddof=1)) if ok.size > 1 else (0.0 if ok.size else math.nan)
    if len(per_rep) == 1:
        flags.append("n=1: single repetition, standard errors reported as 0")
    return mean, se, n_valid, flags


def _fold_metrics(scores, labels, threshold) -> dict:
    if len(labels) == 0:
        return {n: math.nan for n in METRIC_NAMES}
    m = threshold_metrics(scores, labels, threshold)
    return {n: getattr(m, n) for n in METRIC_NAMES}


def _one_repetition(cohort, definition, strata_params, stratum_params, k, split, seed, rep, strict, mode,
                    threshold):
    ids = cohort.patient_ids
    folds = stratified_group_kfold(ids, cohort.outcomes, k, subseed(seed, "folds", rep))
    fold_rows = []
    for i, (tr, va, te) in enumerate(fold_partitions(folds, k, split)):
        pick = lambda mask: cohort.subset([p for p, m in zip(ids, mask) if m])
        train_c, val_c, test_c = pick(tr), pick(va), pick(te)
        sp = boosting.with_seed(strata_params, subseed(seed, "subsample-strata", rep, i))
        mp = boosting.with_seed(stratum_params, subseed(seed, "subsample-stratum", rep, i))
        if mode == "stratified":
            pred = fit(train_c, definition, sp, mp, validation=val_c, strict=strict)
            out = predict_cohort(pred, test_c)
            scores = np.array([d.risk for d in out])
            outcome = dict(zip(test_c.patient_ids, test_c.outcomes))
            labels = np.array([outcome[d.patient_id] for d in out], dtype=np.int64)
        else:
            make = (lambda c: feature_matrix(c, lambda o: o < 0)) if mode == "unstratified" else last_record_matrix
            dtr, dva, dte = make(train_c), make(val_c), make(test_c)
            model = boosting.train(dtr.X, dtr.y, mp, eval_set=(dva.X, dva.y) if len(dva) else None)
            scores = model.predict_proba(dte.X) if len(dte) else np.empty(0)
            labels = dte.y
        fold_rows.append(_fold_metrics(scores, labels, threshold))
    rep_row = {n: float(np.nanmean([f[n] for f in fold_rows])) if any(not math.isnan(f[n]) for f in fold_rows)
               else math.nan for n in METRIC_NAMES}
    rep_row["repetition"] = rep
    rep_row["undefined_folds"] = {n: sum(math.isnan(f[n]) for f in fold_rows) for n in METRIC_NAMES
                                  if any(math.isnan(f[n]) for f in fold_rows)}
    return rep_row


def run_cv(
    cohort: AlignedCohort,
    definition: StrataDefinition,
    strata_params: HyperParams = boosting.STRATA_CLASSIFIER_PARAMS,
    stratum_params: HyperParams = boosting.STRATUM_PARAMS,
    k: int = 5,
    repeats: int = 100,
    split: Sequence[float] = (0.6, 0.2, 0.2),
    seed: int = 0,
    strict: bool = True,
    mode: str = "stratified",
    threshold: float = 0.5,
    jobs: int = 1,
) -> CVReport:
    """Repeated stratified group k-fold evaluation.

    Each fold rotation uses one fold for testing, the next for early stopping
    (with the default 60/20/20 split and k=5) and the rest for training.
    Every held-out day before the outcome day is scored as its own sample.
    A repetition's metric is the mean over its folds; the report gives the
    mean and the sample standard deviation over repetitions.

    ``mode`` selects the model: ``stratified`` (two-level predictor),
    ``unstratified`` (one model on all days) or ``retrospective`` (one model
    trained and tested on each patient's last record only).
    """
    if mode not in ("stratified", "unstratified", "retrospective"):
        raise ValueError(f"unknown mode {mode!r}")
    if len(set(cohort.outcomes.tolist())) < 2:
        raise InsufficientDataError("cross-validation needs both outcomes in the cohort")
    _fold_roles(k, split)
    args = (cohort, definition, strata_params, stratum_params, k, tuple(split), seed)
    if jobs == 1:
        per_rep = [_one_repetition(*args, r, strict, mode, threshold) for r in range(repeats)]
    else:
        from joblib import Parallel, delayed

        per_rep = Parallel(n_jobs=jobs)(delayed(_one_repetition)(*args, r, strict, mode, threshold)
                                        for r in range(repeats))
    mean, se, n_valid, flags = _aggregate(per_rep)
    return CVReport(mode, k, repeats, tuple(split), seed, per_rep, mean, se, n_valid, flags)


# ---------------------------------------------------------------------------
# stratum-wise models
# ---------------------------------------------------------------------------

TABLE4_COLUMNS = (
    "stratum", "patients", "deaths",
    "survived_f1", "survived_precision", "survived_specificity",
    "died_auroc", "died_f1", "died_precision", "died_sensitivity",
)


@dataclass
class StratumResult:
    index: int
    window: str
    patients: int
    deaths: int
    died: Metrics
    survived: Metrics
    importance: dict
    flags: list[str] = field(default_factory=list)

    def table_row(self) -> dict:
        return {
            "stratum": self.window, "patients": self.patients, "deaths": self.deaths,
            "survived_f1": self.survived.f1, "survived_precision": self.survived.precision,
            "survived_specificity": self.survived.specificity,
            "died_auroc": self.died.auroc, "died_f1": self.died.f1, "died_precision": self.died.precision,
            "died_sensitivity": self.died.recall,
        }


def _mean_metrics(ms: list[Metrics]) -> Metrics:
    out = Metrics(n_pos=ms[0].n_pos if ms else 0, n_neg=ms[0].n_neg if ms else 0)
    for n in METRIC_NAMES:
        vals = [getattr(m, n) for m in ms if not math.isnan(getattr(m, n))]
        setattr(out, n, float(np.mean(vals)) if vals else math.nan)
    return out


def per_stratum_eval(
    cohort: AlignedCohort,
    definition: StrataDefinition,
    params: HyperParams = boosting.STRATUM_PARAMS,
    k: int = 5,
    repeats: int = 1,
    split: Sequence[float] = (0.6, 0.2, 0.2),
    seed: int = 0,
    strict: bool = True,
    threshold: float = 0.5,
) -> list[StratumResult]:
    """Patient-grouped CV of each stratum model on its double-truncated rows.

    Out-of-fold day predictions of one repetition are pooled before scoring;
    metrics are averaged over repetitions.  Importances come from a model fit
    on the whole stratum.
    """
    results = []
    for k_idx, win in enumerate(windows(definition)):
        d = truncated_training_set(cohort, definition, k_idx, strict=strict)
        pids = list(dict.fromkeys(d.groups.tolist()))
        outcome = {g: y for g, y in zip(d.groups, d.y)}
        po = np.array([outcome[p] for p in pids], dtype=np.int64)
        res = StratumResult(k_idx, win.label(), len(pids), int(po.sum()), Metrics(), Metrics(), {})
        if len(pids) == 0:
            res.flags.append("empty stratum")
            results.append(res)
            continue
        if np.unique(po).size < 2:
            res.flags.append("single outcome class: metrics undefined")
        elif len(pids) < k:
            res.flags.append(f"fewer patients than folds ({len(pids)} < {k})")
        else:
            died, survived = [], []
            for rep in range(repeats):
                folds = stratified_group_kfold(pids, po, k, subseed(seed, "stratum-folds", k_idx, rep))
                fold_of = dict(zip(pids, folds))
                row_fold = np.array([fold_of[g] for g in d.groups])
                scores = np.full(len(d), np.nan)
                for i, (tr, va, te) in enumerate(fold_partitions(folds, k, split)):
                    in_tr = np.isin(row_fold, np.unique(folds[tr]))
                    in_va = np.isin(row_fold, np.unique(folds[va]))
                    in_te = np.isin(row_fold, np.unique(folds[te]))
                    mp = boosting.with_seed(params, subseed(seed, "stratum-subsample", k_idx, rep, i))
                    ev = (d.X[in_va], d.y[in_va]) if in_va.any() else None
                    model = boosting.train(d.X[in_tr], d.y[in_tr], mp, eval_set=ev)
                    scores[in_te] = model.predict_proba(d.X[in_te])
                died.append(threshold_metrics(scores, d.y, threshold, "died"))
                survived.append(threshold_metrics(scores, d.y, threshold, "survived"))
            res.died, res.survived = _mean_metrics(died), _mean_metrics(survived)
        full = boosting.train(d.X, d.y, replace(params, early_stopping_rounds=None, seed=subseed(seed, "stratum-full", k_idx)))
        res.importance = boosting.feature_importance(full, list(cohort.variable_names))
        results.append(res)
    return results


# ---------------------------------------------------------------------------
# per-day baseline models
# ---------------------------------------------------------------------------


@dataclass
class DailyBaselineResult:
    day_mode: str
    features: tuple[str, ...]
    metrics: list[dict]  # tidy: day, metric, value
    importances: list[dict]  # tidy: day, feature, importance
    skipped: list[dict]

    def importance_by_day(self) -> dict:
        out: dict = {}
        for r in self.importances:
            out.setdefault(r["day"], {})[r["feature"]] = r["importance"]
        return out


def _day_rows(cohort: AlignedCohort, day_mode: str) -> dict:
    """day key -> list of (patient index, feature row); all-missing rows dropped."""
    out: dict = {}
    for i, p in enumerate(cohort.patients):
        for o, row in zip(p.offsets, p.values):
            if np.isnan(row).all():
                continue
            if day_mode == "offset":
                key = int(o)
            else:
                if p.discharge_date is None:
                    raise ValueError("calendar mode needs discharge dates")
                key = (p.discharge_date + timedelta(days=int(o))).isoformat()
            out.setdefault(key, []).append((i, row))
    return out


def daily_baseline_experiment(
    cohort: AlignedCohort,
    test_cohort: AlignedCohort | None = None,
    features: Sequence[str] = KEY_LABS_WUHAN,
    day_mode: str = "offset",
    params: HyperParams = boosting.STRATUM_PARAMS,
    min_patients: int = 5,
    test_fraction: float = 0.2,
    seed: int = 0,
    threshold: float = 0.5,
) -> DailyBaselineResult:
    """One model per day on the latest values of a few key labs.

    ``day_mode="offset"`` groups days by offset from the outcome;
    ``"calendar"`` by calendar date (patients in hospital that day).  Without
    an external ``test_cohort`` a stratified patient holdout is used.
    Days with fewer than ``min_patients`` training patients or a single
    outcome class are skipped with a note.
    """
    if day_mode not in ("offset", "calendar"):
        raise ValueError("day_mode must be 'offset' or 'calendar'")
    train_c = cohort.select_variables(list(features))
    if test_cohort is None:
        rng = substream(seed, "baseline-holdout")
        ids = np.array(train_c.patient_ids, dtype=object)
        y = train_c.outcomes
        test_ids = []
        for cls in (0, 1):
            members = ids[y == cls]
            n = int(round(test_fraction * members.size))
            test_ids.extend(rng.permutation(members)[:n].tolist())
        test_c = train_c.subset(test_ids)
        train_c = train_c.subset(set(train_c.patient_ids) - set(test_ids))
    else:
        test_c = test_cohort.select_variables(list(features))

    tr_days, te_days = _day_rows(train_c, day_mode), _day_rows(test_c, day_mode)
    p_params = replace(params, early_stopping_rounds=None)
    metrics, importances, skipped = [], [], []
    for day in sorted(tr_days):
        rows = tr_days[day]
        y = np.array([train_c.patients[i].outcome for i, _ in rows], dtype=np.int64)
        if len(rows) < min_patients:
            skipped.append({"day": day, "reason": f"{len(rows)} patients < {min_patients}"})
            continue
        if np.unique(y).size < 2:
            skipped.append({"day": day, "reason": "single outcome class"})
            continue
        X = np.vstack([r for _, r in rows])
        model = boosting.train(X, y, boosting.with_seed(p_params, subseed(seed, "baseline", hash_day(day))))
        imp = boosting.feature_importance(model, list(features))
        for f in features:
            importances.append({"day": day, "feature": f, "importance": imp.get(f, (0.0, 0))[0]})
        test_rows = te_days.get(day, [])
        if not test_rows:
            skipped.append({"day": day, "reason": "no test patients (importance only)"})
            continue
        Xt = np.vstack([r for _, r in test_rows])
        yt = np.array([test_c.patients[i].outcome for i, _ in test_rows], dtype=np.int64)
        m = threshold_metrics(model.predict_proba(Xt), yt, threshold)
        for name, value in (("survival_accuracy", m.specificity), ("death_accuracy", m.recall),
                            ("accuracy", m.accuracy), ("auroc", m.auroc), ("n_train", float(len(rows))),
                            ("n_test", float(len(test_rows)))):
            metrics.append({"day": day, "metric": name, "value": value})
    return DailyBaselineResult(day_mode, tuple(features), metrics, importances, skipped)


def hash_day(day) -> int:
    if isinstance(day, (int, np.integer)):
        return int(day) + 100_000
    return int(day.replace("-", ""))


def importance_drift(importances: dict, share_gap: float = 0.15) -> dict:
    """Does any pair of models disagree on the top feature or on a share by > gap?

    ``importances`` maps a model label to ``{feature: share}``.
    """
    labels = [lab for lab, imp in importances.items() if imp and sum(imp.values()) > 0]
    features = sorted({f for lab in labels for f in importances[lab]})
    tops = {lab: max(importances[lab], key=lambda f: (importances[lab][f], f)) for lab in labels}
    max_gap, pair = 0.0, None
    for i, a in enumerate(labels):
        for b in labels[i + 1:]:
            for f in features:
                gap = abs(importances[a].get(f, 0.0) - importances[b].get(f, 0.0))
                if gap > max_gap:
                    max_gap, pair = gap, (a, b, f)
    return {
        "models": len(labels),
        "distinct_top_features": sorted(set(tops.values())),
        "max_share_gap": max_gap,
        "max_gap_at": pair,
        "drift": len(set(tops.values())) > 1 or max_gap > share_gap,
    }


# ---------------------------------------------------------------------------
# writers
# ---------------------------------------------------------------------------


def _fmt(v) -> str:
    if v is None:
        return "NA"
    if isinstance(v, (float, np.floating)):
        return "NA" if math.isnan(v) else f"{v:.6f}"
    return str(v)


def write_csv(path, columns: Sequence[str], rows: list[dict]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for r in rows:
            w.writerow([_fmt(r.get(c)) for c in columns])


TABLE5_COLUMNS = ("statistic",) + METRIC_NAMES


def write_table5(report: CVReport, path) -> None:
    rows = [dict(statistic="mean", **report.mean), dict(statistic="se", **report.se),
            dict(statistic="n_valid", **report.n_valid)]
    write_csv(path, TABLE5_COLUMNS, rows)


def write_table4(results: list[StratumResult], path) -> None:
    rows = []
    for r in results:
        row = r.table_row()
        row["flags"] = "; ".join(r.flags)
        rows.append(row)
    write_csv(path, TABLE4_COLUMNS + ("flags",), rows)
