"""Two-level temporally stratified risk model.

A softmax *strata classifier* estimates which stratum (remaining length of
stay bucket) a patient-day falls in; one binary *stratum model* per stratum
estimates the probability of death.  The daily risk is their dot product::

    risk_t = sum_k P(stratum k | x_t) * P(death | x_t, stratum k)
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import boosting
from .boosting import BoostedModel, HyperParams
from .cohort import AlignedCohort, Design, PatientPanel, feature_matrix
from .strata import StrataDefinition, assign_many, truncated_training_set, windows

logger = logging.getLogger(__name__)


class InsufficientDataError(ValueError):
    pass


class EmptyStratumError(InsufficientDataError):
    """A stratum has no training rows: the strata are too fine for the data."""


@dataclass(frozen=True)
class DailyPrediction:
    patient_id: str | None
    day_offset: int | None
    strata_probs: np.ndarray
    stratum_scores: np.ndarray
    risk: float

    def as_row(self) -> dict:
        row = {"patient_id": self.patient_id, "day_offset": self.day_offset}
        for k, p in enumerate(self.strata_probs):
            row[f"p_stratum_{k}"] = float(p)
        for k, s in enumerate(self.stratum_scores):
            row[f"score_stratum_{k}"] = float(s)
        row["risk"] = self.risk
        return row


@dataclass
class StratifiedPredictor:
    strata_def: StrataDefinition
    strata_clf: BoostedModel
    stratum_models: list[BoostedModel]
    feature_schema: tuple[str, ...]
    # strata whose training rows held a single outcome class
    flags: dict[int, str] = field(default_factory=dict)

    def __post_init__(self):
        if len(self.stratum_models) != self.strata_def.n_strata:
            raise ValueError("one stratum model per stratum is required")
        nf = len(self.feature_schema)
        if any(m.n_features != nf for m in [self.strata_clf, *self.stratum_models]):
            raise ValueError("all submodels must share the feature schema")

    @property
    def n_strata(self) -> int:
        return self.strata_def.n_strata

    def components(self, X) -> tuple[np.ndarray, np.ndarray]:
        """Strata probabilities (n, n_s) and stratum-wise death scores (n, n_s)."""
        X = np.asarray(X, dtype=float)
        if X.ndim == 1:
            X = X[None, :]
        if X.shape[1] != len(self.feature_schema):
            raise ValueError(f"expected {len(self.feature_schema)} features, got {X.shape[1]}")
        probs = self.strata_clf.predict_proba(X)
        scores = np.column_stack([m.predict_proba(X) for m in self.stratum_models])
        return probs, scores

    def predict_risk(self, X) -> np.ndarray:
        probs, scores = self.components(X)
        return combine(probs, scores)

    def to_dict(self) -> dict:
        return {
            "strata": self.strata_def.to_list(),
            "n_strata": self.n_strata,
            "feature_schema": list(self.feature_schema),
            "strata_classifier": self.strata_clf.to_dict(),
            "stratum_models": [m.to_dict() for m in self.stratum_models],
            "flags": {str(k): v for k, v in sorted(self.flags.items())},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "StratifiedPredictor":
        return cls(
            StrataDefinition(d["strata"]),
            BoostedModel.from_dict(d["strata_classifier"]),
            [BoostedModel.from_dict(m) for m in d["stratum_models"]],
            tuple(d["feature_schema"]),
            {int(k): v for k, v in d.get("flags", {}).items()},
        )

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, separators=(",", ":"))
            fh.write("\n")

    @classmethod
    def load(cls, path) -> "StratifiedPredictor":
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))


def combine(strata_probs, stratum_scores) -> np.ndarray:
    return np.einsum("ij,ij->i", np.atleast_2d(strata_probs), np.atleast_2d(stratum_scores))


def strata_training_set(cohort: AlignedCohort, definition: StrataDefinition) -> Design:
    """All populated days before the outcome day, labelled with their stratum."""
    d = feature_matrix(cohort, lambda o: o < 0)
    return Design(d.X, assign_many(definition, d.offsets), d.groups, d.offsets)


def fit(
    cohort: AlignedCohort,
    definition: StrataDefinition,
    strata_params: HyperParams = boosting.STRATA_CLASSIFIER_PARAMS,
    stratum_params: HyperParams = boosting.STRATUM_PARAMS,
    validation: AlignedCohort | None = None,
    strict: bool = True,
) -> StratifiedPredictor:
    """Train the strata classifier and one binary model per stratum.

    ``validation`` (a disjoint cohort) drives early stopping of every
    submodel.  A stratum without any rows raises :class:`EmptyStratumError`;
    a stratum with a single outcome class is trained anyway and flagged.
    """
    if cohort.variable_names != (validation.variable_names if validation else cohort.variable_names):
        raise ValueError("validation cohort must share the feature schema")
    wins = windows(definition)
    per_stratum = [truncated_training_set(cohort, definition, k, strict=strict) for k in range(definition.n_strata)]
    for k, d in enumerate(per_stratum):
        if len(d) == 0:
            raise EmptyStratumError(f"stratum {wins[k]} has no training rows")

    st = strata_training_set(cohort, definition)
    eval_set = None
    if validation is not None:
        sv = strata_training_set(validation, definition)
        eval_set = (sv.X, sv.y) if len(sv) else None
    clf = boosting.train(st.X, st.y, strata_params, eval_set=eval_set, objective="softmax",
                         n_classes=definition.n_strata)

    models, flags = [], {}
    for k, d in enumerate(per_stratum):
        if np.unique(d.y).size < 2:
            flags[k] = "single-class"
            logger.warning("stratum %s has a single outcome class in training", wins[k])
        ev = None
        if validation is not None:
            dv = truncated_training_set(validation, definition, k, strict=strict)
            ev = (dv.X, dv.y) if len(dv) else None
        models.append(boosting.train(d.X, d.y, stratum_params, eval_set=ev))
    return StratifiedPredictor(definition, clf, models, cohort.variable_names, flags)


def predict_day(pred: StratifiedPredictor, x, patient_id=None) -> DailyPrediction:
    """Risk for one feature vector; the day offset is never consulted."""
    x = np.asarray(x, dtype=float)
    if x.ndim != 1:
        raise ValueError("predict_day takes a single feature vector")
    probs, scores = pred.components(x)
    return DailyPrediction(patient_id, None, probs[0], scores[0], float(combine(probs, scores)[0]))


def predict_course(pred: StratifiedPredictor, panel: PatientPanel) -> list[DailyPrediction]:
    """One prediction per populated day before the outcome day, in order.

    The offset is attached to the output for reporting only.
    """
    keep = panel.offsets < 0
    if not keep.any():
        return []
    X = panel.values[keep]
    probs, scores = pred.components(X)
    risk = combine(probs, scores)
    return [DailyPrediction(panel.patient_id, int(o), probs[i], scores[i], float(risk[i]))
            for i, o in enumerate(panel.offsets[keep])]


def predict_cohort(pred: StratifiedPredictor, cohort: AlignedCohort) -> list[DailyPrediction]:
    if cohort.variable_names != pred.feature_schema:
        raise ValueError("cohort variables do not match the model's feature schema")
    out = []
    for p in cohort.patients:
        out.extend(predict_course(pred, p))
    return out


def constant_weight(offsets) -> np.ndarray:
    return np.ones(np.shape(offsets))


def exponential_weight(beta: float) -> Callable:
    """Day weight ``exp(beta * offset)``: beta > 0 favours days near the outcome."""
    def weight(offsets):
        return np.exp(beta * np.asarray(offsets, dtype=float))
    return weight


def weighted_ce_loss(risks: Sequence[float], y: int, offsets: Sequence[int] | None = None,
                     weight: Callable = constant_weight, eps: float = 1e-12) -> float:
    """Day-weighted cross-entropy of one patient's daily risks against the outcome."""
    risks = np.clip(np.asarray(risks, dtype=float), eps, 1 - eps)
    offsets = np.arange(-risks.size, 0) if offsets is None else np.asarray(offsets)
    lam = np.asarray(weight(offsets), dtype=float)
    if (lam < 0).any():
        raise ValueError("day weights must be non-negative")
    ce = -(y * np.log(risks) + (1 - y) * np.log(1 - risks))
    return float(math.fsum(lam * ce))
