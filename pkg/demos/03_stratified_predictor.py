"""Fit the stage-aware predictor and follow one patient through their stay."""

import numpy as np

from stratrisk.boosting import STRATA_CLASSIFIER_PARAMS, STRATUM_PARAMS
from stratrisk.predictor import fit, predict_course
from stratrisk.strata import DEFAULT_CUT_POINTS, StrataDefinition, truncated_training_set, windows
from stratrisk.synthetic import synthetic_cohort

cohort = synthetic_cohort(n_patients=120, n_deaths=55, n_labs=20, seed=2)
strata = StrataDefinition(DEFAULT_CUT_POINTS)
print("windows:", [w.label() for w in windows(strata)])

# each stratum model only sees the days that fall inside its own window
for k in range(strata.n_strata):
    d = truncated_training_set(cohort, strata, k)
    print(f"  stratum {k}: {len(d):5d} rows from {len(set(d.groups))} patients")

held_out = cohort.patients[-1]
train_cohort = cohort.subset([p.patient_id for p in cohort.patients[:-1]])
pred = fit(train_cohort, strata, STRATA_CLASSIFIER_PARAMS, STRATUM_PARAMS)
print("\nflags:", pred.flags or "none")

# at prediction time the model never sees the day offset; it has to guess the stage
print(f"\npatient {held_out.patient_id} (outcome {held_out.outcome}), last twelve days")
print(" offset  likely stratum  risk")
for day in predict_course(pred, held_out)[-12:]:
    print(f" {day.day_offset:6d}  {int(np.argmax(day.strata_probs)):14d}  {day.risk:.3f}")
