"""Walk through turning raw lab draws into a right-aligned daily panel."""

import numpy as np

from stratrisk.cohort import align_and_aggregate, feature_matrix, impute_locf, summarize
from stratrisk.synthetic import generate_records

# a small synthetic ward: 30 patients, 12 of whom die, 8 lab variables
records = generate_records(n_patients=30, n_deaths=12, n_labs=8, seed=11)
print(len(records), "raw rows, e.g.")
r = records[0]
print(" ", r.patient_id, r.record_time, "->", {k: v for k, v in list(r.labs.items())[:3]})

# days are counted backwards from the outcome day, which is offset 0
cohort = align_and_aggregate(records)
p = cohort.patients[0]
print("\npatient", p.patient_id, "outcome", p.outcome, "stay", p.total_los_days, "days")
print("offsets with data:", p.offsets.tolist())
print("remaining stay at those rows:", p.remaining_los.tolist())

# gaps are filled from the most recent earlier value only, never from the future
before = np.isnan(p.values).mean()
filled = impute_locf(cohort)
after = np.isnan(filled.patients[0].values).mean()
print(f"\nmissing cells for patient {p.patient_id}: {before:.0%} raw, {after:.0%} after carry-forward")
print("(cells before a variable's first draw stay missing)")

# one row per patient-day, outcome day excluded
d = feature_matrix(filled, offsets=lambda o: o < 0)
print("\ndesign matrix", d.X.shape, "label balance", np.bincount(d.y))

s = summarize(filled)
print("\ncohort summary:", {k: s[k] for k in ("patients", "deaths")})
