"""Synthetic sparse lab cohorts in the layout of the Wuhan COVID-19 file.

Used for tests, demos and smoke runs when the real data is not at hand.  The
three key labs carry stage-dependent signal so that importances shift over
the stay: hs-CRP separates outcomes early, lymphocytes mid-stay and LDH in
the last days.
"""

from __future__ import annotations

import csv
from datetime import datetime, timedelta

import numpy as np

from .cohort import KEY_LABS_WUHAN, RawRecord

LDH, LYMPH, CRP = KEY_LABS_WUHAN


def lab_panel(n_labs: int = 76) -> list[str]:
    return list(KEY_LABS_WUHAN) + [f"LAB_{i:02d}" for i in range(len(KEY_LABS_WUHAN), n_labs)]


def _key_lab_means(died: int, d: np.ndarray) -> dict:
    """Mean of each key lab ``d`` days before the outcome."""
    return {
        LDH: 230 + died * 650 * np.exp(-d / 3.0),
        LYMPH: 24 - died * 16 * np.exp(-(((d - 7) / 3.5) ** 2)) - 4 * died,
        CRP: 12 + died * 85 * (1 - np.exp(-d / 5.0)) + (1 - died) * 35 * (1 - np.exp(-d / 6.0)),
    }


def generate_records(
    n_patients: int = 375,
    n_deaths: int = 174,
    n_labs: int = 76,
    seed: int = 0,
    start: datetime = datetime(2020, 1, 10),
    key_lab_rate: float = 0.7,
) -> list[RawRecord]:
    rng = np.random.default_rng(seed)
    names = lab_panel(n_labs)
    other = names[len(KEY_LABS_WUHAN):]
    # weak, stage-specific signal on a third of the remaining labs
    effect = np.where(rng.random(len(other)) < 0.33, rng.normal(0, 0.6, len(other)), 0.0)
    decay = rng.uniform(2, 12, len(other))
    rate = rng.uniform(0.1, 0.5, len(other))

    outcomes = np.zeros(n_patients, dtype=int)
    outcomes[rng.choice(n_patients, n_deaths, replace=False)] = 1
    records = []
    for i, died in enumerate(outcomes):
        pid = str(i + 1)
        los = int(np.clip(rng.gamma(2.2, (5.0 if died else 8.0)) + 2, 1, 45))
        admit = start + timedelta(days=int(rng.integers(0, 38)), hours=float(rng.uniform(0, 20)))
        discharge_day = admit.date() + timedelta(days=los - 1)
        discharge = datetime.combine(discharge_day, datetime.min.time()) + timedelta(hours=float(rng.uniform(21, 23.9)))
        if discharge < admit:
            discharge = admit + timedelta(hours=1)
        frailty = rng.normal(0, 1)
        for d in range(los - 1, -1, -1):
            # lab draws get denser towards the outcome
            p_test = 0.95 if d == los - 1 else 0.12 + 0.55 * np.exp(-d / 3.0)
            if rng.random() >= p_test:
                continue
            day = discharge_day - timedelta(days=d)
            lo = 0.0
            if day == admit.date():
                lo = admit.hour + admit.minute / 60
            if d == 0:
                hi = discharge.hour + discharge.minute / 60 - 0.1
            else:
                hi = 23.9
            if hi <= lo:
                continue
            means = _key_lab_means(died, np.array(float(d)))
            labs = {}
            labs[LDH] = means[LDH] * np.exp(rng.normal(0, 0.2)) + 30 * frailty
            labs[LYMPH] = max(0.5, means[LYMPH] + rng.normal(0, 4))
            labs[CRP] = max(0.1, means[CRP] + rng.normal(0, 18))
            for name in KEY_LABS_WUHAN:
                if rng.random() >= key_lab_rate:
                    labs[name] = None
                else:
                    labs[name] = round(float(labs[name]), 1)
            z = effect * died * np.exp(-d / decay) + rng.normal(0, 1, len(other))
            present = rng.random(len(other)) < rate
            for j, name in enumerate(other):
                labs[name] = round(float(50 + 10 * z[j]), 2) if present[j] else None
            n_draws = 1 + int(rng.random() < 0.25)
            times = sorted(rng.uniform(lo, hi, n_draws))
            if n_draws == 1:
                parts = [labs]
            else:
                keys = list(labs)
                cut = rng.random(len(keys)) < 0.5
                parts = [{k: (v if c else None) for k, v, c in zip(keys, labs.values(), cut)},
                         {k: (None if c else v) for k, v, c in zip(keys, labs.values(), cut)}]
            for t, part in zip(times, parts):
                rt = datetime.combine(day, datetime.min.time()) + timedelta(hours=float(t))
                records.append(RawRecord(pid, rt.replace(microsecond=0), admit.replace(microsecond=0),
                                         discharge.replace(microsecond=0), int(died), part))
        if not any(r.patient_id == pid for r in records[-3:]):
            # no draws at all: keep the patient with a metadata-only row
            records.append(RawRecord(pid, None, admit.replace(microsecond=0), discharge.replace(microsecond=0),
                                     int(died), {n: None for n in names}))
    return records


def write_wuhan_csv(records: list[RawRecord], path) -> None:
    """Write records the way the public file is laid out: id only on a patient's first row."""
    names = list(records[0].labs) if records else []
    header = ["PATIENT_ID", "RE_DATE", "Admission time", "Discharge time", "outcome"] + names
    fmt = "%Y-%m-%d %H:%M:%S"
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        last = None
        for r in records:
            row = [
                r.patient_id if r.patient_id != last else "",
                r.record_time.strftime(fmt) if r.record_time else "",
                r.admission_time.strftime(fmt),
                r.discharge_time.strftime(fmt),
                str(r.outcome),
            ]
            row += ["" if r.labs.get(n) is None else repr(r.labs[n]) for n in names]
            w.writerow(row)
            last = r.patient_id


def synthetic_cohort(n_patients: int = 375, n_deaths: int = 174, n_labs: int = 76, seed: int = 0,
                     impute: bool = True):
    from .cohort import align_and_aggregate, impute_locf

    cohort = align_and_aggregate(generate_records(n_patients, n_deaths, n_labs, seed))
    return impute_locf(cohort) if impute else cohort
