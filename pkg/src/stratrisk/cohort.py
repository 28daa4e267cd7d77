"""Raw clinical records -> right-aligned daily panels.

Each patient's timeline is indexed by day offset relative to the outcome
(discharge or death) day: 0 is the outcome day, -1 the day before, etc.
"""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field, fields, replace
from datetime import date, datetime
from pathlib import Path
from typing import Callable, Iterable, NamedTuple, Sequence

import numpy as np

logger = logging.getLogger(__name__)


class CohortError(ValueError):
    pass


class SchemaError(CohortError):
    """Schema does not match the input file (unknown column, bad config)."""


class RowError(CohortError):
    def __init__(self, line: int, message: str):
        super().__init__(f"line {line}: {message}")
        self.line = line


# ---------------------------------------------------------------------------
# schema + raw records
# ---------------------------------------------------------------------------


@dataclass
class SchemaConfig:
    """Maps CSV columns to roles.

    ``labs=None`` means every column without a role and not listed in
    ``exclude`` is a lab variable.
    """

    id: str
    record_time: str
    admission_time: str
    discharge_time: str
    outcome: str
    labs: list[str] | None = None
    exclude: list[str] = field(default_factory=list)
    outcome_codes: dict[str, int] = field(default_factory=lambda: {"0": 0, "1": 1})
    missing: list[str] = field(default_factory=lambda: ["", "NA"])
    time_format: str | None = None
    # continuation rows leave the id (and possibly metadata) blank
    id_forward_fill: bool = False
    # what to do with records timestamped after discharge: error | clamp | drop
    late_records: str = "error"

    @property
    def role_columns(self) -> list[str]:
        return [self.id, self.record_time, self.admission_time, self.discharge_time, self.outcome]

    @classmethod
    def from_dict(cls, d: dict) -> "SchemaConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise SchemaError(f"unknown schema keys: {sorted(unknown)}")
        missing = [k for k in ("id", "record_time", "admission_time", "discharge_time", "outcome") if k not in d]
        if missing:
            raise SchemaError(f"schema is missing roles: {missing}")
        cfg = cls(**d)
        if cfg.late_records not in ("error", "clamp", "drop"):
            raise SchemaError(f"late_records must be error, clamp or drop, got {cfg.late_records!r}")
        cfg.outcome_codes = {str(k): int(v) for k, v in cfg.outcome_codes.items()}
        if set(cfg.outcome_codes.values()) - {0, 1}:
            raise SchemaError("outcome codes must map to 0 (survived) or 1 (died)")
        return cfg

    @classmethod
    def from_json(cls, path) -> "SchemaConfig":
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


# Layout of the public Wuhan training file once exported to CSV.
WUHAN_SCHEMA = {
    "id": "PATIENT_ID",
    "record_time": "RE_DATE",
    "admission_time": "Admission time",
    "discharge_time": "Discharge time",
    "outcome": "outcome",
    "id_forward_fill": True,
}

KEY_LABS_WUHAN = ("Lactate dehydrogenase", "(%)lymphocyte", "Hypersensitive c-reactive protein")


@dataclass
class RawRecord:
    patient_id: str
    record_time: datetime | None
    admission_time: datetime | None
    discharge_time: datetime | None
    outcome: int
    labs: dict[str, float | None]
    line: int = 0


def _parse_time(text: str, fmt: str | None) -> datetime:
    text = text.strip()
    if fmt:
        return datetime.strptime(text, fmt)
    return datetime.fromisoformat(text.replace("/", "-"))


def _parse_value(text: str) -> float:
    try:
        return float(text)
    except ValueError:
        # censored results such as "<0.1" keep their bound
        stripped = text.strip().lstrip("<>=≤≥").strip()
        return float(stripped)


def ingest_csv(path, schema: SchemaConfig, skip_bad_rows: bool = False) -> list[RawRecord]:
    """Read one record per CSV row.

    Malformed timestamps or lab values raise :class:`RowError` carrying the line
    number (or are logged and skipped with ``skip_bad_rows``).  An unknown
    outcome code or a missing patient id is always fatal.
    """
    path = Path(path)
    with open(path, newline="", encoding="utf-8-sig") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise SchemaError(f"{path}: file is empty (no header)") from None
        for col in schema.role_columns + list(schema.labs or []) + list(schema.exclude):
            if col not in header:
                raise SchemaError(f"{path}: column {col!r} named in the schema is not in the header")
        if schema.labs is None:
            skip = set(schema.role_columns) | set(schema.exclude)
            labs = [h for h in header if h not in skip]
        else:
            labs = list(schema.labs)
        col = {h: i for i, h in enumerate(header)}
        missing = set(schema.missing)

        records: list[RawRecord] = []
        last: RawRecord | None = None
        for row in reader:
            line = reader.line_num
            if not row or all(not c.strip() for c in row):
                continue
            row = row + [""] * (len(header) - len(row))

            def cell(name):
                v = row[col[name]].strip()
                return None if v in missing else v

            pid = cell(schema.id)
            inherit = False
            if pid is None:
                if schema.id_forward_fill and last is not None:
                    pid, inherit = last.patient_id, True
                else:
                    raise RowError(line, f"missing patient id in column {schema.id!r}")
            elif last is not None and pid == last.patient_id:
                inherit = True
            else:
                pid = pid[:-2] if pid.endswith(".0") else pid

            code = cell(schema.outcome)
            if code is None and inherit:
                outcome = last.outcome
            else:
                key = code if code in schema.outcome_codes else _normalise_code(code)
                if key not in schema.outcome_codes:
                    raise RowError(line, f"unknown outcome code {code!r} for patient {pid}")
                outcome = schema.outcome_codes[key]

            try:
                times = {}
                for role in ("record_time", "admission_time", "discharge_time"):
                    raw = cell(getattr(schema, role))
                    times[role] = None if raw is None else _parse_time(raw, schema.time_format)
                values = {}
                for name in labs:
                    raw = cell(name)
                    values[name] = None if raw is None else _parse_value(raw)
            except ValueError as exc:
                err = RowError(line, f"malformed value ({exc})")
                if skip_bad_rows:
                    logger.warning("skipping %s", err)
                    continue
                raise err from None

            if inherit:
                times["admission_time"] = times["admission_time"] or last.admission_time
                times["discharge_time"] = times["discharge_time"] or last.discharge_time
            rec = RawRecord(pid, times["record_time"], times["admission_time"], times["discharge_time"],
                            outcome, values, line)
            records.append(rec)
            last = rec
    return records


def _normalise_code(code):
    if code is None:
        return None
    try:
        return str(int(float(code)))
    except ValueError:
        return code


def lab_names(records: Sequence[RawRecord]) -> list[str]:
    names: dict[str, None] = {}
    for r in records:
        for k in r.labs:
            names.setdefault(k, None)
    return list(names)


# ---------------------------------------------------------------------------
# aligned panels
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class PatientPanel:
    """Daily panel of one patient.

    ``offsets`` is ascending; ``values`` and ``observed`` have one row per
    offset and one column per cohort variable.  Missing cells are NaN.
    """

    patient_id: str
    outcome: int
    total_los_days: int
    offsets: np.ndarray
    values: np.ndarray
    observed: np.ndarray
    admission_date: date | None = None
    discharge_date: date | None = None

    @property
    def rows(self) -> dict[int, np.ndarray]:
        return {int(o): self.values[i] for i, o in enumerate(self.offsets)}

    @property
    def observed_mask(self) -> dict[int, np.ndarray]:
        return {int(o): self.observed[i] for i, o in enumerate(self.offsets)}

    @property
    def data_days(self) -> np.ndarray:
        """Offsets with at least one actually observed value."""
        return self.offsets[self.observed.any(axis=1)] if self.offsets.size else self.offsets

    def row(self, offset: int) -> np.ndarray:
        idx = np.searchsorted(self.offsets, offset)
        if idx >= self.offsets.size or self.offsets[idx] != offset:
            raise KeyError(offset)
        return self.values[idx]

    @property
    def remaining_los(self) -> np.ndarray:
        return -self.offsets

    def equals(self, other: "PatientPanel") -> bool:
        return (
            self.patient_id == other.patient_id
            and self.outcome == other.outcome
            and self.total_los_days == other.total_los_days
            and np.array_equal(self.offsets, other.offsets)
            and np.array_equal(self.values, other.values, equal_nan=True)
            and np.array_equal(self.observed, other.observed)
        )


@dataclass(frozen=True, eq=False)
class AlignedCohort:
    patients: tuple[PatientPanel, ...]
    variable_names: tuple[str, ...]

    def __post_init__(self):
        ids = [p.patient_id for p in self.patients]
        if len(set(ids)) != len(ids):
            raise CohortError("duplicate patient ids in cohort")
        nv = len(self.variable_names)
        for p in self.patients:
            if p.values.shape != (p.offsets.size, nv):
                raise CohortError(f"patient {p.patient_id}: panel shape {p.values.shape} does not match variables")

    def __len__(self):
        return len(self.patients)

    @property
    def patient_ids(self) -> list[str]:
        return [p.patient_id for p in self.patients]

    @property
    def outcomes(self) -> np.ndarray:
        return np.array([p.outcome for p in self.patients], dtype=np.int64)

    @property
    def n_deaths(self) -> int:
        return int(self.outcomes.sum())

    def subset(self, patient_ids: Iterable[str]) -> "AlignedCohort":
        keep = set(patient_ids)
        return AlignedCohort(tuple(p for p in self.patients if p.patient_id in keep), self.variable_names)

    def select_variables(self, names: Sequence[str]) -> "AlignedCohort":
        missing = [n for n in names if n not in self.variable_names]
        if missing:
            raise CohortError(f"unknown variables: {missing}")
        idx = [self.variable_names.index(n) for n in names]
        return AlignedCohort(
            tuple(replace(p, values=p.values[:, idx], observed=p.observed[:, idx]) for p in self.patients),
            tuple(names),
        )

    def equals(self, other: "AlignedCohort") -> bool:
        return (
            self.variable_names == other.variable_names
            and len(self) == len(other)
            and all(a.equals(b) for a, b in zip(self.patients, other.patients))
        )


def align_and_aggregate(records: Sequence[RawRecord], late_records: str = "error") -> AlignedCohort:
    """Right-align records by outcome day and collapse them to one row per day.

    Several records on one calendar day collapse per variable to the latest
    non-missing value (by record time, then input order).  Days without any
    observed value get no row.
    """
    variables = lab_names(records)
    vidx = {v: i for i, v in enumerate(variables)}
    by_patient: dict[str, list[tuple[int, RawRecord]]] = {}
    for i, r in enumerate(records):
        by_patient.setdefault(r.patient_id, []).append((i, r))

    n_early = 0
    panels = []
    for pid, recs in by_patient.items():
        outcomes = {r.outcome for _, r in recs}
        if len(outcomes) != 1:
            raise CohortError(f"patient {pid}: outcome differs between records")
        discharge = next((r.discharge_time for _, r in recs if r.discharge_time is not None), None)
        admission = next((r.admission_time for _, r in recs if r.admission_time is not None), None)
        if discharge is None:
            raise CohortError(f"patient {pid}: no discharge time")
        los = 1 if admission is None else (discharge.date() - admission.date()).days + 1
        if los < 1:
            raise CohortError(f"patient {pid}: admission after discharge")

        days: dict[int, list[tuple[datetime, int, RawRecord]]] = {}
        for i, r in recs:
            if r.record_time is None:
                if any(v is not None for v in r.labs.values()):
                    logger.warning("patient %s line %d: lab values without a record time ignored", pid, r.line)
                continue
            t = r.record_time
            if t > discharge:
                if late_records == "error":
                    raise CohortError(f"patient {pid}: record at {t} is after discharge {discharge}")
                if late_records == "drop":
                    continue
                if t.date() > discharge.date():
                    raise CohortError(f"patient {pid}: record at {t} is after the discharge day")
            off = (t.date() - discharge.date()).days
            days.setdefault(off, []).append((t, i, r))

        offsets, rows, masks = [], [], []
        for off in sorted(days):
            row = np.full(len(variables), np.nan)
            for _, _, r in sorted(days[off], key=lambda e: (e[0], e[1])):
                for name, v in r.labs.items():
                    if v is not None:
                        row[vidx[name]] = v
            mask = ~np.isnan(row)
            if mask.any():
                offsets.append(off)
                rows.append(row)
                masks.append(mask)
        if offsets and offsets[0] < -(los - 1):
            n_early += 1
            los = 1 - offsets[0]
        panels.append(_panel(pid, recs[0][1].outcome, los, offsets, rows, masks, len(variables),
                             admission.date() if admission else None, discharge.date()))
    if n_early:
        logger.warning("%d patients have records before admission; their stay was extended to cover them", n_early)
    return AlignedCohort(tuple(panels), tuple(variables))


def _panel(pid, outcome, los, offsets, rows, masks, nv, adm=None, dis=None) -> PatientPanel:
    if offsets:
        values, observed = np.vstack(rows), np.vstack(masks)
    else:
        values, observed = np.empty((0, nv)), np.empty((0, nv), dtype=bool)
    return PatientPanel(pid, int(outcome), int(los), np.asarray(offsets, dtype=np.int64), values, observed, adm, dis)


def impute_locf(cohort: AlignedCohort) -> AlignedCohort:
    """Carry each variable's last observation forward up to the outcome day.

    Every offset from the patient's first populated day to 0 is materialised.
    Variables never observed stay missing; ``observed`` marks real values.
    """
    out = []
    for p in cohort.patients:
        if p.offsets.size == 0:
            out.append(p)
            continue
        full = np.arange(p.offsets[0], 1, dtype=np.int64)
        pos = p.offsets - full[0]
        values = np.full((full.size, p.values.shape[1]), np.nan)
        observed = np.zeros(values.shape, dtype=bool)
        values[pos] = np.where(p.observed, p.values, np.nan)
        observed[pos] = p.observed
        # index of the latest observation at or before each row, per column
        last = np.where(observed, np.arange(full.size)[:, None], -1)
        np.maximum.accumulate(last, axis=0, out=last)
        cols = np.broadcast_to(np.arange(values.shape[1]), values.shape)
        filled = np.where(last >= 0, values[np.maximum(last, 0), cols], np.nan)
        out.append(replace(p, offsets=full, values=filled, observed=observed))
    return AlignedCohort(tuple(out), cohort.variable_names)


HISTORY_SUFFIXES = ("mean", "slope", "std", "diff")


def _ols_slope(x: np.ndarray, y: np.ndarray) -> float:
    xc = x - x.mean()
    return float((xc * (y - y.mean())).sum() / (xc * xc).sum())


def derive_history_features(cohort: AlignedCohort, variables: Sequence[str], window: int) -> AlignedCohort:
    """Append mean, slope, std and first difference of recent observations.

    For each selected variable and each populated offset ``t``, statistics use
    the actually observed values at offsets in ``(t - window, t]``.  With fewer
    than two observations the four derived values are missing.  Slope is the
    least-squares slope per day; std uses ``ddof=1``; diff is the last
    observation minus the one before it.
    """
    if window < 2:
        raise CohortError("window must be at least 2 days")
    unknown = [v for v in variables if v not in cohort.variable_names]
    if unknown:
        raise CohortError(f"unknown variables: {unknown}")
    src = [cohort.variable_names.index(v) for v in variables]
    new_names = tuple(f"{v}__{s}" for v in variables for s in HISTORY_SUFFIXES)

    out = []
    for p in cohort.patients:
        extra = np.full((p.offsets.size, len(new_names)), np.nan)
        extra_mask = np.zeros(extra.shape, dtype=bool)
        for j, c in enumerate(src):
            obs = p.observed[:, c]
            o_t, o_v = p.offsets[obs], p.values[obs, c]
            for i, t in enumerate(p.offsets):
                sel = (o_t > t - window) & (o_t <= t)
                if sel.sum() < 2:
                    continue
                x, y = o_t[sel].astype(float), o_v[sel]
                extra[i, 4 * j: 4 * j + 4] = (y.mean(), _ols_slope(x, y), y.std(ddof=1), y[-1] - y[-2])
                extra_mask[i, 4 * j: 4 * j + 4] = obs[i]
        out.append(replace(p, values=np.hstack([p.values, extra]), observed=np.hstack([p.observed, extra_mask])))
    return AlignedCohort(tuple(out), cohort.variable_names + new_names)


# ---------------------------------------------------------------------------
# design matrices
# ---------------------------------------------------------------------------


class Design(NamedTuple):
    X: np.ndarray
    y: np.ndarray
    groups: np.ndarray
    offsets: np.ndarray

    @classmethod
    def empty(cls, n_features: int) -> "Design":
        return cls(np.empty((0, n_features)), np.empty(0, dtype=np.int64),
                   np.empty(0, dtype=object), np.empty(0, dtype=np.int64))

    def __len__(self):
        return self.X.shape[0]


def feature_matrix(cohort: AlignedCohort, offsets: Callable[[int], bool] | None = None) -> Design:
    """Stack (patient, offset) rows whose offset satisfies the predicate.

    Rows follow patient order, then ascending offset.  Labels repeat the
    patient's outcome.
    """
    blocks, labels, groups, offs = [], [], [], []
    for p in cohort.patients:
        if p.offsets.size == 0:
            continue
        keep = np.ones(p.offsets.size, bool) if offsets is None else np.array(
            [bool(offsets(int(o))) for o in p.offsets], dtype=bool)
        n = int(keep.sum())
        if not n:
            continue
        blocks.append(p.values[keep])
        labels.append(np.full(n, p.outcome, dtype=np.int64))
        groups.extend([p.patient_id] * n)
        offs.append(p.offsets[keep])
    if not blocks:
        return Design.empty(len(cohort.variable_names))
    return Design(np.vstack(blocks), np.concatenate(labels), np.asarray(groups, dtype=object),
                  np.concatenate(offs).astype(np.int64))


def last_record_matrix(cohort: AlignedCohort) -> Design:
    """One row per patient: the populated day closest to the outcome.

    This is the retrospective, last-record-only setting used as a baseline.
    """
    blocks, labels, groups, offs = [], [], [], []
    for p in cohort.patients:
        days = p.data_days
        if days.size == 0:
            continue
        o = int(days[-1])
        blocks.append(p.row(o)[None, :])
        labels.append(p.outcome)
        groups.append(p.patient_id)
        offs.append(o)
    if not blocks:
        return Design.empty(len(cohort.variable_names))
    return Design(np.vstack(blocks), np.asarray(labels, dtype=np.int64), np.asarray(groups, dtype=object),
                  np.asarray(offs, dtype=np.int64))


# ---------------------------------------------------------------------------
# dumps and summaries
# ---------------------------------------------------------------------------


def _num(v):
    return None if np.isnan(v) else float(v)


def cohort_to_dict(cohort: AlignedCohort) -> dict:
    patients = []
    for p in cohort.patients:
        patients.append({
            "patient_id": p.patient_id,
            "outcome": p.outcome,
            "total_los_days": p.total_los_days,
            "admission_date": p.admission_date.isoformat() if p.admission_date else None,
            "discharge_date": p.discharge_date.isoformat() if p.discharge_date else None,
            "rows": {
                str(int(o)): {"values": [_num(v) for v in p.values[i]], "observed": p.observed[i].tolist()}
                for i, o in enumerate(p.offsets)
            },
        })
    return {"variable_names": list(cohort.variable_names), "patients": patients}


def cohort_from_dict(d: dict) -> AlignedCohort:
    names = tuple(d["variable_names"])
    panels = []
    for p in d["patients"]:
        items = sorted(p["rows"].items(), key=lambda kv: int(kv[0]))
        offsets = [int(k) for k, _ in items]
        rows = [np.array([np.nan if v is None else v for v in r["values"]], dtype=float) for _, r in items]
        masks = [np.array(r["observed"], dtype=bool) for _, r in items]
        adm = date.fromisoformat(p["admission_date"]) if p.get("admission_date") else None
        dis = date.fromisoformat(p["discharge_date"]) if p.get("discharge_date") else None
        panels.append(_panel(p["patient_id"], p["outcome"], p["total_los_days"], offsets, rows, masks,
                             len(names), adm, dis))
    return AlignedCohort(tuple(panels), names)


def dump_cohort(cohort: AlignedCohort, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(cohort_to_dict(cohort), fh, separators=(",", ":"))
        fh.write("\n")


def load_cohort(path) -> AlignedCohort:
    with open(path, encoding="utf-8") as fh:
        return cohort_from_dict(json.load(fh))


def summarize(cohort: AlignedCohort) -> dict:
    """Counts plus per-offset data density split by outcome."""
    density: dict[int, list[int]] = {}
    for p in cohort.patients:
        for o in p.data_days:
            density.setdefault(int(o), [0, 0])[p.outcome] += 1
    los = [p.total_los_days for p in cohort.patients]
    return {
        "patients": len(cohort),
        "deaths": cohort.n_deaths,
        "survivors": len(cohort) - cohort.n_deaths,
        "variables": len(cohort.variable_names),
        "patients_without_data": sum(1 for p in cohort.patients if p.data_days.size == 0),
        "data_days": int(sum(p.data_days.size for p in cohort.patients)),
        "median_los_days": float(np.median(los)) if los else None,
        "density": [
            {"offset": o, "survived": density[o][0], "died": density[o][1]} for o in sorted(density)
        ],
    }


def load_cohort_csv(path, schema: SchemaConfig, impute: bool = True) -> AlignedCohort:
    records = ingest_csv(path, schema)
    cohort = align_and_aggregate(records, late_records=schema.late_records)
    return impute_locf(cohort) if impute else cohort
