import os
import sys
from datetime import datetime, timedelta

import pytest

sys.path.insert(0, os.path.dirname(__file__))

from stratrisk.cohort import RawRecord, align_and_aggregate, impute_locf  # noqa: E402
from stratrisk.strata import DEFAULT_CUT_POINTS, StrataDefinition  # noqa: E402
from stratrisk.synthetic import synthetic_cohort  # noqa: E402

ACCEPTANCE: dict = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[key]
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  {key}: {detail}")


@pytest.fixture
def record_criterion():
    def record(key, ok, detail):
        ACCEPTANCE[key] = (bool(ok), detail)
    return record


@pytest.fixture(scope="session")
def default_strata():
    return StrataDefinition(DEFAULT_CUT_POINTS)


@pytest.fixture(scope="session")
def small_cohort():
    return synthetic_cohort(n_patients=80, n_deaths=36, n_labs=12, seed=3)


@pytest.fixture(scope="session")
def full_cohort():
    return synthetic_cohort(seed=0)


DISCHARGE = datetime(2020, 3, 1, 23, 0)


def rec(pid, offset, hour=12, outcome=0, labs=None, los_days=30, minute=0):
    """A record ``offset`` calendar days from a fixed discharge at 23:00."""
    day = DISCHARGE.replace(hour=hour, minute=minute) + timedelta(days=offset)
    admission = DISCHARGE.replace(hour=8) - timedelta(days=los_days - 1)
    return RawRecord(pid, day, admission, DISCHARGE, outcome, dict(labs or {}))


@pytest.fixture
def make_record():
    return rec


def toy_cohort(patients, variables=("a",)):
    """patients: list of (pid, outcome, {offset: value-or-dict}) -> LOCF-imputed cohort."""
    records = []
    for pid, outcome, rows in patients:
        for off, labs in rows.items():
            if not isinstance(labs, dict):
                labs = {variables[0]: labs}
            full = {v: labs.get(v) for v in variables}
            records.append(rec(pid, off, outcome=outcome, labs=full))
    return impute_locf(align_and_aggregate(records))
