import math

import numpy as np
import pytest
from conftest import toy_cohort
from hypothesis import given, settings
from hypothesis import strategies as st

from stratrisk.strata import (
    ExcludedDayError,
    StrataDefinition,
    StrataError,
    assign,
    assign_many,
    truncated_training_set,
    windows,
)


def linear_scan(wins, offset):
    """Brute-force membership straight from the window bounds."""
    hits = []
    for w in wins:
        above = w.lower == -math.inf or offset > w.lower
        below = offset <= w.upper if w.upper != 0 else offset < 0
        if above and below:
            hits.append(w.index)
    return hits


def random_definitions(n, seed):
    rng = np.random.default_rng(seed)
    out = []
    while len(out) < n:
        size = int(rng.integers(1, 8))
        cuts = sorted(set(int(c) for c in -rng.integers(1, 400, size)), reverse=True)
        if cuts == [-1]:
            continue
        out.append(StrataDefinition(cuts))
    return out


def test_default_windows(default_strata):
    labels = [w.label() for w in windows(default_strata)]
    assert labels == ["(-inf, -13]", "(-13, -7]", "(-7, -4]", "(-4, -2]", "(-2, 0)"]
    assert default_strata.n_strata == 5


def test_two_strata():
    wins = windows(StrataDefinition([-3]))
    assert [w.label() for w in wins] == ["(-inf, -3]", "(-3, 0)"]


def test_cut_at_minus_one_alone_is_single_stratum():
    # (-1, 0) holds no whole day once offset 0 is discarded
    with pytest.raises(StrataError):
        StrataDefinition([-1])


@pytest.mark.parametrize("cuts", [[-2, -2], [-4, -2], [0, -3], [3], [], [-1.5, -3]])
def test_invalid_definitions(cuts):
    with pytest.raises(StrataError):
        StrataDefinition(cuts)


@pytest.mark.parametrize("offset,index", [(-5, 2), (-13, 0), (-14, 0), (-12, 1), (-7, 1), (-4, 2),
                                          (-2, 3), (-3, 3), (-1, 4)])
def test_assign_examples(default_strata, offset, index):
    assert assign(default_strata, offset) == index
    assert windows(default_strata)[index].contains(offset)


@pytest.mark.parametrize("offset", [0, 1, 7])
def test_outcome_day_is_excluded(default_strata, offset):
    with pytest.raises(ExcludedDayError):
        assign(default_strata, offset)
    with pytest.raises(ExcludedDayError):
        assign_many(default_strata, [-3, offset])


def test_partition_brute_force():
    offsets = np.arange(-10000, 0)
    for d in random_definitions(50, seed=11):
        wins = windows(d)
        got = assign_many(d, offsets)
        for o, k in zip(offsets[::7], got[::7]):
            assert linear_scan(wins, int(o)) == [k]
        # vectorised and scalar assignment agree everywhere
        assert all(assign(d, int(o)) == k for o, k in zip(offsets[-60:], got[-60:]))
        assert np.all(np.diff(got) >= 0)
        assert got[0] == 0 and got[-1] == d.n_strata - 1


@settings(max_examples=200, deadline=None)
@given(st.lists(st.integers(-500, -2), min_size=1, max_size=8, unique=True),
       st.integers(-2000, -1), st.integers(-2000, -1))
def test_assign_monotone_and_unique(cuts, a, b):
    d = StrataDefinition(sorted(cuts, reverse=True))
    lo, hi = min(a, b), max(a, b)
    assert assign(d, lo) <= assign(d, hi)
    assert linear_scan(windows(d), a) == [assign(d, a)]


def test_parse_round_trip(default_strata):
    assert StrataDefinition.parse("-1,-2,-4,-7,-13") == default_strata
    assert StrataDefinition.parse(",".join(map(str, default_strata.to_list()))) == default_strata
    with pytest.raises(StrataError):
        StrataDefinition.parse("-1,x")


def test_truncation_examples(default_strata):
    cohort = toy_cohort([
        ("short", 1, {-4: 1.0, -2: 2.0, 0: 3.0}),   # T_LoS 5
        ("tiny", 0, {-2: 1.0, -1: 2.0}),             # T_LoS 3
    ])
    d = truncated_training_set(cohort, default_strata, 2)  # (-7, -4]
    assert list(d.groups) == ["short"] and list(d.offsets) == [-4]
    d = truncated_training_set(cohort, default_strata, 0)  # (-inf, -13]
    assert len(d) == 0 and d.X.shape == (0, 1)


def test_truncation_strict_needs_observation():
    d = StrataDefinition([-3])
    # observed at -5 and -1 only: the window (-3, 0) has carried-forward -2
    # and an observed -1; the window (-inf, -3] has an observed -5 and LOCF -4, -3
    cohort = toy_cohort([("p", 1, {-5: 1.0, -1: 2.0}), ("q", 0, {-6: 4.0})])
    strict = truncated_training_set(cohort, d, 1, strict=True)
    loose = truncated_training_set(cohort, d, 1, strict=False)
    # q has only imputed rows in (-3, 0)
    assert set(strict.groups) == {"p"}
    assert set(loose.groups) == {"p", "q"}
    assert list(loose.offsets[loose.groups == "q"]) == [-2, -1]


def test_truncation_soundness(small_cohort, default_strata):
    wins = windows(default_strata)
    seen = {}
    for k in range(default_strata.n_strata):
        d = truncated_training_set(small_cohort, default_strata, k)
        assert len(d) > 0
        assert all(wins[k].contains(int(o)) for o in d.offsets)
        assert (d.offsets < 0).all()
        outcomes = dict(zip(small_cohort.patient_ids, small_cohort.outcomes))
        assert all(outcomes[g] == y for g, y in zip(d.groups, d.y))
        for g, o in zip(d.groups, d.offsets):
            key = (g, int(o))
            assert key not in seen
            seen[key] = k


def test_truncation_bad_index(default_strata, small_cohort):
    with pytest.raises(StrataError):
        truncated_training_set(small_cohort, default_strata, 5)
