"""Temporal strata over right-aligned day offsets.

A strata definition is a strictly decreasing list of negative cut points
``d_1 > d_2 > ... > d_{n-1}``.  They split ``(-inf, 0)`` into ``n`` windows::

    (-inf, d_{n-1}], (d_{n-1}, d_{n-2}], ..., (d_2, d_1], (d_1, 0)

Window 0 is the earliest period of the stay and window ``n - 1`` the latest.
Offset 0 (the outcome day) is never part of any window.  Offsets are whole
days, so a cut point at -1 would open an empty window ``(-1, 0)``; it is
absorbed instead and the latest window becomes ``(d_2, 0)``.  The usual
``{-1, -2, -4, -7, -13}`` therefore yields five strata.
"""

from __future__ import annotations

import bisect
import logging
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

logger = logging.getLogger(__name__)

DEFAULT_CUT_POINTS = (-1, -2, -4, -7, -13)


class StrataError(ValueError):
    pass


class ExcludedDayError(StrataError):
    """Raised when a non-negative offset (the outcome day) is assigned."""


@dataclass(frozen=True)
class StratumWindow:
    index: int
    lower: float  # exclusive; -inf for the earliest window
    upper: int  # inclusive, except the latest window which excludes 0

    def __post_init__(self):
        if not self.lower < self.upper:
            raise StrataError(f"empty window ({self.lower}, {self.upper}]")

    @property
    def upper_inclusive(self) -> bool:
        return self.upper != 0

    def contains(self, offset: int) -> bool:
        if offset <= self.lower:
            return False
        return offset <= self.upper if self.upper_inclusive else offset < self.upper

    def label(self) -> str:
        lo = "-inf" if math.isinf(self.lower) else str(int(self.lower))
        close = "]" if self.upper_inclusive else ")"
        return f"({lo}, {self.upper}{close}"

    def __str__(self):
        return self.label()


@dataclass(frozen=True)
class StrataDefinition:
    cut_points: tuple[int, ...]

    def __init__(self, cut_points: Sequence[int]):
        cuts = tuple(int(c) for c in cut_points)
        if any(c != float(v) for c, v in zip(cuts, cut_points)):
            raise StrataError(f"cut points must be integers: {list(cut_points)}")
        if not cuts:
            raise StrataError("at least one cut point is required (n_s >= 2)")
        if any(c >= 0 for c in cuts):
            raise StrataError(f"cut points must be negative: {list(cuts)}")
        if any(a <= b for a, b in zip(cuts, cuts[1:])):
            raise StrataError(f"cut points must be strictly decreasing: {list(cuts)}")
        # window boundaries, ascending; -1 bounds no whole day and is dropped
        bounds = tuple(c for c in reversed(cuts) if c != -1)
        if not bounds:
            raise StrataError(f"{list(cuts)} yields a single stratum; n_s >= 2 is required")
        object.__setattr__(self, "cut_points", cuts)
        object.__setattr__(self, "_ascending", bounds)

    @property
    def n_strata(self) -> int:
        return len(self._ascending) + 1

    def windows(self) -> list[StratumWindow]:
        return windows(self)

    def assign(self, day_offset: int) -> int:
        return assign(self, day_offset)

    def to_list(self) -> list[int]:
        return list(self.cut_points)

    @classmethod
    def parse(cls, text: str) -> "StrataDefinition":
        """Parse a comma separated list such as ``"-1,-2,-4,-7,-13"``."""
        text = text.replace("−", "-")
        try:
            cuts = [int(tok) for tok in text.split(",") if tok.strip()]
        except ValueError as exc:
            raise StrataError(f"cannot parse strata {text!r}") from exc
        return cls(cuts)


def windows(definition: StrataDefinition) -> list[StratumWindow]:
    asc = definition._ascending
    bounds = [-math.inf, *asc, 0]
    return [StratumWindow(k, bounds[k], int(bounds[k + 1])) for k in range(len(bounds) - 1)]


def assign(definition: StrataDefinition, day_offset: int) -> int:
    """Index of the window containing ``day_offset``.

    Upper bounds are inclusive, so a cut point belongs to the earlier window.
    """
    if day_offset >= 0:
        raise ExcludedDayError(f"offset {day_offset} is the outcome day or later and is discarded")
    # count of cut points strictly below the offset
    return bisect.bisect_left(definition._ascending, day_offset)


def assign_many(definition: StrataDefinition, offsets) -> np.ndarray:
    offsets = np.asarray(offsets, dtype=np.int64)
    if offsets.size and offsets.max() >= 0:
        raise ExcludedDayError("offsets >= 0 cannot be assigned to a stratum")
    return np.searchsorted(np.asarray(definition._ascending, dtype=np.int64), offsets, side="left")


def truncated_training_set(cohort, definition: StrataDefinition, k: int, strict: bool = True):
    """Rows of stratum ``k`` after double truncation.

    A patient contributes its populated offsets inside window ``k`` provided it
    reached the window (left truncation) and has data there (right truncation).
    With ``strict`` the patient must have an actually observed value inside the
    window; otherwise carried-forward rows are enough.
    """
    from .cohort import Design

    if not 0 <= k < definition.n_strata:
        raise StrataError(f"stratum index {k} out of range for {definition.n_strata} strata")
    win = windows(definition)[k]
    blocks, labels, groups, offs = [], [], [], []
    for p in cohort.patients:
        if p.offsets.size == 0:
            continue
        inside = np.array([win.contains(int(o)) for o in p.offsets], dtype=bool)
        if not inside.any():
            continue
        if strict and not p.observed[inside].any():
            continue
        blocks.append(p.values[inside])
        labels.append(np.full(int(inside.sum()), p.outcome, dtype=np.int64))
        groups.extend([p.patient_id] * int(inside.sum()))
        offs.append(p.offsets[inside])
    if not blocks:
        logger.warning("stratum %s has no training rows", win)
        return Design.empty(len(cohort.variable_names))
    return Design(
        np.vstack(blocks),
        np.concatenate(labels),
        np.asarray(groups, dtype=object),
        np.concatenate(offs).astype(np.int64),
    )
