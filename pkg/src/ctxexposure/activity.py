"""Gap-aware GPS segmentation and activity distributions.

Time accounting follows the conservative proportional-time (CPT) rule:
only intervals between consecutive fixes that are not gaps *and* whose two
end fixes fall in the same unit (grid cell, or district outside the study
area) contribute; everything else is dropped from numerator and
denominator alike.  No fix is ever discarded, only intervals.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin

from .errors import EmptySupportError, LevelMismatchError, ValidationError
from .grid import CODE_INSIDE, OUTSIDE_WINDOW, District, Grid, Region, RegionIndex

log = logging.getLogger(__name__)

DEFAULT_GAP_SECONDS = 1800.0
HOME_LEVEL = 50.0
# cumulative shares are compared against gamma/100 with this slack so that
# e.g. 0.6 + 0.3 still reaches 0.9
LEVEL_TOL = 1e-12


@dataclass(frozen=True)
class FixSequence:
    person_id: str
    t: np.ndarray
    x: np.ndarray
    y: np.ndarray

    def __post_init__(self):
        t = np.asarray(self.t, dtype=float)
        x = np.asarray(self.x, dtype=float)
        y = np.asarray(self.y, dtype=float)
        if not (t.shape == x.shape == y.shape and t.ndim == 1):
            raise ValidationError(f"person {self.person_id}: t, x, y must be 1-d and equally long")
        if len(t) > 1 and np.any(np.diff(t) <= 0):
            raise ValidationError(f"person {self.person_id}: timestamps must be strictly increasing")
        object.__setattr__(self, "t", t)
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "y", y)

    def __len__(self):
        return len(self.t)


@dataclass(frozen=True)
class SegmentSet:
    """Retained consecutive-fix intervals of one trajectory.

    ``retained[i]`` refers to the interval between fix ``i`` and ``i + 1``.
    """

    fixes: FixSequence
    retained: np.ndarray
    gap_count: int

    @property
    def person_id(self):
        return self.fixes.person_id

    @property
    def durations(self) -> np.ndarray:
        return np.diff(self.fixes.t)

    @property
    def total_duration(self) -> float:
        return float(self.durations[self.retained].sum()) if len(self.retained) else 0.0

    def intervals(self):
        t = self.fixes.t
        return [(float(t[i]), float(t[i + 1])) for i in np.flatnonzero(self.retained)]

    def restrict(self, mask) -> "SegmentSet":
        return SegmentSet(self.fixes, self.retained & mask, self.gap_count)

    def blocks(self):
        """``(first_fix, last_fix)`` index pairs of maximal gap-free runs."""
        out = []
        start = None
        for i, keep in enumerate(self.retained):
            if keep and start is None:
                start = i
            elif not keep and start is not None:
                out.append((start, i))
                start = None
        if start is not None:
            out.append((start, len(self.retained)))
        return out


def segment(fixes: FixSequence, gap_threshold: float = DEFAULT_GAP_SECONDS) -> SegmentSet:
    """Mark intervals longer than ``gap_threshold`` seconds as gaps."""
    if len(fixes) < 2:
        return SegmentSet(fixes, np.zeros(0, dtype=bool), 0)
    dt = np.diff(fixes.t)
    retained = dt <= gap_threshold
    return SegmentSet(fixes, retained, int((~retained).sum()))


def label_key(label):
    """Sort key placing grid cells (ints) before districts, each ascending."""
    if isinstance(label, (int, np.integer)):
        return (0, int(label), "")
    if isinstance(label, Region):
        return (1, 0, str(label.district_id))
    return (2, 0, str(label))


@dataclass(frozen=True)
class ActivityDistribution:
    owner: object
    support: dict  # label -> proportion
    seconds: dict = field(default_factory=dict)  # label -> same-unit seconds
    members: tuple = ()

    @property
    def total_seconds(self) -> float:
        return float(sum(self.seconds.values()))

    @property
    def labels(self):
        return sorted(self.support, key=label_key)

    def proportion(self, label) -> float:
        return self.support.get(label, 0.0)

    def __len__(self):
        return len(self.support)

    def restrict(self, keep) -> "ActivityDistribution":
        """Renormalized sub-distribution over labels accepted by ``keep``."""
        secs = {k: v for k, v in self.seconds.items() if keep(k)}
        return _from_seconds(self.owner, secs, self.members)


def _from_seconds(owner, seconds: dict, members=()) -> ActivityDistribution:
    seconds = {k: float(v) for k, v in sorted(seconds.items(), key=lambda kv: label_key(kv[0])) if v > 0}
    total = sum(seconds.values())
    if total <= 0:
        return ActivityDistribution(owner, {}, {}, tuple(members))
    return ActivityDistribution(owner, {k: v / total for k, v in seconds.items()}, seconds, tuple(members))


def same_unit_seconds(segs: SegmentSet, labels, skip=None) -> dict:
    """Seconds per label over retained intervals whose two ends share it."""
    labels = np.asarray(labels)
    if len(labels) < 2:
        return {}
    same = segs.retained & (labels[:-1] == labels[1:])
    if skip is not None:
        same &= labels[:-1] != skip
    if not same.any():
        return {}
    dur = segs.durations[same]
    uniq, inv = np.unique(labels[:-1][same], return_inverse=True)
    sums = np.bincount(inv, weights=dur, minlength=len(uniq))
    return {u.item(): float(s) for u, s in zip(uniq, sums)}


def cpt_estimate(segs: SegmentSet, grid: Grid, strict: bool = True) -> ActivityDistribution:
    """Conservative proportional-time activity distribution over grid cells.

    Raises :class:`EmptySupportError` when no same-cell time remains, unless
    ``strict`` is false (an empty distribution is returned instead).
    """
    cells = grid.locate_xy(segs.fixes.x, segs.fixes.y)
    dist = _from_seconds(segs.person_id, same_unit_seconds(segs, cells, skip=OUTSIDE_WINDOW),
                         (segs.person_id,))
    if strict and not dist.support:
        raise EmptySupportError(f"person {segs.person_id}: no same-cell retained time")
    return dist


def pool(dists, members=None, mode: str = "duration_weighted") -> ActivityDistribution:
    """Group activity distribution.

    ``duration_weighted`` sums each member's same-unit seconds (members
    contributing more observed time weigh more); ``unweighted`` averages the
    members' proportion vectors.  Members with empty support are skipped.
    """
    if mode not in ("duration_weighted", "unweighted"):
        raise ValueError(f"unknown pooling mode {mode!r}")
    by_owner = {d.owner: d for d in dists}
    if members is None:
        members = list(by_owner)
    members = sorted(members, key=str)
    if not members:
        raise ValidationError("pool needs at least one member")
    acc: dict = {}
    used = []
    skipped = 0
    for m in members:
        d = by_owner[m]
        if not d.support:
            skipped += 1
            continue
        used.append(m)
        src = d.seconds if mode == "duration_weighted" else d.support
        for k, v in src.items():
            acc[k] = acc.get(k, 0.0) + v
    if skipped:
        log.warning("pool: skipped %d member(s) with empty support", skipped)
    if mode == "unweighted":
        n = len(used)
        props = {k: v / n for k, v in acc.items()}
        total = sum(props.values())
        return ActivityDistribution(tuple(used), {k: props[k] / total for k in sorted(props, key=label_key)},
                                    {}, tuple(used)) if used else ActivityDistribution(tuple(used), {}, {}, ())
    return _from_seconds(tuple(used), acc, used)


@dataclass(frozen=True)
class ActivitySpace:
    level: float
    cells: tuple
    captured: float | None = None

    def __len__(self):
        return len(self.cells)

    def __contains__(self, label):
        return label in set(self.cells)


def activity_space(dist: ActivityDistribution, gamma: float) -> ActivitySpace:
    """Smallest unit set covering at least ``gamma`` percent of the time.

    Units are added by decreasing proportion, ties broken by ascending id.
    """
    if not 0 < gamma <= 100:
        raise ValidationError(f"gamma must be in (0, 100], got {gamma!r}")
    if not dist.support:
        raise EmptySupportError(f"{dist.owner}: empty activity distribution")
    order = sorted(dist.support, key=lambda k: (-dist.support[k], label_key(k)))
    target = gamma / 100.0 - LEVEL_TOL
    chosen = []
    total = 0.0
    for k in order:
        chosen.append(k)
        total += dist.support[k]
        if total >= target:
            break
    return ActivitySpace(float(gamma), tuple(chosen), total)


def activity_spaces(dist: ActivityDistribution, gammas) -> dict:
    return {g: activity_space(dist, g) for g in gammas}


def collective_space(spaces) -> ActivitySpace:
    spaces = list(spaces)
    if not spaces:
        raise ValidationError("collective space of no members")
    levels = {s.level for s in spaces}
    if len(levels) > 1:
        raise LevelMismatchError(f"activity spaces at different levels: {sorted(levels)}")
    union = set()
    for s in spaces:
        union.update(s.cells)
    return ActivitySpace(levels.pop(), tuple(sorted(union, key=label_key)), None)


@dataclass(frozen=True)
class InOutSplit:
    inside: SegmentSet
    district_seconds: dict
    inside_seconds: float
    outside_seconds: float
    dropped_seconds: float
    unmapped_seconds: float

    @property
    def classified_seconds(self) -> float:
        return self.inside_seconds + self.outside_seconds

    @property
    def fraction_in(self):
        c = self.classified_seconds
        return self.inside_seconds / c if c > 0 else None

    @property
    def fraction_out(self):
        c = self.classified_seconds
        return self.outside_seconds / c if c > 0 else None


def split_in_out(segs: SegmentSet, idx: RegionIndex) -> InOutSplit:
    """Split retained time into study-area time and per-district time.

    An interval counts inside when both end fixes are inside the study
    area, and towards a district when both ends fall in that district.
    Straddling intervals are dropped; intervals ending in unmapped space
    are reported separately.
    """
    codes = idx.classify_xy(segs.fixes.x, segs.fixes.y)
    if len(codes) < 2:
        empty = np.zeros(0, dtype=bool)
        return InOutSplit(segs.restrict(empty), {}, 0.0, 0.0, 0.0, 0.0)
    a, b = codes[:-1], codes[1:]
    dur = segs.durations
    keep = segs.retained
    inside = keep & (a == CODE_INSIDE) & (b == CODE_INSIDE)
    outside = keep & (a == b) & (a > CODE_INSIDE)
    unmapped = keep & ((a < CODE_INSIDE) | (b < CODE_INSIDE))
    dropped = keep & ~inside & ~outside & ~unmapped
    districts = {}
    for code, secs in same_unit_seconds(segs.restrict(outside), codes).items():
        districts[idx.district_ids[code - 1]] = secs
    return InOutSplit(
        inside=segs.restrict(inside),
        district_seconds=districts,
        inside_seconds=float(dur[inside].sum()),
        outside_seconds=float(dur[outside].sum()),
        dropped_seconds=float(dur[dropped].sum()),
        unmapped_seconds=float(dur[unmapped].sum()),
    )


def combined_distribution(inside_dist: ActivityDistribution, district_seconds: dict) -> ActivityDistribution:
    """Merge study-area cells and outside districts into one distribution."""
    secs = dict(inside_dist.seconds)
    for did, s in district_seconds.items():
        secs[District(did)] = s
    return _from_seconds(inside_dist.owner, secs, inside_dist.members)


@dataclass(frozen=True)
class PersonActivity:
    """Everything the exposure stage needs about one participant."""

    person_id: str
    segments: SegmentSet
    split: InOutSplit | None
    inside: ActivityDistribution
    combined: ActivityDistribution


def person_activity(fixes: FixSequence, grid: Grid, regions: RegionIndex | None = None,
                    gap_threshold: float = DEFAULT_GAP_SECONDS) -> PersonActivity:
    segs = segment(fixes, gap_threshold)
    if regions is None:
        inside = cpt_estimate(segs, grid, strict=False)
        return PersonActivity(fixes.person_id, segs, None, inside, inside)
    split = split_in_out(segs, regions)
    inside = cpt_estimate(split.inside, grid, strict=False)
    return PersonActivity(fixes.person_id, segs, split, inside,
                          combined_distribution(inside, split.district_seconds))


class CPTActivityEstimator(BaseEstimator, TransformerMixin):
    """Stateless transformer: fix sequences -> :class:`PersonActivity`.

    Participants without any usable same-unit time are listed in
    ``empty_`` after :meth:`transform` and left out of the output.
    """

    def __init__(self, grid=None, regions=None, gap_threshold=DEFAULT_GAP_SECONDS):
        self.grid = grid
        self.regions = regions
        self.gap_threshold = gap_threshold

    def fit(self, X=None, y=None):
        if self.grid is None:
            raise ValidationError("CPTActivityEstimator needs a grid")
        if not self.gap_threshold > 0:
            raise ValidationError("gap_threshold must be positive")
        return self

    def transform(self, X):
        self.fit()
        out = []
        self.empty_ = []
        for fixes in X:
            pa = person_activity(fixes, self.grid, self.regions, self.gap_threshold)
            if not pa.combined.support:
                self.empty_.append(fixes.person_id)
                continue
            out.append(pa)
        return out


class ActivitySpaceSizes(BaseEstimator, TransformerMixin):
    """Distributions -> matrix of ``|AS_gamma|`` (rows persons, cols gammas)."""

    def __init__(self, gammas=tuple(range(50, 96))):
        self.gammas = gammas

    def fit(self, X=None, y=None):
        for g in self.gammas:
            if not 0 < g <= 100:
                raise ValidationError(f"gamma {g!r} outside (0, 100]")
        return self

    def transform(self, X):
        self.fit()
        return np.array([[len(activity_space(d, g)) for g in self.gammas] for d in X], dtype=int)
