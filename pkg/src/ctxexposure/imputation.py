"""Longitudinal HIV-status imputation from surveillance test histories.

Each participant's status is a monotone 0/1 sequence over calendar-year
periods.  Unknown periods are filled by sequential Bernoulli draws whose
success probabilities come from the sex x age-group x period prevalence
(``mu``) and incidence (``lam``) table:

* after a negative: forward draws with ``lam_t``;
* before a positive: backward draws of "negative at t-1" with
  ``(1 - mu_{t-1}) * lam_t / mu_t``;
* a single unknown period between a negative and a positive: the bridge
  probability ``lam_{t-1} / (lam_{t-1} + lam_t (1 - lam_{t-1}))``;
* never tested: ``mu`` at entry, then forward draws.
"""
from __future__ import annotations

import hashlib
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from datetime import date

import numpy as np
from sklearn.base import BaseEstimator

from .errors import (
    DegenerateRateError,
    ImpossibleObservationError,
    IncoherentRateTableError,
    IncompleteRateTableError,
    InvalidRecordError,
    ParticipantError,
    ValidationError,
)

SCHEDULES = ("backward", "alternate")
_COHERENCE_TOL = 1e-12


def backward_negative_prob(mu_prev: float, mu_cur: float, lambda_cur: float) -> float:
    """Pr(negative at t-1 | positive at t) = (1 - mu_{t-1}) lam_t / mu_t."""
    for v in (mu_prev, mu_cur, lambda_cur):
        if not 0.0 <= v <= 1.0:
            raise ValidationError(f"probability {v!r} outside [0, 1]")
    if mu_cur == 0:
        raise DegenerateRateError("prevalence is zero at a period with an observed positive")
    p = (1.0 - mu_prev) / mu_cur * lambda_cur
    if p > 1.0 + _COHERENCE_TOL:
        raise IncoherentRateTableError(
            f"backward probability {p:.6g} > 1 (mu_prev={mu_prev}, mu_cur={mu_cur}, lam={lambda_cur})")
    return min(p, 1.0)


def bridge_positive_prob(lambda_prev: float, lambda_cur: float) -> float:
    """Pr(positive at t-1 | negative at t-2, positive at t)."""
    for v in (lambda_prev, lambda_cur):
        if not 0.0 <= v <= 1.0:
            raise ValidationError(f"probability {v!r} outside [0, 1]")
    denom = lambda_prev + lambda_cur * (1.0 - lambda_prev)
    if denom == 0:
        raise ImpossibleObservationError("positive unreachable from negative: both incidences are zero")
    return lambda_prev / denom


# ------------------------------------------------------------------
# rate table
# ------------------------------------------------------------------

_GROUP_RE = re.compile(r"^\s*(\d+)\s*(?:-\s*(\d+)|\+)\s*$")


@dataclass(frozen=True, order=True)
class AgeGroup:
    """Whole-year age band ``lo..hi`` (inclusive); ``hi=None`` is open-ended."""

    lo: int
    hi: int | None
    label: str = field(compare=False)

    @classmethod
    def parse(cls, label: str) -> "AgeGroup":
        m = _GROUP_RE.match(str(label))
        if not m:
            raise ValidationError(f"age group {label!r} is not of the form 'lo-hi' or 'lo+'")
        lo = int(m.group(1))
        hi = int(m.group(2)) if m.group(2) is not None else None
        if hi is not None and hi < lo:
            raise ValidationError(f"age group {label!r} has hi < lo")
        return cls(lo, hi, str(label).strip())

    def contains(self, age: int) -> bool:
        return age >= self.lo and (self.hi is None or age <= self.hi)


def age_at_period(birth_date: date, period: int) -> int:
    """Completed years of age on 1 January of ``period``."""
    start = date(period, 1, 1)
    years = start.year - birth_date.year
    if (start.month, start.day) < (birth_date.month, birth_date.day):
        years -= 1
    return years


class RateTable:
    """Prevalence/incidence by ``(sex, age_group, period)``.

    Coherence (``mu_t >= lam_t (1 - mu_{t-1})`` along every age trajectory)
    is checked on construction, so backward probabilities never exceed 1.
    """

    def __init__(self, rates: dict, validate: bool = True):
        self._rates = {}
        groups = {}
        for (sex, label, period), (mu, lam) in rates.items():
            g = AgeGroup.parse(label)
            groups[g.label] = g
            mu = float(mu)
            lam = float(lam)
            if not (0.0 <= mu <= 1.0 and 0.0 <= lam <= 1.0):
                raise ValidationError(f"rates out of [0, 1] at {(sex, label, period)}")
            self._rates[(str(sex), g.label, int(period))] = (mu, lam)
        self.groups = sorted(groups.values())
        for a, b in zip(self.groups, self.groups[1:]):
            if a.hi is None or b.lo <= a.hi:
                raise ValidationError(f"age groups {a.label!r} and {b.label!r} overlap")
        if validate:
            self.check_coherence()

    def __len__(self):
        return len(self._rates)

    def items(self):
        return self._rates.items()

    def group_for(self, age: int) -> AgeGroup | None:
        for g in self.groups:
            if g.contains(age):
                return g
        return None

    def lookup(self, sex: str, age: int, period: int):
        g = self.group_for(age)
        key = (sex, g.label if g else None, period)
        try:
            return self._rates[key]
        except KeyError:
            raise IncompleteRateTableError(
                f"no rate for sex={sex}, age={age}, period={period}") from None

    def check_coherence(self):
        for (sex, label, period), (mu, lam) in self._rates.items():
            g = next(x for x in self.groups if x.label == label)
            prev_groups = {label}
            prev = self.group_for(g.lo - 1)
            if prev is not None:
                prev_groups.add(prev.label)
            for pl in prev_groups:
                before = self._rates.get((sex, pl, period - 1))
                if before is None:
                    continue
                bound = lam * (1.0 - before[0])
                if mu < bound - _COHERENCE_TOL:
                    raise IncoherentRateTableError(
                        f"mu={mu} < lam*(1-mu_prev)={bound:.6g} at sex={sex}, "
                        f"group {pl}->{label}, period {period - 1}->{period}")


# ------------------------------------------------------------------
# records
# ------------------------------------------------------------------


@dataclass(frozen=True)
class SurveillanceRecord:
    person_id: str
    sex: str
    birth_date: date
    entry_period: int
    exit_period: int
    tests: tuple = ()  # (period, positive: bool)

    def __post_init__(self):
        if self.entry_period > self.exit_period:
            raise InvalidRecordError(f"person {self.person_id}: entry after exit")
        tests = tuple(sorted((int(p), bool(r)) for p, r in self.tests))
        object.__setattr__(self, "tests", tests)
        for p, _ in tests:
            if not self.entry_period <= p <= self.exit_period:
                raise InvalidRecordError(
                    f"person {self.person_id}: test in period {p} outside [{self.entry_period}, {self.exit_period}]")
        first_pos = self.first_positive
        if first_pos is not None and any(not r and p >= first_pos for p, r in tests):
            raise InvalidRecordError(
                f"person {self.person_id}: negative test at or after first positive ({first_pos})")

    @property
    def last_negative(self):
        negs = [p for p, r in self.tests if not r]
        return max(negs) if negs else None

    @property
    def first_positive(self):
        poss = [p for p, r in self.tests if r]
        return min(poss) if poss else None

    @property
    def category(self) -> str:
        neg, pos = self.last_negative, self.first_positive
        if neg is not None and pos is not None:
            return "negative_positive"
        if neg is not None:
            return "only_negative"
        if pos is not None:
            return "only_positive"
        return "never_tested"


@dataclass(frozen=True)
class StatusSequence:
    person_id: str
    entry_period: int
    status: np.ndarray

    @property
    def periods(self):
        return np.arange(self.entry_period, self.entry_period + len(self.status))

    def at(self, period: int) -> int:
        return int(self.status[period - self.entry_period])

    @property
    def seroconversion_period(self):
        """First positive period, or ``None`` when never positive."""
        hits = np.flatnonzero(self.status)
        return int(self.entry_period + hits[0]) if len(hits) else None


def impute_participant(rec: SurveillanceRecord, rates: RateTable, rng,
                       schedule: str = "backward") -> StatusSequence:
    """Draw one status sequence for ``rec`` consistent with all its tests.

    ``schedule`` sets the order of draws between a last negative and a
    first positive: ``"backward"`` walks back from the positive (exact
    conditional law when the table is the chain's own prevalence);
    ``"alternate"`` interleaves one forward and one backward draw.
    """
    if schedule not in SCHEDULES:
        raise ValueError(f"schedule must be one of {SCHEDULES}")
    e0, e1 = rec.entry_period, rec.exit_period
    n = e1 - e0 + 1
    st = np.full(n, -1, dtype=np.int8)
    cache = {}

    def rate(t):
        r = cache.get(t)
        if r is None:
            r = cache[t] = rates.lookup(rec.sex, age_at_period(rec.birth_date, t), t)
        return r

    def forward(lo, hi):
        # known negative at lo; fill lo+1..hi with forward draws
        for t in range(lo + 1, hi + 1):
            if rng.random() < rate(t)[1]:
                st[t - e0:hi - e0 + 1] = 1
                return
            st[t - e0] = 0

    def backward(hi, lo):
        # known positive at hi; fill lo..hi-1 with backward draws
        for t in range(hi, lo, -1):
            p = backward_negative_prob(rate(t - 1)[0], rate(t)[0], rate(t)[1])
            if rng.random() < p:
                st[lo - e0:t - e0] = 0
                return
            st[t - 1 - e0] = 1

    neg, pos = rec.last_negative, rec.first_positive
    if neg is not None:
        st[:neg - e0 + 1] = 0
    if pos is not None:
        st[pos - e0:] = 1

    if neg is not None and pos is not None:
        lo, hi = neg, pos
        forward_turn = True
        while hi - lo > 1:
            if hi - lo == 2:
                p = bridge_positive_prob(rate(lo + 1)[1], rate(hi)[1])
                st[lo + 1 - e0] = 1 if rng.random() < p else 0
                break
            if schedule == "alternate" and forward_turn:
                t = lo + 1
                if rng.random() < rate(t)[1]:
                    st[t - e0:hi - e0] = 1
                    break
                st[t - e0] = 0
                lo = t
            else:
                p = backward_negative_prob(rate(hi - 1)[0], rate(hi)[0], rate(hi)[1])
                if rng.random() < p:
                    st[lo + 1 - e0:hi - e0] = 0
                    break
                st[hi - 1 - e0] = 1
                hi -= 1
            forward_turn = not forward_turn
    elif neg is not None:
        forward(neg, e1)
    elif pos is not None:
        backward(pos, e0)
    else:
        if rng.random() < rate(e0)[0]:
            st[:] = 1
        else:
            st[0] = 0
            forward(e0, e1)

    assert (st >= 0).all()
    assert (np.diff(st) >= 0).all()
    for p, r in rec.tests:
        assert st[p - e0] == int(r)
    return StatusSequence(rec.person_id, e0, st)


def person_key(person_id) -> int:
    """Stable 64-bit integer derived from a person id."""
    return int.from_bytes(hashlib.blake2b(str(person_id).encode(), digest_size=8).digest(), "little")


def person_rng(seed: int, replicate: int, person_id) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(replicate), person_key(person_id)]))


def impute_cohort(records, rates: RateTable, seed: int, m: int = 1,
                  schedule: str = "backward", threads: int = 1):
    """``m`` imputed datasets (lists of :class:`StatusSequence`).

    Randomness for each participant depends only on ``(seed, replicate,
    person_id)``, so the thread count never changes the result.
    """
    if m < 1:
        raise ValidationError("need at least one replicate")
    records = list(records)

    def one(args):
        rep, rec = args
        try:
            return impute_participant(rec, rates, person_rng(seed, rep, rec.person_id), schedule)
        except Exception as exc:  # noqa: BLE001 - re-raised with the person attached
            raise ParticipantError(rec.person_id, exc) from exc

    out = []
    for rep in range(m):
        jobs = [(rep, r) for r in records]
        if threads > 1:
            with ThreadPoolExecutor(max_workers=threads) as pool:
                out.append(list(pool.map(one, jobs)))
        else:
            out.append([one(j) for j in jobs])
    return out


def status_rows(dataset):
    """Flatten one imputed dataset to ``(person_id, period, status)`` rows."""
    for seq in dataset:
        for p, s in zip(seq.periods.tolist(), seq.status.tolist()):
            yield seq.person_id, p, s


class StatusImputer(BaseEstimator):
    """Estimator wrapper around :func:`impute_cohort`.

    ``fit`` takes the rate table (validated for coherence); ``transform``
    maps surveillance records to ``n_imputations`` lists of status sequences.
    """

    def __init__(self, n_imputations=1, random_state=0, schedule="backward", n_jobs=1):
        self.n_imputations = n_imputations
        self.random_state = random_state
        self.schedule = schedule
        self.n_jobs = n_jobs

    def fit(self, records=None, rates=None):
        if rates is None:
            raise ValidationError("StatusImputer.fit needs a rate table")
        if not isinstance(rates, RateTable):
            rates = RateTable(rates)
        if self.schedule not in SCHEDULES:
            raise ValidationError(f"schedule must be one of {SCHEDULES}")
        self.rates_ = rates
        return self

    def transform(self, records):
        if not hasattr(self, "rates_"):
            from sklearn.exceptions import NotFittedError
            raise NotFittedError("StatusImputer is not fitted")
        return impute_cohort(records, self.rates_, self.random_state, self.n_imputations,
                             self.schedule, self.n_jobs)

    def fit_transform(self, records, rates=None):
        return self.fit(records, rates).transform(records)

