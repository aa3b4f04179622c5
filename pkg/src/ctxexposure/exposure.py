"""Contextual exposure: time-weighted averages of local prevalence.

All values are proportions in [0, 1]; ``None`` stands for Missing.  Cells
whose prevalence is Missing are left out and the remaining time shares are
renormalized, so fringe cells do not drag exposure towards zero.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin

from .activity import HOME_LEVEL, ActivityDistribution, ActivitySpace, PersonActivity, activity_space
from .errors import IncompleteTableError, ValidationError
from .grid import Region
from .prevalence import PrevalenceField


def _cell_average(weights: dict, field: PrevalenceField):
    num = 0.0
    den = 0.0
    for cell, w in weights.items():
        if not isinstance(cell, (int, np.integer)) or w <= 0:
            continue
        v = field.values[cell]
        if math.isnan(v):
            continue
        num += w * v
        den += w
    return num / den if den > 0 else None


def exposure_in(dist_in: ActivityDistribution, field: PrevalenceField):
    """Time-share weighted prevalence over study-area cells."""
    return _cell_average(dist_in.support, field)


def exposure_out(district_seconds: dict, district_prevalence: dict):
    """Duration-weighted district prevalence; ``None`` with no outside time."""
    num = 0.0
    den = 0.0
    for did, secs in sorted(district_seconds.items()):
        if secs < 0:
            raise ValidationError(f"negative duration for district {did}")
        if secs == 0:
            continue
        if did not in district_prevalence:
            raise IncompleteTableError(f"no prevalence for district {did}")
        num += secs * district_prevalence[did]
        den += secs
    return num / den if den > 0 else None


def exposure_overall(e_in, e_out, fraction_in, fraction_out):
    if fraction_in is None or fraction_out is None:
        return None
    if abs(fraction_in + fraction_out - 1.0) > 1e-9:
        raise ValidationError("time fractions must sum to 1")
    if fraction_out == 0:
        return e_in
    if fraction_in == 0:
        return e_out
    if e_in is None or e_out is None:
        return None
    return fraction_in * e_in + fraction_out * e_out


def exposure_over_space(dist: ActivityDistribution, space: ActivitySpace, field: PrevalenceField):
    """Prevalence averaged over the cells of ``space`` with ``dist`` weights."""
    return _cell_average({c: dist.proportion(c) for c in space.cells}, field)


def home_region(dist: ActivityDistribution, home: ActivitySpace):
    """``"inside"`` when the top unit of the home space is a grid cell,
    otherwise the id of the district holding the largest time share."""
    if not home.cells:
        return None
    if isinstance(home.cells[0], (int, np.integer)):
        return "inside"
    districts = [k for k in dist.support if isinstance(k, Region)]
    best = min(districts, key=lambda k: (-dist.support[k], str(k.district_id)))
    return best.district_id


def exposure_home(dist: ActivityDistribution, home: ActivitySpace, field: PrevalenceField,
                  district_prevalence: dict | None = None):
    where = home_region(dist, home)
    if where is None:
        return None
    if where == "inside":
        return exposure_over_space(dist, home, field)
    if district_prevalence is None or where not in district_prevalence:
        raise IncompleteTableError(f"no prevalence for home district {where}")
    return float(district_prevalence[where])


@dataclass(frozen=True)
class ExposureProfile:
    person_id: str
    e_in: float | None
    e_out: float | None
    e_overall: float | None
    e_home: float | None
    fraction_in: float | None
    fraction_out: float | None
    home: str | None = None

    @property
    def home_inside(self) -> bool:
        return self.home == "inside"

    def as_dict(self):
        return asdict(self)


def exposure_profile(pa: PersonActivity, field: PrevalenceField, district_prevalence: dict,
                     home_level: float = HOME_LEVEL) -> ExposureProfile:
    e_in = exposure_in(pa.inside, field)
    if pa.split is not None:
        e_out = exposure_out(pa.split.district_seconds, district_prevalence)
        f_in, f_out = pa.split.fraction_in, pa.split.fraction_out
    else:
        e_out = None
        f_in, f_out = (1.0, 0.0) if pa.inside.support else (None, None)
    e_all = exposure_overall(e_in, e_out, f_in, f_out)
    e_home = None
    where = None
    if pa.combined.support:
        home = activity_space(pa.combined, home_level)
        where = home_region(pa.combined, home)
        e_home = exposure_home(pa.combined, home, field, district_prevalence)
    return ExposureProfile(pa.person_id, e_in, e_out, e_all, e_home, f_in, f_out, where)


def deviation_curve(pa: PersonActivity, field: PrevalenceField, e_home, gammas=range(50, 96)):
    """``exposure(AS_gamma) - e_home`` for each gamma; ``None`` if any is Missing."""
    if e_home is None or not pa.combined.support:
        return None
    out = []
    for g in gammas:
        e = exposure_over_space(pa.combined, activity_space(pa.combined, g), field)
        if e is None:
            return None
        out.append(e - e_home)
    return np.array(out)


class ExposureEstimator(BaseEstimator, TransformerMixin):
    """``fit(field, district_prevalence)``; ``transform`` maps
    :class:`~ctxexposure.activity.PersonActivity` objects to profiles."""

    def __init__(self, home_level=HOME_LEVEL):
        self.home_level = home_level

    def fit(self, field=None, district_prevalence=None):
        if field is None:
            raise ValidationError("ExposureEstimator.fit needs a prevalence field")
        self.field_ = field
        self.district_prevalence_ = dict(district_prevalence or {})
        return self

    def transform(self, X):
        if not hasattr(self, "field_"):
            from sklearn.exceptions import NotFittedError
            raise NotFittedError("ExposureEstimator is not fitted")
        return [exposure_profile(pa, self.field_, self.district_prevalence_, self.home_level) for pa in X]
