import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from ctxexposure.activity import ActivitySpace, FixSequence, person_activity
from ctxexposure.activity import _from_seconds as from_seconds
from ctxexposure.errors import IncompleteTableError, ValidationError
from ctxexposure.exposure import (
    ExposureEstimator,
    deviation_curve,
    exposure_home,
    exposure_in,
    exposure_out,
    exposure_overall,
    exposure_profile,
)
from ctxexposure.grid import District, Grid, PlanarPoint, RegionIndex
from ctxexposure.prevalence import PrevalenceField

G = Grid(PlanarPoint(0, 0), 100.0, 10, 1)
STUDY = [(0, 0), (1000, 0), (1000, 100), (0, 100)]
IDX = RegionIndex(STUDY, {"D1": [(1000, 0), (2000, 0), (2000, 100), (1000, 100)],
                          "D2": [(2000, 0), (3000, 0), (3000, 100), (2000, 100)]})


def field(values):
    v = np.full(G.n_cells, np.nan)
    v[:len(values)] = values
    return PrevalenceField(G, 2015, v)


def test_exposure_in_examples():
    f = field([0.2, 0.4])
    assert exposure_in(from_seconds("p", {0: 1.0, 1: 1.0}), f) == pytest.approx(0.3, abs=1e-15)
    assert exposure_in(from_seconds("p", {1: 5.0}), f) == 0.4
    assert exposure_in(from_seconds("p", {5: 5.0, 6: 1.0}), f) is None


def test_missing_cells_are_renormalized_away():
    f = field([0.2, np.nan, 0.6])
    d = from_seconds("p", {0: 1.0, 1: 8.0, 2: 1.0})
    assert exposure_in(d, f) == pytest.approx(0.4, abs=1e-15)


def test_exposure_out_examples():
    assert exposure_out({"D1": 2400.0}, {"D1": 0.25}) == 0.25
    assert exposure_out({"D1": 1.0, "D2": 3.0}, {"D1": 0.2, "D2": 0.4}) == pytest.approx(0.35, abs=1e-15)
    assert exposure_out({}, {}) is None
    with pytest.raises(IncompleteTableError):
        exposure_out({"D9": 1.0}, {"D1": 0.2})
    with pytest.raises(ValidationError):
        exposure_out({"D1": -1.0}, {"D1": 0.2})


def test_exposure_overall_examples():
    assert exposure_overall(0.3, 0.2, 0.75, 0.25) == pytest.approx(0.275, abs=1e-15)
    assert exposure_overall(0.3, None, 1.0, 0.0) == 0.3
    assert exposure_overall(None, 0.2, 0.0, 1.0) == 0.2
    assert exposure_overall(0.3, None, 0.5, 0.5) is None
    assert exposure_overall(None, None, None, None) is None
    with pytest.raises(ValidationError):
        exposure_overall(0.3, 0.2, 0.5, 0.6)


def test_exposure_home_examples():
    f = field([0.3, 0.6, 0.9])
    d = from_seconds("p", {0: 0.4, 1: 0.2, 2: 0.4 - 1e-9})
    assert exposure_home(d, ActivitySpace(50.0, (0,)), f) == 0.3
    assert exposure_home(d, ActivitySpace(50.0, (0, 1)), f) == pytest.approx(0.4, abs=1e-12)
    assert exposure_home(d, ActivitySpace(50.0, (7,)), field([0.3])) is None


def test_home_outside_uses_district_prevalence():
    d = from_seconds("p", {0: 1.0, District("D2"): 3.0})
    home = ActivitySpace(50.0, (District("D2"),))
    assert exposure_home(d, home, field([0.3]), {"D2": 0.21}) == 0.21
    with pytest.raises(IncompleteTableError):
        exposure_home(d, home, field([0.3]), {})


def _fixes(minutes, xs, pid="p"):
    return FixSequence(pid, np.asarray(minutes, float) * 60, np.asarray(xs, float), np.full(len(xs), 50.0))


def test_profile_of_a_mixed_day():
    # 20 min in cell 0, 10 min in cell 1, 30 min in D1; the 1-min move
    # between cells is inside time but not same-cell time; the move into D1
    # straddles the boundary and is dropped
    f = _fixes([0, 10, 20, 21, 31, 32, 62], [50, 50, 50, 150, 150, 1500, 1500])
    pa = person_activity(f, G, IDX)
    prof = exposure_profile(pa, field([0.2, 0.5]), {"D1": 0.4})
    assert prof.fraction_in == pytest.approx(31 / 61) and prof.fraction_out == pytest.approx(30 / 61)
    assert prof.e_in == pytest.approx((2 * 0.2 + 0.5) / 3)
    assert prof.e_out == 0.4
    assert prof.e_overall == pytest.approx((31 * prof.e_in + 30 * 0.4) / 61)
    # combined shares: D1 0.5, cell 0 1/3, cell 1 1/6 -> home = {D1}
    assert prof.home == "D1" and not prof.home_inside
    assert prof.e_home == 0.4


def test_deviation_curve():
    f = field([0.1, 0.2, 0.3, 0.4])
    pa = person_activity(_fixes(np.arange(0, 70, 10), [50, 50, 50, 50, 150, 150, 250]), G)
    # time: cell 0 30 min, cell 1 10 min
    curve = deviation_curve(pa, f, 0.1, gammas=[50, 75, 80])
    np.testing.assert_allclose(curve, [0.0, 0.0, 0.025], atol=1e-15)
    assert deviation_curve(pa, f, None) is None


def test_estimator_wrapper():
    f = field([0.2, 0.5])
    pa = person_activity(_fixes([0, 10, 20], [50, 50, 50]), G, IDX)
    est = ExposureEstimator().fit(f, {"D1": 0.4})
    (prof,) = est.transform([pa])
    assert prof.e_in == 0.2 and prof.e_overall == 0.2 and prof.fraction_out == 0.0
    with pytest.raises(ValidationError):
        ExposureEstimator().fit()


# ------------------------------------------------------------------
# properties over random trajectories
# ------------------------------------------------------------------

trajectories = st.lists(st.tuples(st.integers(1, 40), st.floats(0, 2999)), min_size=3, max_size=40)


def _profile(steps, values, dprev):
    minutes = np.cumsum([s for s, _ in steps])
    f = _fixes(minutes, [x for _, x in steps])
    pa = person_activity(f, G, IDX)
    return pa, exposure_profile(pa, field(values), dprev)


@given(trajectories, st.lists(st.floats(0, 1), min_size=10, max_size=10), st.floats(0, 1), st.floats(0, 1))
def test_exposures_lie_in_hull_of_inputs(steps, values, p1, p2):
    _, prof = _profile(steps, values, {"D1": p1, "D2": p2})
    lo = min(values + [p1, p2])
    hi = max(values + [p1, p2])
    for v in (prof.e_in, prof.e_out, prof.e_overall, prof.e_home):
        if v is not None:
            assert lo - 1e-12 <= v <= hi + 1e-12
    if prof.e_in is not None:
        assert min(values) - 1e-12 <= prof.e_in <= max(values) + 1e-12
    if prof.fraction_in is not None:
        assert prof.fraction_in + prof.fraction_out == pytest.approx(1.0, abs=1e-12)


@given(trajectories, st.floats(0, 1))
def test_uniform_prevalence_gives_uniform_exposure(steps, p):
    _, prof = _profile(steps, [p] * 10, {"D1": p, "D2": p})
    for v in (prof.e_in, prof.e_out, prof.e_overall, prof.e_home):
        if v is not None:
            assert v == pytest.approx(p, abs=1e-12)


@given(trajectories, st.lists(st.floats(0, 1), min_size=10, max_size=10), st.floats(0.01, 100))
def test_scaling_inputs_scales_outputs(steps, values, c):
    _, a = _profile(steps, values, {"D1": 0.3, "D2": 0.1})
    _, b = _profile(steps, [c * v for v in values], {"D1": c * 0.3, "D2": c * 0.1})
    for x, y in zip((a.e_in, a.e_out, a.e_overall, a.e_home), (b.e_in, b.e_out, b.e_overall, b.e_home)):
        assert (x is None) == (y is None)
        if x is not None:
            assert y == pytest.approx(c * x, rel=1e-9, abs=1e-12)
