import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from ctxexposure.activity import segment
from ctxexposure.errors import ComputeError, ConfigError
from ctxexposure.grid import Grid, PlanarPoint
from ctxexposure.imputation import impute_cohort, status_rows
from ctxexposure.synth import (
    Path,
    SynthConfig,
    gen_cohort,
    gen_trajectories,
    occupancy_seconds,
    true_occupancy,
)

G = Grid(PlanarPoint(0, 0), 100.0, 10, 10)


def small(**kw):
    base = dict(n_participants=200, n_gps=4, days=2.0, n_homesteads=30)
    return SynthConfig(**(base | kw))


# ------------------------------------------------------------------
# cohort
# ------------------------------------------------------------------


def test_full_attendance_tests_every_period_and_imputation_is_fixed():
    recs, rates, truth = gen_cohort(small(attendance=1.0))
    for r in recs:
        assert [p for p, _ in r.tests] == list(range(r.entry_period, r.exit_period + 1))
        for p, res in r.tests:
            fp = truth.first_positive[r.person_id]
            assert res == (fp is not None and p >= fp)
    a = [list(status_rows(d)) for d in impute_cohort(recs, rates, seed=1, m=2)]
    assert a[0] == a[1]


def test_zero_attendance_means_never_tested():
    recs, _, _ = gen_cohort(small(attendance=0.0))
    assert {r.category for r in recs} == {"never_tested"}


def test_all_record_categories_appear():
    recs, _, _ = gen_cohort(small(n_participants=600, attendance=0.5))
    assert {r.category for r in recs} == {"negative_positive", "only_negative", "only_positive", "never_tested"}


def test_cohort_is_seed_deterministic():
    a = gen_cohort(small(seed=3))
    b = gen_cohort(small(seed=3))
    c = gen_cohort(small(seed=4))
    assert a[0] == b[0] and a[2] == b[2]
    assert a[0] != c[0]


def test_rate_table_equals_generating_rates():
    cfg = small()
    _, rates, _ = gen_cohort(cfg)
    for (sex, g, p), v in cfg.rates.items():
        lo = int(g.split("-")[0].rstrip("+"))
        assert rates.lookup(sex, lo, p) == v


def test_pinned_homesteads():
    cfg = small()
    recs, _, truth = gen_cohort(cfg, homestead_of={"S000003": "H00007"})
    assert truth.homestead["S000003"] == "H00007"
    # pinning happens after the random draw, so every record is unchanged
    recs2, _, truth2 = gen_cohort(cfg)
    assert recs == recs2
    assert truth2.homestead["S000004"] == truth.homestead["S000004"]


def test_realized_incidence_matches_generating_rate():
    lam = 0.12
    rates = {(s, "0+", p): (mu, lam) for s in "MF" for p, mu in ((2015, 1e-9), (2016, 0.2))}
    cfg = SynthConfig(n_participants=50_000, first_period=2015, last_period=2016, age_groups=("0+",),
                      rates=rates, attendance=0.0, n_homesteads=1)
    # people observed in both periods and negative in the first are at risk
    recs, _, truth = gen_cohort(cfg)
    at_risk = [r for r in recs if r.entry_period == 2015 and r.exit_period == 2016
               and truth.first_positive[r.person_id] != 2015]
    conv = sum(truth.first_positive[r.person_id] == 2016 for r in at_risk)
    n = len(at_risk)
    assert n > 10_000
    assert abs(conv / n - lam) < 3 * math.sqrt(lam * (1 - lam) / n)


@pytest.mark.parametrize("kw", [dict(attendance=1.5), dict(days=0.0), dict(first_period=2021),
                                dict(gap_prob=-0.1)])
def test_bad_config(kw):
    with pytest.raises(ConfigError):
        SynthConfig(**kw)


def test_from_dict():
    cfg = SynthConfig.from_dict({"seed": 2, "box": [0, 0, 10, 10],
                                 "rates": [{"sex": "F", "age_group": "0+", "period": 2015,
                                            "prevalence": 0.1, "incidence": 0.01}],
                                 "first_period": 2015, "last_period": 2015, "age_groups": ["0+"]})
    assert cfg.box == (0, 0, 10, 10) and cfg.rates == {("F", "0+", 2015): (0.1, 0.01)}
    with pytest.raises(ConfigError):
        SynthConfig.from_dict({"sed": 1})


# ------------------------------------------------------------------
# trajectories
# ------------------------------------------------------------------


def test_trajectories_without_gaps():
    fixes, _ = gen_trajectories(small(gap_prob=0.0), None, box=(0, 0, 1000, 1000))
    for f in fixes:
        assert segment(f).gap_count == 0
        assert np.all(np.diff(f.t) == 600.0)


def test_gap_process_creates_gaps():
    fixes, _ = gen_trajectories(small(gap_prob=0.05, days=3.0), None, box=(0, 0, 1000, 1000))
    assert sum(segment(f).gap_count for f in fixes) > 0


def test_single_anchor_gives_identical_fixes():
    fixes, _ = gen_trajectories(small(), None, anchors={"G0000": [(120.0, 340.0)]}, ids=["G0000"])
    f = fixes[0]
    assert set(f.x.tolist()) == {120.0} and set(f.y.tolist()) == {340.0}


def test_trajectory_determinism():
    a, pa = gen_trajectories(small(seed=5), None)
    b, pb = gen_trajectories(small(seed=5), None)
    for x, y in zip(a, b):
        assert x.t.tolist() == y.t.tolist() and x.x.tolist() == y.x.tolist()
    assert all(pa[k].t.tolist() == pb[k].t.tolist() for k in pa)


def test_fixes_lie_on_the_path():
    fixes, paths = gen_trajectories(small(fix_interval=137.0), None, box=(0, 0, 1000, 1000))
    for f in fixes:
        p = paths[f.person_id]
        for t, x, y in zip(f.t[::7], f.x[::7], f.y[::7]):
            k = int(np.searchsorted(p.t, t, side="right")) - 1
            k = min(k, len(p.t) - 2)
            s = (t - p.t[k]) / (p.t[k + 1] - p.t[k])
            assert x == pytest.approx(p.x[k] + s * (p.x[k + 1] - p.x[k]), abs=1e-9)
            assert y == pytest.approx(p.y[k] + s * (p.y[k + 1] - p.y[k]), abs=1e-9)


# ------------------------------------------------------------------
# exact occupancy
# ------------------------------------------------------------------


def path(*pts):
    t, x, y = zip(*pts)
    return Path(np.array(t, float), np.array(x, float), np.array(y, float))


def test_static_path():
    assert true_occupancy(path((0, 250, 250), (100, 250, 250)), G).support == {22: 1.0}


def test_symmetric_crossing():
    assert true_occupancy(path((0, 50, 50), (10, 150, 50)), G).support == {0: 0.5, 1: 0.5}


def test_thirty_and_ninety_seconds():
    secs = occupancy_seconds(path((0, 70, 50), (120, 190, 50)), G)
    assert secs == {0: pytest.approx(30.0, abs=1e-12), 1: pytest.approx(90.0, abs=1e-12)}
    d = true_occupancy(path((0, 70, 50), (120, 190, 50)), G)
    assert d.support[0] == pytest.approx(0.25, abs=1e-12) and d.support[1] == pytest.approx(0.75, abs=1e-12)


def test_diagonal_through_a_corner():
    # passes exactly through the shared corner (100, 100)
    secs = occupancy_seconds(path((0, 50, 50), (100, 150, 150)), G)
    assert secs == {0: pytest.approx(50.0), 11: pytest.approx(50.0)}


def test_occupancy_errors():
    with pytest.raises(ComputeError):
        true_occupancy(path((0, 1, 1), (0, 1, 1)), G)
    with pytest.raises(ComputeError):
        true_occupancy(path((0, -50, -50), (10, -60, -50)), G)


vertices = st.lists(st.tuples(st.floats(1, 600), st.floats(0, 999), st.floats(0, 999)), min_size=2, max_size=8)


def _path_from(v):
    t = np.cumsum([a for a, _, _ in v])
    return Path(t, np.array([b for _, b, _ in v]), np.array([c for _, _, c in v]))


@given(vertices, st.floats(0.01, 100), st.floats(-1e6, 1e6))
def test_occupancy_normalized_and_affine_time_invariant(v, a, b):
    p = _path_from(v)
    d = true_occupancy(p, G)
    assert math.fsum(d.support.values()) == pytest.approx(1.0, abs=1e-9)
    q = Path(a * p.t + b, p.x, p.y)
    e = true_occupancy(q, G)
    assert set(d.support) == set(e.support)
    for k in d.support:
        assert e.support[k] == pytest.approx(d.support[k], abs=1e-9)


@given(vertices, st.floats(0.05, 0.95))
def test_occupancy_unchanged_by_splitting_a_segment(v, s):
    p = _path_from(v)
    tm = p.t[0] + s * (p.t[1] - p.t[0])
    xm, ym = p.at(tm)
    q = Path(np.insert(p.t, 1, tm), np.insert(p.x, 1, xm), np.insert(p.y, 1, ym))
    a, b = occupancy_seconds(p, G), occupancy_seconds(q, G)
    assert set(a) == set(b)
    for k in a:
        assert b[k] == pytest.approx(a[k], abs=1e-6)


@given(vertices)
def test_occupancy_matches_fine_sampling(v):
    p = _path_from(v)
    exact = occupancy_seconds(p, G)
    n = 20_000
    ts = np.linspace(p.t[0], p.t[-1], n + 1)
    mids = 0.5 * (ts[:-1] + ts[1:])
    x, y = p.at(mids)
    cells = G.locate_xy(x, y)
    dt = (p.t[-1] - p.t[0]) / n
    total = p.t[-1] - p.t[0]
    for c, secs in exact.items():
        assert abs(np.sum(cells == c) * dt - secs) <= total * 0.01 + 1e-9
