"""Write synthetic datasets in the pipeline's CSV formats.

:func:`write_scenario` builds a complete, runnable input directory: a
square study area ringed by four districts, a hotspot of raised rates, and
two GPS subgroups.  The ``exposed`` group lives in the hotspot and makes
long trips to a high-prevalence district; the ``control`` group lives away
from the hotspot and stays in the study area.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np
import yaml

from . import io as cio
from .errors import ConfigError
from .grid import Projection, RegionIndex, regions_to_geojson
from .synth import Hotspot, SynthConfig, _homestead_locations, _rng, gen_cohort, gen_trajectories

_STREAM_SCENARIO = 3


def write_cohort(out_dir, records, rates, truth, projection: Projection):
    """``tests.csv``, ``rates.csv``, ``participants.csv``, ``homesteads.csv``,
    ``residents.csv`` and ``truth_seroconversion.csv``."""
    out = Path(out_dir)
    rows = []
    for r in records:
        base = (r.person_id, r.sex, r.birth_date.isoformat(), f"{r.entry_period}-01-01", f"{r.exit_period}-12-31")
        if not r.tests:
            rows.append((*base, "", ""))
        for p, pos in sorted(r.tests):
            rows.append((*base, f"{p}-07-01", "pos" if pos else "neg"))
    cio.write_csv(out / "tests.csv", ("person_id", "sex", "birth_date", "entry_date", "exit_date",
                                      "test_date", "result"), rows)
    cio.write_csv(out / "rates.csv", ("sex", "age_group", "period", "prevalence", "incidence"),
                  ((s, g, p, mu, lam) for (s, g, p), (mu, lam) in sorted(rates.items())))
    cio.write_csv(out / "participants.csv", ("person_id", "sex", "birth_date"),
                  ((r.person_id, r.sex, r.birth_date.isoformat()) for r in records))
    ids = sorted(truth.homestead_xy)
    xy = np.array([truth.homestead_xy[h] for h in ids], dtype=float).reshape(-1, 2)
    lon, lat = projection.inverse(xy[:, 0], xy[:, 1])
    cio.write_csv(out / "homesteads.csv", ("homestead_id", "lon", "lat"), zip(ids, lon, lat))
    cio.write_csv(out / "residents.csv", ("person_id", "homestead_id", "period"),
                  ((r.person_id, truth.homestead[r.person_id], p)
                   for r in records for p in range(r.entry_period, r.exit_period + 1)))
    cio.write_csv(out / "truth_seroconversion.csv", ("person_id", "first_positive"),
                  sorted(truth.first_positive.items()))


def write_trajectories(out_dir, fixes, paths, projection: Projection):
    """``fixes.csv`` plus the continuous truth in ``truth_paths.csv``."""
    out = Path(out_dir)

    def rows(seqs):
        for pid, t, x, y in seqs:
            lon, lat = projection.inverse(x, y)
            yield from zip([pid] * len(t), cio.iso_utc(t), lon.tolist(), lat.tolist())

    cio.write_csv(out / "fixes.csv", ("person_id", "timestamp", "lon", "lat"),
                  rows((f.person_id, f.t, f.x, f.y) for f in fixes))
    cio.write_csv(out / "truth_paths.csv", ("person_id", "timestamp", "lon", "lat"),
                  rows((pid, p.t, p.x, p.y) for pid, p in sorted(paths.items())))


@dataclass
class ScenarioConfig:
    seed: int = 0
    n_cohort: int = 3000
    n_gps: int = 500
    exposed_fraction: float = 0.5
    days: float = 30.0
    fix_interval: float = 600.0
    gap_prob: float = 0.002
    n_homesteads: int = 600
    first_period: int = 2015
    last_period: int = 2020
    attendance: float = 0.6
    origin_lon: float = 31.8
    origin_lat: float = -28.3
    cell_size_m: float = 100.0
    n_cols: int = 100
    n_rows: int = 100
    district_width_m: float = 15_000.0
    hotspot_center: tuple = (3000.0, 3000.0)
    hotspot_radius: float = 2000.0
    hotspot_multiplier: float = 3.0
    district_prevalence: tuple = (("D1", 0.48), ("D2", 0.21), ("D3", 0.26), ("D4", 0.24))
    trip_dwell_hours: tuple = (24.0, 72.0)
    replicates: int = 3

    @classmethod
    def from_dict(cls, d: dict) -> "ScenarioConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d or {}) - known)
        if unknown:
            raise ConfigError(f"unknown scenario keys {unknown}")
        d = dict(d or {})
        for k in ("hotspot_center", "trip_dwell_hours"):
            if k in d:
                d[k] = tuple(d[k])
        if isinstance(d.get("district_prevalence"), dict):
            d["district_prevalence"] = tuple(sorted(d["district_prevalence"].items()))
        cfg = cls(**d)
        if not 0 <= cfg.exposed_fraction <= 1:
            raise ConfigError("exposed_fraction must be in [0, 1]")
        if cfg.n_gps > cfg.n_cohort:
            raise ConfigError("n_gps cannot exceed n_cohort")
        return cfg


def _box(x0, y0, x1, y1):
    return [[(x0, y0), (x1, y0), (x1, y1), (x0, y1), (x0, y0)]]


def scenario_regions(sc: ScenarioConfig):
    """Study-area square plus east/west/north/south district strips."""
    W = sc.cell_size_m * sc.n_cols
    H = sc.cell_size_m * sc.n_rows
    w = sc.district_width_m
    study = _box(0.0, 0.0, W, H)
    names = [d for d, _ in sc.district_prevalence]
    if len(names) != 4:
        raise ConfigError("the scenario needs exactly four districts (east, west, north, south)")
    districts = {
        names[0]: _box(W, -w, W + w, H + w),
        names[1]: _box(-w, -w, 0.0, H + w),
        names[2]: _box(0.0, H, W, H + w),
        names[3]: _box(0.0, -w, W, 0.0),
    }
    return study, districts


def _point_in(rng, box, accept, tries=10_000):
    x0, y0, x1, y1 = box
    for _ in range(tries):
        p = (float(rng.uniform(x0, x1)), float(rng.uniform(y0, y1)))
        if accept(p):
            return p
    raise ConfigError("could not place a point satisfying the scenario constraints")


def write_scenario(out_dir, sc: ScenarioConfig | None = None) -> dict:
    """Write a runnable dataset plus ``config.yaml`` and ``truth_groups.csv``.

    Returns ``{person_id: "exposed" | "control"}`` for the GPS participants.
    """
    sc = sc or ScenarioConfig()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    W = sc.cell_size_m * sc.n_cols
    H = sc.cell_size_m * sc.n_rows
    proj = Projection(sc.origin_lon, sc.origin_lat)
    hot = Hotspot(tuple(sc.hotspot_center), sc.hotspot_radius, sc.hotspot_multiplier)
    base = SynthConfig(seed=sc.seed, n_participants=sc.n_cohort, first_period=sc.first_period,
                       last_period=sc.last_period, attendance=sc.attendance, hotspot=hot,
                       n_homesteads=sc.n_homesteads, days=sc.days, fix_interval=sc.fix_interval,
                       gap_prob=sc.gap_prob, origin_lon=sc.origin_lon, origin_lat=sc.origin_lat,
                       box=(0.0, 0.0, W, H))
    study, districts = scenario_regions(sc)
    region = RegionIndex(study, districts)

    homes = _homestead_locations(base, base.box)
    hot_ids = [h for h in sorted(homes) if bool(hot.contains(*homes[h]))]
    cold_ids = [h for h in sorted(homes) if not bool(hot.contains(*homes[h]))]
    if not hot_ids or not cold_ids:
        raise ConfigError("hotspot must contain some but not all homesteads")

    rng = _rng(sc.seed, _STREAM_SCENARIO, 0)
    gps_ids = [f"S{i:06d}" for i in range(sc.n_gps)]
    n_exp = int(round(sc.exposed_fraction * sc.n_gps))
    groups, home_of, anchors, dwell = {}, {}, {}, {}
    lo_h, hi_h = sc.trip_dwell_hours
    for i, pid in enumerate(gps_ids):
        exposed = i < n_exp
        groups[pid] = "exposed" if exposed else "control"
        pool_ids = hot_ids if exposed else cold_ids
        hid = pool_ids[int(rng.integers(len(pool_ids)))]
        home_of[pid] = hid
        home = tuple(homes[hid])
        if exposed:
            local = _point_in(rng, base.box, lambda p: bool(hot.contains(*p)))
            trip = _point_in(rng, (W + 2000.0, 1000.0, W + 8000.0, H - 1000.0), lambda p: True)
            anchors[pid] = [home, local, trip]
            dwell[pid] = {2: {"family": "uniform", "low": lo_h * 3600.0, "high": hi_h * 3600.0}}
        else:
            anchors[pid] = [home] + [_point_in(rng, base.box, lambda p: not bool(hot.contains(*p)))
                                     for _ in range(2)]

    records, rates, truth = gen_cohort(base, base.box, home_of)
    write_cohort(out, records, dict(rates.items()), truth, proj)
    fixes, paths = gen_trajectories(base, region, base.box, anchors, dwell, gps_ids)
    write_trajectories(out, fixes, paths, proj)
    with open(out / "regions.geojson", "w", encoding="utf-8") as fh:
        json.dump(regions_to_geojson(study, districts, proj), fh, indent=1)
        fh.write("\n")
    cio.write_csv(out / "district_prevalence.csv", ("district_id", "prevalence"), sc.district_prevalence)
    cio.write_csv(out / "truth_groups.csv", ("person_id", "group"), sorted(groups.items()))
    config = {
        "seed": sc.seed,
        "threads": 1,
        "units": "proportion",
        "output_dir": "out",
        "grid": {"origin_lon": sc.origin_lon, "origin_lat": sc.origin_lat, "cell_size_m": sc.cell_size_m,
                 "n_cols": sc.n_cols, "n_rows": sc.n_rows},
        "imputation": {"replicates": sc.replicates},
        "prevalence": {"period": sc.last_period},
        "inputs": {k: v for k, v in (("tests", "tests.csv"), ("rates", "rates.csv"),
                                     ("participants", "participants.csv"), ("homesteads", "homesteads.csv"),
                                     ("residents", "residents.csv"), ("fixes", "fixes.csv"),
                                     ("regions", "regions.geojson"),
                                     ("district_prevalence", "district_prevalence.csv"))},
    }
    with open(out / "config.yaml", "w", encoding="utf-8") as fh:
        yaml.safe_dump(config, fh, sort_keys=False)
    return groups
