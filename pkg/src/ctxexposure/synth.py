"""Synthetic cohorts and trajectories with known ground truth.

Real surveillance and GPS data are private, so the pipeline is exercised
on generated data: status paths drawn from a known rate table and
anchor-to-anchor movement whose continuous path is kept, so the exact
per-cell occupancy can be computed by clipping the path against the grid.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, fields
from datetime import date

import numpy as np

from .activity import ActivityDistribution, FixSequence, _from_seconds
from .errors import ComputeError, ConfigError
from .grid import Grid, PlanarPoint, RegionIndex, points_in_rings
from .imputation import RateTable, SurveillanceRecord, age_at_period

DEFAULT_AGE_GROUPS = ("15-19", "20-24", "25-29", "30-34", "35-39", "40-44", "45-49", "50+")

_STREAM_COHORT = 1
_STREAM_TRAJ = 2


def draw(spec: dict, rng) -> float:
    """Sample a duration from ``{"family": "uniform"|"exponential", ...}``."""
    fam = spec.get("family")
    if fam == "uniform":
        return float(rng.uniform(spec["low"], spec["high"]))
    if fam == "exponential":
        return float(rng.exponential(spec["mean"]))
    if fam == "constant":
        return float(spec["value"])
    raise ConfigError(f"unknown distribution family {fam!r}")


def default_rates(first: int, last: int, groups=DEFAULT_AGE_GROUPS, scale: float = 1.0) -> dict:
    """A smooth, coherent sex x age x period table (proportions)."""
    peak = {"F": 0.42, "M": 0.30}
    inc = {"F": 0.035, "M": 0.022}
    rates = {}
    for sex in ("F", "M"):
        for gi, g in enumerate(groups):
            shape = math.exp(-0.5 * ((gi - 3.0) / 2.0) ** 2)
            for p in range(first, last + 1):
                drift = 1.0 - 0.01 * (p - first)
                mu = min(0.95, scale * (0.05 + peak[sex] * shape) * drift)
                lam = min(0.5, scale * (0.004 + inc[sex] * shape) * drift)
                rates[(sex, g, p)] = (round(mu, 6), round(lam, 6))
    return rates


@dataclass
class Hotspot:
    center: tuple = (4000.0, 4000.0)
    radius: float = 2500.0
    multiplier: float = 2.0

    def contains(self, x, y):
        return (np.asarray(x) - self.center[0]) ** 2 + (np.asarray(y) - self.center[1]) ** 2 <= self.radius ** 2


@dataclass
class SynthConfig:
    seed: int = 0
    n_participants: int = 1000
    first_period: int = 2015
    last_period: int = 2020
    age_groups: tuple = DEFAULT_AGE_GROUPS
    rates: dict | None = None
    attendance: float = 0.6
    hotspot: Hotspot | None = None
    # homesteads
    n_homesteads: int = 400
    # trajectories
    n_gps: int = 20
    days: float = 7.0
    fix_interval: float = 600.0
    speed: float = 8.0
    n_anchors: int = 4
    home_dwell: dict = field(default_factory=lambda: {"family": "uniform", "low": 6 * 3600.0, "high": 14 * 3600.0})
    dwell: dict = field(default_factory=lambda: {"family": "exponential", "mean": 2 * 3600.0})
    return_home: float = 0.6
    gap_prob: float = 0.0
    gap_length: dict = field(default_factory=lambda: {"family": "uniform", "low": 3600.0, "high": 6 * 3600.0})
    start_time: float = 1_577_836_800.0  # 2020-01-01T00:00:00Z
    # lon/lat of the planar origin, and the planar box holding homesteads/anchors
    origin_lon: float = 31.8
    origin_lat: float = -28.3
    box: tuple = (0.0, 0.0, 10_000.0, 10_000.0)

    def __post_init__(self):
        for name in ("attendance", "gap_prob", "return_home"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ConfigError(f"{name} must be a probability, got {v!r}")
        for name in ("days", "fix_interval", "speed"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive")
        if self.first_period > self.last_period:
            raise ConfigError("first_period after last_period")
        if isinstance(self.hotspot, dict):
            self.hotspot = Hotspot(**self.hotspot)
        if self.rates is None:
            self.rates = default_rates(self.first_period, self.last_period, self.age_groups)

    @classmethod
    def from_dict(cls, d: dict) -> "SynthConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown synth config keys: {sorted(unknown)}")
        d = dict(d)
        for key in ("age_groups", "box"):
            if key in d:
                d[key] = tuple(d[key])
        if isinstance(d.get("rates"), list):
            try:
                d["rates"] = {(r["sex"], str(r["age_group"]), int(r["period"])):
                              (float(r["prevalence"]), float(r["incidence"])) for r in d["rates"]}
            except (KeyError, TypeError, ValueError) as exc:
                raise ConfigError(f"bad rates row: {exc}") from None
        return cls(**d)


def _rng(seed, stream, index):
    return np.random.default_rng(np.random.SeedSequence([int(seed), stream, int(index)]))


# ------------------------------------------------------------------
# cohort
# ------------------------------------------------------------------


@dataclass(frozen=True)
class CohortTruth:
    """True first-positive period per person (``None`` = never positive)."""

    first_positive: dict
    homestead: dict
    homestead_xy: dict


def _homestead_locations(cfg: SynthConfig, region_box):
    rng = _rng(cfg.seed, _STREAM_COHORT, 10**9)
    x0, y0, x1, y1 = region_box
    xs = rng.uniform(x0, x1, cfg.n_homesteads)
    ys = rng.uniform(y0, y1, cfg.n_homesteads)
    return {f"H{i:05d}": PlanarPoint(float(x), float(y)) for i, (x, y) in enumerate(zip(xs, ys))}


def gen_cohort(cfg: SynthConfig, region_box=None, homestead_of: dict | None = None):
    """Simulate surveillance records from the configured rates.

    Returns ``(records, rate_table, truth)``.  Each person lives in one
    homestead (drawn at random unless ``homestead_of`` pins it); with a
    hotspot configured, residents of homesteads inside it get rates scaled
    by ``hotspot.multiplier`` (the emitted table keeps the base rates).
    """
    rates = RateTable(cfg.rates)
    homes = _homestead_locations(cfg, region_box or cfg.box)
    home_ids = sorted(homes)
    records = []
    first_pos = {}
    assigned = {}
    P0, P1 = cfg.first_period, cfg.last_period
    min_lo = min(g.lo for g in rates.groups)
    for i in range(cfg.n_participants):
        rng = _rng(cfg.seed, _STREAM_COHORT, i)
        pid = f"S{i:06d}"
        sex = "F" if rng.random() < 0.5 else "M"
        entry = int(rng.integers(P0, P1 + 1))
        exit_ = int(rng.integers(entry, P1 + 1))
        age0 = int(rng.integers(min_lo + 1, 60))
        birth = date(entry - age0, int(rng.integers(1, 13)), int(rng.integers(1, 29)))
        hid = home_ids[int(rng.integers(len(home_ids)))]
        if homestead_of and pid in homestead_of:
            hid = homestead_of[pid]
        assigned[pid] = hid
        mult = 1.0
        if cfg.hotspot is not None and bool(cfg.hotspot.contains(*homes[hid])):
            mult = cfg.hotspot.multiplier
        status = []
        positive = False
        for t in range(entry, exit_ + 1):
            mu, lam = rates.lookup(sex, age_at_period(birth, t), t)
            if t == entry:
                positive = rng.random() < min(0.95, mu * mult)
            elif not positive:
                positive = rng.random() < min(0.5, lam * mult)
            status.append(int(positive))
        fp = next((entry + k for k, s in enumerate(status) if s), None)
        first_pos[pid] = fp
        tests = [(entry + k, bool(s)) for k, s in enumerate(status) if rng.random() < cfg.attendance]
        records.append(SurveillanceRecord(pid, sex, birth, entry, exit_, tuple(tests)))
    return records, rates, CohortTruth(first_pos, assigned, homes)


# ------------------------------------------------------------------
# trajectories
# ------------------------------------------------------------------


@dataclass(frozen=True)
class Path:
    """Piecewise-linear continuous trajectory: vertices ``(t, x, y)``."""

    t: np.ndarray
    x: np.ndarray
    y: np.ndarray

    def at(self, times):
        return np.interp(times, self.t, self.x), np.interp(times, self.t, self.y)


def _sample_inside(rng, region: RegionIndex | None, box, n):
    x0, y0, x1, y1 = box
    out = []
    while len(out) < n:
        x = rng.uniform(x0, x1)
        y = rng.uniform(y0, y1)
        if region is None or bool(points_in_rings(region._study.rings, np.array([x]), np.array([y]))[0]):
            out.append((float(x), float(y)))
    return out


def simulate_path(cfg: SynthConfig, anchors, rng, anchor_dwell=None) -> Path:
    """Dwell/travel path starting at ``anchors[0]`` (home).

    ``anchor_dwell`` optionally overrides the dwell distribution per anchor
    index.
    """
    anchors = [tuple(map(float, a)) for a in anchors]
    t0 = cfg.start_time
    t_end = t0 + cfg.days * 86400.0
    ts, xs, ys = [t0], [anchors[0][0]], [anchors[0][1]]
    cur = 0
    t = t0
    while t < t_end:
        spec = (anchor_dwell or {}).get(cur) or (cfg.home_dwell if cur == 0 else cfg.dwell)
        t = min(t + max(draw(spec, rng), 60.0), t_end)
        ts.append(t)
        xs.append(anchors[cur][0])
        ys.append(anchors[cur][1])
        if t >= t_end or len(anchors) == 1:
            continue
        if cur == 0:
            nxt = int(rng.integers(1, len(anchors)))
        elif rng.random() < cfg.return_home:
            nxt = 0
        else:
            nxt = int(rng.integers(0, len(anchors)))
        if nxt == cur:
            continue
        dist = math.dist(anchors[cur], anchors[nxt])
        arrive = t + dist / cfg.speed
        if arrive > t_end:
            f = (t_end - t) / (arrive - t)
            ts.append(t_end)
            xs.append(anchors[cur][0] + f * (anchors[nxt][0] - anchors[cur][0]))
            ys.append(anchors[cur][1] + f * (anchors[nxt][1] - anchors[cur][1]))
            t = t_end
            break
        t = arrive
        ts.append(t)
        xs.append(anchors[nxt][0])
        ys.append(anchors[nxt][1])
        cur = nxt
    return Path(np.array(ts), np.array(xs), np.array(ys))


def sample_fixes(person_id, path: Path, cfg: SynthConfig, rng) -> FixSequence:
    """Fixes every ``fix_interval`` seconds, lying exactly on ``path``."""
    n = int(math.floor((path.t[-1] - path.t[0]) / cfg.fix_interval + 1e-9)) + 1
    times = path.t[0] + cfg.fix_interval * np.arange(n)
    keep = np.ones(n, dtype=bool)
    if cfg.gap_prob > 0:
        i = 0
        while i < n:
            if rng.random() < cfg.gap_prob:
                end = times[i] + draw(cfg.gap_length, rng)
                j = i + 1
                while j < n and times[j] < end:
                    keep[j] = False
                    j += 1
                i = j
            else:
                i += 1
    times = times[keep]
    x, y = path.at(times)
    return FixSequence(person_id, times, x, y)


def gen_trajectories(cfg: SynthConfig, region: RegionIndex | None, box=None,
                     anchors: dict | None = None, anchor_dwell: dict | None = None, ids=None):
    """Fix sequences plus their continuous paths.

    ``anchors`` maps person id to an explicit anchor list (home first);
    otherwise ``n_anchors`` anchors are drawn inside the study area.
    """
    ids = list(ids) if ids is not None else [f"G{i:04d}" for i in range(cfg.n_gps)]
    box = box or cfg.box
    fixes, paths = [], {}
    for i, pid in enumerate(ids):
        rng = _rng(cfg.seed, _STREAM_TRAJ, i)
        anc = (anchors or {}).get(pid) or _sample_inside(rng, region, box, cfg.n_anchors)
        path = simulate_path(cfg, anc, rng, (anchor_dwell or {}).get(pid))
        paths[pid] = path
        fixes.append(sample_fixes(pid, path, cfg, rng))
    return fixes, paths


def occupancy_seconds(path: Path, grid: Grid) -> dict:
    """Exact seconds per cell by clipping every linear piece at cell edges."""
    secs: dict = {}
    cs = grid.cell_size
    for k in range(len(path.t) - 1):
        dt = path.t[k + 1] - path.t[k]
        if dt <= 0:
            continue
        xa, ya, xb, yb = path.x[k], path.y[k], path.x[k + 1], path.y[k + 1]
        cuts = [0.0, 1.0]
        for a, b, o in ((xa, xb, grid.origin.x), (ya, yb, grid.origin.y)):
            if a == b:
                continue
            lo, hi = sorted((a, b))
            first = math.ceil((lo - o) / cs)
            last = math.floor((hi - o) / cs)
            for line in range(first, last + 1):
                s = (o + line * cs - a) / (b - a)
                if 0.0 < s < 1.0:
                    cuts.append(s)
        cuts = sorted(set(cuts))
        for s0, s1 in zip(cuts[:-1], cuts[1:]):
            m = 0.5 * (s0 + s1)
            cell = grid.locate((xa + m * (xb - xa), ya + m * (yb - ya)))
            if cell < 0:
                continue
            secs[cell] = secs.get(cell, 0.0) + (s1 - s0) * dt
    return secs


def true_occupancy(path: Path, grid: Grid, owner=None) -> ActivityDistribution:
    """Normalized exact occupancy over grid cells (time outside the window is
    left out of the normalization)."""
    if path.t[-1] - path.t[0] <= 0:
        raise ComputeError("zero-duration path")
    secs = occupancy_seconds(path, grid)
    if not secs:
        raise ComputeError("path never enters the grid window")
    return _from_seconds(owner, secs)
