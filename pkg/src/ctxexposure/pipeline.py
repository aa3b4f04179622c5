"""Configuration, stage orchestration and run manifests.

Stages read their inputs from files and write their outputs to a private
work directory; a run chains them there and only moves the results into
the output directory once every stage has succeeded.
"""
from __future__ import annotations

import hashlib
import json
import logging
import math
import os
import platform
import shutil
import tempfile
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from datetime import date, datetime, timezone
from pathlib import Path
from urllib.parse import quote

import numpy as np
import yaml

from . import __version__
from . import io as cio
from .activity import (
    InOutSplit,
    PersonActivity,
    _from_seconds,
    activity_space,
    combined_distribution,
    person_activity,
    pool,
)
from .analysis import (
    cluster_deviations,
    coverage_curves,
    export_design_table,
    log_activity_export,
    overlap_map,
    paired_t_test,
    risk_stratify,
)
from .errors import ComputeError, ConfigError, CtxExposureError, SchemaError, ValidationError
from .exposure import deviation_curve, exposure_profile
from .grid import CODE_INSIDE, Grid, PlanarPoint, Projection, load_regions
from .imputation import impute_cohort, status_rows
from .prevalence import HomesteadYear, KernelParams, PrevalenceField, prevalence_field

log = logging.getLogger(__name__)

STAGES = ("impute", "prevalence", "activity", "exposure", "analyze")


# ------------------------------------------------------------------
# configuration
# ------------------------------------------------------------------


def parse_levels(spec) -> list:
    """``"50:95:1,100"`` -> ``[50, 51, ..., 95, 100]`` (start:stop:step inclusive)."""
    if isinstance(spec, (int, float)):
        return [spec]
    if isinstance(spec, (list, tuple)):
        out = []
        for s in spec:
            out.extend(parse_levels(s))
        return out
    out = []
    for part in str(spec).split(","):
        part = part.strip()
        if not part:
            continue
        bits = part.split(":")
        try:
            nums = [float(b) for b in bits]
        except ValueError:
            raise ConfigError(f"bad level list {spec!r}") from None
        if len(nums) == 1:
            vals = nums
        elif len(nums) in (2, 3):
            lo, hi = nums[0], nums[1]
            step = nums[2] if len(nums) == 3 else 1.0
            if step <= 0 or hi < lo:
                raise ConfigError(f"bad level range {part!r}")
            n = int(math.floor((hi - lo) / step + 1e-9))
            vals = [lo + i * step for i in range(n + 1)]
        else:
            raise ConfigError(f"bad level range {part!r}")
        out.extend(int(v) if float(v).is_integer() else v for v in vals)
    for v in out:
        if not 0 < v <= 100:
            raise ConfigError(f"level {v} outside (0, 100]")
    return sorted(set(out))


class _Section:
    @classmethod
    def from_dict(cls, d, where):
        d = d or {}
        if not isinstance(d, dict):
            raise ConfigError(f"{where}: expected a mapping")
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"{where}: unknown keys {unknown}")
        return cls(**d)


@dataclass
class GridConfig(_Section):
    origin_lon: float = 0.0
    origin_lat: float = 0.0
    cell_size_m: float = 100.0
    n_cols: int = 100
    n_rows: int = 100

    def build(self):
        proj = Projection(float(self.origin_lon), float(self.origin_lat))
        return proj, Grid(PlanarPoint(0.0, 0.0), float(self.cell_size_m), int(self.n_cols), int(self.n_rows))


@dataclass
class KernelConfig(_Section):
    bandwidth_km: float = 1.165
    radius_km: float = 3.0


@dataclass
class ImputationConfig(_Section):
    replicates: int = 5
    schedule: str = "backward"


@dataclass
class PrevalenceConfig(_Section):
    period: int | None = None


@dataclass
class ActivityConfig(_Section):
    gap_min: float = 30.0
    gammas: object = "50:95:1,100"
    home_level: float = 50.0


@dataclass
class AnalysisConfig(_Section):
    p_low: float = 40.0
    p_high: float = 60.0
    k: int = 3
    restarts: int = 10
    log_epsilon: float = 1e-15
    deviation_gammas: object = "50:95:1"
    pooling: str = "duration_weighted"
    resample_size: object = "auto"
    resample_reps: int = 100
    overlap_levels: object = (65, 95, 100)
    tasks: tuple = ("risk", "cluster", "coverage", "overlap", "design", "ttest", "maps")


INPUT_KEYS = ("tests", "rates", "participants", "homesteads", "residents", "fixes", "regions",
              "district_prevalence", "status_dir", "prevalence", "activity_dir", "exposure", "deviation")


@dataclass
class InputsConfig(_Section):
    tests: str | None = None
    rates: str | None = None
    participants: str | None = None
    homesteads: str | None = None
    residents: str | None = None
    fixes: str | None = None
    regions: str | None = None
    district_prevalence: str | None = None
    # products of earlier stages, when those stages are not part of the run
    status_dir: str | None = None
    prevalence: str | None = None
    activity_dir: str | None = None
    exposure: str | None = None
    deviation: str | None = None


@dataclass
class PipelineConfig:
    seed: int = 0
    threads: int = 1
    units: str = "proportion"
    output_dir: str = "out"
    stages: tuple = STAGES
    grid: GridConfig = field(default_factory=GridConfig)
    kernel: KernelConfig = field(default_factory=KernelConfig)
    imputation: ImputationConfig = field(default_factory=ImputationConfig)
    prevalence: PrevalenceConfig = field(default_factory=PrevalenceConfig)
    activity: ActivityConfig = field(default_factory=ActivityConfig)
    analysis: AnalysisConfig = field(default_factory=AnalysisConfig)
    inputs: InputsConfig = field(default_factory=InputsConfig)
    base_dir: str = "."

    _SECTIONS = {"grid": GridConfig, "kernel": KernelConfig, "imputation": ImputationConfig,
                 "prevalence": PrevalenceConfig, "activity": ActivityConfig,
                 "analysis": AnalysisConfig, "inputs": InputsConfig}

    @classmethod
    def from_dict(cls, d: dict, base_dir=".") -> "PipelineConfig":
        d = dict(d or {})
        scalars = {"seed", "threads", "units", "output_dir", "stages"}
        unknown = sorted(set(d) - scalars - set(cls._SECTIONS))
        if unknown:
            raise ConfigError(f"unknown config keys {unknown}")
        kw = {k: d[k] for k in scalars if k in d}
        for name, sec in cls._SECTIONS.items():
            kw[name] = sec.from_dict(d.get(name), name)
        cfg = cls(**kw, base_dir=str(base_dir))
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path) -> "PipelineConfig":
        path = Path(path)
        try:
            with open(path, encoding="utf-8") as fh:
                doc = yaml.safe_load(fh)
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}") from None
        except yaml.YAMLError as exc:
            raise ConfigError(f"{path}: invalid YAML: {exc}") from None
        return cls.from_dict(doc or {}, base_dir=path.parent)

    def validate(self):
        if self.units not in ("proportion", "percent"):
            raise ConfigError("units must be 'proportion' or 'percent'")
        if int(self.threads) < 1:
            raise ConfigError("threads must be at least 1")
        self.stages = tuple(self.stages)
        bad = [s for s in self.stages if s not in STAGES]
        if bad:
            raise ConfigError(f"unknown stages {bad}")
        g = self.grid
        if not (g.cell_size_m > 0 and int(g.n_cols) > 0 and int(g.n_rows) > 0):
            raise ConfigError("grid needs positive cell_size_m, n_cols, n_rows")
        if not -90 < g.origin_lat < 90 or not -180 <= g.origin_lon <= 180:
            raise ConfigError("grid origin out of range")
        try:
            KernelParams(self.kernel.bandwidth_km, self.kernel.radius_km)
        except ValidationError as exc:
            raise ConfigError(str(exc)) from None
        if int(self.imputation.replicates) < 1:
            raise ConfigError("imputation.replicates must be at least 1")
        if self.imputation.schedule not in ("backward", "alternate"):
            raise ConfigError("imputation.schedule must be backward or alternate")
        if not self.activity.gap_min > 0:
            raise ConfigError("activity.gap_min must be positive")
        parse_levels(self.activity.gammas)
        parse_levels(self.analysis.deviation_gammas)
        parse_levels(self.analysis.overlap_levels)
        if not 0 < self.activity.home_level <= 100:
            raise ConfigError("activity.home_level must be in (0, 100]")
        a = self.analysis
        if not 0 <= a.p_low < a.p_high <= 100:
            raise ConfigError("analysis percentiles need 0 <= p_low < p_high <= 100")
        if int(a.k) < 1 or int(a.restarts) < 1:
            raise ConfigError("analysis.k and analysis.restarts must be positive")
        if not a.log_epsilon > 0:
            raise ConfigError("analysis.log_epsilon must be positive")
        if a.pooling not in ("duration_weighted", "unweighted"):
            raise ConfigError("analysis.pooling must be duration_weighted or unweighted")
        if not (a.resample_size in (None, "auto") or (isinstance(a.resample_size, int) and a.resample_size > 0)):
            raise ConfigError("analysis.resample_size must be null, 'auto' or a positive integer")
        return self

    def path(self, p):
        if p is None:
            return None
        p = Path(p)
        return p if p.is_absolute() else Path(self.base_dir) / p

    def to_dict(self):
        d = asdict(self)
        d.pop("base_dir")
        d["stages"] = list(self.stages)
        return d

    def digest(self) -> str:
        """Hash of everything that can change outputs (not threads or paths)."""
        d = self.to_dict()
        d.pop("threads")
        d.pop("output_dir")
        d.pop("inputs")
        blob = json.dumps(d, sort_keys=True, default=list).encode()
        return hashlib.sha256(blob).hexdigest()


# ------------------------------------------------------------------
# run context
# ------------------------------------------------------------------


@dataclass
class StageReport:
    name: str
    rows: int = 0
    warnings: list = field(default_factory=list)
    wall_seconds: float = 0.0


class _Run:
    def __init__(self, cfg: PipelineConfig, work: Path):
        self.cfg = cfg
        self.work = work
        self.done = set()
        self.projection, self.grid = cfg.grid.build()
        self._regions = None
        self.inputs_used = {}

    @property
    def percent(self):
        return self.cfg.units == "percent"

    @property
    def scale(self):
        return 100.0 if self.percent else 1.0

    def source(self, key):
        p = self.cfg.path(getattr(self.cfg.inputs, key))
        if p is None:
            raise ConfigError(f"missing input: inputs.{key}")
        self.inputs_used[key] = p
        return p

    def product(self, stage, rel, key):
        """Path of an earlier stage's product: from this run, else from inputs."""
        if stage in self.done:
            return self.work / rel
        return self.source(key)

    def regions(self, required=True):
        if self._regions is None:
            p = self.cfg.path(self.cfg.inputs.regions)
            if p is None:
                if required:
                    raise ConfigError("missing input: inputs.regions")
                return None
            self.inputs_used["regions"] = p
            self._regions = load_regions(p, self.projection)
        return self._regions


def _fname(pid) -> str:
    return quote(str(pid), safe="")


def _pmap(fn, items, threads):
    if threads > 1 and len(items) > 1:
        with ThreadPoolExecutor(max_workers=threads) as ex:
            return list(ex.map(fn, items))
    return [fn(x) for x in items]


# ------------------------------------------------------------------
# stages
# ------------------------------------------------------------------


def stage_impute(run: _Run, rep: StageReport):
    cfg = run.cfg
    records = cio.read_tests(run.source("tests"))
    rates = cio.read_rates(run.source("rates"))
    data = impute_cohort(records, rates, cfg.seed, int(cfg.imputation.replicates),
                         cfg.imputation.schedule, int(cfg.threads))
    for r, dataset in enumerate(data, start=1):
        rows = list(status_rows(dataset))
        cio.write_csv(run.work / "imputed" / f"status_{r}.csv", ("person_id", "period", "status"), rows)
        rep.rows += len(rows)


def _status_files(d: Path):
    files = sorted(d.glob("status_*.csv"), key=lambda p: (len(p.stem), p.stem))
    if not files:
        raise SchemaError("no status_<replicate>.csv files", path=d)
    return files


def homestead_counts(homesteads: dict, residents, status: dict, period: int, regions=None):
    """Per-homestead ``(n_total, n_positive)`` for one period.

    Residents without an imputed status in ``period`` are not counted;
    homesteads outside the study area are dropped.
    """
    res = residents[residents["period"] == period]
    counts = {}
    for pid, hid in zip(res["person_id"], res["homestead_id"]):
        s = status.get((pid, period))
        if s is None:
            continue
        if hid not in homesteads:
            raise SchemaError(f"resident {pid} refers to unknown homestead {hid}", column="homestead_id")
        tot, pos = counts.get(hid, (0, 0))
        counts[hid] = (tot + 1, pos + int(s))
    out = []
    for hid, (tot, pos) in counts.items():
        xy = homesteads[hid]
        if regions is not None and regions.classify_xy(np.array([xy[0]]), np.array([xy[1]]))[0] != CODE_INSIDE:
            continue
        out.append(HomesteadYear(hid, PlanarPoint(*xy), period, tot, pos))
    return out


def stage_prevalence(run: _Run, rep: StageReport):
    cfg = run.cfg
    period = cfg.prevalence.period
    if period is None:
        raise ConfigError("prevalence.period is required")
    period = int(period)
    homes = cio.read_homesteads(run.source("homesteads"), run.projection)
    residents = cio.read_residents(run.source("residents"))
    regions = run.regions(required=False)
    params = KernelParams(cfg.kernel.bandwidth_km, cfg.kernel.radius_km)
    fields_ = []
    for f in _status_files(run.product("impute", "imputed", "status_dir")):
        status = cio.read_status(f)
        hy = homestead_counts(homes, residents, status, period, regions)
        if not hy:
            raise ComputeError(f"no residents with status in period {period}")
        fields_.append(prevalence_field(run.grid, hy, params, int(cfg.threads)).values)
    values = fields_[0].copy()
    for v in fields_[1:]:
        values += v
    values /= len(fields_)
    if np.isnan(values).any():
        rep.warnings.append(f"{int(np.isnan(values).sum())} cell(s) without kernel weight (Missing)")
    cx, cy = run.grid.centroids()
    rows = ((c, cx[c], cy[c], values[c] * run.scale) for c in range(run.grid.n_cells))
    cio.write_csv(run.work / f"prevalence_{period}.csv", ("cell_id", "center_x", "center_y", "prevalence"), rows)
    rep.rows = run.grid.n_cells


SUMMARY_COLUMNS = ("person_id", "n_fixes", "gap_count", "inside_seconds", "outside_seconds",
                   "dropped_seconds", "unmapped_seconds", "fraction_in", "fraction_out",
                   "longest_block_start", "status")


def _longest_block_start(pa: PersonActivity):
    segs = pa.segments
    best = None
    for a, b in segs.blocks():
        dur = segs.fixes.t[b] - segs.fixes.t[a]
        if best is None or dur > best[0]:
            best = (dur, segs.fixes.t[a])
    if best is None:
        return None
    return str(cio.iso_utc([best[1]])[0])


def stage_activity(run: _Run, rep: StageReport):
    cfg = run.cfg
    fixes = cio.read_fixes(run.source("fixes"), run.projection)
    regions = run.regions(required=False)
    gap = float(cfg.activity.gap_min) * 60.0
    gammas = parse_levels(cfg.activity.gammas)
    out = run.work / "activity"
    out.mkdir(parents=True, exist_ok=True)

    def one(fx):
        return person_activity(fx, run.grid, regions, gap)

    results = _pmap(one, fixes, int(cfg.threads))
    summary, spaces = [], []
    for fx, pa in zip(fixes, results):
        pid = fx.person_id
        ins = pa.inside
        if pa.split is not None:
            sp = pa.split
            secs = (sp.inside_seconds, sp.outside_seconds, sp.dropped_seconds, sp.unmapped_seconds)
            f_in, f_out = sp.fraction_in, sp.fraction_out
        else:
            secs = (ins.total_seconds, 0.0, 0.0, 0.0)
            f_in, f_out = (1.0, 0.0) if ins.support else (None, None)
        ok = bool(pa.combined.support)
        summary.append((pid, len(fx), pa.segments.gap_count, *secs, f_in, f_out,
                        _longest_block_start(pa), "ok" if ok else "empty"))
        if not ok:
            rep.warnings.append(f"person {pid}: no usable same-unit time; skipped")
            continue
        cio.write_csv(out / f"activity_{_fname(pid)}.csv", ("cell_id", "proportion", "seconds"),
                      ((c, ins.support[c], ins.seconds[c]) for c in ins.labels))
        dsec = pa.split.district_seconds if pa.split is not None else {}
        cio.write_csv(out / f"districts_{_fname(pid)}.csv", ("district_id", "seconds"),
                      sorted(dsec.items()))
        if ins.support:
            for g in gammas:
                s = activity_space(ins, g)
                spaces.append((pid, g, len(s), s.captured))
    cio.write_csv(out / "summary.csv", SUMMARY_COLUMNS, summary)
    cio.write_csv(out / "spaces.csv", ("person_id", "gamma", "n_cells", "captured"), spaces)
    rep.rows = len(summary)


def load_activity_dir(d: Path) -> dict:
    """Rebuild per-person activity from an activity output directory."""
    d = Path(d)
    summ = cio._read_raw(d / "summary.csv") if (d / "summary.csv").exists() else None
    if summ is None:
        raise SchemaError("missing summary.csv", path=d)
    missing = [c for c in SUMMARY_COLUMNS if c not in summ.columns]
    if missing:
        raise SchemaError("missing required column", path=d / "summary.csv", column=missing[0], row=1)
    out = {}

    def num(v):
        return float(v) if v != "" else None

    for r in summ.itertuples(index=False):
        if r.status != "ok":
            continue
        pid = r.person_id
        a = cio._read_raw(d / f"activity_{_fname(pid)}.csv")
        cells = {int(c): float(s) for c, s in zip(a["cell_id"], a["seconds"])}
        dd = cio._read_raw(d / f"districts_{_fname(pid)}.csv")
        dsec = {str(k): float(s) for k, s in zip(dd["district_id"], dd["seconds"])}
        inside = _from_seconds(pid, cells, (pid,))
        split = InOutSplit(None, dsec, float(r.inside_seconds), float(r.outside_seconds),
                           float(r.dropped_seconds), float(r.unmapped_seconds))
        pa = PersonActivity(pid, None, split, inside, combined_distribution(inside, dsec))
        out[pid] = (pa, num(r.fraction_in), num(r.fraction_out), r.longest_block_start)
    return out


def read_field(path, grid: Grid, scale: float) -> PrevalenceField:
    df = cio._read_raw(path)
    for c in ("cell_id", "prevalence"):
        if c not in df.columns:
            raise SchemaError("missing required column", path=path, column=c, row=1)
    if len(df) != grid.n_cells:
        raise SchemaError(f"prevalence file has {len(df)} cells, grid has {grid.n_cells}", path=path)
    values = np.full(grid.n_cells, np.nan)
    ids = df["cell_id"].astype(int).to_numpy()
    v = df["prevalence"].replace("", "nan").astype(float).to_numpy() / scale
    values[ids] = v
    return PrevalenceField(grid, None, values)


EXPOSURE_COLUMNS = ("person_id", "e_in", "e_out", "e_overall", "e_home", "fraction_in", "fraction_out", "home")


def stage_exposure(run: _Run, rep: StageReport):
    cfg = run.cfg
    people = load_activity_dir(run.product("activity", "activity", "activity_dir"))
    period = cfg.prevalence.period
    field_ = read_field(run.product("prevalence", f"prevalence_{period}.csv", "prevalence"), run.grid, run.scale)
    dp_path = run.cfg.path(cfg.inputs.district_prevalence)
    dp = {}
    if dp_path is not None:
        run.inputs_used["district_prevalence"] = dp_path
        dp = cio.read_district_prevalence(dp_path, run.percent)
    dev_g = parse_levels(cfg.analysis.deviation_gammas)
    rows, dev, incomplete = [], [], []
    s = run.scale
    for pid in sorted(people):
        pa = people[pid][0]
        prof = exposure_profile(pa, field_, dp, float(cfg.activity.home_level))

        def sc(v):
            return None if v is None else v * s

        rows.append((pid, sc(prof.e_in), sc(prof.e_out), sc(prof.e_overall), sc(prof.e_home),
                     prof.fraction_in, prof.fraction_out, prof.home))
        curve = deviation_curve(pa, field_, prof.e_home, dev_g)
        if curve is None:
            incomplete.append(pid)
            continue
        dev.extend((pid, g, v * s) for g, v in zip(dev_g, curve))
    if incomplete:
        rep.warnings.append(f"{len(incomplete)} participant(s) without a complete deviation curve "
                            f"(left out of clustering): {', '.join(incomplete)}")
    cio.write_csv(run.work / "exposure.csv", EXPOSURE_COLUMNS, rows)
    cio.write_csv(run.work / "deviation.csv", ("person_id", "gamma", "deviation"), dev)
    rep.rows = len(rows)


def _age_on(birth: date, day: date) -> int:
    return day.year - birth.year - ((day.month, day.day) < (birth.month, birth.day))


def stage_analyze(run: _Run, rep: StageReport):
    cfg = run.cfg
    a = cfg.analysis
    tasks = set(a.tasks)
    out = run.work / "analysis"
    out.mkdir(parents=True, exist_ok=True)
    exp = cio._read_raw(run.product("exposure", "exposure.csv", "exposure"))
    for c in EXPOSURE_COLUMNS:
        if c not in exp.columns:
            raise SchemaError("missing required column", path="exposure.csv", column=c, row=1)

    def num(col):
        return exp[col].replace("", "nan").astype(float).to_numpy()

    pids = exp["person_id"].tolist()
    e_in, f_out = num("e_in"), num("fraction_out")
    e_home, e_all = num("e_home"), num("e_overall")

    if "risk" in tasks:
        ok = np.isfinite(e_in) & np.isfinite(f_out)
        assigned = {}
        try:
            for ra in risk_stratify([(p, e, f) for p, e, f, k in zip(pids, e_in, f_out, ok) if k],
                                    a.p_low, a.p_high):
                assigned[ra.person_id] = ra.group
        except ComputeError as exc:
            rep.warnings.append(f"risk: {exc}")
        cio.write_csv(out / "risk.csv", ("person_id", "group"),
                      ((p, assigned.get(p, "unassigned")) for p in pids))
        rep.rows += len(pids)

    if "ttest" in tasks:
        rows = []
        home = exp["home"].tolist()
        for stratum in ("inside", "outside"):
            sel = [i for i, h in enumerate(home)
                   if h and ((h == "inside") == (stratum == "inside"))
                   and np.isfinite(e_home[i]) and np.isfinite(e_all[i])]
            try:
                r = paired_t_test(e_home[sel], e_all[sel])
                rows.append((stratum, len(sel), r.mean_difference, r.t, r.df, r.p))
            except CtxExposureError as exc:
                rep.warnings.append(f"ttest {stratum}: {exc}")
                rows.append((stratum, len(sel), None, None, None, None))
        cio.write_csv(out / "ttest.csv", ("stratum", "n", "mean_difference", "t", "df", "p"), rows)

    if "cluster" in tasks:
        dv = cio._read_raw(run.product("exposure", "deviation.csv", "deviation"))
        curves: dict = {}
        for p, v in zip(dv["person_id"], dv["deviation"].astype(float)):
            curves.setdefault(p, []).append(v)
        try:
            res = cluster_deviations({p: np.array(v) for p, v in curves.items()}, int(a.k), cfg.seed,
                                     int(a.restarts), int(cfg.threads))
            cio.write_csv(out / "clusters.csv", ("person_id", "label"), sorted(res.assignments.items()))
            dev_g = parse_levels(a.deviation_gammas)
            cio.write_csv(out / "cluster_centroids.csv", ("label", "gamma", "deviation"),
                          ((lab, g, v) for lab, c in res.centroids.items() for g, v in zip(dev_g, c)))
            rep.rows += len(res.assignments)
        except CtxExposureError as exc:
            if isinstance(exc, ValidationError):
                raise
            rep.warnings.append(f"cluster: {exc}")

    need_acts = tasks & {"coverage", "overlap", "design", "maps"}
    if not need_acts:
        return
    people = load_activity_dir(run.product("activity", "activity", "activity_dir"))
    parts = cio.read_participants(run.source("participants"))
    dists = {p: people[p][0].inside for p in sorted(people) if people[p][0].inside.support}
    sex = {}
    for p in dists:
        if p in parts:
            sex[p] = parts[p][0]
        else:
            rep.warnings.append(f"person {p}: not in participants file")
    gammas = parse_levels(cfg.activity.gammas)

    if "coverage" in tasks:
        resample = None
        sizes = {}
        for s in sex.values():
            sizes[s] = sizes.get(s, 0) + 1
        if a.resample_size is not None and sizes:
            target = min(sizes.values()) if a.resample_size == "auto" else int(a.resample_size)
            resample = (target, int(a.resample_reps), cfg.seed)
        rows = coverage_curves({p: dists[p] for p in sex}, sex, gammas, resample, a.pooling)
        cio.write_csv(out / "coverage.csv", ("group", "gamma", "collective", "mean_individual", "q1", "q3"),
                      ((r["group"], r["gamma"], r["collective"], r["mean_individual"], r["q1"], r["q3"])
                       for r in rows))
        rep.rows += len(rows)

    pooled = {}
    for s in ("F", "M"):
        members = [p for p in sorted(sex) if sex[p] == s]
        if members:
            pooled[s] = pool([dists[p] for p in members], members, a.pooling)

    if "overlap" in tasks:
        if set(pooled) == {"F", "M"}:
            for g in parse_levels(a.overlap_levels):
                m = overlap_map(activity_space(pooled["F"], g), activity_space(pooled["M"], g))
                cio.write_csv(out / f"overlap_{g}.csv", ("cell_id", "category"), sorted(m.items()))
        else:
            rep.warnings.append("overlap: needs participants of both sexes")

    if "maps" in tasks:
        for s, d in pooled.items():
            v = log_activity_export(d, run.grid.n_cells, float(a.log_epsilon))
            cio.write_csv(out / f"group_activity_{s}.csv", ("cell_id", "log_proportion"), enumerate(v))

    if "design" in tasks:
        spaces, demo = {}, {}
        dg = [g for g in gammas if 50 <= g <= 95]
        for p in sorted(sex):
            start = people[p][3]
            if not start:
                continue
            day = datetime.fromisoformat(start.replace("Z", "+00:00")).astimezone(timezone.utc).date()
            demo[p] = (sex[p], _age_on(parts[p][1], day))
            spaces[p] = {g: len(activity_space(dists[p], g)) for g in dg}
        rows = export_design_table(spaces, demo)
        cio.write_csv(out / "design_table.csv", ("person_id", "sex", "age", "gamma", "n_cells"), rows)
        rep.rows += len(rows)


_STAGE_FUNCS = {
    "impute": stage_impute,
    "prevalence": stage_prevalence,
    "activity": stage_activity,
    "exposure": stage_exposure,
    "analyze": stage_analyze,
}


# ------------------------------------------------------------------
# run
# ------------------------------------------------------------------


def file_digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _versions():
    import pandas
    import scipy
    import sklearn
    return {"ctxexposure": __version__, "python": platform.python_version(), "numpy": np.__version__,
            "scipy": scipy.__version__, "pandas": pandas.__version__, "scikit-learn": sklearn.__version__}


def _publish(work: Path, dest: Path):
    """Move every file of ``work`` into ``dest`` (each move is a rename)."""
    dest.mkdir(parents=True, exist_ok=True)
    for src in sorted(p for p in work.rglob("*") if p.is_file()):
        target = dest / src.relative_to(work)
        target.parent.mkdir(parents=True, exist_ok=True)
        os.replace(src, target)


def run_pipeline(cfg: PipelineConfig, stages=None) -> dict:
    """Run ``stages`` (default: the configured ones) in dependency order.

    Returns the manifest dict, which is also written as ``manifest.json``.
    On failure nothing is written to the output directory and the error
    carries a ``stage`` attribute.
    """
    stages = tuple(stages or cfg.stages)
    order = [s for s in STAGES if s in stages]
    dest = Path(cfg.output_dir)
    if not dest.is_absolute():
        dest = Path(cfg.base_dir) / dest
    dest.parent.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    work = Path(tempfile.mkdtemp(prefix=".ctx-run-", dir=dest.parent))
    reports = []
    try:
        run = _Run(cfg, work)
        for name in order:
            rep = StageReport(name)
            ts = time.perf_counter()
            try:
                _STAGE_FUNCS[name](run, rep)
            except Exception as exc:
                exc.stage = name
                raise
            rep.wall_seconds = time.perf_counter() - ts
            for w in rep.warnings:
                log.warning("[%s] %s", name, w)
            reports.append(rep)
            run.done.add(name)
        outputs = {str(p.relative_to(work)): file_digest(p)
                   for p in sorted(work.rglob("*")) if p.is_file()}
        manifest = {
            "config_hash": cfg.digest(),
            "seed": cfg.seed,
            "threads": int(cfg.threads),
            "stages": [{"name": r.name, "rows": r.rows, "warnings": len(r.warnings),
                        "wall_seconds": round(r.wall_seconds, 6)} for r in reports],
            "warnings": [f"[{r.name}] {w}" for r in reports for w in r.warnings],
            "inputs": {k: {"path": str(p), "sha256": file_digest(p)}
                       for k, p in sorted(run.inputs_used.items()) if Path(p).is_file()},
            "outputs": outputs,
            "versions": _versions(),
            "wall_seconds": round(time.perf_counter() - t0, 6),
        }
        with open(work / "manifest.json", "w", encoding="utf-8") as fh:
            json.dump(manifest, fh, indent=2, sort_keys=True)
            fh.write("\n")
        _publish(work, dest)
        return manifest
    finally:
        shutil.rmtree(work, ignore_errors=True)


# ------------------------------------------------------------------
# validation
# ------------------------------------------------------------------


def validate_inputs(paths: dict, percent: bool = False, projection: Projection | None = None) -> dict:
    """Per-file findings (lists of :class:`~ctxexposure.io.Finding`) without computing anything.

    ``paths`` maps a file kind (see :data:`ctxexposure.io.FILE_KINDS`, plus
    ``"regions"``) to a path.
    """
    report = {}
    for kind, p in sorted(paths.items()):
        if p is None:
            continue
        if kind == "regions":
            try:
                load_regions(p, projection or Projection(0.0, 0.0))
                report[str(p)] = []
            except FileNotFoundError:
                report[str(p)] = [cio.Finding(str(p), None, None, "file not found")]
            except (CtxExposureError, ValueError, KeyError, TypeError) as exc:
                report[str(p)] = [cio.Finding(str(p), None, None, str(exc))]
            continue
        if kind not in cio.FILE_KINDS:
            raise ConfigError(f"unknown file kind {kind!r}")
        report[str(p)] = cio.check_file(p, kind, percent=percent and kind == "district_prevalence")
    return report


def config_inputs(cfg: PipelineConfig) -> dict:
    i = cfg.inputs
    return {k: cfg.path(getattr(i, k)) for k in
            ("tests", "rates", "participants", "homesteads", "residents", "fixes", "regions",
             "district_prevalence")}


def main_stage_error(exc) -> str:
    stage = getattr(exc, "stage", None)
    return f"[{stage}] {exc}" if stage else str(exc)


__all__ = [
    "PipelineConfig", "run_pipeline", "validate_inputs", "parse_levels", "homestead_counts",
    "load_activity_dir", "read_field", "STAGES",
]
