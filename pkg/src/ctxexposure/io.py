"""CSV schemas, validation and readers/writers.

Every file is UTF-8, comma separated, with a header row.  Row numbers in
findings are file line numbers (the header is line 1).  Missing values are
written as empty fields.
"""
from __future__ import annotations

import csv
import math
import os
from dataclasses import dataclass
from datetime import date
from pathlib import Path

import numpy as np
import pandas as pd

from .activity import FixSequence
from .errors import SchemaError
from .grid import Projection
from .imputation import AgeGroup, RateTable, SurveillanceRecord


@dataclass(frozen=True)
class Finding:
    path: str
    row: int | None
    column: str | None
    message: str

    def __str__(self):
        loc = self.path
        if self.row is not None:
            loc += f":{self.row}"
        if self.column:
            loc += f" [{self.column}]"
        return f"{loc}: {self.message}"


# column checkers: Series[str] -> bool mask of valid entries


def _nonempty(s):
    return s.str.len() > 0


def _optional(check):
    def inner(s):
        return (s.str.len() == 0) | check(s)
    return inner


def _iso_date(s):
    return pd.to_datetime(s, format="%Y-%m-%d", errors="coerce").notna()


def _iso_timestamp(s):
    return pd.to_datetime(s, format="ISO8601", utc=True, errors="coerce").notna()


def _number(s, lo=-np.inf, hi=np.inf):
    v = pd.to_numeric(s, errors="coerce")
    return v.notna() & np.isfinite(v) & (v >= lo) & (v <= hi)


def _integer(s):
    v = pd.to_numeric(s, errors="coerce")
    return v.notna() & np.isfinite(v) & (v == np.round(v))


def _choice(*allowed):
    return lambda s: s.isin(allowed)


def _age_group(s):
    def ok(v):
        try:
            AgeGroup.parse(v)
            return True
        except Exception:  # noqa: BLE001
            return False
    return s.map(ok).astype(bool)


def _prob(percent=False):
    hi = 100.0 if percent else 1.0
    return lambda s: _number(s, 0.0, hi)


def schema(kind: str, percent: bool = False):
    """Ordered ``(column, checker, description)`` triples for a file kind."""
    lon = (lambda s: _number(s, -180, 180), "longitude in [-180, 180]")
    lat = (lambda s: _number(s, -90, 90) & (pd.to_numeric(s, errors="coerce").abs() < 90), "latitude in (-90, 90)")
    unit = "percent in [0, 100]" if percent else "proportion in [0, 1]"
    table = {
        "tests": [
            ("person_id", _nonempty, "non-empty id"),
            ("sex", _choice("M", "F"), "M or F"),
            ("birth_date", _iso_date, "ISO-8601 date"),
            ("entry_date", _iso_date, "ISO-8601 date"),
            ("exit_date", _iso_date, "ISO-8601 date"),
            ("test_date", _optional(_iso_date), "ISO-8601 date or empty"),
            ("result", _choice("neg", "pos", ""), "neg, pos or empty"),
        ],
        "rates": [
            ("sex", _choice("M", "F"), "M or F"),
            ("age_group", _age_group, "age group 'lo-hi' or 'lo+'"),
            ("period", _integer, "integer year"),
            ("prevalence", _prob(), "proportion in [0, 1]"),
            ("incidence", _prob(), "proportion in [0, 1]"),
        ],
        "homesteads": [
            ("homestead_id", _nonempty, "non-empty id"),
            ("lon", *lon),
            ("lat", *lat),
        ],
        "residents": [
            ("person_id", _nonempty, "non-empty id"),
            ("homestead_id", _nonempty, "non-empty id"),
            ("period", _integer, "integer year"),
        ],
        "status": [
            ("person_id", _nonempty, "non-empty id"),
            ("period", _integer, "integer year"),
            ("status", _choice("0", "1"), "0 or 1"),
        ],
        "fixes": [
            ("person_id", _nonempty, "non-empty id"),
            ("timestamp", _iso_timestamp, "ISO-8601 timestamp"),
            ("lon", *lon),
            ("lat", *lat),
        ],
        "district_prevalence": [
            ("district_id", _nonempty, "non-empty id"),
            ("prevalence", _prob(percent), unit),
        ],
        "participants": [
            ("person_id", _nonempty, "non-empty id"),
            ("sex", _choice("M", "F"), "M or F"),
            ("birth_date", _iso_date, "ISO-8601 date"),
        ],
    }
    if kind not in table:
        raise ValueError(f"unknown file kind {kind!r}")
    return table[kind]


FILE_KINDS = ("tests", "rates", "homesteads", "residents", "status", "fixes",
              "district_prevalence", "participants")


def _read_raw(path):
    return pd.read_csv(path, dtype=str, keep_default_na=False, na_filter=False, encoding="utf-8")


def check_frame(df: pd.DataFrame, kind: str, path, percent=False, limit=None):
    findings = []
    cols = schema(kind, percent)
    for name, _, _ in cols:
        if name not in df.columns:
            findings.append(Finding(str(path), 1, name, "missing required column"))
    if findings:
        return findings
    for name, check, desc in cols:
        s = df[name].str.strip()
        ok = np.asarray(check(s), dtype=bool)
        bad = np.flatnonzero(~ok)
        for i in bad[: limit or len(bad)]:
            findings.append(Finding(str(path), int(i) + 2, name, f"expected {desc}, got {df[name].iloc[i]!r}"))
    if kind == "tests":
        both = (df["test_date"].str.len() == 0) != (df["result"].str.len() == 0)
        for i in np.flatnonzero(both.to_numpy())[: limit or None]:
            findings.append(Finding(str(path), int(i) + 2, "result", "test_date and result must both be set or both empty"))
    findings.sort(key=lambda f: (f.row or 0, f.column or ""))
    return findings


def check_file(path, kind: str, percent=False, limit=20):
    """Schema/type/range findings for one file; empty when valid."""
    path = Path(path)
    if not path.exists():
        return [Finding(str(path), None, None, "file not found")]
    try:
        df = _read_raw(path)
    except Exception as exc:  # noqa: BLE001 - report any parse failure
        return [Finding(str(path), None, None, f"unreadable CSV: {exc}")]
    return check_frame(df, kind, path, percent, limit)


def load_table(path, kind: str, percent=False) -> pd.DataFrame:
    """Read and validate; raises :class:`SchemaError` at the first finding."""
    path = Path(path)
    if not path.exists():
        raise SchemaError("file not found", path=path)
    df = _read_raw(path)
    findings = check_frame(df, kind, path, percent, limit=1)
    if findings:
        f = findings[0]
        raise SchemaError(f.message, path=f.path, column=f.column, row=f.row)
    for name, _, _ in schema(kind, percent):
        df[name] = df[name].str.strip()
    return df


# ------------------------------------------------------------------
# typed readers
# ------------------------------------------------------------------


def _date(s: str) -> date:
    return date.fromisoformat(s)


def read_tests(path) -> list:
    df = load_table(path, "tests")
    people = {}
    for row, r in enumerate(df.itertuples(index=False), start=2):
        key = (r.sex, r.birth_date, r.entry_date, r.exit_date)
        cur = people.setdefault(r.person_id, {"key": key, "tests": [], "row": row})
        if cur["key"] != key:
            raise SchemaError(f"person {r.person_id} has inconsistent demographic fields",
                              path=path, column="person_id", row=row)
        if r.test_date:
            cur["tests"].append((_date(r.test_date).year, r.result == "pos"))
    records = []
    for pid in sorted(people):
        sex, birth, entry, exit_ = people[pid]["key"]
        records.append(SurveillanceRecord(pid, sex, _date(birth), _date(entry).year, _date(exit_).year,
                                          tuple(people[pid]["tests"])))
    return records


def read_rates(path) -> RateTable:
    df = load_table(path, "rates")
    rates = {}
    for row, r in enumerate(df.itertuples(index=False), start=2):
        key = (r.sex, r.age_group, int(float(r.period)))
        if key in rates:
            raise SchemaError(f"duplicate rate entry {key}", path=path, row=row)
        rates[key] = (float(r.prevalence), float(r.incidence))
    return RateTable(rates)


def read_homesteads(path, projection: Projection) -> dict:
    df = load_table(path, "homesteads")
    if df["homestead_id"].duplicated().any():
        row = int(np.flatnonzero(df["homestead_id"].duplicated().to_numpy())[0]) + 2
        raise SchemaError("duplicate homestead_id", path=path, column="homestead_id", row=row)
    x, y = projection.forward(df["lon"].astype(float).to_numpy(), df["lat"].astype(float).to_numpy())
    return {h: (float(a), float(b)) for h, a, b in zip(df["homestead_id"], x, y)}


def read_residents(path) -> pd.DataFrame:
    df = load_table(path, "residents")
    df["period"] = df["period"].astype(float).astype(int)
    return df


def read_status(path) -> dict:
    df = load_table(path, "status")
    return {(p, int(float(t))): int(s) for p, t, s in zip(df["person_id"], df["period"], df["status"])}


def read_fixes(path, projection: Projection) -> list:
    df = load_table(path, "fixes")
    ts = pd.to_datetime(df["timestamp"], format="ISO8601", utc=True)
    secs = (ts - pd.Timestamp("1970-01-01", tz="UTC")).dt.total_seconds().to_numpy()
    x, y = projection.forward(df["lon"].astype(float).to_numpy(), df["lat"].astype(float).to_numpy())
    pid = df["person_id"].to_numpy()
    order = np.lexsort((secs, pid))
    pid, secs, x, y = pid[order], secs[order], x[order], y[order]
    out = []
    bounds = np.flatnonzero(pid[1:] != pid[:-1]) + 1
    for a, b in zip(np.r_[0, bounds], np.r_[bounds, len(pid)]):
        if b <= a:
            continue
        t = secs[a:b]
        if np.any(np.diff(t) == 0):
            dup = order[a + int(np.flatnonzero(np.diff(t) == 0)[0]) + 1]
            raise SchemaError(f"duplicate timestamp for person {pid[a]}", path=path,
                              column="timestamp", row=int(dup) + 2)
        out.append(FixSequence(str(pid[a]), t, x[a:b], y[a:b]))
    return out


def read_district_prevalence(path, percent=False) -> dict:
    df = load_table(path, "district_prevalence", percent)
    scale = 100.0 if percent else 1.0
    return {d: float(v) / scale for d, v in zip(df["district_id"], df["prevalence"])}


def read_participants(path) -> dict:
    df = load_table(path, "participants")
    return {p: (s, _date(b)) for p, s, b in zip(df["person_id"], df["sex"], df["birth_date"])}


# ------------------------------------------------------------------
# writing
# ------------------------------------------------------------------


def fmt(v) -> str:
    """Deterministic text for one CSV field (shortest round-trip floats)."""
    if v is None:
        return ""
    if isinstance(v, (bool, np.bool_)):
        return "1" if v else "0"
    if isinstance(v, (float, np.floating)):
        v = float(v)
        if math.isnan(v):
            return ""
        if v == 0:
            return "0.0"
        return repr(v)
    if isinstance(v, np.integer):
        return str(int(v))
    return str(v)


def write_csv(path, header, rows):
    """Write rows through a temp file and rename into place."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".part")
    with open(tmp, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([fmt(v) for v in r])
    os.replace(tmp, path)
    return path


def iso_utc(seconds) -> np.ndarray:
    """Epoch seconds -> ``YYYY-MM-DDTHH:MM:SS[.ffffff]Z`` strings."""
    ts = pd.to_datetime(np.asarray(seconds, dtype=float), unit="s", utc=True)
    whole = np.all(np.asarray(seconds, dtype=float) == np.floor(seconds))
    fmt_ = "%Y-%m-%dT%H:%M:%SZ" if whole else "%Y-%m-%dT%H:%M:%S.%fZ"
    return ts.strftime(fmt_).to_numpy()
