"""Kernel-smoothed grid-cell prevalence.

For cell ``i`` the prevalence is::

    sum_j w_ij * n_positive_j / sum_j w_ij * n_total_j,
    w_ij = exp(-d_ij**2 / (2 s**2))   for d_ij <= radius, else 0

with ``d_ij`` the distance (km) from the cell centroid to homestead ``j``.
Homesteads are visited in ascending id order and each one only touches the
cells inside its search radius, so every cell accumulates its terms in the
same order as a naive double loop would.
"""
from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_array, check_is_fitted

from .errors import ValidationError
from .grid import Grid, PlanarPoint

DEFAULT_BANDWIDTH_KM = 1.165
DEFAULT_RADIUS_KM = 3.0


@dataclass(frozen=True)
class KernelParams:
    s: float = DEFAULT_BANDWIDTH_KM
    radius: float = DEFAULT_RADIUS_KM

    def __post_init__(self):
        if not (self.s > 0 and self.radius > 0):
            raise ValidationError("kernel bandwidth and radius must be positive")
        if self.radius < self.s:
            raise ValidationError("search radius must be at least the bandwidth")


def kernel_weight(d, s: float, radius: float | None = None):
    """Gaussian weight ``exp(-d^2 / (2 s^2))`` for distance ``d`` in km.

    With ``radius`` given, distances beyond it get weight 0.
    """
    d = np.asarray(d, dtype=float)
    w = np.exp(-(d * d) / (2.0 * s * s))
    if radius is not None:
        w = np.where(d > radius, 0.0, w)
    return float(w) if w.ndim == 0 else w


@dataclass(frozen=True)
class HomesteadYear:
    homestead_id: object
    location: PlanarPoint
    period: int
    n_total: int
    n_positive: int

    def __post_init__(self):
        if not 0 <= self.n_positive <= self.n_total:
            raise ValidationError(
                f"homestead {self.homestead_id}: need 0 <= n_positive <= n_total")
        if not (math.isfinite(self.location[0]) and math.isfinite(self.location[1])):
            raise ValidationError(f"homestead {self.homestead_id}: non-finite location")


@dataclass(frozen=True)
class PrevalenceField:
    """Per-cell prevalence; ``NaN`` marks cells with no kernel weight."""

    grid: Grid
    period: int | None
    values: np.ndarray

    @property
    def missing(self) -> np.ndarray:
        return np.isnan(self.values)

    def value(self, cell: int):
        v = self.values[cell]
        return None if np.isnan(v) else float(v)


def id_order(ids) -> list:
    """Indices sorting homestead ids ascending (numerically when all are ints)."""
    ids = list(ids)
    if all(isinstance(i, (int, np.integer)) for i in ids):
        return sorted(range(len(ids)), key=lambda k: ids[k])
    return sorted(range(len(ids)), key=lambda k: str(ids[k]))


def _accumulate_band(grid, hx, hy, npos, ntot, params, row_lo, row_hi):
    r_m = params.radius * 1000.0
    offset = row_lo * grid.n_cols
    num = np.zeros((row_hi - row_lo) * grid.n_cols)
    den = np.zeros_like(num)
    for x, y, p, t in zip(hx, hy, npos, ntot):
        if t == 0:
            continue
        ids, d = grid.cells_within(x, y, r_m, rows=(row_lo, row_hi))
        if not len(ids):
            continue
        ids -= offset
        w = kernel_weight(d / 1000.0, params.s)
        num[ids] += w * p
        den[ids] += w * t
    return num, den


def prevalence_field(grid: Grid, homesteads, params: KernelParams | None = None,
                     threads: int = 1) -> PrevalenceField:
    """Indexed kernel prevalence over every cell of ``grid``."""
    params = params or KernelParams()
    homesteads = list(homesteads)
    periods = {h.period for h in homesteads}
    if len(periods) > 1:
        raise ValidationError(f"homesteads span several periods: {sorted(periods)}")
    order = id_order([h.homestead_id for h in homesteads])
    hx = [float(homesteads[k].location[0]) for k in order]
    hy = [float(homesteads[k].location[1]) for k in order]
    npos = [int(homesteads[k].n_positive) for k in order]
    ntot = [int(homesteads[k].n_total) for k in order]

    n_bands = max(1, min(int(threads), grid.n_rows))
    edges = np.linspace(0, grid.n_rows, n_bands + 1).round().astype(int)
    bands = [(int(a), int(b)) for a, b in zip(edges[:-1], edges[1:]) if b > a]

    def run(band):
        return _accumulate_band(grid, hx, hy, npos, ntot, params, *band)

    if len(bands) > 1:
        with ThreadPoolExecutor(max_workers=len(bands)) as pool:
            parts = list(pool.map(run, bands))
    else:
        parts = [run(b) for b in bands]
    num = np.concatenate([p[0] for p in parts])
    den = np.concatenate([p[1] for p in parts])
    values = np.full(grid.n_cells, np.nan)
    ok = den > 0
    values[ok] = num[ok] / den[ok]
    return PrevalenceField(grid, periods.pop() if periods else None, values)


class KernelPrevalenceEstimator(BaseEstimator):
    """Scikit-learn style front end to the kernel prevalence smoother.

    ``fit(X, y, sample_weight)`` takes homestead coordinates in meters
    (shape ``(n, 2)``), the positive share ``y`` and resident counts as
    ``sample_weight``.  ``predict`` evaluates prevalence at arbitrary
    points; ``field`` evaluates it on every cell of a grid.
    """

    def __init__(self, bandwidth_km=DEFAULT_BANDWIDTH_KM, radius_km=DEFAULT_RADIUS_KM, n_jobs=1):
        self.bandwidth_km = bandwidth_km
        self.radius_km = radius_km
        self.n_jobs = n_jobs

    def fit(self, X, y, sample_weight=None):
        X = check_array(X, dtype=float)
        if X.shape[1] != 2:
            raise ValidationError("X must have two columns (x, y in meters)")
        y = np.asarray(y, dtype=float)
        w = np.ones(len(X)) if sample_weight is None else np.asarray(sample_weight, dtype=float)
        if y.shape != (len(X),) or w.shape != (len(X),):
            raise ValidationError("y and sample_weight must match X in length")
        if np.any((y < 0) | (y > 1)) or np.any(w < 0):
            raise ValidationError("y must be in [0, 1] and sample_weight non-negative")
        self.params_ = KernelParams(self.bandwidth_km, self.radius_km)
        self.locations_ = X
        self.n_total_ = w
        self.n_positive_ = y * w
        self.tree_ = cKDTree(X)
        return self

    def predict(self, X):
        check_is_fitted(self, "tree_")
        X = check_array(X, dtype=float)
        r_m = self.params_.radius * 1000.0
        out = np.full(len(X), np.nan)
        for i, nbrs in enumerate(self.tree_.query_ball_point(X, r_m)):
            if not nbrs:
                continue
            nbrs = np.sort(np.asarray(nbrs, dtype=int))
            dx = X[i, 0] - self.locations_[nbrs, 0]
            dy = X[i, 1] - self.locations_[nbrs, 1]
            d = np.sqrt(dx * dx + dy * dy)
            keep = d <= r_m
            w = kernel_weight(d[keep] / 1000.0, self.params_.s)
            den = float(np.sum(w * self.n_total_[nbrs][keep]))
            if den > 0:
                out[i] = float(np.sum(w * self.n_positive_[nbrs][keep])) / den
        return out

    def field(self, grid: Grid, period=None) -> PrevalenceField:
        check_is_fitted(self, "tree_")
        hs = [HomesteadYear(i, PlanarPoint(*xy), period, int(round(t)), int(round(p)))
              for i, (xy, t, p) in enumerate(zip(self.locations_, self.n_total_, self.n_positive_))]
        return prevalence_field(grid, hs, self.params_, threads=self.n_jobs)
