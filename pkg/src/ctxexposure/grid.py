"""Planar coordinates, the regular study grid and region lookup.

All geometry is done in planar meters.  Longitude/latitude inputs are
converted once, at ingestion, with a local equirectangular projection.
Cells are half-open squares ``[a, a + cell_size)`` on both axes and are
numbered row-major from the grid origin (south-west corner).
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np

from .errors import InvalidCoordinateError, SchemaError, ValidationError

EARTH_RADIUS_M = 6_371_000.0

#: Returned by :meth:`Grid.locate` for points outside the observation window.
OUTSIDE_WINDOW = -1


class PlanarPoint(NamedTuple):
    x: float
    y: float


# ------------------------------------------------------------------
# projection
# ------------------------------------------------------------------


def project(lon, lat, ref_lat, origin_lon=0.0, origin_lat=0.0):
    """Equirectangular projection of ``(lon, lat)`` to planar meters.

    ``x = R cos(ref_lat) dlon``, ``y = R dlat`` with angles in radians,
    measured from ``(origin_lon, origin_lat)``.  Scalars give a
    :class:`PlanarPoint`; arrays give a pair of arrays.
    """
    lon_a = np.asarray(lon, dtype=float)
    lat_a = np.asarray(lat, dtype=float)
    if not (np.all(np.isfinite(lon_a)) and np.all(np.isfinite(lat_a))):
        raise InvalidCoordinateError("non-finite longitude/latitude")
    if not math.isfinite(ref_lat) or abs(ref_lat) >= 90:
        raise InvalidCoordinateError(f"reference latitude {ref_lat!r} out of range")
    if np.any(np.abs(lat_a) >= 90):
        raise InvalidCoordinateError("latitude must satisfy |lat| < 90")
    kx = EARTH_RADIUS_M * math.cos(math.radians(ref_lat)) * math.pi / 180.0
    ky = EARTH_RADIUS_M * math.pi / 180.0
    x = (lon_a - origin_lon) * kx
    y = (lat_a - origin_lat) * ky
    if x.ndim == 0:
        return PlanarPoint(float(x), float(y))
    return x, y


def unproject(x, y, ref_lat, origin_lon=0.0, origin_lat=0.0):
    """Inverse of :func:`project`."""
    kx = EARTH_RADIUS_M * math.cos(math.radians(ref_lat)) * math.pi / 180.0
    ky = EARTH_RADIUS_M * math.pi / 180.0
    lon = np.asarray(x, dtype=float) / kx + origin_lon
    lat = np.asarray(y, dtype=float) / ky + origin_lat
    if lon.ndim == 0:
        return float(lon), float(lat)
    return lon, lat


@dataclass(frozen=True)
class Projection:
    """A configured local projection (origin plus reference latitude)."""

    origin_lon: float
    origin_lat: float
    ref_lat: float | None = None

    @property
    def reference_latitude(self) -> float:
        return self.origin_lat if self.ref_lat is None else self.ref_lat

    def forward(self, lon, lat):
        return project(lon, lat, self.reference_latitude, self.origin_lon, self.origin_lat)

    def inverse(self, x, y):
        return unproject(x, y, self.reference_latitude, self.origin_lon, self.origin_lat)


# ------------------------------------------------------------------
# grid
# ------------------------------------------------------------------


@dataclass(frozen=True)
class Grid:
    origin: PlanarPoint
    cell_size: float
    n_cols: int
    n_rows: int

    def __post_init__(self):
        if not (self.cell_size > 0 and math.isfinite(self.cell_size)):
            raise ValidationError(f"cell_size must be positive, got {self.cell_size!r}")
        if self.n_cols <= 0 or self.n_rows <= 0:
            raise ValidationError("grid needs at least one row and one column")
        if not (math.isfinite(self.origin[0]) and math.isfinite(self.origin[1])):
            raise InvalidCoordinateError("grid origin must be finite")
        object.__setattr__(self, "origin", PlanarPoint(float(self.origin[0]), float(self.origin[1])))

    @property
    def n_cells(self) -> int:
        return self.n_cols * self.n_rows

    @property
    def width(self) -> float:
        return self.n_cols * self.cell_size

    @property
    def height(self) -> float:
        return self.n_rows * self.cell_size

    def cell_id(self, col, row):
        return row * self.n_cols + col

    def col_row(self, cell):
        return cell % self.n_cols, cell // self.n_cols

    def centroid(self, cell: int) -> PlanarPoint:
        if not 0 <= cell < self.n_cells:
            raise IndexError(f"cell {cell} outside grid of {self.n_cells} cells")
        col, row = self.col_row(cell)
        return PlanarPoint(self.origin.x + (col + 0.5) * self.cell_size,
                           self.origin.y + (row + 0.5) * self.cell_size)

    def centroids(self):
        """Arrays ``(cx, cy)`` of all cell centroids, indexed by cell id."""
        cols = np.arange(self.n_cols)
        rows = np.arange(self.n_rows)
        cx = self.origin.x + (cols + 0.5) * self.cell_size
        cy = self.origin.y + (rows + 0.5) * self.cell_size
        return np.tile(cx, self.n_rows), np.repeat(cy, self.n_cols)

    def locate(self, p) -> int:
        col = math.floor((p[0] - self.origin.x) / self.cell_size)
        row = math.floor((p[1] - self.origin.y) / self.cell_size)
        if 0 <= col < self.n_cols and 0 <= row < self.n_rows:
            return row * self.n_cols + col
        return OUTSIDE_WINDOW

    def locate_xy(self, x, y) -> np.ndarray:
        """Vectorized :meth:`locate`; ``OUTSIDE_WINDOW`` marks misses."""
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        col = np.floor((x - self.origin.x) / self.cell_size)
        row = np.floor((y - self.origin.y) / self.cell_size)
        ok = (col >= 0) & (col < self.n_cols) & (row >= 0) & (row < self.n_rows)
        out = np.full(x.shape, OUTSIDE_WINDOW, dtype=np.int64)
        out[ok] = row[ok].astype(np.int64) * self.n_cols + col[ok].astype(np.int64)
        return out

    def _axis_range(self, center, offset, r, n):
        # centroid index k sits at offset + (k + 0.5) * cell_size; widen by one
        # and let the exact distance filter decide
        lo = math.floor((center - r - offset) / self.cell_size - 0.5) - 1
        hi = math.ceil((center + r - offset) / self.cell_size - 0.5) + 1
        return max(lo, 0), min(hi, n - 1)

    def cells_within(self, x: float, y: float, r: float, rows=None):
        """Cell ids and centroid distances within ``r`` of ``(x, y)``.

        Only the bounding block of candidate cells is examined, so the work
        is proportional to the number of cells in the disc rather than the
        grid size.  Ids come out in ascending order.  ``rows=(lo, hi)``
        restricts the search to rows ``lo <= row < hi``.
        """
        c0, c1 = self._axis_range(x, self.origin.x, r, self.n_cols)
        r0, r1 = self._axis_range(y, self.origin.y, r, self.n_rows)
        if rows is not None:
            r0, r1 = max(r0, rows[0]), min(r1, rows[1] - 1)
        if c0 > c1 or r0 > r1:
            return np.empty(0, dtype=np.int64), np.empty(0)
        cols = np.arange(c0, c1 + 1)
        rows = np.arange(r0, r1 + 1)
        dx = self.origin.x + (cols + 0.5) * self.cell_size - x
        dy = self.origin.y + (rows + 0.5) * self.cell_size - y
        d = np.sqrt(dx[None, :] * dx[None, :] + dy[:, None] * dy[:, None])
        keep = d <= r
        ids = rows[:, None] * self.n_cols + cols[None, :]
        return ids[keep].astype(np.int64), d[keep]

    def radius_query(self, p, r: float):
        """``[(cell_id, distance), ...]`` for centroids within ``r`` of ``p``."""
        if not r > 0:
            raise ValidationError(f"radius must be positive, got {r!r}")
        ids, d = self.cells_within(float(p[0]), float(p[1]), float(r))
        return list(zip(ids.tolist(), d.tolist()))


# ------------------------------------------------------------------
# regions
# ------------------------------------------------------------------


class Region(NamedTuple):
    kind: str
    district_id: str | None = None


INSIDE = Region("inside")
UNMAPPED = Region("unmapped")


def District(district_id) -> Region:
    return Region("district", str(district_id))


#: Integer codes returned by :meth:`RegionIndex.classify_xy`.  Districts are
#: numbered ``1..n`` in ascending district id order.
CODE_UNMAPPED = -1
CODE_INSIDE = 0


def _as_rings(polygon):
    """Normalize a polygon (a ring or a list of rings) to float arrays."""
    arr = polygon
    if isinstance(arr, np.ndarray) and arr.ndim == 2:
        rings = [arr]
    elif len(arr) and np.ndim(arr[0]) == 1:
        rings = [arr]
    else:
        rings = list(arr)
    out = []
    for ring in rings:
        ring = np.asarray(ring, dtype=float)
        if ring.ndim != 2 or ring.shape[1] != 2 or len(ring) < 3:
            raise ValidationError("polygon rings need at least three (x, y) vertices")
        if not np.all(np.isfinite(ring)):
            raise InvalidCoordinateError("non-finite polygon vertex")
        if np.array_equal(ring[0], ring[-1]):
            ring = ring[:-1]
        out.append(ring)
    return out


def points_in_rings(rings, x, y) -> np.ndarray:
    """Even-odd rule membership of points ``(x, y)`` in a set of rings."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    inside = np.zeros(x.shape, dtype=bool)
    for ring in rings:
        x1 = ring[:, 0]
        y1 = ring[:, 1]
        x0 = np.roll(x1, 1)
        y0 = np.roll(y1, 1)
        with np.errstate(divide="ignore", invalid="ignore"):
            for xa, ya, xb, yb in zip(x0, y0, x1, y1):
                crosses = (ya > y) != (yb > y)
                if not crosses.any():
                    continue
                xint = xa + (y - ya) * (xb - xa) / (yb - ya)
                inside ^= crosses & (x < xint)
    return inside


@dataclass(frozen=True)
class _Polygon:
    rings: list
    bbox: tuple

    @classmethod
    def build(cls, polygon):
        rings = _as_rings(polygon)
        allv = np.vstack(rings)
        return cls(rings, (allv[:, 0].min(), allv[:, 1].min(), allv[:, 0].max(), allv[:, 1].max()))

    def contains_xy(self, x, y):
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        xmin, ymin, xmax, ymax = self.bbox
        cand = (x >= xmin) & (x <= xmax) & (y >= ymin) & (y <= ymax)
        out = np.zeros(x.shape, dtype=bool)
        if cand.any():
            out[cand] = points_in_rings(self.rings, x[cand], y[cand])
        return out


@dataclass(frozen=True)
class RegionIndex:
    """Study-area polygon plus district polygons, all in planar meters.

    A polygon is either a single ring ``[(x, y), ...]`` or a list of rings
    (outer ring and holes, or several parts).  Membership uses the even-odd
    rule over all rings of a polygon.
    """

    study_area: object
    districts: dict = field(default_factory=dict)

    def __post_init__(self):
        ids = sorted({str(k) for k in self.districts})
        if len(ids) != len(self.districts):
            raise ValidationError("district ids must be unique as strings")
        by_str = {str(k): v for k, v in self.districts.items()}
        object.__setattr__(self, "_study", _Polygon.build(self.study_area))
        object.__setattr__(self, "district_ids", ids)
        object.__setattr__(self, "_districts", [_Polygon.build(by_str[i]) for i in ids])

    def classify_xy(self, x, y) -> np.ndarray:
        """Vectorized region codes; see ``CODE_*`` and ``district_ids``."""
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        code = np.full(x.shape, CODE_UNMAPPED, dtype=np.int64)
        inside = self._study.contains_xy(x, y)
        code[inside] = CODE_INSIDE
        todo = ~inside
        for k, poly in enumerate(self._districts, start=1):
            if not todo.any():
                break
            hit = np.zeros(x.shape, dtype=bool)
            hit[todo] = poly.contains_xy(x[todo], y[todo])
            code[hit] = k
            todo &= ~hit
        return code

    def region_of(self, p) -> Region:
        code = int(self.classify_xy(np.array([p[0]]), np.array([p[1]]))[0])
        return self.region_from_code(code)

    def region_from_code(self, code: int) -> Region:
        if code == CODE_INSIDE:
            return INSIDE
        if code == CODE_UNMAPPED:
            return UNMAPPED
        return District(self.district_ids[code - 1])


def region_of(idx: RegionIndex, p) -> Region:
    return idx.region_of(p)


def locate(grid: Grid, p) -> int:
    return grid.locate(p)


def radius_query(grid: Grid, p, r: float):
    return grid.radius_query(p, r)


# ------------------------------------------------------------------
# GeoJSON
# ------------------------------------------------------------------

STUDY_AREA_ROLE = "study_area"


def _geometry_rings(geom, path):
    gtype = geom.get("type")
    coords = geom.get("coordinates")
    if gtype == "Polygon":
        return [np.asarray(r, dtype=float)[:, :2] for r in coords]
    if gtype == "MultiPolygon":
        return [np.asarray(r, dtype=float)[:, :2] for poly in coords for r in poly]
    raise SchemaError(f"unsupported geometry type {gtype!r}", path=path)


def load_regions(path, projection: Projection) -> RegionIndex:
    """Read a GeoJSON FeatureCollection of lon/lat polygons.

    The study area is the feature whose ``role`` property is
    ``"study_area"``; every other feature must carry ``district_id``.
    Multiple study-area features are merged as extra rings.
    """
    path = Path(path)
    with open(path, encoding="utf-8") as fh:
        doc = json.load(fh)
    features = doc.get("features") if isinstance(doc, dict) else None
    if features is None:
        raise SchemaError("expected a GeoJSON FeatureCollection", path=path)
    study = []
    districts: dict = {}
    for i, feat in enumerate(features):
        props = feat.get("properties") or {}
        rings = _geometry_rings(feat.get("geometry") or {}, path)
        planar = []
        for ring in rings:
            x, y = projection.forward(ring[:, 0], ring[:, 1])
            planar.append(np.column_stack([x, y]))
        if props.get("role") == STUDY_AREA_ROLE:
            study.extend(planar)
            continue
        did = props.get("district_id")
        if did is None:
            raise SchemaError("feature lacks district_id", path=path, column="district_id", row=i)
        did = str(did)
        districts.setdefault(did, []).extend(planar)
    if not study:
        raise SchemaError("no feature with role=study_area", path=path)
    return RegionIndex(study, districts)


def regions_to_geojson(idx_rings_study, districts, projection: Projection) -> dict:
    """Build a FeatureCollection from planar rings (used by the generator)."""

    def to_lonlat(ring):
        ring = np.asarray(ring, dtype=float)
        lon, lat = projection.inverse(ring[:, 0], ring[:, 1])
        coords = np.column_stack([lon, lat]).tolist()
        if coords[0] != coords[-1]:
            coords.append(coords[0])
        return coords

    feats = [{
        "type": "Feature",
        "properties": {"role": STUDY_AREA_ROLE},
        "geometry": {"type": "Polygon", "coordinates": [to_lonlat(r) for r in idx_rings_study]},
    }]
    for did in sorted(districts):
        feats.append({
            "type": "Feature",
            "properties": {"district_id": did},
            "geometry": {"type": "Polygon", "coordinates": [to_lonlat(r) for r in districts[did]]},
        })
    return {"type": "FeatureCollection", "features": feats}
