"""Grid geometry, spherical distances and latitude weighting."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

EARTH_RADIUS_KM = 6371.0072
CUTOFF_FACTOR = np.sqrt(10.0 / 3.0)

DEFAULT_LEVELS_HPA = (925.0, 850.0, 700.0, 600.0, 500.0, 250.0, 50.0)


@dataclass(frozen=True)
class GeoPoint:
    lat_deg: float
    lon_deg: float
    pressure_hpa: float | None = None

    def __post_init__(self):
        if not -90.0 <= self.lat_deg <= 90.0:
            raise ValueError(f"latitude out of range: {self.lat_deg}")
        if self.pressure_hpa is not None and not self.pressure_hpa > 0:
            raise ValueError(f"pressure must be positive: {self.pressure_hpa}")
        object.__setattr__(self, "lon_deg", normalize_lon(self.lon_deg))


def normalize_lon(lon):
    """Map longitudes onto [0, 360)."""
    out = np.mod(lon, 360.0)
    # np.mod(-1e-20, 360) rounds to 360.0
    out = np.where(out >= 360.0, 0.0, out)
    return float(out) if np.ndim(out) == 0 else out


def great_circle_km(lat1, lon1, lat2, lon2, radius=EARTH_RADIUS_KM):
    """Vectorised great-circle distance in km (broadcasts like numpy).

    Uses the atan2 (Vincenty sphere) form, which stays accurate for both
    coincident and antipodal points.
    """
    p1, l1 = np.radians(lat1), np.radians(lon1)
    p2, l2 = np.radians(lat2), np.radians(lon2)
    dl = l2 - l1
    sp1, cp1 = np.sin(p1), np.cos(p1)
    sp2, cp2 = np.sin(p2), np.cos(p2)
    cdl, sdl = np.cos(dl), np.sin(dl)
    num = np.hypot(cp2 * sdl, cp1 * sp2 - sp1 * cp2 * cdl)
    den = sp1 * sp2 + cp1 * cp2 * cdl
    return radius * np.arctan2(num, den)


def _unit_vectors(lat, lon):
    p, l = np.radians(np.asarray(lat, float)), np.radians(np.asarray(lon, float))
    return np.column_stack([np.cos(p) * np.cos(l), np.cos(p) * np.sin(l), np.sin(p)])


def pairs_within(lat1, lon1, lat2, lon2, max_km, radius=EARTH_RADIUS_KM):
    """All (i, j) with great-circle distance between point i of set 1 and point j of set 2 below max_km.

    Candidates come from a KD-tree on unit vectors with a slightly padded
    chord radius; distances are then recomputed exactly, so the result is the
    same as a brute-force scan.  Returns (i, j, distance_km) sorted by (i, j).
    """
    lat1, lon1 = np.ravel(lat1), np.ravel(lon1)
    lat2, lon2 = np.ravel(lat2), np.ravel(lon2)
    empty = (np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64), np.zeros(0))
    if lat1.size == 0 or lat2.size == 0 or max_km <= 0:
        return empty
    chord = 2.0 * np.sin(min(max_km / radius, np.pi) / 2.0) * (1.0 + 1e-9) + 1e-12
    t1, t2 = cKDTree(_unit_vectors(lat1, lon1)), cKDTree(_unit_vectors(lat2, lon2))
    hits = t1.sparse_distance_matrix(t2, chord, output_type="ndarray")
    i, j = hits["i"].astype(np.int64), hits["j"].astype(np.int64)
    key = np.unique(i * lat2.size + j)
    i, j = key // lat2.size, key % lat2.size
    d = great_circle_km(lat1[i], lon1[i], lat2[j], lon2[j], radius)
    keep = d < max_km
    return i[keep], j[keep], d[keep]


def great_circle_distance(a: GeoPoint, b: GeoPoint) -> float:
    return float(great_circle_km(a.lat_deg, a.lon_deg, b.lat_deg, b.lon_deg))


def log_pressure_distance(p1, p2):
    """|ln p1 - ln p2| for pressures in hPa."""
    p1 = np.asarray(p1, dtype=float)
    p2 = np.asarray(p2, dtype=float)
    if np.any(p1 <= 0) or np.any(p2 <= 0):
        raise ValueError("pressures must be positive")
    d = np.abs(np.log(p1) - np.log(p2))
    return float(d) if d.ndim == 0 else d


def gaussian_cutoff_weight(d_h, d_v, scale_h, scale_v):
    """Gaussian in both coordinates, hard zero at sqrt(10/3) scale in either.

    Shared by the LETKF localization and the thinning distance weight.
    """
    d_h = np.asarray(d_h, dtype=float)
    d_v = np.asarray(d_v, dtype=float)
    inside = (d_h < CUTOFF_FACTOR * scale_h) & (d_v < CUTOFF_FACTOR * scale_v)
    w = np.where(inside, np.exp(-0.5 * ((d_h / scale_h) ** 2 + (d_v / scale_v) ** 2)), 0.0)
    return float(w) if w.ndim == 0 else w


def latitude_weights(lats) -> np.ndarray:
    """cos(lat) normalised so the weights average to one."""
    lats = np.atleast_1d(np.asarray(lats, dtype=float))
    if lats.size == 0:
        raise ValueError("need at least one latitude")
    if np.any(np.abs(lats) > 90.0):
        raise ValueError("latitudes must lie in [-90, 90]")
    c = np.cos(np.radians(lats))
    c = np.where(np.abs(lats) == 90.0, 0.0, c)
    mean = c.mean()
    if mean <= 0:
        raise ValueError("all latitude cosines vanish")
    return c / mean


def cell_areas(lat_deg, n_lon) -> np.ndarray:
    """Per-cell areas (steradian) of a regular lat/lon grid, shape (n_lat, n_lon).

    Cell boundaries sit halfway between rows; outermost rows extend to the poles.
    Latitudes may be given in either order.
    """
    lat = np.asarray(lat_deg, dtype=float)
    order = np.argsort(lat)
    s = lat[order]
    edges = np.concatenate([[-90.0], 0.5 * (s[1:] + s[:-1]), [90.0]])
    band = np.diff(np.sin(np.radians(edges)))
    rows = np.empty_like(band)
    rows[order] = band
    return np.repeat((rows * 2.0 * np.pi / n_lon)[:, None], n_lon, axis=1)


@dataclass(frozen=True)
class GridSpec:
    """Regular global lat/lon grid with pressure levels.

    Latitudes run south to north; levels run from the bottom (highest
    pressure) toward the top.
    """

    lon_deg: np.ndarray
    lat_deg: np.ndarray
    levels_hpa: np.ndarray
    cell_area: np.ndarray = field(init=False, repr=False)
    lat_weight: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        lon = normalize_lon(np.asarray(self.lon_deg, dtype=float))
        lat = np.asarray(self.lat_deg, dtype=float)
        lev = np.asarray(self.levels_hpa, dtype=float)
        if lon.ndim != 1 or lat.ndim != 1 or lev.ndim != 1:
            raise ValueError("grid coordinates must be 1-D")
        if np.any(np.diff(lon) <= 0):
            raise ValueError("longitudes must be strictly increasing within [0, 360)")
        if np.any(np.diff(lat) <= 0):
            raise ValueError("latitudes must be strictly increasing")
        if np.any(lev <= 0) or np.any(np.diff(lev) >= 0):
            raise ValueError("levels must be positive and strictly decreasing")
        object.__setattr__(self, "lon_deg", lon)
        object.__setattr__(self, "lat_deg", lat)
        object.__setattr__(self, "levels_hpa", lev)
        object.__setattr__(self, "cell_area", cell_areas(lat, lon.size))
        object.__setattr__(self, "lat_weight", latitude_weights(lat))

    @classmethod
    def regular(cls, n_lon=64, n_lat=32, levels_hpa=DEFAULT_LEVELS_HPA) -> GridSpec:
        """Equal-angle grid with cell-centred latitudes (WeatherBench layout)."""
        dlon = 360.0 / n_lon
        dlat = 180.0 / n_lat
        lon = np.arange(n_lon) * dlon
        lat = -90.0 + dlat * (np.arange(n_lat) + 0.5)
        return cls(lon, lat, np.asarray(levels_hpa, dtype=float))

    @property
    def n_lon(self) -> int:
        return self.lon_deg.size

    @property
    def n_lat(self) -> int:
        return self.lat_deg.size

    @property
    def n_levels(self) -> int:
        return self.levels_hpa.size

    @property
    def dlon(self) -> float:
        return 360.0 / self.n_lon

    def horizontal_points(self) -> tuple[np.ndarray, np.ndarray]:
        """Flattened (lat, lon) of every column, row-major over (lat, lon)."""
        lat2, lon2 = np.meshgrid(self.lat_deg, self.lon_deg, indexing="ij")
        return lat2.ravel(), lon2.ravel()
