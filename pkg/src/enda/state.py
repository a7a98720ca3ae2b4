"""Ensemble containers and the state layouts that give them geometry.

A layout knows three things about a flattened state vector: where each
element lives (its analysis location), how to interpolate it to observation
positions, and how far each location is from each observation.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .geo import CUTOFF_FACTOR, GridSpec, gaussian_cutoff_weight, pairs_within
from .obs import VAR_CODE, ObsArrays

UPPER_AIR = ("U", "V", "T", "Q")
SURFACE = ("PS",)


class GridLayout:
    """Upper-air variables on every pressure level plus surface pressure.

    Fields are ordered variable-major then level (bottom to top); surface
    pressure is the last field.  Analysis locations are every (level, column)
    pair followed by one surface location per column.
    """

    def __init__(self, grid: GridSpec, upper_air=UPPER_AIR, surface=SURFACE):
        self.grid = grid
        self.upper_air = tuple(upper_air)
        self.surface = tuple(surface)
        self.fields: list[tuple[str, int | None]] = []
        for v in self.upper_air:
            self.fields += [(v, lev) for lev in range(grid.n_levels)]
        self.fields += [(v, None) for v in self.surface]
        self.shape = (len(self.fields), grid.n_lat, grid.n_lon)
        self.n_col = grid.n_lat * grid.n_lon
        self.n_locations = (grid.n_levels + 1) * self.n_col
        loc_layer = np.array([grid.n_levels if lev is None else lev for _, lev in self.fields])
        self.location_of = (loc_layer[:, None] * self.n_col + np.arange(self.n_col)[None, :]).ravel()
        self._col_lat, self._col_lon = grid.horizontal_points()

    @property
    def size(self) -> int:
        return int(np.prod(self.shape))

    def field_index(self, var: str, level: int | None = None) -> int:
        return self.fields.index((var, level))

    def variables(self):
        return self.upper_air + self.surface

    def field_labels(self) -> list[tuple[str, float | None]]:
        return [(v, None if lev is None else float(self.grid.levels_hpa[lev]))
                for v, lev in self.fields]

    def field_slice_of(self, var: str) -> list[int]:
        return [i for i, (v, _) in enumerate(self.fields) if v == var]

    # -- observation operator ------------------------------------------------

    def _horizontal(self, lat, lon):
        g = self.grid
        x = (lon - g.lon_deg[0]) / g.dlon
        i0 = np.floor(x).astype(int)
        fx = x - i0
        i0 %= g.n_lon
        i1 = (i0 + 1) % g.n_lon
        j1 = np.searchsorted(g.lat_deg, lat, side="right")
        j0 = np.clip(j1 - 1, 0, g.n_lat - 1)
        j1 = np.clip(j1, 0, g.n_lat - 1)
        span = g.lat_deg[j1] - g.lat_deg[j0]
        fy = np.where(span > 0, (lat - g.lat_deg[j0]) / np.where(span > 0, span, 1.0), 0.0)
        fy = np.clip(fy, 0.0, 1.0)
        cols = np.stack([j0 * g.n_lon + i0, j0 * g.n_lon + i1, j1 * g.n_lon + i0, j1 * g.n_lon + i1], 1)
        wts = np.stack([(1 - fy) * (1 - fx), (1 - fy) * fx, fy * (1 - fx), fy * fx], 1)
        return cols, wts

    def _vertical(self, p):
        lp = np.log(self.grid.levels_hpa)  # decreasing
        x = np.log(p)
        clamped = (x > lp[0]) | (x < lp[-1])
        x = np.clip(x, lp[-1], lp[0])
        # index k with lp[k] >= x >= lp[k+1]
        k = np.clip(np.searchsorted(-lp, -x, side="right") - 1, 0, lp.size - 2)
        f = (lp[k] - x) / (lp[k] - lp[k + 1])
        return k, f, clamped

    def operator(self, obs: ObsArrays):
        """Sparse interpolation matrix (n_obs, state size) and a clamp flag per obs."""
        m = len(obs)
        cols, hw = self._horizontal(obs.lat, obs.lon)
        rows_l, cols_l, vals_l = [], [], []
        clamped = np.zeros(m, dtype=bool)
        codes = obs.var_code
        for var in self.upper_air:
            sel = np.flatnonzero(codes == VAR_CODE[var])
            if sel.size == 0:
                continue
            if np.any(np.isnan(obs.pressure[sel])):
                raise ValueError(f"{var} observations need a pressure level")
            k, f, cl = self._vertical(obs.pressure[sel])
            clamped[sel] = cl
            base0 = (self.field_index(var, 0) + k) * self.n_col
            for lev_off, vw in ((0, 1.0 - f), (1, f)):
                base = base0 + lev_off * self.n_col
                rows_l.append(np.repeat(sel, 4))
                cols_l.append((base[:, None] + cols[sel]).ravel())
                vals_l.append((hw[sel] * vw[:, None]).ravel())
        for var in self.surface:
            sel = np.flatnonzero(codes == VAR_CODE[var])
            if sel.size == 0:
                continue
            base = self.field_index(var, None) * self.n_col
            rows_l.append(np.repeat(sel, 4))
            cols_l.append((base + cols[sel]).ravel())
            vals_l.append(hw[sel].ravel())
        known = np.isin(codes, [VAR_CODE[v] for v in self.variables()])
        if not known.all():
            raise ValueError("observation variable not present in state")
        if rows_l:
            r, c, v = np.concatenate(rows_l), np.concatenate(cols_l), np.concatenate(vals_l)
        else:
            r = c = np.zeros(0, dtype=int)
            v = np.zeros(0)
        return sp.csr_matrix((v, (r, c)), shape=(m, self.size)), clamped

    # -- localization -----------------------------------------------------------

    def obs_log_pressure(self, obs: ObsArrays) -> np.ndarray:
        p = obs.pressure.copy()
        ps = obs.var_code == VAR_CODE["PS"]
        missing = ps & np.isnan(p)
        p[missing] = obs.value[missing]
        return np.log(p)

    def localization(self, obs: ObsArrays, rho_h: float, rho_v: float, mean_field=None):
        """Sparse (n_locations, n_obs) localization weights.

        Surface locations take ln of the background-mean surface pressure as
        their vertical coordinate, so ``mean_field`` must be given when the
        layout carries surface pressure.
        """
        m = len(obs)
        olp = self.obs_log_pressure(obs)
        n_lev = self.grid.n_levels
        layer_lp = np.log(self.grid.levels_hpa)
        if self.surface:
            if mean_field is None:
                raise ValueError("surface localization needs the background mean")
            ps = mean_field[self.field_index(self.surface[0], None)].ravel()
            surf_lp = np.log(ps)
        cut = CUTOFF_FACTOR * rho_h
        rows_l, cols_l, vals_l = [], [], []
        col, j, d = pairs_within(self._col_lat, self._col_lon, obs.lat, obs.lon, cut)
        for layer in range(n_lev + (1 if self.surface else 0)):
            lp = layer_lp[layer] if layer < n_lev else surf_lp[col]
            w = gaussian_cutoff_weight(d, np.abs(lp - olp[j]), rho_h, rho_v)
            keep = w > 0
            rows_l.append(layer * self.n_col + col[keep])
            cols_l.append(j[keep])
            vals_l.append(w[keep])
        if rows_l:
            r, c, v = np.concatenate(rows_l), np.concatenate(cols_l), np.concatenate(vals_l)
        else:
            r = c = np.zeros(0, dtype=int)
            v = np.zeros(0)
        return sp.csr_matrix((v, (r, c)), shape=(self.n_locations, m))


class RingLayout:
    """A periodic 1-D ring such as Lorenz-96.

    Observations sit on the ring at ``lon_deg / 360 * n`` and the horizontal
    distance between ring positions i and j is ``cyclic|i - j| * spacing_km``.
    There is no vertical coordinate.
    """

    def __init__(self, n: int, spacing_km: float):
        self.n = n
        self.spacing_km = float(spacing_km)
        self.shape = (n,)
        self.n_locations = n
        self.location_of = np.arange(n)
        self.fields = [("X", None)]

    @property
    def size(self) -> int:
        return self.n

    def variables(self):
        return ("X",)

    def field_labels(self):
        return [("X", None)]

    def position(self, lon_deg):
        return np.asarray(lon_deg, dtype=float) / 360.0 * self.n

    @staticmethod
    def lon_of(index, n):
        return 360.0 * np.asarray(index, dtype=float) / n

    def operator(self, obs: ObsArrays):
        if np.any(obs.var_code != VAR_CODE["X"]):
            raise ValueError("ring states only observe variable X")
        s = self.position(obs.lon)
        i0 = np.floor(s).astype(int)
        f = s - i0
        i0 %= self.n
        i1 = (i0 + 1) % self.n
        m = len(obs)
        r = np.repeat(np.arange(m), 2)
        c = np.stack([i0, i1], 1).ravel()
        v = np.stack([1.0 - f, f], 1).ravel()
        return sp.csr_matrix((v, (r, c)), shape=(m, self.n)), np.zeros(m, dtype=bool)

    def localization(self, obs: ObsArrays, rho_h: float, rho_v: float, mean_field=None):
        s = self.position(obs.lon)
        d = np.abs(np.arange(self.n)[:, None] - s[None, :])
        d = np.minimum(d, self.n - d) * self.spacing_km
        w = gaussian_cutoff_weight(d, np.zeros_like(d), rho_h, rho_v)
        return sp.csr_matrix(np.atleast_2d(w))


class MatrixLayout:
    """Generic vector state with an explicit linear observation operator.

    The k-th observation of a batch is row k of ``h``.  There is a single
    analysis location with unit weight for every observation, i.e. no
    localization; used to check the transform against a full Kalman filter.
    """

    def __init__(self, h):
        self.h = np.atleast_2d(np.asarray(h, dtype=float))
        n = self.h.shape[1]
        self.shape = (n,)
        self.n_locations = 1
        self.location_of = np.zeros(n, dtype=int)
        self.fields = [("X", None)]
        self._h_csr = sp.csr_matrix(self.h)
        self._loc = sp.csr_matrix(np.ones((1, self.h.shape[0])))

    @property
    def size(self) -> int:
        return self.shape[0]

    def variables(self):
        return ("X",)

    def field_labels(self):
        return [("X", None)]

    def operator(self, obs: ObsArrays):
        m = len(obs)
        if m > self.h.shape[0]:
            raise ValueError("more observations than operator rows")
        h = self._h_csr if m == self.h.shape[0] else sp.csr_matrix(self.h[:m])
        return h, np.zeros(m, dtype=bool)

    def localization(self, obs: ObsArrays, rho_h=None, rho_v=None, mean_field=None):
        m = len(obs)
        return self._loc if m == self.h.shape[0] else sp.csr_matrix(np.ones((1, m)))


@dataclass
class EnsembleState:
    """k ensemble members of a state laid out by ``layout``; members has shape (k, *layout.shape)."""

    members: np.ndarray
    layout: object

    def __post_init__(self):
        self.members = np.asarray(self.members, dtype=float)
        if self.members.shape[0] < 2:
            raise ValueError("an ensemble needs at least two members")
        if tuple(self.members.shape[1:]) != tuple(self.layout.shape):
            raise ValueError(f"member shape {self.members.shape[1:]} does not match layout {self.layout.shape}")

    @property
    def k(self) -> int:
        return self.members.shape[0]

    @property
    def mean(self) -> np.ndarray:
        return self.members.mean(axis=0)

    @property
    def perturbations(self) -> np.ndarray:
        return self.members - self.mean

    @property
    def std(self) -> np.ndarray:
        return self.members.std(axis=0, ddof=1)

    def flat(self) -> np.ndarray:
        return self.members.reshape(self.k, -1)

    def with_members(self, members) -> EnsembleState:
        return EnsembleState(np.asarray(members).reshape(self.members.shape), self.layout)

    def copy(self) -> EnsembleState:
        return EnsembleState(self.members.copy(), self.layout)

    def all_finite(self) -> bool:
        return bool(np.isfinite(self.members).all())
