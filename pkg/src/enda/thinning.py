"""Greedy observation thinning that favours sparse regions and homogeneous coverage.

Each observation j carries a weight w[i, j] toward every grid point i inside
the cutoff radius (distance weight times quality weight).  Grid points keep
two densities: the total weight of all their local observations and the
accumulated weight of those selected so far.  Every iteration selects the
observation whose best per-grid contribution is largest, then decays the
weights of observations close to it so that clusters are drained slowly.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .geo import CUTOFF_FACTOR, GridSpec, gaussian_cutoff_weight, pairs_within
from .obs import VARIABLES, ObsBatch, Observation

QUALITY_WEIGHTS = {0: 1.0, 1: 0.8, 2: 0.4, 3: 0.1}
MISSING_QMK_WEIGHT = 0.4


@dataclass
class ThinningConfig:
    r_h: float = 500.0  # km
    r_v: float = 0.1  # ln hPa
    w_max: float = 1.0
    c_thresh: float = 0.01
    m_thresh: int | None = None
    epsilon: float = 1e-10
    # Stop as soon as any grid density exceeds w_max (literal pseudocode reading).
    global_saturation_exit: bool = False
    use_update_flags: bool = True

    def __post_init__(self):
        if not (self.r_h > 0 and self.r_v > 0):
            raise ValueError("thinning radii must be positive")
        if not self.w_max > 0:
            raise ValueError("w_max must be positive")
        if not self.epsilon > 0:
            raise ValueError("epsilon must be positive")
        if self.m_thresh is not None and self.m_thresh < 0:
            raise ValueError("m_thresh must be non-negative")


def distance_weight(d_h, d_v, r_h, r_v):
    return gaussian_cutoff_weight(d_h, d_v, r_h, r_v)


def quality_weight(qmk: int | None) -> float:
    if qmk is None:
        return MISSING_QMK_WEIGHT
    if not 0 <= qmk <= 15:
        raise ValueError(f"quality marker out of range: {qmk}")
    return QUALITY_WEIGHTS.get(int(qmk), 0.0)


def contribution(w_ij, density_sel_i, w_max, epsilon):
    c = np.maximum(0.0, np.asarray(w_ij) * (w_max - np.asarray(density_sel_i))
                   / (np.asarray(density_sel_i) + epsilon))
    return float(c) if c.ndim == 0 else c


@dataclass
class ThinningState:
    """Sparse working state of one thinning run.

    Weights are stored per (observation, grid point) entry in observation-major
    order: entries ``obs_ptr[j]:obs_ptr[j+1]`` belong to observation j.
    """

    n_grid: int
    obs_ptr: np.ndarray
    entry_grid: np.ndarray
    weights: np.ndarray
    density_all: np.ndarray
    density_sel: np.ndarray
    # observation-observation locality (CSR) with distance weights
    nbr_ptr: np.ndarray
    nbr_idx: np.ndarray
    nbr_wd: np.ndarray
    # grid -> observations (CSR), used to flag obs whose contributions moved
    grid_ptr: np.ndarray
    grid_obs: np.ndarray
    update_flag: np.ndarray
    selected: list[int] = field(default_factory=list)
    best_contribution: list[float] = field(default_factory=list)
    selection_weight: dict[int, float] = field(default_factory=dict)
    w_max: float = 1.0
    epsilon: float = 1e-10

    @property
    def n_obs(self) -> int:
        return self.obs_ptr.size - 1

    def entries(self, j: int) -> slice:
        return slice(self.obs_ptr[j], self.obs_ptr[j + 1])

    def weight_matrix(self) -> np.ndarray:
        """Dense (n_grid, n_obs) view of the current weights; for tests and reports."""
        w = np.zeros((self.n_grid, self.n_obs))
        obs_of_entry = np.repeat(np.arange(self.n_obs), np.diff(self.obs_ptr))
        w[self.entry_grid, obs_of_entry] = self.weights
        return w

    def contributions(self, j: int) -> np.ndarray:
        sl = self.entries(j)
        return contribution(self.weights[sl], self.density_sel[self.entry_grid[sl]],
                            self.w_max, self.epsilon)


def _grid_coords(grid: GridSpec):
    lat, lon = grid.horizontal_points()
    return lat, lon, np.log(grid.levels_hpa)


def _obs_log_pressure(observations: list[Observation]) -> np.ndarray:
    lp = np.empty(len(observations))
    for k, o in enumerate(observations):
        p = o.level_hpa
        if p is None:
            if o.variable != "PS":
                raise ValueError("upper-air observation without a pressure level")
            p = o.value
        lp[k] = np.log(p)
    return lp


def _csr(rows, cols, vals, n_rows):
    order = np.lexsort((cols, rows))
    rows, cols = rows[order], cols[order]
    ptr = np.zeros(n_rows + 1, dtype=np.int64)
    np.cumsum(np.bincount(rows, minlength=n_rows), out=ptr[1:])
    return ptr, cols, (None if vals is None else vals[order])


def build_state(observations: list[Observation], grid: GridSpec, cfg: ThinningConfig) -> ThinningState:
    m = len(observations)
    glat, glon, glp = _grid_coords(grid)
    n_col, n_lev = glat.size, glp.size
    n_grid = n_col * n_lev
    olat = np.array([o.lat_deg for o in observations], dtype=float)
    olon = np.array([o.lon_deg for o in observations], dtype=float)
    olp = _obs_log_pressure(observations)
    wq = np.array([quality_weight(o.qmk) for o in observations])

    cut_h = CUTOFF_FACTOR * cfg.r_h
    cut_v = CUTOFF_FACTOR * cfg.r_v
    jo, col, d = pairs_within(olat, olon, glat, glon, cut_h)
    dv = np.abs(olp[:, None] - glp[None, :])
    jo2, lev = np.nonzero(dv < cut_v)
    # pair every horizontal hit with every vertical hit of the same obs
    lev_ptr = np.zeros(m + 1, dtype=np.int64)
    np.cumsum(np.bincount(jo2, minlength=m), out=lev_ptr[1:])
    counts = lev_ptr[jo + 1] - lev_ptr[jo]
    rep = np.repeat(np.arange(jo.size), counts)
    rep_j = jo[rep]
    offs = np.arange(rep.size) - np.repeat(np.cumsum(counts) - counts, counts)
    rep_lev = lev[lev_ptr[rep_j] + offs]
    w = distance_weight(d[rep], dv[rep_j, rep_lev], cfg.r_h, cfg.r_v) * wq[rep_j]
    keep = w > 0
    rows_a = rep_j[keep].astype(np.int64)
    cols_a = (rep_lev * n_col + col[rep])[keep].astype(np.int64)
    vals_a = w[keep]
    obs_ptr, entry_grid, weights = _csr(rows_a, cols_a, vals_a, m)
    density_all = np.bincount(entry_grid, weights, minlength=n_grid)
    g_ptr, g_obs, _ = _csr(cols_a, rows_a, None, n_grid)

    a_, b_, dh = pairs_within(olat, olon, olat, olon, cut_h)
    dvo = np.abs(olp[a_] - olp[b_])
    ok = dvo < cut_v
    nbr_ptr, nbr_idx, nbr_wd = _csr(a_[ok], b_[ok], distance_weight(dh[ok], dvo[ok], cfg.r_h, cfg.r_v), m)

    st = ThinningState(
        n_grid=n_grid, obs_ptr=obs_ptr, entry_grid=entry_grid, weights=weights.copy(),
        density_all=density_all, density_sel=np.zeros(n_grid),
        nbr_ptr=nbr_ptr, nbr_idx=nbr_idx, nbr_wd=nbr_wd,
        grid_ptr=g_ptr, grid_obs=g_obs, update_flag=np.ones(m, dtype=bool),
        w_max=cfg.w_max, epsilon=cfg.epsilon,
    )
    return st


def decay_weights(state: ThinningState, j: int) -> ThinningState:
    """Shrink weights of observations local to the newly selected observation j."""
    sl = slice(state.nbr_ptr[j], state.nbr_ptr[j + 1])
    nbrs = state.nbr_idx[sl]
    ent, counts = _gather_entries(state, nbrs)
    state.weights[ent] *= np.repeat((1.0 - state.nbr_wd[sl]) ** 2, counts)
    state.update_flag[nbrs] = True
    return state


def _gather_entries(state: ThinningState, idx: np.ndarray):
    starts = state.obs_ptr[idx]
    counts = state.obs_ptr[idx + 1] - starts
    total = int(counts.sum())
    offs = np.arange(total) - np.repeat(np.cumsum(counts) - counts, counts)
    return np.repeat(starts, counts) + offs, counts


def _recompute(state: ThinningState, idx: np.ndarray, cmax: np.ndarray, cfg: ThinningConfig):
    if idx.size == 0:
        return
    ent, counts = _gather_entries(state, idx)
    cmax[idx[counts == 0]] = 0.0
    nz = counts > 0
    if not nz.any():
        return
    c = contribution(state.weights[ent], state.density_sel[state.entry_grid[ent]],
                     cfg.w_max, cfg.epsilon)
    starts = np.cumsum(counts) - counts
    cmax[idx[nz]] = np.maximum.reduceat(c, starts[nz])


def thin_variable(observations: list[Observation], grid: GridSpec, cfg: ThinningConfig) -> ThinningState:
    """Run the greedy selection on one variable's observations."""
    st = build_state(observations, grid, cfg)
    m = st.n_obs
    cmax = np.zeros(m)
    taken = np.zeros(m, dtype=bool)
    all_idx = np.arange(m)
    while cfg.m_thresh is None or len(st.selected) < cfg.m_thresh:
        if cfg.use_update_flags:
            todo = np.flatnonzero(st.update_flag & ~taken)
        else:
            todo = all_idx[~taken]
        _recompute(st, todo, cmax, cfg)
        st.update_flag[:] = False
        if taken.all():
            break
        cand = np.where(taken, -np.inf, cmax)
        j = int(np.argmax(cand))  # first maximum: lowest index wins ties
        best = cand[j]
        if not best > 0 or best < cfg.c_thresh:
            break
        sl = st.entries(j)
        st.selection_weight[j] = float(st.weights[sl].max())
        st.selected.append(j)
        st.best_contribution.append(float(best))
        taken[j] = True
        np.add.at(st.density_sel, st.entry_grid[sl], st.weights[sl])
        if cfg.global_saturation_exit and st.density_sel.max() > cfg.w_max:
            break
        decay_weights(st, j)
        # densities moved at j's grid points: every obs sharing them is stale
        g = st.entry_grid[sl]
        gs, gc = st.grid_ptr[g], st.grid_ptr[g + 1] - st.grid_ptr[g]
        st.update_flag[st.grid_obs[np.repeat(gs, gc) + np.arange(gc.sum())
                                   - np.repeat(np.cumsum(gc) - gc, gc)]] = True
    return st


@dataclass
class ThinningResult:
    batch: ObsBatch
    states: dict[str, ThinningState]
    indices: dict[str, list[int]]  # batch index of each variable-local obs


def thin(batch: ObsBatch, grid: GridSpec, cfg: ThinningConfig) -> ThinningResult:
    """Thin each variable independently; the output keeps input order."""
    groups = batch.by_variable()
    states: dict[str, ThinningState] = {}
    keep: dict[int, float] = {}
    for var in VARIABLES:
        if var not in groups:
            continue
        idx = groups[var]
        st = thin_variable([batch.observations[i] for i in idx], grid, cfg)
        states[var] = st
        for j in st.selected:
            keep[idx[j]] = st.selection_weight[j]
    out = [replace(batch.observations[i], selection_weight=keep[i]) for i in sorted(keep)]
    return ThinningResult(ObsBatch(out, batch.window_center, batch.window_half_width), states, groups)


def write_density_report(result: ThinningResult, grid: GridSpec, path) -> None:
    """CSV of per-grid total and selected densities for grid points with any local obs."""
    lat, lon = grid.horizontal_points()
    n_col = lat.size
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["variable", "level_hpa", "lat_deg", "lon_deg", "density_all", "density_sel"])
        for var, st in result.states.items():
            for g in np.flatnonzero(st.density_all > 0):
                lev, col = divmod(int(g), n_col)
                w.writerow([var, repr(float(grid.levels_hpa[lev])), repr(float(lat[col])),
                            repr(float(lon[col])), repr(float(st.density_all[g])),
                            repr(float(st.density_sel[g]))])
