"""Area- and latitude-weighted verification scores on lat/lon slices."""

from __future__ import annotations

import numpy as np

from .geo import GridSpec


def _areas(grid_or_areas, shape):
    a = grid_or_areas.cell_area if isinstance(grid_or_areas, GridSpec) else np.asarray(grid_or_areas, float)
    a = np.broadcast_to(a, shape)
    if np.any(a <= 0):
        raise ValueError("cell areas must be positive")
    return a


def rmse(mean_field, truth, grid) -> float:
    """Area-weighted RMSE; weights are cell areas normalised by their mean.

    ``grid`` is a GridSpec or an array of cell areas broadcastable to the field.
    """
    err = np.asarray(mean_field, float) - np.asarray(truth, float)
    a = _areas(grid, err.shape)
    return float(np.sqrt(np.mean(a * err ** 2) / np.mean(a)))


def spread(ensemble, grid, truth=None) -> float:
    """Area-weighted root-mean ensemble variance.

    ensemble has the member axis first.  With ``truth`` given, deviations are
    taken from the truth instead of the ensemble mean (the spread_vs_truth
    variant).
    """
    ens = np.asarray(ensemble, float)
    n_mem = ens.shape[0]
    if n_mem < 2:
        raise ValueError("spread needs at least two members")
    if truth is None:
        # shifting by the first member makes identical members give exactly zero
        ens = ens - ens[0]
        center = ens.mean(axis=0)
    else:
        center = np.asarray(truth, float)
    var = ((ens - center) ** 2).sum(axis=0) / (n_mem - 1)
    a = _areas(grid, var.shape)
    return float(np.sqrt(np.mean(a * var) / np.mean(a)))


def acc(mean_field, truth, climatology, grid) -> float:
    """Latitude-weighted anomaly correlation of a (n_lat, n_lon) field."""
    fa = np.asarray(mean_field, float) - np.asarray(climatology, float)
    ta = np.asarray(truth, float) - np.asarray(climatology, float)
    lw = grid.lat_weight if isinstance(grid, GridSpec) else np.asarray(grid, float)
    lw = lw[:, None]
    num = np.sum(lw * fa * ta)
    den_f = np.sum(lw * fa * fa)
    den_t = np.sum(lw * ta * ta)
    if den_f <= 0 or den_t <= 0:
        raise ValueError("anomaly correlation undefined: zero anomaly variance")
    return float(num / np.sqrt(den_f * den_t))


def per_field_scores(members, truth, areas, spread_vs_truth: bool = False):
    """RMSE and spread for every leading field of (k, n_fields, ...) members.

    Returns two arrays of length n_fields.
    """
    members = np.asarray(members, float)
    mean = members.mean(axis=0)
    n_f = members.shape[1]
    r = np.empty(n_f)
    s = np.empty(n_f)
    for f in range(n_f):
        r[f] = rmse(mean[f], truth[f], areas)
        s[f] = spread(members[:, f], areas, truth[f] if spread_vs_truth else None)
    return r, s
