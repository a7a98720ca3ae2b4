"""Local ensemble transform Kalman filter with R-localization and covariance relaxation."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .geo import GeoPoint, gaussian_cutoff_weight
from .obs import VAR_CODE, ObsArrays, ObsBatch, Observation
from .state import EnsembleState, GridLayout, MatrixLayout, RingLayout

RELAXATIONS = ("none", "rtps", "rtpp")
EIGEN_FLOOR = 1e-12

__all__ = [
    "DaConfig", "EnsembleState", "GridLayout", "InnovationRecord", "LetkfDiagnostics",
    "MatrixLayout", "RingLayout", "gross_error_check", "letkf_analysis",
    "localization_weight", "observe", "relax", "relax_rtpp", "relax_rtps",
]


@dataclass
class DaConfig:
    ensemble_size: int = 20
    rho_h: float = 600.0  # km
    rho_v: float = 0.1  # ln hPa
    relaxation: str = "rtpp"
    alpha: float = 0.9
    gross_error_factor: float = 10.0

    def __post_init__(self):
        self.relaxation = self.relaxation.lower()
        if self.ensemble_size < 2:
            raise ValueError("ensemble_size must be at least 2")
        if not (self.rho_h > 0 and self.rho_v > 0):
            raise ValueError("localization scales must be positive")
        if self.relaxation not in RELAXATIONS:
            raise ValueError(f"relaxation must be one of {RELAXATIONS}")
        if self.alpha < 0:
            raise ValueError("alpha must be non-negative")
        if self.relaxation == "rtpp" and self.alpha > 1:
            raise ValueError("RTPP alpha must lie in [0, 1]")


@dataclass
class InnovationRecord:
    obs: Observation
    background_equivalent: float
    departure: float
    accepted: bool
    clamped: bool = False


@dataclass
class LetkfDiagnostics:
    n_obs: int = 0
    active_locations: int = 0
    eigen_clamped: int = 0
    relax_skipped: int = 0
    messages: list[str] = field(default_factory=list)


def localization_weight(d_h, d_v, rho_h, rho_v):
    return gaussian_cutoff_weight(d_h, d_v, rho_h, rho_v)


def observe(state_field, point: GeoPoint, variable: str, layout):
    """Interpolate one state field (shape ``layout.shape``) to a point."""
    ob = ObsArrays(
        value=np.zeros(1), error_std=np.ones(1), var_code=np.array([VAR_CODE[variable]]),
        lat=np.array([point.lat_deg]), lon=np.array([point.lon_deg]),
        pressure=np.array([np.nan if point.pressure_hpa is None else point.pressure_hpa]),
    )
    h, _ = layout.operator(ob)
    return float((h @ np.asarray(state_field, dtype=float).ravel())[0])


def gross_error_check(departure, error_std, factor=10.0):
    """True where the observation is kept: |departure| <= factor * error_std."""
    ok = np.abs(np.asarray(departure)) <= factor * np.asarray(error_std)
    return bool(ok) if ok.ndim == 0 else ok


def background_equivalents(background: EnsembleState, obs: ObsArrays):
    """H applied to each member: (k, n_obs) array, plus per-obs clamp flags."""
    h, clamped = background.layout.operator(obs)
    return np.asarray((h @ background.flat().T).T), clamped


def screen(background: EnsembleState, batch: ObsBatch, factor: float):
    """Gross-error check against the background mean; returns (accepted batch, records)."""
    arr = ObsArrays.from_batch(batch)
    if len(arr) == 0:
        return ObsBatch([], batch.window_center, batch.window_half_width), []
    hx, clamped = background_equivalents(background, arr)
    hxb = hx.mean(axis=0)
    dep = arr.value - hxb
    ok = gross_error_check(dep, arr.error_std, factor)
    records = [InnovationRecord(o, float(b), float(d), bool(a), bool(c))
               for o, b, d, a, c in zip(batch.observations, hxb, dep, np.atleast_1d(ok), clamped)]
    kept = [o for o, a in zip(batch.observations, np.atleast_1d(ok)) if a]
    return ObsBatch(kept, batch.window_center, batch.window_half_width), records


def letkf_analysis(background: EnsembleState, obs, cfg: DaConfig,
                   diagnostics: LetkfDiagnostics | None = None) -> EnsembleState:
    """Analysis ensemble from a background ensemble and QC-passed observations.

    Every analysis location solves its own k x k problem using only the
    observations with positive localization weight, each one's inverse
    error variance scaled by that weight.  All state elements sharing a
    location are updated with the same transform.
    """
    diag = diagnostics if diagnostics is not None else LetkfDiagnostics()
    arr = obs if isinstance(obs, ObsArrays) else ObsArrays.from_batch(obs)
    diag.n_obs = len(arr)
    if len(arr) == 0:
        return background.copy()
    layout = background.layout
    k = background.k
    x = background.flat()
    xbar = x.mean(axis=0)
    xp = x - xbar

    hx, _ = background_equivalents(background, arr)
    ybar = hx.mean(axis=0)
    yp = hx - ybar  # (k, m)
    rinv = 1.0 / arr.error_std ** 2
    d = arr.value - ybar

    loc = layout.localization(arr, cfg.rho_h, cfg.rho_v, background.mean)
    active = np.flatnonzero(np.diff(loc.indptr) > 0)
    diag.active_locations = active.size
    if active.size == 0:
        return background.copy()
    if active.size < loc.shape[0]:
        loc = loc[active]

    outer = (yp.T[:, :, None] * yp.T[:, None, :]).reshape(len(arr), k * k) * rinv[:, None]
    a = np.asarray(loc @ outer).reshape(-1, k, k)
    a += (k - 1) * np.eye(k)
    a = 0.5 * (a + a.transpose(0, 2, 1))
    b = np.asarray(loc @ (yp.T * (rinv * d)[:, None]))  # (L, k)

    lam, u = np.linalg.eigh(a)
    floor = EIGEN_FLOOR * lam[:, -1:]
    low = lam < floor
    if low.any():
        diag.eigen_clamped += int(low.any(axis=1).sum())
        diag.messages.append(f"clamped eigenvalues at {int(low.any(axis=1).sum())} locations")
        lam = np.maximum(lam, floor)
    ut_b = (u.transpose(0, 2, 1) @ b[:, :, None])[:, :, 0]
    wbar = (u @ (ut_b / lam)[:, :, None])[:, :, 0]
    wsq = (u * np.sqrt((k - 1) / lam)[:, None, :]) @ u.transpose(0, 2, 1)
    trans = wsq + wbar[:, :, None]  # trans[l, m, i]: weight of member m's perturbation in member i

    slot = np.full(layout.n_locations, -1)
    slot[active] = np.arange(active.size)
    elem_slot = slot[layout.location_of]
    xa = x.copy()
    upd = np.flatnonzero(elem_slot >= 0)
    for s in range(0, upd.size, 4096):
        e = upd[s:s + 4096]
        xa[:, e] = xbar[e] + (xp[:, e].T[:, None, :] @ trans[elem_slot[e]])[:, 0, :].T
    return background.with_members(xa)


def relax_rtps(analysis: EnsembleState, background: EnsembleState, alpha: float,
               diagnostics: LetkfDiagnostics | None = None) -> EnsembleState:
    """Rescale analysis perturbations so their spread moves alpha of the way back to the background's."""
    mean = analysis.mean
    pa = analysis.members - mean
    sa = analysis.std
    sb = background.std
    ok = sa > 0
    if diagnostics is not None:
        diagnostics.relax_skipped += int((~ok).sum())
    factor = np.ones_like(sa)
    factor[ok] = alpha * (sb[ok] - sa[ok]) / sa[ok] + 1.0
    return analysis.with_members(mean + pa * factor)


def relax_rtpp(analysis: EnsembleState, background: EnsembleState, alpha: float) -> EnsembleState:
    """Blend analysis perturbations with the background perturbations."""
    if not 0.0 <= alpha <= 1.0:
        raise ValueError("RTPP alpha must lie in [0, 1]")
    mean = analysis.mean
    return analysis.with_members(mean + (1.0 - alpha) * (analysis.members - mean)
                                 + alpha * background.perturbations)


def relax(analysis: EnsembleState, background: EnsembleState, cfg: DaConfig,
          diagnostics: LetkfDiagnostics | None = None) -> EnsembleState:
    if cfg.relaxation == "rtps":
        return relax_rtps(analysis, background, cfg.alpha, diagnostics)
    if cfg.relaxation == "rtpp":
        return relax_rtpp(analysis, background, cfg.alpha)
    return analysis


def write_innovations(records, cycle: int, path, append: bool = True) -> None:
    path = Path(path)
    new = not path.exists() or not append
    with open(path, "a" if append else "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        if new:
            w.writerow(["cycle", "time", "variable", "lat_deg", "lon_deg", "level_hpa", "value",
                        "error_std", "background_equivalent", "departure", "accepted", "clamped"])
        for r in records:
            o = r.obs
            w.writerow([cycle, o.time, o.variable, repr(o.lat_deg), repr(o.lon_deg),
                        "" if o.level_hpa is None else repr(o.level_hpa), repr(o.value),
                        repr(o.error_std), repr(r.background_equivalent), repr(r.departure),
                        int(r.accepted), int(r.clamped)])
