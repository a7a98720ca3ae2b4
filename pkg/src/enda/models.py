"""Toy forecast models, nature runs and synthetic observations for OSSEs.

Two models are provided: the 40-variable Lorenz-96 ring, and a cheap
lat/lon/pressure surrogate (zonal advection + diffusion + relaxation to a
climatology) on the 64x32x7 grid.  Both step arrays with any number of
leading (member) axes.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .geo import GeoPoint, GridSpec
from .obs import DEFAULT_ERROR, VAR_CODE, ObsArrays, ObsBatch, Observation
from .state import GridLayout, RingLayout


class NonFiniteStateError(RuntimeError):
    def __init__(self, step, msg=""):
        super().__init__(f"non-finite state at step {step}{': ' + msg if msg else ''}")
        self.step = step


def counter_rng(seed: int, *keys: int) -> np.random.Generator:
    """Philox generator keyed on (seed, *keys): draws never depend on call order."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), *map(int, keys)])))


# --- Lorenz-96 -----------------------------------------------------------------

@dataclass
class Lorenz96Config:
    n: int = 40
    forcing: float = 8.0
    dt: float = 0.05
    # ring distance of one grid interval; with rho_h = 600 km this gives 4 intervals
    spacing_km: float = 150.0

    def __post_init__(self):
        if self.n < 4:
            raise ValueError("Lorenz-96 needs at least 4 variables")


def lorenz96_tendency(x, forcing):
    return (np.roll(x, -1, axis=-1) - np.roll(x, 2, axis=-1)) * np.roll(x, 1, axis=-1) - x + forcing


def lorenz96_step(state, cfg: Lorenz96Config, dt: float | None = None):
    """One fourth-order Runge-Kutta step on the last axis (cyclic)."""
    x = np.asarray(state, dtype=float)
    if not np.isfinite(x).all():
        raise NonFiniteStateError(0, "Lorenz-96 input")
    h = cfg.dt if dt is None else dt
    f = cfg.forcing
    k1 = lorenz96_tendency(x, f)
    k2 = lorenz96_tendency(x + 0.5 * h * k1, f)
    k3 = lorenz96_tendency(x + 0.5 * h * k2, f)
    k4 = lorenz96_tendency(x + h * k3, f)
    return x + h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


class Lorenz96Model:
    def __init__(self, cfg: Lorenz96Config | None = None):
        self.cfg = cfg or Lorenz96Config()
        self.layout = RingLayout(self.cfg.n, self.cfg.spacing_km)

    def step(self, state, dt=None):
        return lorenz96_step(state, self.cfg, dt)

    @property
    def areas(self):
        return np.ones(self.cfg.n)

    def initial_state(self, seed: int = 0):
        rng = counter_rng(seed, 0)
        return self.cfg.forcing + rng.normal(0.0, 1.0, self.cfg.n)


# --- lat/lon/pressure surrogate -------------------------------------------------

DEFAULT_SPEEDS = (1.0, 1.0, 1.0, 2.0, 2.0, 3.0, 1.0)


def default_climatology(layout: GridLayout) -> np.ndarray:
    """Smooth zonally symmetric reference fields on the layout."""
    g = layout.grid
    phi = np.radians(g.lat_deg)[:, None] * np.ones((1, g.n_lon))
    out = np.empty(layout.shape)
    for f, (var, lev) in enumerate(layout.fields):
        p = None if lev is None else g.levels_hpa[lev]
        if var == "U":
            out[f] = 25.0 * np.sin(2 * phi) ** 2 * (0.4 + 1.6 * (1 - p / 1000.0))
        elif var == "V":
            out[f] = 0.0
        elif var == "T":
            out[f] = (288.0 - 40.0 * np.sin(phi) ** 2) * (p / 1000.0) ** 0.19
        elif var == "Q":
            out[f] = 0.018 * np.cos(phi) ** 2 * (p / 1000.0) ** 3
        elif var == "PS":
            out[f] = 1010.0 - 12.0 * np.sin(2 * phi) ** 2
        else:
            raise ValueError(f"no climatology for {var}")
    return out


ANOMALY_SCALE = {"U": 6.0, "V": 6.0, "T": 3.0, "PS": 5.0}


def random_anomaly(layout: GridLayout, seed: int, climatology=None) -> np.ndarray:
    """Large-scale wave anomalies (zonal wavenumbers 1-5), vertically coherent."""
    g = layout.grid
    rng = counter_rng(seed, 1)
    lam = np.radians(g.lon_deg)[None, :]
    phi = np.radians(g.lat_deg)[:, None]
    out = np.zeros(layout.shape)
    for var in layout.variables():
        idx = [i for i, (v, _) in enumerate(layout.fields) if v == var]
        base = np.zeros((len(idx), g.n_lat, g.n_lon))
        for m in range(1, 6):
            for ell in range(1, 4):
                amp = rng.normal(0.0, 1.0 / (m * ell))
                ph = rng.uniform(0, 2 * np.pi)
                tilt = rng.normal(0.0, 0.3, len(idx))
                for q in range(len(idx)):
                    base[q] += amp * np.cos(m * lam + ph + tilt[q] * q) * np.cos(phi) * np.cos(ell * phi)
        base /= np.abs(base).max()
        if var == "Q":
            clim = default_climatology(layout) if climatology is None else climatology
            base = 0.3 * base * clim[idx]
        else:
            base = ANOMALY_SCALE[var] * base
        out[idx] = base
    return out


@dataclass
class SurrogateConfig:
    grid: GridSpec = field(default_factory=GridSpec.regular)
    speeds: tuple = DEFAULT_SPEEDS  # zonal cells per step, one per level
    surface_speed: float = 1.0
    relaxation: float = 0.0005  # per step, toward climatology
    diffusion: float = 0.005  # explicit scheme is stable and monotone for 0 <= diffusion <= 0.25
    climatology: np.ndarray | None = None

    def __post_init__(self):
        if len(self.speeds) != self.grid.n_levels:
            raise ValueError("need one advection speed per level")
        if not 0.0 <= self.diffusion <= 0.25:
            raise ValueError("diffusion coefficient must lie in [0, 0.25] for stability")
        if not 0.0 <= self.relaxation <= 1.0:
            raise ValueError("relaxation rate must lie in [0, 1]")


def _shift_lon(x, s):
    """Semi-Lagrangian zonal shift by s cells with linear interpolation (periodic)."""
    if s == 0:
        return x
    n = int(np.floor(s))
    f = s - n
    out = np.roll(x, n, axis=-1)
    if f:
        out = (1.0 - f) * out + f * np.roll(x, n + 1, axis=-1)
    return out


def _diffuse(x, kappa, areas_row):
    if kappa == 0:
        return x
    zonal = np.roll(x, -1, axis=-1) - 2 * x + np.roll(x, 1, axis=-1)
    edge = np.minimum(areas_row[1:], areas_row[:-1])[:, None]
    flux = kappa * edge * (x[..., 1:, :] - x[..., :-1, :])
    div = np.zeros_like(x)
    div[..., :-1, :] += flux
    div[..., 1:, :] -= flux
    return x + kappa * zonal + div / areas_row[:, None]


def surrogate_step(state, cfg: SurrogateConfig, layout: GridLayout | None = None):
    """Advect each field zonally, diffuse, then relax toward the climatology."""
    layout = layout or GridLayout(cfg.grid)
    x = np.asarray(state, dtype=float)
    out = np.empty_like(x)
    for f, (_, lev) in enumerate(layout.fields):
        s = cfg.surface_speed if lev is None else cfg.speeds[lev]
        out[..., f, :, :] = _shift_lon(x[..., f, :, :], s)
    out = _diffuse(out, cfg.diffusion, cfg.grid.cell_area[:, 0])
    if cfg.relaxation:
        clim = cfg.climatology if cfg.climatology is not None else default_climatology(layout)
        out += cfg.relaxation * (clim - out)
    return out


class SurrogateModel:
    def __init__(self, cfg: SurrogateConfig | None = None):
        self.cfg = cfg or SurrogateConfig()
        self.layout = GridLayout(self.cfg.grid)
        if self.cfg.climatology is None:
            self.cfg.climatology = default_climatology(self.layout)

    def step(self, state, dt=None):
        return surrogate_step(state, self.cfg, self.layout)

    @property
    def areas(self):
        return self.cfg.grid.cell_area

    def initial_state(self, seed: int = 0):
        return self.cfg.climatology + random_anomaly(self.layout, seed, self.cfg.climatology)


# --- nature runs and synthetic observations ------------------------------------

def nature_run(model, initial_state, n_steps: int, store_every: int = 1) -> np.ndarray:
    """Free model trajectory; element i is the state after i * store_every steps."""
    x = np.asarray(initial_state, dtype=float)
    traj = [x]
    for step in range(1, n_steps + 1):
        x = model.step(x)
        if not np.isfinite(x).all():
            raise NonFiniteStateError(step)
        if step % store_every == 0:
            traj.append(x)
    return np.stack(traj)


def ring_network(n: int, every: int = 1) -> list[tuple[GeoPoint, str]]:
    return [(GeoPoint(0.0, float(RingLayout.lon_of(i, n))), "X") for i in range(0, n, every)]


CLUSTERS = ((45.0, 265.0), (50.0, 10.0), (35.0, 135.0), (-25.0, 135.0))


def random_network(grid: GridSpec, n_per_var: int, variables=("U", "V", "T", "Q", "PS"),
                   seed: int = 0, cycle: int = 0, cluster_fraction: float = 0.6,
                   cluster_km: float = 900.0):
    """Random station network: a share of points in dense clusters, the rest uniform on the sphere.

    Upper-air points get pressures scattered around the model levels; surface
    pressure points get no level (their reported value is their vertical
    coordinate).
    """
    rng = counter_rng(seed, 2, cycle)
    out = []
    levels = grid.levels_hpa
    for var in variables:
        n_cl = int(round(cluster_fraction * n_per_var))
        centers = rng.integers(0, len(CLUSTERS), n_cl)
        c = np.array(CLUSTERS)[centers]
        ang = cluster_km / 6371.0
        lat = c[:, 0] + np.degrees(ang) * rng.normal(0, 0.5, n_cl)
        lon = c[:, 1] + np.degrees(ang) * rng.normal(0, 0.5, n_cl) / np.cos(np.radians(c[:, 0]))
        lat = np.concatenate([lat, np.degrees(np.arcsin(rng.uniform(-1, 1, n_per_var - n_cl)))])
        lon = np.concatenate([lon, rng.uniform(0, 360, n_per_var - n_cl)])
        lat = np.clip(lat, -89.0, 89.0)
        if var == "PS":
            pres = [None] * n_per_var
        else:
            p = levels[rng.integers(0, levels.size, n_per_var)] * np.exp(rng.normal(0, 0.03, n_per_var))
            pres = np.clip(p, levels[-1], levels[0])
        for a, b, p in zip(lat, lon, pres):
            out.append((GeoPoint(float(a), float(b), None if p is None else float(p)), var))
    return out


def synth_obs(truth_state, network, layout, error_std: dict | None = None, seed: int = 0,
              cycle: int = 0, time: int = 0, time_offsets=None, qmk: int = 0) -> ObsBatch:
    """Observations y = H(truth) + N(0, error_std^2) at the network points.

    Noise is drawn from a counter-based stream keyed on (seed, cycle), so a
    given (seed, cycle) always yields the same draws.
    """
    err = dict(DEFAULT_ERROR)
    if error_std:
        err.update(error_std)
    m = len(network)
    if m == 0:
        return ObsBatch([], time)
    arr = ObsArrays(
        value=np.zeros(m),
        error_std=np.array([err[v] for _, v in network], dtype=float),
        var_code=np.array([VAR_CODE[v] for _, v in network]),
        lat=np.array([p.lat_deg for p, _ in network]),
        lon=np.array([p.lon_deg for p, _ in network]),
        pressure=np.array([np.nan if p.pressure_hpa is None else p.pressure_hpa for p, _ in network]),
    )
    if np.any(arr.error_std < 0):
        raise ValueError("error std must be non-negative")
    h, _ = layout.operator(arr)
    clean = h @ np.asarray(truth_state, dtype=float).ravel()
    noise = counter_rng(seed, 3, cycle).standard_normal(m)
    y = clean + arr.error_std * noise
    offs = np.zeros(m, dtype=int) if time_offsets is None else np.asarray(time_offsets, dtype=int)
    out = []
    for k, (pt, var) in enumerate(network):
        level = pt.pressure_hpa
        if var == "PS" and level is None:
            level = float(y[k])
        out.append(Observation(int(time + offs[k]), pt.lat_deg, pt.lon_deg, level, var,
                               float(y[k]), float(arr.error_std[k]) if arr.error_std[k] > 0 else None, qmk))
    return ObsBatch(out, time)


# --- state files -------------------------------------------------------------------

def write_grid_state(path, fields, layout: GridLayout, time: int = 0, dtype="<f4") -> None:
    """JSON header ``<path>.json`` plus raw raster ``<path>.bin``.

    The raster is little-endian float32 (by default) in
    [member][variable][level][lat][lon] order; the member axis is present
    only when ``fields`` has one more dimension than the layout.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    arr = np.asarray(fields, dtype=float)
    members = arr.shape[0] if arr.ndim == len(layout.shape) + 1 else None
    g = layout.grid
    variables = []
    for var in layout.variables():
        levs = [float(g.levels_hpa[lev]) for v, lev in layout.fields if v == var and lev is not None]
        variables.append({"name": var, "levels": levs})
    header = {
        "format": "enda-grid-state",
        "dims": {"variable": len(variables), "level": g.n_levels, "lat": g.n_lat, "lon": g.n_lon},
        "variables": variables,
        "lat_deg": g.lat_deg.tolist(),
        "lon_deg": g.lon_deg.tolist(),
        "time": int(time),
        "dtype": np.dtype(dtype).str,
    }
    if members is not None:
        header["dims"] = {"member": members, **header["dims"]}
    path.with_suffix(".json").write_text(json.dumps(header, indent=1) + "\n")
    arr.astype(dtype).tofile(path.with_suffix(".bin"))


def read_grid_state(path):
    """Return (fields, header, layout) from a grid state written by write_grid_state."""
    path = Path(path)
    header = json.loads(path.with_suffix(".json").read_text())
    levels = next((v["levels"] for v in header["variables"] if v["levels"]), [])
    grid = GridSpec(np.array(header["lon_deg"]), np.array(header["lat_deg"]), np.array(levels))
    upper = [v["name"] for v in header["variables"] if v["levels"]]
    surface = [v["name"] for v in header["variables"] if not v["levels"]]
    layout = GridLayout(grid, upper, surface)
    raw = np.fromfile(path.with_suffix(".bin"), dtype=np.dtype(header.get("dtype", "<f4")))
    shape = layout.shape
    if "member" in header["dims"]:
        shape = (header["dims"]["member"], *shape)
    return raw.astype(float).reshape(shape), header, layout


def write_ring_state(path, state) -> None:
    """Lorenz-96 state(s) as text, one float64 per line; ensembles are written member after member."""
    arr = np.atleast_2d(np.asarray(state, dtype=float))
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="\n") as fh:
        fh.write(f"# members={arr.shape[0]} n={arr.shape[1]}\n")
        for v in arr.ravel():
            fh.write(repr(float(v)) + "\n")


def read_ring_state(path) -> np.ndarray:
    members, n = 1, None
    values = []
    with open(path) as fh:
        for line in fh:
            if line.startswith("#"):
                for tok in line[1:].split():
                    key, _, val = tok.partition("=")
                    if key == "members":
                        members = int(val)
                    elif key == "n":
                        n = int(val)
                continue
            if line.strip():
                values.append(float(line))
    arr = np.array(values)
    if n is None:
        return arr
    arr = arr.reshape(members, n)
    return arr[0] if members == 1 else arr


def write_state(path, fields, model, time: int = 0) -> None:
    if isinstance(model.layout, GridLayout):
        write_grid_state(path, fields, model.layout, time)
    else:
        write_ring_state(Path(path).with_suffix(".txt"), fields)


def read_state(path):
    """Read either a grid state (``.json``/``.bin`` pair) or a ring state (``.txt``)."""
    path = Path(path)
    if path.suffix in (".json", ".bin") or path.with_suffix(".json").exists():
        fields, _, _ = read_grid_state(path)
        return fields
    return read_ring_state(path)
