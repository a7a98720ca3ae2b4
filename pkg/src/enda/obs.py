"""Observation records, unit conversions, default errors and the text exchange format."""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Iterator

import numpy as np

from .geo import normalize_lon

EPSILON = 0.622  # molecular weight ratio water vapour / dry air
WINDOW_HALF_WIDTH_S = 1800

# X is the generic scalar of ring models (Lorenz-96); it has no physical units.
VARIABLES = ("U", "V", "T", "Q", "PS", "X")
VAR_CODE = {name: i for i, name in enumerate(VARIABLES)}

DEFAULT_ERROR = {"U": 1.0, "V": 1.0, "T": 1.0, "Q": 0.01, "PS": 1.0, "X": 1.0}


@dataclass(frozen=True)
class Observation:
    time: int
    lat_deg: float
    lon_deg: float
    level_hpa: float | None
    variable: str
    value: float
    error_std: float | None = None
    qmk: int | None = None
    selection_weight: float | None = field(default=None, compare=False)

    def __post_init__(self):
        if self.variable not in VAR_CODE:
            raise ValueError(f"unknown variable code {self.variable!r}")
        if not -90.0 <= self.lat_deg <= 90.0:
            raise ValueError(f"latitude out of range: {self.lat_deg}")
        if self.level_hpa is not None and not self.level_hpa > 0:
            raise ValueError(f"level must be positive: {self.level_hpa}")
        if self.qmk is not None and not 0 <= self.qmk <= 15:
            raise ValueError(f"quality marker out of range: {self.qmk}")
        if self.variable == "PS" and not self.value > 0:
            raise ValueError("surface pressure must be positive")
        if self.error_std is not None and not self.error_std > 0:
            raise ValueError(f"error std must be positive: {self.error_std}")
        object.__setattr__(self, "lon_deg", normalize_lon(self.lon_deg))


@dataclass
class ObsBatch:
    observations: list[Observation]
    window_center: int
    window_half_width: int = WINDOW_HALF_WIDTH_S

    def __len__(self):
        return len(self.observations)

    def __iter__(self):
        return iter(self.observations)

    def by_variable(self) -> dict[str, list[int]]:
        groups: dict[str, list[int]] = {}
        for i, ob in enumerate(self.observations):
            groups.setdefault(ob.variable, []).append(i)
        return groups

    def subset(self, indices) -> ObsBatch:
        return ObsBatch([self.observations[i] for i in indices],
                        self.window_center, self.window_half_width)


@dataclass
class ObsArrays:
    """Column view of a batch, the form consumed by the numerical kernels."""

    value: np.ndarray
    error_std: np.ndarray
    var_code: np.ndarray
    lat: np.ndarray
    lon: np.ndarray
    pressure: np.ndarray  # NaN where no vertical coordinate

    @classmethod
    def from_batch(cls, batch: Iterable[Observation]) -> ObsArrays:
        obs = list(batch)
        if any(o.error_std is None for o in obs):
            raise ValueError("observation errors must be assigned before analysis")
        return cls(
            value=np.array([o.value for o in obs], dtype=float),
            error_std=np.array([o.error_std for o in obs], dtype=float),
            var_code=np.array([VAR_CODE[o.variable] for o in obs], dtype=int),
            lat=np.array([o.lat_deg for o in obs], dtype=float),
            lon=np.array([o.lon_deg for o in obs], dtype=float),
            pressure=np.array([np.nan if o.level_hpa is None else o.level_hpa for o in obs],
                              dtype=float),
        )

    def __len__(self):
        return self.value.size

    def take(self, idx) -> ObsArrays:
        return ObsArrays(*(getattr(self, f)[idx] for f in
                           ("value", "error_std", "var_code", "lat", "lon", "pressure")))


# --- unit conversions -------------------------------------------------------

def virtual_to_real_temperature(t_v, q):
    """Virtual temperature (K) to temperature (K) given specific humidity (kg/kg)."""
    q = np.asarray(q, dtype=float)
    if np.any(q < 0) or np.any(q >= 1):
        raise ValueError("specific humidity must lie in [0, 1)")
    t = np.asarray(t_v, dtype=float) / (1.0 + (1.0 / EPSILON - 1.0) * q)
    return float(t) if t.ndim == 0 else t


def real_to_virtual_temperature(t, q):
    q = np.asarray(q, dtype=float)
    if np.any(q < 0) or np.any(q >= 1):
        raise ValueError("specific humidity must lie in [0, 1)")
    tv = np.asarray(t, dtype=float) * (1.0 + (1.0 / EPSILON - 1.0) * q)
    return float(tv) if tv.ndim == 0 else tv


def saturation_vapor_pressure(t_c):
    """Buck (1981) saturation vapour pressure over water, hPa, for t_c in deg C."""
    t_c = np.asarray(t_c, dtype=float)
    if np.any(t_c <= -257.14):
        raise ValueError("temperature at or below the pole of the Buck formula")
    p = 6.1121 * np.exp((18.678 - t_c / 234.5) * t_c / (257.14 + t_c))
    return float(p) if p.ndim == 0 else p


def rh_error_to_q_error(p, t_c, q, rh_err):
    """Convert a relative-humidity error (%) to a specific-humidity error (kg/kg).

    The vapour pressure is perturbed by +/- rh_err percent of saturation and
    mapped back to specific humidity; the half-width of that interval is
    returned, so the asymmetry of the two branches is discarded.
    """
    if p <= 0:
        raise ValueError("pressure must be positive")
    if not 0 <= q < 1:
        raise ValueError("specific humidity must lie in [0, 1)")
    if rh_err < 0:
        raise ValueError("relative humidity error must be non-negative")
    p_w = p * q / (EPSILON + (1.0 - EPSILON) * q)
    p_werr = saturation_vapor_pressure(t_c) * rh_err / 100.0
    hi = p_w + p_werr
    lo = p_w - p_werr
    den_hi = p - (1.0 - EPSILON) * hi
    den_lo = p - (1.0 - EPSILON) * lo
    if den_hi <= 0 or den_lo <= 0:
        raise ValueError("vapour pressure interval is unphysical for this pressure")
    q_hi = EPSILON * hi / den_hi
    q_lo = EPSILON * lo / den_lo
    return (q_hi - q_lo) / 2.0


def assign_default_error(obs: Observation) -> Observation:
    if obs.error_std is not None:
        return obs
    return replace(obs, error_std=DEFAULT_ERROR[obs.variable])


def select_window(all_obs: Iterable[Observation], center: int,
                  half_width: int = WINDOW_HALF_WIDTH_S) -> ObsBatch:
    """Observations within +/- half_width seconds of center, boundaries included."""
    kept = [o for o in all_obs if abs(o.time - center) <= half_width]
    return ObsBatch(kept, center, half_width)


# --- exchange format ----------------------------------------------------------

class ObsFormatError(ValueError):
    def __init__(self, path, lineno, msg):
        super().__init__(f"{path}:{lineno}: {msg}")
        self.lineno = lineno


def _fmt(x: float) -> str:
    return repr(float(x))


def format_record(o: Observation) -> str:
    return ",".join([
        str(int(o.time)),
        _fmt(o.lat_deg),
        _fmt(o.lon_deg),
        "" if o.level_hpa is None else _fmt(o.level_hpa),
        o.variable,
        _fmt(o.value),
        "" if o.error_std is None else _fmt(o.error_std),
        "" if o.qmk is None else str(int(o.qmk)),
    ])


def parse_record(line: str) -> Observation:
    parts = line.rstrip("\n").split(",")
    if len(parts) != 8:
        raise ValueError(f"expected 8 fields, got {len(parts)}")
    t, lat, lon, lev, var, val, err, qmk = (s.strip() for s in parts)
    if var not in VAR_CODE:
        raise ValueError(f"unknown variable code {var!r}")
    return Observation(
        time=int(t),
        lat_deg=float(lat),
        lon_deg=float(lon),
        level_hpa=float(lev) if lev else None,
        variable=var,
        value=float(val),
        error_std=float(err) if err else None,
        qmk=int(qmk) if qmk else None,
    )


def read_obs_file(path) -> Iterator[Observation]:
    """Yield observations from an exchange-format file, one per data line."""
    with open(path, encoding="utf-8", newline="\n") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip() or line.startswith("#"):
                continue
            try:
                yield parse_record(line)
            except ValueError as exc:
                raise ObsFormatError(path, lineno, str(exc)) from None


def write_obs_file(observations: Iterable[Observation], path, header: str | None = None) -> int:
    n = 0
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("# time,lat_deg,lon_deg,level_hpa,var,value,error_std,qmk\n")
        if header:
            for line in header.splitlines():
                fh.write(f"# {line}\n")
        for o in observations:
            fh.write(format_record(o) + "\n")
            n += 1
    return n

