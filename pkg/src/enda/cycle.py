"""Cycling driver: forecast -> preprocess/thin/QC -> LETKF -> relaxation -> repeat."""

from __future__ import annotations

import csv
import json
import time as _time
from collections import defaultdict
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Mapping

import numpy as np

from .config import ExperimentConfig, dump_config
from .geo import GridSpec
from .letkf import LetkfDiagnostics, letkf_analysis, relax, screen, write_innovations
from .metrics import per_field_scores, spread
from .models import (
    Lorenz96Config, Lorenz96Model, NonFiniteStateError, SurrogateConfig, SurrogateModel, counter_rng,
    random_network, ring_network, synth_obs, write_state,
)
from .obs import (
    VAR_CODE, ObsArrays, ObsBatch, Observation, assign_default_error, read_obs_file,
    rh_error_to_q_error, select_window, virtual_to_real_temperature,
)
from .state import EnsembleState, GridLayout
from .thinning import thin

REPORT_COLUMNS = ["cycle", "time", "variable", "level_hpa", "rmse_bg", "rmse_an", "spread_bg",
                  "spread_an", "n_raw", "n_windowed", "n_thinned", "n_qc_rejected"]


class DivergenceError(RuntimeError):
    def __init__(self, cycle):
        super().__init__(f"ensemble became non-finite at cycle {cycle}")
        self.cycle = cycle


@dataclass
class CycleReport:
    cycle: int
    time: int
    labels: list
    rmse_bg: np.ndarray | None
    rmse_an: np.ndarray | None
    spread_bg: np.ndarray
    spread_an: np.ndarray
    n_raw: int = 0
    n_windowed: int = 0
    n_thinned: int = 0
    n_qc_rejected: int = 0

    def rows(self):
        for f, (var, lev) in enumerate(self.labels):
            yield [
                self.cycle, self.time, var, "" if lev is None else repr(lev),
                "" if self.rmse_bg is None else repr(float(self.rmse_bg[f])),
                "" if self.rmse_an is None else repr(float(self.rmse_an[f])),
                repr(float(self.spread_bg[f])), repr(float(self.spread_an[f])),
                self.n_raw, self.n_windowed, self.n_thinned, self.n_qc_rejected,
            ]


@dataclass
class ExperimentResult:
    reports: list[CycleReport]
    final: EnsembleState
    archive: dict[int, np.ndarray] = field(default_factory=dict)
    output_dir: Path | None = None
    elapsed: float = 0.0


# --- building blocks -----------------------------------------------------------------

def build_model(cfg: ExperimentConfig):
    m = cfg.model
    if m.kind == "lorenz96":
        return Lorenz96Model(Lorenz96Config(n=m.n, forcing=m.forcing, dt=m.dt, spacing_km=m.spacing_km))
    grid = GridSpec.regular(m.n_lon, m.n_lat, m.levels)
    return SurrogateModel(SurrogateConfig(grid=grid, speeds=tuple(m.speeds), surface_speed=m.surface_speed,
                                          relaxation=m.relaxation, diffusion=m.diffusion))


def advance(model, x, n_steps: int):
    for _ in range(n_steps):
        x = model.step(x)
    return x


class Nature:
    """The truth trajectory of an OSSE, indexed in model steps relative to the first analysis time."""

    def __init__(self, model, cfg: ExperimentConfig):
        self.model = model
        self.steps_per_cycle = cfg.model.steps_per_cycle
        self.history = cfg.da.ensemble_size * cfg.init.stride if cfg.init.mode == "lagged" else 0
        x = model.initial_state(cfg.nature.seed)
        self._start = advance(model, x, cfg.nature.spinup_steps)

    def states(self, steps) -> dict[int, np.ndarray]:
        """States at the requested steps (relative to t0, may be negative down to -history)."""
        wanted = sorted(set(int(s) for s in steps))
        if wanted and wanted[0] < -self.history:
            raise ValueError(f"nature run starts {self.history} steps before t0; asked for {wanted[0]}")
        out = {}
        x = self._start
        pos = -self.history
        for s in wanted:
            x = advance(self.model, x, s - pos)
            pos = s
            out[s] = x
        return out

    def cycles(self, start: int = 0):
        """Yield (cycle, truth) for cycle = start, start + 1, ..."""
        x = self.states([start * self.steps_per_cycle])[start * self.steps_per_cycle]
        c = start
        while True:
            yield c, x
            x = advance(self.model, x, self.steps_per_cycle)
            c += 1

    def at_cycles(self, cycles) -> dict[int, np.ndarray]:
        st = self.states([c * self.steps_per_cycle for c in cycles])
        return {c: st[c * self.steps_per_cycle] for c in cycles}


def make_initial_ensemble(spec, k: int, layout, trajectory: Mapping[int, np.ndarray] | np.ndarray,
                          t0_index: int) -> EnsembleState:
    """Initial members from lagged nature states or from perturbed truth.

    ``lagged``: member m (counting from 1) is trajectory[t0_index - m * stride].
    ``perturb``: member m is trajectory[t0_index] plus N(0, magnitude^2) noise
    from a stream keyed on (seed, m).
    """
    if spec.mode == "lagged":
        idx = [t0_index - (m + 1) * spec.stride for m in range(k)]
        if idx[-1] < 0 or (not isinstance(trajectory, np.ndarray) and any(i not in trajectory for i in idx)):
            raise ValueError(f"lag stride {spec.stride} x {k} members exceeds the nature run")
        members = np.stack([trajectory[i] for i in idx])
    elif spec.mode == "perturb":
        truth = np.asarray(trajectory[t0_index], dtype=float)
        members = np.stack([truth + spec.magnitude * counter_rng(spec.seed, 4, m).standard_normal(truth.shape)
                            for m in range(k)])
    else:
        raise ValueError(f"unknown initial ensemble mode {spec.mode!r}")
    return EnsembleState(members, layout)


def initial_ensemble(cfg: ExperimentConfig, model, nature: Nature) -> EnsembleState:
    k = cfg.da.ensemble_size
    if cfg.init.mode == "lagged":
        steps = [-(m + 1) * cfg.init.stride for m in range(k)]
        traj = {s + nature.history: v for s, v in nature.states(steps).items()}
        return make_initial_ensemble(cfg.init, k, model.layout, traj, nature.history)
    return make_initial_ensemble(cfg.init, k, model.layout, {0: nature.states([0])[0]}, 0)


def cycle_time(cfg: ExperimentConfig, c: int) -> int:
    return cfg.run.start_time + c * cfg.run.cycle_seconds


def synthetic_cycle_obs(cfg: ExperimentConfig, model, truth, c: int) -> list[Observation]:
    """Raw synthetic observations belonging to cycle c."""
    o = cfg.obs
    if o.network == "ring":
        net = ring_network(model.layout.n, o.ring_every)
    elif o.network == "random":
        if not isinstance(model.layout, GridLayout):
            raise ValueError("random networks need a gridded model")
        net = random_network(model.layout.grid, o.n_per_var, o.variables, o.seed, c, o.cluster_fraction)
    else:
        raise ValueError(f"unknown obs.network {o.network!r}")
    offs = None
    if o.time_jitter:
        offs = counter_rng(o.seed, 5, c).integers(-o.time_jitter, o.time_jitter + 1, len(net))
    batch = synth_obs(truth, net, model.layout, o.error_std(), o.seed, c, cycle_time(cfg, c), offs)
    return batch.observations


class FileObsSource:
    """Observations from an exchange file, binned to the nearest analysis time."""

    def __init__(self, cfg: ExperimentConfig):
        path = Path(cfg.obs.path)
        if not path.exists():
            raise FileNotFoundError(f"observation file not found: {path}")
        self.bins: dict[int, list[Observation]] = defaultdict(list)
        for ob in read_obs_file(path):
            c = int(np.floor((ob.time - cfg.run.start_time) / cfg.run.cycle_seconds + 0.5))
            self.bins[c].append(ob)

    def __call__(self, c: int) -> list[Observation]:
        return self.bins.get(c, [])


def _co_reported(batch: ObsBatch, var: str) -> dict:
    return {(o.time, o.lat_deg, o.lon_deg, o.level_hpa): o.value
            for o in batch.observations if o.variable == var}


def _background_at(background: EnsembleState, obs: list[Observation], var: str) -> np.ndarray:
    if not obs:
        return np.zeros(0)
    arr = ObsArrays(np.zeros(len(obs)), np.ones(len(obs)), np.full(len(obs), VAR_CODE[var]),
                    np.array([o.lat_deg for o in obs]), np.array([o.lon_deg for o in obs]),
                    np.array([o.level_hpa for o in obs], dtype=float))
    h, _ = background.layout.operator(arr)
    return h @ background.mean.ravel()


def preprocess(batch: ObsBatch, background: EnsembleState, cfg: ExperimentConfig) -> ObsBatch:
    """Unit conversions then default-error fill.

    Virtual temperature is converted with a co-reported humidity when one
    exists at the same time and position, else with the background-mean
    humidity interpolated to the observation.  Relative-humidity errors are
    converted the same way, using co-reported or background temperature.
    """
    obs = list(batch.observations)
    if cfg.obs.t_is_virtual:
        q_rep = _co_reported(batch, "Q")
        t_idx = [i for i, o in enumerate(obs) if o.variable == "T"]
        need = [obs[i] for i in t_idx if (obs[i].time, obs[i].lat_deg, obs[i].lon_deg, obs[i].level_hpa) not in q_rep]
        q_bg = iter(np.clip(_background_at(background, need, "Q"), 0.0, 0.999))
        for i in t_idx:
            o = obs[i]
            key = (o.time, o.lat_deg, o.lon_deg, o.level_hpa)
            q = q_rep[key] if key in q_rep else next(q_bg)
            obs[i] = replace(o, value=virtual_to_real_temperature(o.value, max(q, 0.0)))
    if cfg.obs.q_error_is_rh:
        t_rep = _co_reported(ObsBatch(obs, batch.window_center), "T")
        q_idx = [i for i, o in enumerate(obs) if o.variable == "Q" and o.error_std is not None]
        need = [obs[i] for i in q_idx if (obs[i].time, obs[i].lat_deg, obs[i].lon_deg, obs[i].level_hpa) not in t_rep]
        t_bg = iter(_background_at(background, need, "T"))
        for i in q_idx:
            o = obs[i]
            key = (o.time, o.lat_deg, o.lon_deg, o.level_hpa)
            t_k = t_rep[key] if key in t_rep else next(t_bg)
            err = rh_error_to_q_error(o.level_hpa, t_k - 273.15, min(max(o.value, 0.0), 0.999), o.error_std)
            obs[i] = replace(o, error_std=err if err > 0 else None)
    return ObsBatch([assign_default_error(o) for o in obs], batch.window_center, batch.window_half_width)


def _fields(members: np.ndarray, layout) -> np.ndarray:
    """(k, n_fields, ...) view used for per-field scores."""
    tail = (-1,) if len(layout.shape) == 1 else layout.shape[1:]
    return members.reshape(members.shape[0], len(layout.fields), *tail)


# --- the experiment ------------------------------------------------------------------

class _Outputs:
    def __init__(self, cfg: ExperimentConfig, resume_from: int | None):
        self.cfg = cfg
        self.dir = Path(cfg.run.output_dir)
        self.dir.mkdir(parents=True, exist_ok=True)
        self.reports = self.dir / "reports.csv"
        self.innov = self.dir / "innovations.csv"
        if resume_from is None:
            (self.dir / "config.txt").write_text(dump_config(cfg))
            with open(self.reports, "w", newline="") as fh:
                csv.writer(fh, lineterminator="\n").writerow(REPORT_COLUMNS)
            if self.innov.exists():
                self.innov.unlink()
        else:
            for p in (self.reports, self.innov):
                if p.exists():
                    _truncate_after(p, resume_from)

    def report(self, rep: CycleReport):
        with open(self.reports, "a", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            for row in rep.rows():
                w.writerow(row)

    def status(self, **kw):
        (self.dir / "status.json").write_text(json.dumps(kw, indent=1) + "\n")


def _truncate_after(path: Path, cycle: int):
    lines = path.read_text().splitlines(keepends=True)
    keep = lines[:1] + [ln for ln in lines[1:] if int(ln.split(",", 1)[0]) <= cycle]
    path.write_text("".join(keep))


def _save_checkpoint(path: Path, c: int, members, acc):
    tmp = path.with_name(path.stem + ".tmp.npz")
    np.savez(tmp, cycle=c, members=members, **{f"acc_{k}": v for k, v in acc.items()})
    tmp.replace(path)


def run_cycle_experiment(cfg: ExperimentConfig, resume: bool = False,
                         progress: Callable[[int], None] | None = None) -> ExperimentResult:
    """Run the assimilation cycle described by cfg and persist its outputs.

    With ``resume`` the run continues from ``checkpoint.npz`` in the output
    directory; rows after the checkpoint cycle are discarded first.
    """
    t_start = _time.perf_counter()
    model = build_model(cfg)
    layout = model.layout
    nature = Nature(model, cfg)
    out_dir = Path(cfg.run.output_dir)
    ckpt_path = out_dir / "checkpoint.npz"

    acc = {"sq_err": np.zeros(layout.shape), "var": np.zeros(layout.shape), "n": np.zeros(())}
    if resume:
        if not ckpt_path.exists():
            raise FileNotFoundError(f"no checkpoint in {out_dir}")
        ck = np.load(ckpt_path)
        first = int(ck["cycle"]) + 1
        analysis = EnsembleState(ck["members"], layout)
        acc = {k: ck[f"acc_{k}"] for k in acc}
        outputs = _Outputs(cfg, first - 1)
    else:
        first = 1
        analysis = initial_ensemble(cfg, model, nature)
        outputs = _Outputs(cfg, None)

    obs_source = FileObsSource(cfg) if cfg.obs.source == "file" else None
    thinning_on = cfg.obs.thin and isinstance(layout, GridLayout)
    areas = model.areas
    spinup = cfg.spinup_cycles
    reports: list[CycleReport] = []
    archive: dict[int, np.ndarray] = {}
    steps = cfg.model.steps_per_cycle

    truth_iter = nature.cycles(first)
    c = first - 1
    try:
        for c, truth in truth_iter:
            if c > cfg.run.n_cycles:
                break
            t_c = cycle_time(cfg, c)
            try:
                background = analysis.with_members(advance(model, analysis.members, steps))
            except NonFiniteStateError:
                raise DivergenceError(c) from None
            if not background.all_finite():
                raise DivergenceError(c)

            if cfg.obs.source == "synthetic":
                raw = synthetic_cycle_obs(cfg, model, truth, c)
            elif cfg.obs.source == "file":
                raw = obs_source(c)
            else:
                raw = []
            windowed = select_window(raw, t_c)
            prepared = preprocess(windowed, background, cfg)
            thinned = thin(prepared, layout.grid, cfg.thinning).batch if thinning_on else prepared
            accepted, records = screen(background, thinned, cfg.da.gross_error_factor)

            diag = LetkfDiagnostics()
            analysis = letkf_analysis(background, accepted, cfg.da, diag)
            if diag.active_locations:
                analysis = relax(analysis, background, cfg.da, diag)
            if not analysis.all_finite():
                raise DivergenceError(c)

            if cfg.run.metrics:
                tf = _fields(truth[None], layout)[0]
                rb, sb = per_field_scores(_fields(background.members, layout), tf, _field_areas(areas, layout),
                                          cfg.run.spread_vs_truth)
                ra, sa = per_field_scores(_fields(analysis.members, layout), tf, _field_areas(areas, layout),
                                          cfg.run.spread_vs_truth)
            else:
                rb = ra = None
                sb = _spreads(background, layout, areas)
                sa = _spreads(analysis, layout, areas)
            rep = CycleReport(c, t_c, layout.field_labels(), rb, ra, sb, sa,
                              n_raw=len(raw), n_windowed=len(windowed), n_thinned=len(thinned),
                              n_qc_rejected=len(thinned) - len(accepted))
            reports.append(rep)
            outputs.report(rep)
            if cfg.run.innovations and records:
                write_innovations(records, c, outputs.innov)
            if c > spinup:
                acc["sq_err"] = acc["sq_err"] + (background.mean - truth) ** 2
                acc["var"] = acc["var"] + background.std ** 2
                acc["n"] = acc["n"] + 1
            if cfg.run.snapshot_every and c % cfg.run.snapshot_every == 0:
                write_state(out_dir / "snapshots" / f"analysis_c{c:05d}", analysis.members, model, t_c)
            if cfg.run.archive_every and c % cfg.run.archive_every == 0:
                archive[c] = analysis.members.copy()
                (out_dir / "archive").mkdir(exist_ok=True)
                np.save(out_dir / "archive" / f"analysis_c{c:05d}.npy", analysis.members)
            if cfg.run.checkpoint_every and c % cfg.run.checkpoint_every == 0:
                _save_checkpoint(ckpt_path, c, analysis.members, acc)
            if progress:
                progress(c)
    except DivergenceError as exc:
        outputs.status(status="diverged", cycle=exc.cycle, completed=exc.cycle - 1)
        raise
    if cfg.run.maps and acc["n"] > 0:
        n = float(acc["n"])
        write_state(out_dir / "maps" / "rmse_bg", np.sqrt(acc["sq_err"] / n), model)
        write_state(out_dir / "maps" / "spread_bg", np.sqrt(acc["var"] / n), model)
    elapsed = _time.perf_counter() - t_start
    outputs.status(status="completed", cycle=min(c, cfg.run.n_cycles), elapsed_s=round(elapsed, 3))
    return ExperimentResult(reports, analysis, archive, out_dir, elapsed)


def _field_areas(areas, layout):
    return areas if isinstance(layout, GridLayout) else np.asarray(areas)


def _spreads(ens: EnsembleState, layout, areas):
    m = _fields(ens.members, layout)
    return np.array([spread(m[:, f], _field_areas(areas, layout)) for f in range(m.shape[1])])


# --- lead-time experiment -------------------------------------------------------------

@dataclass
class LeadTimeRow:
    lead: int
    variable: str
    level_hpa: float | None
    rmse: float
    spread: float
    n_init: int


def load_archive(directory) -> dict[int, np.ndarray]:
    out = {}
    for p in sorted(Path(directory).glob("analysis_c*.npy")):
        out[int(p.stem.split("_c")[1])] = np.load(p)
    return out


def run_forecast_experiment(archive: Mapping[int, np.ndarray], model, lead_times,
                            truth: Mapping[int, np.ndarray] | Callable[[int], np.ndarray],
                            steps_per_cycle: int = 1, init_cycles=None) -> list[LeadTimeRow]:
    """Free ensemble forecasts from archived analyses, scored against the truth.

    Returns one row per (lead time, field), averaging RMSE and spread over
    all initial times.  Lead times are in cycles.
    """
    init_cycles = sorted(archive) if init_cycles is None else list(init_cycles)
    missing = [c for c in init_cycles if c not in archive]
    if missing:
        raise KeyError(f"archive has no analysis for cycles {missing}")
    if not init_cycles:
        raise ValueError("no initial times to forecast from")
    leads = sorted(set(int(x) for x in lead_times))
    layout = model.layout
    areas = _field_areas(model.areas, layout)
    get_truth = truth if callable(truth) else truth.__getitem__
    n_f = len(layout.fields)
    sum_r = np.zeros((len(leads), n_f))
    sum_s = np.zeros((len(leads), n_f))
    for c0 in init_cycles:
        x = np.asarray(archive[c0], dtype=float)
        pos = 0
        for li, lead in enumerate(leads):
            x = advance(model, x, (lead - pos) * steps_per_cycle)
            pos = lead
            tf = _fields(np.asarray(get_truth(c0 + lead))[None], layout)[0]
            r, s = per_field_scores(_fields(x, layout), tf, areas)
            sum_r[li] += r
            sum_s[li] += s
    n = len(init_cycles)
    rows = []
    for li, lead in enumerate(leads):
        for f, (var, lev) in enumerate(layout.field_labels()):
            rows.append(LeadTimeRow(lead, var, lev, sum_r[li, f] / n, sum_s[li, f] / n, n))
    return rows


def write_lead_table(rows: list[LeadTimeRow], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["lead_cycles", "variable", "level_hpa", "rmse", "spread", "n_init"])
        for r in rows:
            w.writerow([r.lead, r.variable, "" if r.level_hpa is None else repr(r.level_hpa),
                        repr(float(r.rmse)), repr(float(r.spread)), r.n_init])


def forecast_init_cycles(cfg: ExperimentConfig) -> list[int]:
    """The archived analysis times a lead-time experiment starts from: the last
    ``forecast.n_init`` archive cycles after spin-up."""
    every = cfg.run.archive_every
    if every <= 0:
        raise ValueError("run.archive_every must be positive for a lead-time experiment")
    cand = [c for c in range(every, cfg.run.n_cycles + 1, every) if c > cfg.spinup_cycles]
    return cand[-cfg.forecast.n_init:]


def forecast_from_config(cfg: ExperimentConfig, archive: Mapping[int, np.ndarray] | None = None) -> list[LeadTimeRow]:
    """Lead-time experiment on the archive written by a cycling run of cfg."""
    model = build_model(cfg)
    if archive is None:
        archive = load_archive(Path(cfg.run.output_dir) / "archive")
    inits = forecast_init_cycles(cfg)
    missing = [c for c in inits if c not in archive]
    if missing:
        raise KeyError(f"archive has no analysis for cycles {missing}")
    nature = Nature(model, cfg)
    truth = nature.at_cycles(sorted({c + lead for c in inits for lead in cfg.forecast.lead_times}))
    return run_forecast_experiment(archive, model, cfg.forecast.lead_times, truth,
                                   cfg.model.steps_per_cycle, inits)
