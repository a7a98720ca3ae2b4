import csv
import json

import numpy as np
import pytest

from enda import cli
from enda.config import ConfigError, ExperimentConfig, InitSection, dump_config, load_config, parse_config_text
from enda.cycle import (
    DivergenceError, Nature, advance, build_model, forecast_from_config, initial_ensemble,
    load_archive, make_initial_ensemble, preprocess, run_cycle_experiment, run_forecast_experiment,
)
from enda.obs import ObsBatch, Observation, rh_error_to_q_error, virtual_to_real_temperature
from enda.geo import GeoPoint
from enda.letkf import observe
from enda.state import EnsembleState, RingLayout

SMALL_GRID = {
    "model.kind": "surrogate", "model.n_lon": "16", "model.n_lat": "8", "model.levels": "900,500",
    "model.speeds": "1,2", "da.ensemble_size": "8", "init.stride": "3", "nature.spinup_steps": "20",
}


def l96(tmp_path, **kw):
    items = {"run.output_dir": str(tmp_path), "nature.spinup_steps": "200", "init.stride": "5"}
    items.update({k.replace("__", "."): str(v) for k, v in kw.items()})
    return load_config(None, items)


def read_rows(path):
    with open(path) as fh:
        return list(csv.DictReader(fh))


# --- configuration ------------------------------------------------------------------

def test_config_round_trip_and_errors(tmp_path):
    cfg = load_config(None, {"da.alpha": "1.2", "da.relaxation": "rtps", "run.n_cycles": "48"})
    assert cfg.da.alpha == 1.2 and cfg.spinup_cycles == 2
    p = tmp_path / "c.cfg"
    p.write_text("# comment\n" + dump_config(cfg))
    again = load_config(p)
    assert dump_config(again) == dump_config(cfg)
    for bad in ({"da.nope": "1"}, {"nope.alpha": "1"}, {"run.metrics": "maybe"}, {"run.n_cycles": "0"},
                {"run.n_cycles": "10", "run.spinup_cycles": "10"}, {"model.kind": "gcm"}, {"da.alpha": "x"},
                {"da.ensemble_size": "1"}):
        with pytest.raises(ConfigError):
            load_config(None, bad)
    with pytest.raises(ConfigError):
        parse_config_text("a.b = 1\na.b = 2\n")
    with pytest.raises(ConfigError):
        parse_config_text("just words\n")


def test_every_field_addressable():
    text = dump_config(ExperimentConfig())
    items = parse_config_text(text)
    assert "thinning.r_h" in items and "da.rho_v" in items and "obs.path" in items
    assert dump_config(load_config(None, items)) == text


# --- initial ensembles ------------------------------------------------------------------

def test_make_initial_ensemble_modes():
    traj = np.arange(30.0)[:, None] * np.ones((1, 4))
    lay = RingLayout(4, 150.0)
    lagged = make_initial_ensemble(InitSection(mode="lagged", stride=3), 5, lay, traj, 20)
    for m in range(1, 6):
        np.testing.assert_array_equal(lagged.members[m - 1], traj[20 - 3 * m])
    with pytest.raises(ValueError):
        make_initial_ensemble(InitSection(mode="lagged", stride=5), 5, lay, traj, 20)
    zero = make_initial_ensemble(InitSection(mode="perturb", magnitude=0.0), 4, lay, traj, 7)
    np.testing.assert_array_equal(zero.members, np.repeat(traj[7][None], 4, 0))
    a = make_initial_ensemble(InitSection(mode="perturb", magnitude=1.0, seed=3), 4, lay, traj, 7)
    b = make_initial_ensemble(InitSection(mode="perturb", magnitude=1.0, seed=3), 4, lay, traj, 7)
    c = make_initial_ensemble(InitSection(mode="perturb", magnitude=1.0, seed=4), 4, lay, traj, 7)
    np.testing.assert_array_equal(a.members, b.members)
    assert not np.array_equal(a.members, c.members)


def test_lagged_members_are_past_truth(tmp_path):
    cfg = l96(tmp_path, da__ensemble_size=4, init__stride=6)
    model = build_model(cfg)
    nature = Nature(model, cfg)
    ens = initial_ensemble(cfg, model, nature)
    st = nature.states([-6, -12, -18, -24])
    for m in range(1, 5):
        np.testing.assert_array_equal(ens.members[m - 1], st[-6 * m])
    with pytest.raises(ValueError):
        nature.states([-25])


# --- cycling ------------------------------------------------------------------------------

def test_one_cycle_gives_one_report(tmp_path):
    res = run_cycle_experiment(l96(tmp_path, run__n_cycles=1))
    assert len(res.reports) == 1 and res.reports[0].cycle == 1
    rows = read_rows(tmp_path / "reports.csv")
    assert len(rows) == 1 and rows[0]["variable"] == "X"
    assert json.loads((tmp_path / "status.json").read_text())["status"] == "completed"
    assert (tmp_path / "innovations.csv").exists()


def test_zero_obs_equals_free_run(tmp_path):
    cfg = l96(tmp_path, run__n_cycles=25, obs__source="none", da__relaxation="rtps", da__alpha=1.3)
    res = run_cycle_experiment(cfg)
    model = build_model(cfg)
    start = initial_ensemble(cfg, model, Nature(model, cfg))
    np.testing.assert_array_equal(res.final.members, advance(model, start.members, 25))
    assert not (tmp_path / "innovations.csv").exists()


def test_counters_monotone_with_thinning(tmp_path):
    items = dict(SMALL_GRID, **{"run.output_dir": str(tmp_path), "run.n_cycles": "4", "obs.network": "random",
                               "obs.n_per_var": "60", "obs.thin": "true", "obs.time_jitter": "3000",
                               "thinning.r_h": "800", "thinning.m_thresh": "5"})
    res = run_cycle_experiment(load_config(None, items))
    for r in res.reports:
        assert r.n_raw == 300
        assert r.n_raw >= r.n_windowed >= r.n_thinned >= r.n_qc_rejected >= 0
        assert r.n_windowed < r.n_raw and r.n_thinned < r.n_windowed
    assert (tmp_path / "maps" / "rmse_bg.json").exists()


def test_resume_reproduces_uninterrupted_run(tmp_path):
    full = l96(tmp_path / "a", run__n_cycles=12)
    run_cycle_experiment(full)
    part = l96(tmp_path / "b", run__n_cycles=7, run__checkpoint_every=3)
    run_cycle_experiment(part)
    resumed = l96(tmp_path / "b", run__n_cycles=12, run__checkpoint_every=3)
    run_cycle_experiment(resumed, resume=True)
    assert (tmp_path / "a" / "reports.csv").read_bytes() == (tmp_path / "b" / "reports.csv").read_bytes()
    assert (tmp_path / "a" / "innovations.csv").read_bytes() == (tmp_path / "b" / "innovations.csv").read_bytes()
    with pytest.raises(FileNotFoundError):
        run_cycle_experiment(l96(tmp_path / "c"), resume=True)


def test_divergence_aborts_and_keeps_outputs(tmp_path):
    # members start far off the attractor and blow up while the truth stays bounded
    cfg = l96(tmp_path, run__n_cycles=50, obs__source="none", model__steps_per_cycle=2,
              init__mode="perturb", init__magnitude=1e3)
    with np.errstate(all="ignore"), pytest.raises(DivergenceError) as info:
        run_cycle_experiment(cfg)
    status = json.loads((tmp_path / "status.json").read_text())
    assert status["status"] == "diverged" and status["cycle"] == info.value.cycle
    rows = read_rows(tmp_path / "reports.csv")
    assert len(rows) == info.value.cycle - 1


def test_missing_obs_file(tmp_path):
    cfg = l96(tmp_path, obs__source="file", obs__path=str(tmp_path / "absent.txt"))
    with pytest.raises(FileNotFoundError):
        run_cycle_experiment(cfg)


def test_file_obs_run_matches_synthetic_run(tmp_path):
    common = {"run__n_cycles": 6, "obs__time_jitter": 600}
    assert cli.main(["synth-obs", "--set", f"run.output_dir={tmp_path}", "--set", "run.n_cycles=6",
                     "--set", "nature.spinup_steps=200", "--set", "init.stride=5",
                     "--set", "obs.time_jitter=600", "--out", str(tmp_path / "obs.txt")]) == 0
    run_cycle_experiment(l96(tmp_path / "syn", **common))
    run_cycle_experiment(l96(tmp_path / "file", obs__source="file", obs__path=str(tmp_path / "obs.txt"), **common))
    assert (tmp_path / "syn" / "reports.csv").read_bytes() == (tmp_path / "file" / "reports.csv").read_bytes()


# --- preprocessing ----------------------------------------------------------------------

def grid_background():
    cfg = load_config(None, SMALL_GRID)
    model = build_model(cfg)
    x = model.initial_state(0)
    return cfg, model, EnsembleState(np.stack([x, x + 0.1, x - 0.1]), model.layout)


def test_preprocess_virtual_temperature():
    cfg, model, bg = grid_background()
    cfg = load_config(None, dict(SMALL_GRID, **{"obs.t_is_virtual": "true"}))
    t_with_q = Observation(0, 10.0, 20.0, 700.0, "T", 280.0, 1.0)
    q = Observation(0, 10.0, 20.0, 700.0, "Q", 0.01, 0.001)
    t_alone = Observation(0, -30.0, 100.0, 850.0, "T", 285.0, 1.0)
    out = preprocess(ObsBatch([t_with_q, q, t_alone], 0), bg, cfg).observations
    assert out[0].value == pytest.approx(virtual_to_real_temperature(280.0, 0.01), rel=1e-15)
    assert out[1] == q
    q_bg = observe(bg.mean, GeoPoint(-30.0, 100.0, 850.0), "Q", model.layout)
    assert out[2].value == pytest.approx(virtual_to_real_temperature(285.0, q_bg), rel=1e-15)
    assert out[2].value < 285.0


def test_preprocess_rh_error_and_defaults():
    _, model, bg = grid_background()
    cfg = load_config(None, dict(SMALL_GRID, **{"obs.q_error_is_rh": "true"}))
    t = Observation(0, 10.0, 20.0, 700.0, "T", 283.15, 1.0)
    q = Observation(0, 10.0, 20.0, 700.0, "Q", 0.004, 0.05)
    u = Observation(0, 10.0, 20.0, 700.0, "U", 3.0, None)
    out = preprocess(ObsBatch([t, q, u], 0), bg, cfg).observations
    assert out[1].error_std == pytest.approx(rh_error_to_q_error(700.0, 10.0, 0.004, 0.05), rel=1e-15)
    assert out[2].error_std is not None and out[2].error_std > 0


# --- lead-time experiment -----------------------------------------------------------

def test_forecast_experiment(tmp_path):
    cfg = l96(tmp_path, run__n_cycles=40, run__archive_every=2, forecast__n_init=10,
              forecast__lead_times="0,1,3")
    res = run_cycle_experiment(cfg)
    assert sorted(load_archive(tmp_path / "archive")) == sorted(res.archive)
    rows = forecast_from_config(cfg)
    lead0 = next(r for r in rows if r.lead == 0)
    inits = list(range(22, 41, 2))
    assert lead0.n_init == 10
    an = {r.cycle: r for r in res.reports}
    assert lead0.rmse == pytest.approx(np.mean([an[c].rmse_an[0] for c in inits]), rel=1e-12)
    assert lead0.spread == pytest.approx(np.mean([an[c].spread_an[0] for c in inits]), rel=1e-12)
    partial = {c: v for c, v in res.archive.items() if c != 30}
    with pytest.raises(KeyError, match="30"):
        forecast_from_config(cfg, partial)
    with pytest.raises(KeyError):
        run_forecast_experiment({}, build_model(cfg), [0], {}, init_cycles=[4])
