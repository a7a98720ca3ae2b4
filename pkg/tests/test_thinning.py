import math

import numpy as np
import pytest

from enda.geo import GridSpec, great_circle_km
from enda.obs import ObsBatch, Observation
from enda.thinning import (
    ThinningConfig, build_state, contribution, decay_weights, distance_weight, quality_weight,
    thin, thin_variable, write_density_report,
)

SMALL = GridSpec.regular(16, 8, (900.0, 700.0, 500.0))


def make_obs(lat, lon, lev=700.0, var="T", qmk=0):
    return [Observation(0, float(a), float(b), float(p), var, 250.0, 1.0, q)
            for a, b, p, q in zip(lat, lon, np.broadcast_to(lev, np.shape(lat)), np.broadcast_to(qmk, np.shape(lat)))]


def random_obs(n, seed, grid=SMALL, clustered=False):
    rng = np.random.default_rng(seed)
    if clustered:
        lat = np.clip(rng.normal(30, 8, n), -89, 89)
        lon = rng.normal(100, 10, n) % 360
    else:
        lat = np.degrees(np.arcsin(rng.uniform(-1, 1, n)))
        lon = rng.uniform(0, 360, n)
    lev = grid.levels_hpa[rng.integers(0, grid.n_levels, n)] * np.exp(rng.normal(0, 0.05, n))
    qmk = rng.choice([0, 0, 0, 1, 2, 3, 5], n)
    return make_obs(lat, lon, lev, qmk=qmk)


def brute_force_thin(obs, grid, cfg):
    """Dense reference implementation of the greedy selection, written without shared helpers."""
    glat, glon = grid.horizontal_points()
    glp = np.log(grid.levels_hpa)
    n_col = glat.size
    g_lat = np.tile(glat, glp.size)
    g_lon = np.tile(glon, glp.size)
    g_lp = np.repeat(glp, n_col)
    olat = np.array([o.lat_deg for o in obs])
    olon = np.array([o.lon_deg for o in obs])
    olp = np.log([o.level_hpa for o in obs])
    wq = np.array([{0: 1.0, 1: 0.8, 2: 0.4, 3: 0.1}.get(o.qmk, 0.0) for o in obs])
    cut = math.sqrt(10 / 3)

    def wd(dh, dv):
        inside = (dh < cut * cfg.r_h) & (dv < cut * cfg.r_v)
        return np.where(inside, np.exp(-0.5 * ((dh / cfg.r_h) ** 2 + (dv / cfg.r_v) ** 2)), 0.0)

    w = wd(great_circle_km(g_lat[:, None], g_lon[:, None], olat[None], olon[None]),
           np.abs(g_lp[:, None] - olp[None])) * wq[None]
    w_oo = wd(great_circle_km(olat[:, None], olon[:, None], olat[None], olon[None]),
              np.abs(olp[:, None] - olp[None]))
    dens = np.zeros(w.shape[0])
    taken = np.zeros(len(obs), dtype=bool)
    order = []
    while cfg.m_thresh is None or len(order) < cfg.m_thresh:
        c = np.where(w > 0, np.maximum(0.0, w * (cfg.w_max - dens[:, None]) / (dens[:, None] + cfg.epsilon)), 0.0)
        cmax = np.where(taken, -np.inf, c.max(axis=0))
        if taken.all():
            break
        j = int(np.argmax(cmax))
        if not cmax[j] > 0 or cmax[j] < cfg.c_thresh:
            break
        order.append(j)
        taken[j] = True
        dens += w[:, j]
        w *= (1.0 - w_oo[j])[None, :] ** 2
    return order


def test_distance_weight_examples():
    assert distance_weight(0, 0, 500, 0.1) == 1.0
    assert distance_weight(500, 0, 500, 0.1) == pytest.approx(0.60653, abs=1e-5)
    assert distance_weight(920, 0, 500, 0.1) == 0.0
    assert distance_weight(912.0, 0, 500, 0.1) > 0.0


def test_quality_weight_mapping():
    assert [quality_weight(q) for q in (0, 1, 2, 3)] == [1.0, 0.8, 0.4, 0.1]
    assert quality_weight(7) == 0.0
    assert quality_weight(None) == 0.4
    with pytest.raises(ValueError):
        quality_weight(16)


def test_contribution_examples():
    assert contribution(1.0, 1.0, 1.0, 1e-10) == 0.0
    assert contribution(1.0, 2.0, 1.0, 1e-10) == 0.0
    assert contribution(1.0, 0.0, 1.0, 1e-10) == pytest.approx(1e10)
    assert contribution(0.5, 0.5, 1.0, 1e-10) == pytest.approx(0.5, rel=1e-9)


def test_config_validation():
    for bad in (dict(r_h=0), dict(r_v=-1), dict(w_max=0), dict(epsilon=0), dict(m_thresh=-1)):
        with pytest.raises(ValueError):
            ThinningConfig(**bad)


def _three_obs_state(offset_km):
    # obs 0 at the equator, obs 1 offset east by offset_km, obs 2 far away
    dlon = math.degrees(offset_km / 6371.0072)
    obs = make_obs([0.0, 0.0, 60.0], [100.0, 100.0 + dlon, 300.0])
    cfg = ThinningConfig()
    return build_state(obs, SMALL, cfg)


def test_decay_colocated_goes_to_zero():
    st = _three_obs_state(0.0)
    st.update_flag[:] = False
    before = st.weights[st.entries(1)].copy()
    far = st.weights[st.entries(2)].copy()
    decay_weights(st, 0)
    assert np.all(before > 0)
    assert np.all(st.weights[st.entries(1)] == 0.0)
    np.testing.assert_array_equal(st.weights[st.entries(2)], far)
    assert st.update_flag[1] and not st.update_flag[2]


def test_decay_at_one_radius():
    st = _three_obs_state(500.0)
    before = st.weights[st.entries(1)].copy()
    decay_weights(st, 0)
    np.testing.assert_allclose(st.weights[st.entries(1)] / before, (1 - math.exp(-0.5)) ** 2, rtol=1e-9)
    assert (1 - math.exp(-0.5)) ** 2 == pytest.approx(0.15483, abs=5e-5)


def test_single_obs_selected():
    st = thin_variable(make_obs([10.0], [50.0]), SMALL, ThinningConfig())
    assert st.selected == [0]
    assert st.best_contribution[0] > 1e6


def test_two_identical_obs_one_selected():
    st = thin_variable(make_obs([10.0, 10.0], [50.0, 50.0]), SMALL, ThinningConfig())
    assert st.selected == [0]


def test_isolated_before_second_cluster_member():
    rng = np.random.default_rng(4)
    lat = list(np.clip(rng.normal(20, 1.0, 50), -89, 89)) + [-40.0]
    lon = list(rng.normal(200, 1.0, 50)) + [20.0]
    obs = make_obs(lat, lon)
    st = thin_variable(obs, SMALL, ThinningConfig())
    cluster_picks = [k for k, j in enumerate(st.selected) if j < 50]
    assert 50 in st.selected
    assert st.selected.index(50) < cluster_picks[1]
    assert st.selected == brute_force_thin(obs, SMALL, ThinningConfig())


@pytest.mark.parametrize("seed", range(6))
def test_matches_brute_force_reference(seed):
    obs = random_obs(120, seed, clustered=seed % 2 == 1)
    cfg = ThinningConfig(r_h=1500.0, r_v=0.3)
    assert thin_variable(obs, SMALL, cfg).selected == brute_force_thin(obs, SMALL, cfg)


@pytest.mark.parametrize("seed", range(5))
def test_update_flags_match_exhaustive(seed):
    grid = GridSpec.regular()
    obs = random_obs(500, 100 + seed, grid, clustered=seed % 2 == 0)
    a = thin_variable(obs, grid, ThinningConfig(use_update_flags=True))
    b = thin_variable(obs, grid, ThinningConfig(use_update_flags=False))
    assert a.selected == b.selected
    assert a.best_contribution == b.best_contribution


def test_weights_and_densities_invariants():
    obs = random_obs(150, 9, clustered=True)
    cfg = ThinningConfig(r_h=1500.0, r_v=0.3)
    n_full = len(thin_variable(obs, SMALL, cfg).selected)
    assert n_full > 5
    prev = None
    for m in range(0, n_full + 2):
        st = thin_variable(obs, SMALL, ThinningConfig(r_h=1500.0, r_v=0.3, m_thresh=m))
        assert np.all((st.weights >= 0) & (st.weights <= 1))
        assert np.all(st.density_sel <= st.density_all + 1e-12)
        if prev is not None and len(st.selected) > len(prev.selected):
            assert st.selected[:-1] == prev.selected
            assert np.all(st.weights <= prev.weights)
            assert np.all(st.density_sel >= prev.density_sel)
            c_now = [st.contributions(j) for j in range(st.n_obs)]
            c_prev = [prev.contributions(j) for j in range(prev.n_obs)]
            for a, b in zip(c_now, c_prev):
                assert np.all(a <= b + 1e-12)
        prev = st


def test_saturated_grid_points_contribute_nothing():
    obs = random_obs(200, 3, clustered=True)
    st = thin_variable(obs, SMALL, ThinningConfig(r_h=1500.0, r_v=0.3))
    sat = st.density_sel >= st.w_max
    assert sat.any()
    for j in range(st.n_obs):
        sl = st.entries(j)
        c = st.contributions(j)
        assert np.all(c[sat[st.entry_grid[sl]]] == 0.0)


def test_stopping_thresholds():
    obs = random_obs(200, 5)
    assert len(thin_variable(obs, SMALL, ThinningConfig(m_thresh=7)).selected) == 7
    st = thin_variable(obs, SMALL, ThinningConfig(c_thresh=0.5))
    assert min(st.best_contribution) >= 0.5
    loose = thin_variable(obs, SMALL, ThinningConfig(c_thresh=1e-6))
    assert len(loose.selected) >= len(st.selected)
    assert all(c > 0 for c in loose.best_contribution)


def test_global_saturation_exit_stops_early():
    obs = random_obs(200, 6, clustered=True)
    a = thin_variable(obs, SMALL, ThinningConfig(r_h=1500.0, r_v=0.3))
    b = thin_variable(obs, SMALL, ThinningConfig(r_h=1500.0, r_v=0.3, global_saturation_exit=True))
    assert len(b.selected) <= len(a.selected)
    assert b.selected == a.selected[:len(b.selected)]
    assert b.density_sel.max() > b.w_max


def test_bad_quality_never_selected():
    obs = make_obs([0.0, 40.0], [10.0, 200.0], qmk=[7, 0])
    assert thin_variable(obs, SMALL, ThinningConfig()).selected == [1]


def test_homogenises_coverage():
    grid = GridSpec.regular()
    wins = 0
    for seed in range(20):
        rng = np.random.default_rng(1000 + seed)
        obs = make_obs(np.degrees(np.arcsin(rng.uniform(-1, 1, 300))), rng.uniform(0, 360, 300), 500.0)
        st = thin_variable(obs, grid, ThinningConfig(m_thresh=60))
        sel = np.array(st.selected)
        rand = rng.choice(len(obs), sel.size, replace=False)

        def min_dist(idx):
            la = np.array([obs[i].lat_deg for i in idx])
            lo = np.array([obs[i].lon_deg for i in idx])
            d = great_circle_km(la[:, None], lo[:, None], la[None], lo[None])
            return d[np.triu_indices(idx.size, 1)].min()

        wins += min_dist(sel) > min_dist(rand)
    assert wins >= 18


def test_thin_is_per_variable_and_keeps_order(tmp_path):
    t = make_obs([5.0, 5.0], [30.0, 30.0], var="T")
    u = make_obs([5.0], [30.0], var="U")
    batch = ObsBatch([t[0], u[0], t[1]], 0)
    grid = GridSpec.regular()
    res = thin(batch, grid, ThinningConfig())
    assert [o.variable for o in res.batch] == ["T", "U"]
    assert all(0 < o.selection_weight <= 1 for o in res.batch)
    write_density_report(res, grid, tmp_path / "d.csv")
    lines = (tmp_path / "d.csv").read_text().splitlines()
    assert lines[0].startswith("variable,level_hpa")
    assert len(lines) > 1


def test_empty_and_deterministic():
    assert len(thin(ObsBatch([], 0), SMALL, ThinningConfig()).batch) == 0
    obs = random_obs(300, 11)
    a = thin(ObsBatch(obs, 0), SMALL, ThinningConfig())
    b = thin(ObsBatch(obs, 0), SMALL, ThinningConfig())
    assert a.batch.observations == b.batch.observations


def test_surface_pressure_uses_reported_value():
    ps = [Observation(0, 0.0, 10.0, None, "PS", 1000.0, 1.0, 0),
          Observation(0, 0.0, 10.0, None, "PS", 600.0, 1.0, 0)]
    st = thin_variable(ps, GridSpec.regular(), ThinningConfig())
    # ln(1000/600) is beyond the vertical cutoff, so both are kept
    assert sorted(st.selected) == [0, 1]
