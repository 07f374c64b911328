import csv
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from delaystab.errors import BlowUpError, ConfigError
from delaystab.pdesim import (
    CrankNicolson,
    Grid,
    HeatModel,
    SimConfig,
    Trajectory,
    estimate_decay_rate,
    initial_profile,
    lyapunov_values,
    project_modes,
    run_closed_loop,
    run_modal_ode,
    step_open_loop,
    write_profile_csv,
    write_trajectory_csv,
)


def evolve(m, c, dt, t_end, y0_fn, alpha=1.0):
    """Open-loop CN run from y0_fn on the interior nodes; returns model and final interior state."""
    model = HeatModel(Grid(m), c, alpha)
    cn = CrankNicolson(model, dt)
    y = y0_fn(model.grid.x[1:-1])
    for _ in range(int(round(t_end / dt))):
        y = cn.step(y, 0.0, 0.0)
    return model, y


# --------------------------------------------------------------- config

def test_grid():
    g = Grid(400)
    assert g.h * (g.m + 1) == pytest.approx(math.pi, rel=1e-15)
    assert len(g.x) == 402 and g.x[0] == 0.0
    with pytest.raises(ValueError):
        Grid(49)


@pytest.mark.parametrize("bad", [
    {"dt": 0.0}, {"tau": -0.1}, {"t_final": 0.1, "tau": 0.2}, {"grid_m": 10},
    {"y0": "square"}, {"gammas": [7.0, 6.0]}, {"alpha": -1.0}, {"tau": 1e-4, "dt": 1e-3},
])
def test_config_rejects(bad):
    with pytest.raises(ConfigError):
        SimConfig(**bad)


def test_config_from_dict():
    cfg = SimConfig.from_dict({"tau": "0.3", "grid_m": 100.0, "gammas": [6, 7]})
    assert cfg.tau == 0.3 and cfg.grid_m == 100 and cfg.gammas == [6.0, 7.0]
    assert set(cfg.to_dict()) == {"alpha", "c", "rho", "tau", "gammas", "grid_m", "dt", "t_final", "y0", "seed"}
    with pytest.raises(ConfigError):
        SimConfig.from_dict({"tau": 0.2, "delay": 1})
    with pytest.raises(ConfigError):
        SimConfig.from_dict({"grid_m": 100.5})
    with pytest.raises(ConfigError):
        SimConfig.from_dict({"c": True})
    with pytest.raises(ConfigError):
        SimConfig.from_dict({"c": "abc"})


@given(st.dictionaries(st.text(min_size=1, max_size=8), st.integers(), min_size=1))
def test_config_unknown_keys_property(data):
    keys = set(SimConfig().to_dict())
    if set(data) <= keys:
        return
    with pytest.raises(ConfigError):
        SimConfig.from_dict(data)


def test_initial_profiles():
    g = Grid(100)
    assert np.allclose(initial_profile("sin1", g), np.sin(g.x))
    assert np.allclose(initial_profile("sin-mix", g), np.sin(g.x) + 0.5 * np.sin(2 * g.x))
    a, b = initial_profile("random-smooth", g, 7), initial_profile("random-smooth", g, 7)
    assert np.array_equal(a, b) and not np.array_equal(a, initial_profile("random-smooth", g, 8))
    assert abs(a[0]) < 1e-15
    sampled = initial_profile([0.0, 1.0, 0.0], g)
    assert sampled.max() == pytest.approx(1.0, abs=1e-2)
    with pytest.raises(ConfigError):
        initial_profile([1.0], g)


# --------------------------------------------------------------- open loop

def test_separable_solution_c2():
    model, y = evolve(400, 2.0, 1e-4, 1.0, np.sin)
    exact = math.e * np.sin(model.grid.x[1:-1])
    assert np.abs(y - exact).max() / np.abs(exact).max() <= 1e-3


def test_separable_solution_c0():
    model, y = evolve(400, 0.0, 1e-3, 1.0, np.sin)
    exact = math.exp(-1.0) * np.sin(model.grid.x[1:-1])
    assert np.abs(y - exact).max() / np.abs(exact).max() <= 1e-3


def test_second_eigenfunction_growth(ref_basis):
    beta0 = ref_basis.spectrum.betas[0]
    lam1 = 2.0 - 4 * beta0**2
    model, y = evolve(400, 2.0, 1e-3, 2.0, lambda x: np.sin(2 * beta0 * x))
    full = model.full_profile(y, 0.0)
    x = model.grid.x
    rate = math.log(model.norm(full) / model.norm(np.sin(2 * beta0 * x))) / 2.0
    assert lam1 == pytest.approx(0.0518, abs=1e-4)
    assert rate == pytest.approx(lam1, abs=1e-3)


def test_spatial_second_order():
    errs = []
    for m in (63, 127, 255):
        model, y = evolve(m, 2.0, 1e-3, 0.5, np.sin)
        errs.append(np.abs(y - math.exp(0.5) * np.sin(model.grid.x[1:-1])).max())
    for a, b in zip(errs, errs[1:]):
        assert 3.0 < a / b < 5.0


def test_step_open_loop_boundary_value():
    model = HeatModel(Grid(100), 2.0, 1.0)
    y = np.zeros(100)
    y1 = step_open_loop(model, y, 1.0, 1e-3)
    assert y1[0] > 0 and np.all(np.isfinite(y1))
    full = model.full_profile(y1, 1.0)
    assert full[0] == 1.0
    assert abs(model.boundary_residual(full)) <= 1e-9


def test_open_loop_rate():
    cfg = SimConfig(c=2.0, tau=0.2, y0="sin1", grid_m=400, dt=1e-4, t_final=2.0)
    tr = run_closed_loop(cfg, control=False)
    assert estimate_decay_rate(tr, 0.0) == pytest.approx(1.0, rel=0.02)
    assert np.all(tr.u == 0)


def test_stable_open_loop_decays():
    cfg = SimConfig(c=0.0, rho=5.0, tau=0.2, y0="sin1", grid_m=200, dt=1e-3, t_final=3.0)
    tr = run_closed_loop(cfg, control=False)
    assert estimate_decay_rate(tr, 0.5) <= -min(1.0, cfg.rho) + 1e-3


def test_blow_up_guard():
    cfg = SimConfig(c=2.0, tau=0.2, y0="sin1", grid_m=100, dt=1e-2, t_final=5.0)
    with pytest.raises(BlowUpError) as info:
        run_closed_loop(cfg, control=False, blowup_factor=10.0)
    assert info.value.ratio > 10.0 and info.value.t == pytest.approx(math.log(10.0), abs=0.05)


# --------------------------------------------------------------- projection

def test_project_basis_functions(ref_basis):
    g = Grid(400)
    for j in range(2):
        Y = project_modes(ref_basis, ref_basis.phi(j, g.x), 2, g)
        assert np.abs(Y - np.eye(2)[j]).max() <= 1e-6
    assert np.all(project_modes(ref_basis, np.zeros(402), 2) == 0)


def test_logged_modes_match_profiles(ref_basis, ref_design):
    cfg = SimConfig(tau=0.2, gammas=[6.0, 7.0], grid_m=100, dt=1e-3, t_final=0.5)
    tr = run_closed_loop(cfg, design=ref_design, basis=ref_basis, profile_every=50)
    idx = np.rint(tr.profile_t / cfg.dt).astype(int)
    for i, prof in zip(idx, tr.profiles):
        assert np.abs(project_modes(ref_basis, prof, 2) - tr.Y[i]).max() <= 1e-10


# --------------------------------------------------------------- closed loop

def test_closed_loop_stabilises(acceptance_run):
    tr, _ = acceptance_run
    assert tr.norm_y[-1] / tr.norm_y[0] <= 1e-3
    assert estimate_decay_rate(tr, 1.0) < 0


def test_input_off_before_delay(acceptance_run):
    tr, _ = acceptance_run
    before = tr.t < tr.tau - 1e-12
    assert np.all(tr.u[before] == 0)
    replay = tr.history("command")
    after = ~before
    assert np.allclose(tr.u[after], replay(tr.t[after] - tr.tau)[:, 0], rtol=0, atol=1e-12)


def test_boundary_condition_held(acceptance_run):
    tr, _ = acceptance_run
    h = math.pi / 401
    assert np.all(np.abs(tr.boundary_residual[1:]) <= h * h * tr.norm_y[1:])


def test_modal_surrogate_matches_pde(acceptance_run, ref_design, ref_basis):
    tr, _ = acceptance_run
    cfg = SimConfig(tau=0.2, gammas=[6.0, 7.0], t_final=5.0)
    mo = run_modal_ode(cfg, design=ref_design, basis=ref_basis)
    n = len(mo.t)
    assert np.abs(mo.Y - tr.Y[:n]).max() / np.abs(mo.Y).max() <= 5e-3


def test_tau_zero_matches_undelayed(ref_design, ref_basis):
    cfg = SimConfig(tau=0.0, gammas=[6.0, 7.0], grid_m=200, dt=1e-3, t_final=2.0)
    a = run_closed_loop(cfg, design=ref_design, basis=ref_basis)
    b = run_closed_loop(cfg, design=ref_design, basis=ref_basis, predictor=False)
    assert np.abs(a.norm_y - b.norm_y).max() <= 1e-6
    assert estimate_decay_rate(a, 0.5) < 0


def test_modal_zero_initial(ref_design, ref_basis):
    cfg = SimConfig(tau=0.2, gammas=[6.0, 7.0], t_final=0.5)
    mo = run_modal_ode(cfg, design=ref_design, basis=ref_basis, Y0=np.zeros(2))
    assert np.all(mo.Y == 0)


def test_modal_lyapunov_tau_zero(ref_design, ref_basis):
    cfg = SimConfig(tau=0.0, gammas=[6.0, 7.0], t_final=5.0)
    mo = run_modal_ode(cfg, design=ref_design, basis=ref_basis)
    V = lyapunov_values(ref_design, mo.Y)
    bound = V[0] * np.exp(-2 * ref_design.gammas[0] * mo.t) * (1 + 1e-6)
    assert np.all(V <= bound)


# --------------------------------------------------------------- rates & output

def test_rate_on_synthetic_data():
    t = np.linspace(0, 3, 301)
    tr = Trajectory(t=t, norm_y=np.exp(-2 * t), u=np.zeros_like(t), Y=np.zeros((301, 1)))
    assert estimate_decay_rate(tr, 0.0) == pytest.approx(-2.0, abs=1e-10)
    tr.norm_y[-1] = 0.0
    with pytest.raises(ValueError):
        estimate_decay_rate(tr, 0.0)
    with pytest.raises(ValueError):
        estimate_decay_rate(tr, 5.0)


def test_csv_output(tmp_path, ref_design, ref_basis):
    cfg = SimConfig(tau=0.2, gammas=[6.0, 7.0], grid_m=60, dt=1e-2, t_final=0.5)
    tr = run_closed_loop(cfg, design=ref_design, basis=ref_basis, profile_every=10)
    path = tmp_path / "traj.csv"
    write_trajectory_csv(tr, path)
    rows = list(csv.reader(open(path)))
    assert rows[0] == ["t", "norm_y", "u", "Y0", "Y1"]
    assert len(rows) == len(tr.t) + 1
    back = np.array(rows[1:], dtype=float)
    assert np.array_equal(back[:, 1], tr.norm_y) and np.array_equal(back[:, 3:], tr.Y)
    ppath = tmp_path / "prof.csv"
    write_profile_csv(tr, ppath)
    prow = list(csv.reader(open(ppath)))
    assert prow[0] == ["t", "x", "y"] and len(prow) == 1 + len(tr.profile_t) * 62


def test_profile_csv_needs_profiles(tmp_path):
    t = np.zeros(1)
    with pytest.raises(ValueError):
        write_profile_csv(Trajectory(t=t, norm_y=t, u=t, Y=np.zeros((1, 1))), tmp_path / "p.csv")
