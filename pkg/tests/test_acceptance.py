"""The ten acceptance criteria, each at its stated tolerance.

Every test records a PASS/FAIL line that is printed in the terminal summary
under "acceptance criteria".
"""

import math
import time

import numpy as np
import pytest

from delaystab.delay import ControlHistory, DelayOperator, apply_T_tau, artstein_residual, neumann_U, target_system_check
from delaystab.design import (
    b_matrices,
    determinant_chain,
    kalman_rank,
    lifting_modes,
    mode_identity_check,
    solve_lifting_bvp,
)
from delaystab.pdesim import SimConfig, estimate_decay_rate, lyapunov_values, run_closed_loop, run_modal_ode
from delaystab.spectral import _root_fn, build_basis, choose_unstable_dim, solve_beta
from delaystab.verify import fd_trace, kalman_fixture, lyapunov_violations, random_triangular_case, riemann_oracle

from conftest import ACCEPT_CONFIG


def test_c01_spectral_suite(record_criterion):
    t0 = time.perf_counter()
    root = max(abs(_root_fn(solve_beta(k, 1.0), 1.0)) for k in range(11))
    d = choose_unstable_dim(5.0, 2.0, 1.0)
    n = d + 5  # indices 0..d+4
    basis = build_basis(n, 2.0, 1.0)
    bio = np.abs(basis.gram(n) - np.eye(n)).max()
    trace = max(abs(basis.trace_l(j) - fd_trace(basis, j)) for j in range(n))
    dt = time.perf_counter() - t0
    ok = root <= 1e-12 and bio <= 1e-8 and trace <= 1e-6 and dt < 5.0
    record_criterion(1, ok, f"root {root:.1e}, biorth {bio:.1e}, trace {trace:.1e}, {dt:.2f}s")
    assert ok


def test_c02_rank_dichotomy(ref_design, record_criterion):
    t0 = time.perf_counter()
    D = ref_design
    spd = np.array_equal(D.A, D.A.T) and np.linalg.eigvalsh(D.A).min() > 0
    Lam_f, L_f = kalman_fixture()
    s = np.linalg.svd(b_matrices(Lam_f, L_f, [6.0, 7.0]).sum(axis=0), compute_uv=False)
    ratio = s[-1] / s[0]
    rng = np.random.default_rng(2024)
    cases = [(D.Lambda, D.L, D.gammas), (Lam_f, L_f, [6.0, 7.0])]
    cases += [random_triangular_case(rng) for _ in range(100)]
    agree = sum(determinant_chain(*c)[2] for c in cases)
    dt = time.perf_counter() - t0
    ok = D.sumB_cond < 1e8 and spd and ratio < 1e-12 and agree == len(cases) and dt < 5.0
    record_criterion(2, ok, f"cond {D.sumB_cond:.2e}, fixture sv ratio {ratio:.1e}, "
                            f"chain agrees {agree}/{len(cases)}, {dt:.2f}s")
    assert ok


def test_c03_lyapunov(ref_design, ref_basis, record_criterion):
    viol, worst = lyapunov_violations(ref_design, samples=10_000, seed=11, slack=1e-10)
    cfg = SimConfig(**{**ACCEPT_CONFIG, "tau": 0.0, "t_final": 5.0})
    mo = run_modal_ode(cfg, design=ref_design, basis=ref_basis)
    V = lyapunov_values(ref_design, mo.Y)
    bound = V[0] * np.exp(-2 * ref_design.gammas[0] * mo.t) * (1 + 1e-6)
    excess = float(np.max(V - bound))
    ok = viol == 0 and excess <= 0
    record_criterion(3, ok, f"violations {viol}/10000, max V - bound {excess:.1e}")
    assert ok


def test_c04_mode_identity(ref_design, record_criterion):
    rng = np.random.default_rng(4)
    res = max(mode_identity_check(ref_design, U) for U in rng.normal(size=(100, 2)))
    ok = res <= 1e-12
    record_criterion(4, ok, f"max residual {res:.1e}")
    assert ok


def test_c05_lifting_cross_check(ref_basis, ref_design, record_criterion):
    exact = lifting_modes(ref_design, 50.0, 1.0)
    sol = solve_lifting_bvp(ref_basis, 2, 50.0, 2001, Lambda=ref_design.Lambda)
    err = np.abs(sol.modes - exact).max()
    errs = [np.abs(solve_lifting_bvp(ref_basis, 2, 50.0, m, Lambda=ref_design.Lambda).modes - exact).max()
            for m in (255, 511, 1023)]
    rates = [a / b for a, b in zip(errs, errs[1:])]
    ok = err <= 1e-4 and all(3.0 < r < 5.0 for r in rates)
    record_criterion(5, ok, f"error {err:.1e}, refinement ratios {rates[0]:.2f}, {rates[1]:.2f}")
    assert ok


def test_c06_delay_layer(acceptance_run, ref_design, record_criterion):
    tr, _ = acceptance_run
    op = DelayOperator.from_design(ref_design, tr.tau)
    Uh, Yh = tr.history("U"), tr.history("Y")
    art = max(artstein_residual(op, Uh, Yh, t) for t in tr.t)

    lam, cval, f, tau, t = 0.7, 1.3, 0.9, 0.2, 0.75
    op1 = DelayOperator(tau, np.array([[lam]]), np.array([[cval]]))
    times = np.linspace(0.0, t, 301)
    quad = apply_T_tau(op1, ControlHistory.from_samples(times, np.full((301, 1), f)), t)[0]
    oracle = abs(quad - riemann_oracle(lam, cval, f, tau, t, points=1_000_000))

    op0 = DelayOperator.from_design(ref_design, 0.0)
    exact = all(np.array_equal(neumann_U(op0, Yh, s)[0], Yh(s)) for s in (0.0, 0.37, 2.5, 9.999))
    ok = art <= 1e-6 and oracle <= 1e-8 and exact
    record_criterion(6, ok, f"artstein max {art:.1e} over {len(tr.t)} samples, "
                            f"quadrature vs Riemann {oracle:.1e}, tau=0 exact {exact}")
    assert ok


def test_c07_open_loop_oracle(record_criterion):
    t0 = time.perf_counter()
    cfg = SimConfig(c=2.0, alpha=1.0, tau=0.2, y0="sin1", grid_m=400, dt=1e-4, t_final=2.0)
    tr = run_closed_loop(cfg, control=False)
    rate = estimate_decay_rate(tr, 0.0)
    dt = time.perf_counter() - t0
    ok = abs(rate - 1.0) <= 0.02 and dt < 20.0
    record_criterion(7, ok, f"rate {rate:.6f}, {dt:.2f}s")
    assert ok


def test_c08_closed_loop(acceptance_run, record_criterion):
    tr, elapsed = acceptance_run
    ratio = tr.norm_y[-1] / tr.norm_y[0]
    rate = estimate_decay_rate(tr, 1.0, 10.0)
    ol = run_closed_loop(SimConfig(**ACCEPT_CONFIG), control=False)
    growth = ol.norm_y[-1] / ol.norm_y[0]
    ok = ratio <= 1e-3 and rate < 0 and growth >= math.exp(5) and elapsed < 60.0
    record_criterion(8, ok, f"norm ratio {ratio:.2e}, rate {rate:.3f}, open-loop growth {growth:.2e}, "
                            f"run {elapsed:.1f}s")
    assert ok


def test_c09_target_system(acceptance_run, ref_design, record_criterion):
    tr, _ = acceptance_run
    op = DelayOperator.from_design(ref_design, tr.tau)
    Uh, Yh = tr.history("U"), tr.history("Y")
    ts = tr.t[(tr.t >= 2 * tr.tau - 1e-12)][::10]
    W = max(target_system_check(op, Uh, Yh, t) for t in ts)
    ok = W <= 1e-5
    record_criterion(9, ok, f"max |W(tau,t)| {W:.2e} over {len(ts)} times in [2 tau, T]")
    assert ok


def test_c10_kalman_counterexample(record_criterion):
    ranks = {c: kalman_rank(*kalman_fixture(c)) for c in (0.0, 1.0, 3.0)}
    ok = all(r == (False, 1) for r in ranks.values())
    record_criterion(10, ok, "ranks " + ", ".join(f"c={c:g}: {r[1]}" for c, r in ranks.items()))
    assert ok
