"""Invariant suites run by ``delaystab verify``.

Each suite returns a plain dict ``{"suite", "passed", "checks"}`` where every
check records the measured value, its threshold and a verdict, so the CLI can
print the whole thing as JSON.
"""

from __future__ import annotations

import math
import time
import warnings

import numpy as np

from .delay import ControlHistory, DelayOperator, apply_T_tau, artstein_residual, mat_exp, neumann_U
from .design import (
    b_matrices,
    build_design,
    determinant_chain,
    design_from_matrices,
    feedback_u,
    kalman_rank,
    mode_identity_check,
    per_gain_controls,
    lifting_modes,
    solve_lifting_bvp,
)
from .errors import RankConditionError
from .spectral import _root_fn, build_basis, choose_unstable_dim, solve_beta

SUITES = ("spectral", "design", "delay", "pdesim")

# the two-mode case used throughout: c=2, alpha=1, rho=5, gains (6, 7)
REF = {"c": 2.0, "alpha": 1.0, "rho": 5.0, "gammas": (6.0, 7.0), "tau": 0.2}


def _check(value, limit, op="<="):
    value = float(value)
    ok = value <= limit if op == "<=" else value < limit if op == "<" else value >= limit
    return {"value": value, "limit": float(limit), "op": op, "passed": bool(ok)}


def _suite(name, checks, started):
    return {
        "suite": name,
        "passed": all(c["passed"] for c in checks.values()),
        "seconds": round(time.perf_counter() - started, 3),
        "checks": checks,
    }


def reference_design():
    basis = build_basis(2, REF["c"], REF["alpha"])
    design = build_design(basis, REF["rho"], gammas=list(REF["gammas"]))
    return basis, design


def kalman_fixture(c=0.0):
    """Diagonal two-mode system driven through the first mode only."""
    return np.diag([-2.0 + c, -5.0 + c]), np.array([1.0, 0.0])


def random_triangular_case(rng, d=None):
    d = d or int(rng.integers(2, 6))
    diag = np.sort(rng.uniform(-5.0, 3.0, d))[::-1]
    if d > 1 and np.min(np.abs(np.diff(diag))) < 0.1:
        diag = diag + 0.3 * np.arange(d)[::-1]
    Lam = np.diag(diag) + np.triu(rng.normal(size=(d, d)), 1)
    L = rng.uniform(0.5, 2.0, d) * rng.choice([-1.0, 1.0], d)
    gammas = 6.0 + np.arange(1, d + 1) + rng.uniform(0.0, 0.5)
    return Lam, L, gammas


# --------------------------------------------------------------------- spectral

def fd_trace(basis, j, h=1e-5):
    # fourth-order central difference; psi_j is entire so x < 0 is fine
    f = lambda x: float(basis.psi(j, x))
    return (-f(2 * h) + 8 * f(h) - 8 * f(-h) + f(-2 * h)) / (12 * h)


def spectral_suite(alpha=1.0, c=2.0, rho=5.0, kmax=10):
    t0 = time.perf_counter()
    root_res = max(abs(_root_fn(solve_beta(k, alpha), alpha)) for k in range(kmax + 1))
    d = choose_unstable_dim(rho, c, alpha)
    n = d + 5
    basis = build_basis(n, c, alpha)
    G = basis.gram(n)
    bio = np.abs(G - np.eye(n)).max()
    trace_err = max(abs(basis.trace_l(j) - fd_trace(basis, j)) for j in range(n))
    checks = {
        "root_residual_max": _check(root_res, 1e-12),
        "biorthogonality_max_residual": _check(bio, 1e-8),
        "trace_fd_max_error": _check(trace_err, 1e-6),
    }
    return _suite("spectral", checks, t0)


# ----------------------------------------------------------------------- design

def lyapunov_violations(design, samples=10_000, seed=0, slack=1e-10):
    rng = np.random.default_rng(seed)
    Z = rng.normal(size=(samples, design.d))
    M = design.Lambda + design.C
    AZ = Z @ design.A.T
    lhs = np.einsum("ni,ni->n", Z @ M.T, AZ)
    rhs = -design.gammas[0] * np.einsum("ni,ni->n", AZ, Z)
    return int(np.sum(lhs > rhs + slack)), float(np.max(lhs - rhs))


def feedback_path_mismatch(design, U):
    """|sum_k u_k(U) - u(U)| scaled by sum_ik |R_ik (A U)_i|.

    The scale is the rounding bound of the underlying dot products; A has
    entries of order 1e7 in the reference case, so the absolute mismatch
    alone says little.
    """
    AU = design.A @ np.asarray(U, dtype=float)
    scale = float(np.abs(design.R).T.dot(np.abs(AU)).sum())
    diff = abs(per_gain_controls(design, U).sum() - feedback_u(design, U))
    return diff / scale if scale > 0 else diff


def design_suite(seed=0):
    t0 = time.perf_counter()
    basis, design = reference_design()
    A = design.A
    eig_A = np.linalg.eigvalsh(A)
    checks = {
        "sumB_condition": _check(design.sumB_cond, 1e8, "<"),
        "A_symmetry": _check(np.abs(A - A.T).max() / np.abs(A).max(), 1e-14),
        "A_min_eigenvalue_positive": _check(eig_A.min(), 0.0, ">="),
    }
    Lam_f, L_f = kalman_fixture()
    sv = np.linalg.svd(b_matrices(Lam_f, L_f, [6.0, 7.0]).sum(axis=0), compute_uv=False)
    checks["fixture_sumB_sv_ratio"] = _check(sv[-1] / sv[0], 1e-12, "<")
    try:
        design_from_matrices(Lam_f, L_f, [6.0, 7.0])
        raised = 0.0
    except RankConditionError:
        raised = 1.0
    checks["fixture_raises_rank_error"] = _check(raised, 1.0, ">=")

    rng = np.random.default_rng(seed)
    disagreements = 0
    cases = [(design.Lambda, design.L, design.gammas), (Lam_f, L_f, np.array([6.0, 7.0]))]
    cases += [random_triangular_case(rng) for _ in range(100)]
    for Lam, L, g in cases:
        _, _, agree = determinant_chain(Lam, L, g)
        disagreements += not agree
    checks["determinant_chain_disagreements"] = _check(disagreements, 0)

    viol, worst = lyapunov_violations(design, seed=seed)
    checks["lyapunov_violations"] = _check(viol, 0)

    ident = 0.0
    for U in rng.normal(size=(100, design.d)):
        ident = max(ident, mode_identity_check(design, U))
    checks["mode_identity_max_residual"] = _check(ident, 1e-12)

    sumBA = np.einsum("k,kij->ij", design.gammas, design.Bk) @ A
    rel = np.abs(design.Lambda + design.C + sumBA).max() / np.abs(sumBA).max()
    checks["closed_loop_identity"] = _check(rel, 1e-12)
    checks["Bk_symmetry"] = _check(max(np.abs(B - B.T).max() for B in design.Bk), 1e-14)

    worst_order = -math.inf
    for z in rng.normal(size=(200, design.d)):
        Az = A @ z
        for k in range(1, design.d):
            val = (design.gammas[0] - design.gammas[k]) * (Az @ design.Bk[k] @ Az)
            worst_order = max(worst_order, val / max(1.0, abs(Az @ Az)))
    checks["gain_ordering_form"] = _check(worst_order, 1e-12)

    per_k = max(feedback_path_mismatch(design, U) for U in rng.normal(size=(100, design.d)))
    checks["feedback_two_paths"] = _check(per_k, 1e-14)

    sol = solve_lifting_bvp(basis, design.d, 50.0, 2001, Lambda=design.Lambda)
    checks["lifting_bvp_vs_resolvent"] = _check(
        np.abs(sol.modes - lifting_modes(design, 50.0, 1.0)).max(), 1e-4)
    checks["lifting_bvp_boundary_residual"] = _check(sol.boundary_residual, 1e-6)
    return _suite("design", checks, t0)


# ------------------------------------------------------------------------ delay

def riemann_oracle(lam, cval, f, tau, t, points=1_000_000):
    """Midpoint sum of int_{max(t-tau,tau)}^t exp((t-tau-s) lam) c f ds."""
    lo = max(t - tau, tau)
    if lo >= t:
        return 0.0
    h = (t - lo) / points
    s = lo + h * (np.arange(points) + 0.5)
    return float(np.sum(np.exp((t - tau - s) * lam)) * h * cval * f)


def delay_suite(seed=0):
    t0 = time.perf_counter()
    rng = np.random.default_rng(seed)
    semi = 0.0
    for _ in range(50):
        d = int(rng.integers(1, 6))
        M = np.triu(rng.normal(size=(d, d)))
        s, r = rng.uniform(-2, 2, 2)
        P = mat_exp(M, s + r)
        semi = max(semi, np.abs(P - mat_exp(M, s) @ mat_exp(M, r)).max() / max(1.0, np.abs(P).max()))
    checks = {"mat_exp_semigroup": _check(semi, 1e-10)}

    lam, cval, f, tau, t = 0.7, 1.3, 0.9, 0.2, 0.75
    op = DelayOperator(tau, np.array([[lam]]), np.array([[cval]]))
    times = np.linspace(0.0, t, 301)
    F = ControlHistory.from_samples(times, np.full((times.size, 1), f))
    val = apply_T_tau(op, F, t)[0]
    checks["T_tau_vs_riemann_oracle"] = _check(abs(val - riemann_oracle(lam, cval, f, tau, t)), 1e-8)

    _, design = reference_design()
    op0 = DelayOperator.from_design(design, 0.0)
    Yh = ControlHistory.from_samples(times, rng.normal(size=(times.size, 2)))
    worst = 0.0
    for s in times[::30]:
        U, _ = neumann_U(op0, Yh, s)
        worst = max(worst, np.abs(U - Yh(s)).max())
    checks["tau_zero_identity"] = _check(worst, 0.0)

    op = DelayOperator.from_design(design, REF["tau"])
    Fa = ControlHistory.from_samples(times, rng.normal(size=(times.size, 2)))
    Gb = ControlHistory.from_samples(times, rng.normal(size=(times.size, 2)))
    a, b = 0.3, -1.7
    FG = ControlHistory.from_samples(times, a * Fa.values + b * Gb.values)
    lin = 0.0
    for s in (0.3, 0.5, 0.75):
        lhs = apply_T_tau(op, FG, s)
        rhs = a * apply_T_tau(op, Fa, s) + b * apply_T_tau(op, Gb, s)
        lin = max(lin, np.abs(lhs - rhs).max() / max(1.0, np.abs(lhs).max()))
    checks["T_tau_linearity"] = _check(lin, 1e-12)
    return _suite("delay", checks, t0)


# ----------------------------------------------------------------------- pdesim

def pdesim_suite():
    from .pdesim import SimConfig, estimate_decay_rate, run_closed_loop

    t0 = time.perf_counter()
    cfg = SimConfig(c=2.0, alpha=1.0, tau=0.2, y0="sin1", grid_m=400, dt=1e-4, t_final=2.0)
    ol = run_closed_loop(cfg, control=False)
    rate = estimate_decay_rate(ol, 0.0)
    checks = {"open_loop_rate_error": _check(abs(rate - 1.0), 0.02)}

    basis, design = reference_design()
    cfg = SimConfig(c=2.0, alpha=1.0, rho=5.0, tau=0.2, gammas=[6.0, 7.0], grid_m=200, dt=1e-3, t_final=3.0)
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        tr = run_closed_loop(cfg, design=design, basis=basis)
    op = DelayOperator.from_design(design, cfg.tau)
    Uh, Yh = tr.history("U"), tr.history("Y")
    res = max(artstein_residual(op, Uh, Yh, s) for s in tr.t[::50])
    checks["artstein_residual_max"] = _check(res, 1e-9)
    checks["closed_loop_rate_negative"] = _check(estimate_decay_rate(tr, 1.0), 0.0, "<")
    # t = 0 is skipped: the presets need not satisfy the nonlocal condition
    h = math.pi / (cfg.grid_m + 1)
    ratio = np.abs(tr.boundary_residual[1:]) / tr.norm_y[1:]
    checks["boundary_residual_max"] = _check(ratio.max(), h * h)
    return _suite("pdesim", checks, t0)


def run_suites(selector="all"):
    names = SUITES if selector == "all" else (selector,)
    table = {"spectral": spectral_suite, "design": design_suite, "delay": delay_suite, "pdesim": pdesim_suite}
    unknown = [n for n in names if n not in table]
    if unknown:
        raise KeyError(unknown[0])
    results = [table[n]() for n in names]
    return {"passed": all(r["passed"] for r in results), "suites": results}
