"""Finite-dimensional proportional feedback for the unstable modes.

Given the restriction ``Lambda`` of the generator to the first ``d`` basis
functions and the boundary traces ``L``, the gains ``gamma_1 < ... < gamma_d``
define ``B_k = (Lambda + gamma_k)^-1 GramB (Lambda^T + gamma_k)^-1`` with
``GramB = L L^T``, ``A = (sum B_k)^-1`` and ``C = -Lambda - sum gamma_k B_k A``.
The projected closed loop ``Y' = Lambda Y + C U`` with ``U = Y`` is then
stable with Lyapunov weight ``A``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import BasisInconsistencyError, GammaTooSmallError, RankConditionError
from .quadrature import composite_gauss, simpson_weights
from .spectral import BasisPair, choose_unstable_dim, eigenvalue

SINGULAR_COND = 1e12


def _cond_solve(M, rhs, what="matrix"):
    cond = np.linalg.cond(M)
    if not np.isfinite(cond) or cond > SINGULAR_COND:
        raise np.linalg.LinAlgError(f"{what} is numerically singular (cond={cond:.3e})")
    return np.linalg.solve(M, rhs)


def build_lambda(basis: BasisPair, d: int, nodes: int | None = None, check: bool = True) -> np.ndarray:
    """Lambda_ij = <psi_i, phi_j'' + c phi_j> by Gauss quadrature.

    The result is block upper bidiagonal: eigenvalues on the diagonal and one
    coupling entry at (2k, 2k+1) of magnitude 2 beta_k + 2k + 1.  With the
    basis normalised as in :class:`BasisPair` that entry comes out negative.
    """
    if d > basis.size:
        raise IndexError(f"basis holds {basis.size} functions, {d} requested")
    x, w = composite_gauss(0.0, math.pi, nodes or basis.quad_nodes)
    psi = basis.psi_matrix(x, d)
    aphi = basis.phi_matrix(x, d, order=2) + basis.c * basis.phi_matrix(x, d)
    Lam = (psi * w) @ aphi.T
    if check:
        expected = np.diag([eigenvalue(j, basis.c, basis.spectrum.betas) for j in range(d)])
        mask = np.ones((d, d), dtype=bool)
        np.fill_diagonal(mask, False)
        for k in range(d // 2):
            mag = 2.0 * basis.spectrum.betas[k] + 2 * k + 1
            if abs(abs(Lam[2 * k, 2 * k + 1]) - mag) > 1e-6 * max(1.0, mag):
                raise BasisInconsistencyError(
                    f"coupling entry ({2 * k},{2 * k + 1}) = {Lam[2 * k, 2 * k + 1]:.6g}, expected magnitude {mag:.6g}"
                )
            mask[2 * k, 2 * k + 1] = False
        diag_err = np.max(np.abs(np.diag(Lam) - np.diag(expected)))
        off = np.max(np.abs(Lam[mask])) if mask.any() else 0.0
        if diag_err > 1e-6 * max(1.0, np.max(np.abs(np.diag(expected)))) or off > 1e-8:
            raise BasisInconsistencyError(f"Lambda structure violated (diag err {diag_err:.2e}, off-block {off:.2e})")
    return Lam


def default_gammas(rho: float, d: int) -> np.ndarray:
    return rho + np.arange(1, d + 1, dtype=float)


def kalman_matrix(Lambda, L) -> np.ndarray:
    Lambda = np.asarray(Lambda, dtype=float)
    L = np.asarray(L, dtype=float).reshape(-1)
    cols = [L]
    for _ in range(len(L) - 1):
        cols.append(Lambda @ cols[-1])
    return np.column_stack(cols)


def _numerical_rank(M, rtol):
    s = np.linalg.svd(M, compute_uv=False)
    if s[0] == 0.0:
        return 0, s
    return int(np.sum(s > rtol * s[0])), s


def kalman_rank(Lambda, L, rtol: float = 1e-12) -> tuple[bool, int]:
    """Whether [L, Lambda L, ..., Lambda^{d-1} L] has full numerical rank."""
    K = kalman_matrix(Lambda, L)
    if K.shape[0] != np.asarray(Lambda).shape[0]:
        raise ValueError("dimension mismatch between Lambda and L")
    rank, _ = _numerical_rank(K, rtol)
    return rank == K.shape[0], rank


def resolvent_columns(Lambda, L, gammas) -> np.ndarray:
    """Columns (Lambda + gamma_k I)^-1 L, k = 1..len(gammas)."""
    Lambda = np.asarray(Lambda, dtype=float)
    L = np.asarray(L, dtype=float).reshape(-1)
    eye = np.eye(len(L))
    return np.column_stack([_cond_solve(Lambda + g * eye, L, f"Lambda + {g:g} I") for g in gammas])


def b_matrices(Lambda, L, gammas) -> np.ndarray:
    """Stack of B_k; the boundary space is scalar so each is rank one."""
    R = resolvent_columns(Lambda, L, gammas)
    return np.einsum("ik,jk->kij", R, R)


@dataclass(frozen=True)
class DesignSet:
    d: int
    Lambda: np.ndarray
    L: np.ndarray
    gammas: np.ndarray
    GramB: np.ndarray
    Bk: np.ndarray
    A: np.ndarray
    C: np.ndarray
    sumB_cond: float
    gain: np.ndarray = field(repr=False)
    R: np.ndarray = field(repr=False, default=None)

    def to_dict(self):
        full, _ = kalman_rank(self.Lambda, self.L)
        s = np.linalg.svd(kalman_matrix(self.Lambda, self.L), compute_uv=False)
        return {
            "d": self.d,
            "lambda": self.Lambda.tolist(),
            "L": self.L.tolist(),
            "gammas": self.gammas.tolist(),
            "A": self.A.tolist(),
            "C": self.C.tolist(),
            "kalman": bool(full),
            "min_singular_value": float(s[-1]),
        }


def design_from_matrices(Lambda, L, gammas) -> DesignSet:
    Lambda = np.array(Lambda, dtype=float)
    L = np.array(L, dtype=float).reshape(-1)
    gammas = np.array(gammas, dtype=float)
    d = len(L)
    if Lambda.shape != (d, d) or gammas.shape != (d,):
        raise ValueError("need a d x d Lambda, d traces and d gains")
    if np.any(gammas <= 0) or np.any(np.diff(gammas) <= 0):
        raise ValueError("gains must be positive and strictly increasing")
    Bk = b_matrices(Lambda, L, gammas)
    S = Bk.sum(axis=0)
    cond = float(np.linalg.cond(S))
    if not np.isfinite(cond) or cond > SINGULAR_COND:
        raise RankConditionError(f"sum of B_k is singular (cond={cond:.3e}); rank condition fails", cond=cond)
    A = np.linalg.inv(S)
    A = 0.5 * (A + A.T)
    C = -Lambda - np.einsum("k,kij,jl->il", gammas, Bk, A)
    R = resolvent_columns(Lambda, L, gammas)
    gain = -R.sum(axis=1) @ A
    return DesignSet(
        d=d, Lambda=Lambda, L=L, gammas=gammas, GramB=np.outer(L, L),
        Bk=Bk, A=A, C=C, sumB_cond=cond, gain=gain, R=R,
    )


def build_design(basis: BasisPair, rho: float, gammas=None, d: int | None = None) -> DesignSet:
    """Design for the nonlocal heat example; ``gammas`` may be a list or a rule ``f(rho, d)``."""
    if rho <= 0:
        raise ValueError("rho must be positive")
    if d is None:
        d = choose_unstable_dim(rho, basis.c, basis.alpha)
    if gammas is None:
        gammas = default_gammas(rho, d)
    elif callable(gammas):
        gammas = gammas(rho, d)
    Lam = build_lambda(basis, d)
    return design_from_matrices(Lam, basis.traces(d), gammas)


def determinant_chain(Lambda, L, gammas, rtol: float = 1e-12) -> tuple[bool, bool, bool]:
    """(resolvent determinant nonzero, Kalman full rank, agreement)."""
    try:
        R = resolvent_columns(Lambda, L, gammas)
    except np.linalg.LinAlgError:
        return False, kalman_rank(Lambda, L, rtol)[0], False
    rank, _ = _numerical_rank(R, rtol)
    det_ok = rank == R.shape[0]
    kal_ok = kalman_rank(Lambda, L, rtol)[0]
    return det_ok, kal_ok, det_ok == kal_ok


def determinant_chain_check(design: DesignSet) -> bool:
    return determinant_chain(design.Lambda, design.L, design.gammas)[2]


def lifting_modes(design: DesignSet, gamma: float, beta_value: float) -> np.ndarray:
    """First d modes <D_gamma beta, psi_i> = (Lambda + gamma I)^-1 L beta."""
    M = design.Lambda + gamma * np.eye(design.d)
    return _cond_solve(M, design.L, "Lambda + gamma I") * beta_value


def per_gain_controls(design: DesignSet, U) -> np.ndarray:
    """u_k(U) = -<(Lambda^T + gamma_k I)^-1 A U, L> for every k."""
    # <(Lambda^T + g)^-1 AU, L> = <AU, (Lambda + g)^-1 L>, so the stored
    # resolvent columns serve both this and the assembled evaluation
    AU = design.A @ np.asarray(U, dtype=float)
    return -(design.R.T @ AU)


def feedback_u(design: DesignSet, U) -> float:
    """Scalar boundary input, assembled as -<A U, sum_k (Lambda + gamma_k)^-1 L>."""
    AU = design.A @ np.asarray(U, dtype=float)
    return float(-(design.R.sum(axis=1) @ AU))


def mode_identity_check(design: DesignSet, U) -> float:
    """Largest relative mismatch between (Lambda+gamma_k)^-1 L u_k(U) and -B_k A U.

    The mismatch is scaled by ``|B_k A U|`` since A is typically badly scaled
    and the absolute size of both sides grows with it.
    """
    U = np.asarray(U, dtype=float)
    uk = per_gain_controls(design, U)
    AU = design.A @ U
    worst = 0.0
    for k, g in enumerate(design.gammas):
        lhs = lifting_modes(design, g, uk[k])
        rhs = -design.Bk[k] @ AU
        scale = max(np.linalg.norm(rhs), np.finfo(float).tiny)
        if np.linalg.norm(rhs) == 0.0 and np.linalg.norm(lhs) == 0.0:
            continue
        worst = max(worst, float(np.linalg.norm(lhs - rhs) / scale))
    return worst


@dataclass
class LiftingSolution:
    x: np.ndarray
    D: np.ndarray
    modes: np.ndarray
    boundary_residual: float
    h: float


def solve_lifting_bvp(basis: BasisPair, d: int, gamma: float, grid_m: int, Lambda=None,
                      beta_value: float = 1.0) -> LiftingSolution:
    """Finite-difference solve of the lifting problem with boundary datum ``beta_value``.

    Solves ``-D'' - c D + 2 sum_{i,j<d} Lambda_ij <D, psi_j> phi_i + gamma D = 0``
    with ``D(0) = beta_value`` and ``D'(0) + D'(pi) + alpha D(pi) = 0``.  Taking
    the inner product with ``psi_i`` yields ``(Lambda + gamma I) modes = L beta``.
    Second-order centred differences inside, one-sided second-order
    differences in the nonlocal condition, Simpson weights for the inner
    products; the rank-d coupling is handled with a Woodbury correction.
    """
    if grid_m < 3:
        raise ValueError("grid_m too small")
    if Lambda is None:
        Lambda = build_lambda(basis, d)
    m = grid_m
    h = math.pi / (m + 1)
    x = h * np.arange(m + 2)
    alpha, c = basis.alpha, basis.c
    n = m + 1  # unknowns D_1..D_{m+1}
    inv_h2 = 1.0 / (h * h)

    rows, cols, vals = [], [], []
    rhs = np.zeros(n)
    for i in range(1, m + 1):
        r = i - 1
        rows.append(r); cols.append(r); vals.append(2.0 * inv_h2 + gamma - c)
        if i > 1:
            rows.append(r); cols.append(r - 1); vals.append(-inv_h2)
        else:
            rhs[r] += inv_h2 * beta_value
        rows.append(r); cols.append(r + 1); vals.append(-inv_h2)
    # nonlocal condition row, scaled by 2h
    r = m
    for col, v in ((0, 4.0), (1, -1.0), (m, 3.0 + 2.0 * h * alpha), (m - 1, -4.0), (m - 2, 1.0)):
        rows.append(r); cols.append(col); vals.append(v)
    rhs[r] += 3.0 * beta_value
    T = sp.csc_matrix((vals, (rows, cols)), shape=(n, n))

    wq = simpson_weights(m + 1, h)
    psi_nodes = basis.psi_matrix(x, d)  # (d, m+2)
    phi_nodes = basis.phi_matrix(x, d)
    # coupling 2 * Phi^T Lambda (Psi W D) on interior rows only
    Uc = np.zeros((n, d))
    Uc[:m] = 2.0 * phi_nodes[:, 1:m + 1].T @ Lambda
    Vc = (psi_nodes[:, 1:] * wq[1:]).T  # (n, d)
    rhs[:m] -= Uc[:m] @ (psi_nodes[:, 0] * wq[0] * beta_value)

    try:
        lu = spla.splu(T)
        Tinv_rhs = lu.solve(rhs)
        Tinv_U = lu.solve(Uc)
    except RuntimeError as exc:
        raise GammaTooSmallError(f"discrete lifting operator is singular: {exc}") from exc
    cap = np.eye(d) + Vc.T @ Tinv_U
    sv = np.linalg.svd(cap, compute_uv=False)
    # near -gamma in the unstable spectrum the capacitance matrix is singular
    # up to the O(h^2) discretisation error, so compare against that floor
    if not np.all(np.isfinite(Tinv_rhs)) or sv[-1] <= max(10.0 * h * h, 1.0 / SINGULAR_COND) * sv[0]:
        raise GammaTooSmallError(
            f"lifting problem is singular at gamma={gamma:g} (capacitance sv ratio {sv[-1] / sv[0]:.2e})")
    sol = Tinv_rhs - Tinv_U @ np.linalg.solve(cap, Vc.T @ Tinv_rhs)

    D = np.concatenate([[beta_value], sol])
    modes = psi_nodes @ (wq * D)
    d0 = (-3 * D[0] + 4 * D[1] - D[2]) / (2 * h)
    dpi = (3 * D[-1] - 4 * D[-2] + D[-3]) / (2 * h)
    return LiftingSolution(x=x, D=D, modes=modes, boundary_residual=abs(d0 + dpi + alpha * D[-1]), h=h)
