"""Eigenproblem of y'' + c y on (0, pi) with y(0) = 0, y'(0) + y'(pi) + alpha y(pi) = 0.

The eigenvalues come in pairs: ``-(2k+1)**2 + c`` with eigenfunction
``sin((2k+1)x)`` and ``-(2 beta_k)**2 + c`` with eigenfunction
``sin(2 beta_k x)``, where ``beta_k`` is the root of
``cot(beta pi) = -alpha / (2 beta)`` in ``(k + 1/2, k + 1)``.  The two members
of a pair merge as ``k`` grows, so the raw eigenfunctions are replaced by the
Riesz basis ``phi`` and its dual ``psi`` built here.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np

from .errors import IllConditionedBasisError, SolverFailure
from .quadrature import composite_gauss

ROOT_TOL = 1e-12


def _root_fn(beta, alpha):
    return math.cos(beta * math.pi) / math.sin(beta * math.pi) + alpha / (2.0 * beta)


def _root_dfn(beta, alpha):
    s = math.sin(beta * math.pi)
    return -math.pi / (s * s) - alpha / (2.0 * beta * beta)


def solve_beta(k: int, alpha: float, tol: float = ROOT_TOL, maxiter: int = 200) -> float:
    """Root of ``cot(beta pi) + alpha/(2 beta)`` in the open interval (k+1/2, k+1).

    The function is positive at the left end and tends to -inf at the right
    end, so bisection always brackets the root; a few Newton steps then
    polish the last bits.
    """
    if alpha <= 0:
        raise ValueError("alpha must be positive")
    if k < 0:
        raise ValueError("k must be nonnegative")
    lo, hi = k + 0.5, k + 1.0
    for _ in range(maxiter):
        mid = 0.5 * (lo + hi)
        if mid <= lo or mid >= hi:
            break
        if _root_fn(mid, alpha) > 0.0:
            lo = mid
        else:
            hi = mid
    beta = 0.5 * (lo + hi)
    for _ in range(4):
        f = _root_fn(beta, alpha)
        step = f / _root_dfn(beta, alpha)
        cand = beta - step
        if not (k + 0.5 < cand < k + 1.0) or abs(_root_fn(cand, alpha)) >= abs(f):
            break
        beta = cand
    residual = abs(_root_fn(beta, alpha))
    if not (k + 0.5 < beta < k + 1.0) or residual > tol:
        raise SolverFailure(
            f"beta_{k} did not converge (residual {residual:.3e})",
            bracket=(lo, hi),
            residual=residual,
        )
    return beta


@dataclass(frozen=True)
class Spectrum:
    c: float
    alpha: float
    betas: tuple
    lambdas: tuple

    @property
    def deltas(self):
        return tuple(b - k - 0.5 for k, b in enumerate(self.betas))

    @property
    def count(self):
        return len(self.lambdas)

    def __len__(self):
        return len(self.lambdas)


def eigenvalue(j: int, c: float, betas) -> float:
    k, odd = divmod(j, 2)
    if odd:
        return -(2.0 * betas[k]) ** 2 + c
    return -float(2 * k + 1) ** 2 + c


def eigenvalues(count: int, c: float, alpha: float) -> Spectrum:
    """First ``count`` eigenvalues, ordered by index j (pairs 2k, 2k+1)."""
    if count < 1:
        raise ValueError("count must be >= 1")
    npairs = (count + 1) // 2
    betas = tuple(solve_beta(k, alpha) for k in range(npairs))
    lambdas = tuple(eigenvalue(j, c, betas) for j in range(count))
    return Spectrum(c=float(c), alpha=float(alpha), betas=betas, lambdas=lambdas)


def choose_unstable_dim(rho: float, c: float, alpha: float, max_pairs: int = 10_000) -> int:
    """Smallest even d = 2N+2 with lambda_{2N+2} and lambda_{2N+3} below -rho.

    Whole pairs are always kept, so the answer is at least 2 even when the
    first eigenvalue is already below -rho.
    """
    if rho <= 0:
        raise ValueError("rho must be positive")
    for n in range(max_pairs):
        k = n + 1
        lam_even = -float(2 * k + 1) ** 2 + c
        if lam_even >= -rho:
            continue
        lam_odd = -(2.0 * solve_beta(k, alpha)) ** 2 + c
        if lam_odd < -rho:
            return 2 * n + 2
    raise RuntimeError("no admissible dimension found")  # pragma: no cover


def _norm_integral(beta, alpha, nodes):
    x, w = composite_gauss(0.0, math.pi, nodes)
    m = 2.0 * beta
    integrand = np.sin(m * x) * (np.sin(m * x) + (m / alpha) * np.cos(m * x))
    return float(w @ integrand)


def compute_c2(k: int, alpha: float, beta: float | None = None, nodes: int = 400) -> float:
    """Constant C_{k2} making <sin(2 beta_k x), v_{k2}> equal to one."""
    if beta is None:
        beta = solve_beta(k, alpha)
    integral = _norm_integral(beta, alpha, nodes)
    if abs(integral) < 1e-12:
        raise IllConditionedBasisError(f"normalization integral for k={k} vanishes ({integral:.3e})")
    return 1.0 / integral


class BasisPair:
    """Closed-form Riesz basis ``phi_j`` and dual system ``psi_j`` on [0, pi].

    ``phi_{2k} = w_{k1}``, ``phi_{2k+1} = (w_{k2} - w_{k1}) / (2 delta_k)``,
    ``psi_{2k} = v_{k1} + v_{k2}``, ``psi_{2k+1} = 2 delta_k v_{k2}`` with
    ``w_{k1} = sin((2k+1)x)``, ``w_{k2} = sin(2 beta_k x)`` and the adjoint
    eigenfunctions ``v``.  All evaluators accept scalars or arrays and take a
    derivative order.
    """

    def __init__(self, spectrum: Spectrum, quad_nodes: int = 400):
        self.spectrum = spectrum
        self.alpha = spectrum.alpha
        self.c = spectrum.c
        self.quad_nodes = quad_nodes
        self.c2 = tuple(
            compute_c2(k, spectrum.alpha, beta=b, nodes=quad_nodes) for k, b in enumerate(spectrum.betas)
        )
        self.deltas = spectrum.deltas

    @property
    def size(self):
        """Number of basis functions available (two per solved root)."""
        return 2 * len(self.spectrum.betas)

    def _pair(self, j):
        if not 0 <= j < self.size:
            raise IndexError(f"basis index {j} outside built range 0..{self.size - 1}")
        return divmod(j, 2)

    @staticmethod
    def _sin(m, x, order):
        # d^order/dx^order sin(m x)
        phase = (np.sin, np.cos, lambda t: -np.sin(t), lambda t: -np.cos(t))[order % 4]
        return m ** order * phase(m * x)

    @staticmethod
    def _cos(m, x, order):
        phase = (np.cos, lambda t: -np.sin(t), lambda t: -np.cos(t), np.sin)[order % 4]
        return m ** order * phase(m * x)

    def w(self, k, kind, x, order=0):
        m = 2 * k + 1 if kind == 1 else 2.0 * self.spectrum.betas[k]
        return self._sin(m, np.asarray(x, dtype=float), order)

    def v(self, k, kind, x, order=0):
        # v_{k1} = (2/pi)(sin(mx) - (m/alpha) cos(mx)),  m = 2k+1
        # v_{k2} = C_{k2}(sin(mx) + (m/alpha) cos(mx)),  m = 2 beta_k
        # the + sign is what the adjoint conditions v(0) + v(pi) = 0,
        # v'(pi) = alpha v(0) require given cot(beta pi) = -alpha/(2 beta)
        x = np.asarray(x, dtype=float)
        if kind == 1:
            m, scale, sign = float(2 * k + 1), 2.0 / math.pi, -1.0
        else:
            m, scale, sign = 2.0 * self.spectrum.betas[k], self.c2[k], 1.0
        return scale * (self._sin(m, x, order) + sign * (m / self.alpha) * self._cos(m, x, order))

    def phi(self, j, x, order=0):
        k, odd = self._pair(j)
        if not odd:
            return self.w(k, 1, x, order)
        return (self.w(k, 2, x, order) - self.w(k, 1, x, order)) / (2.0 * self.deltas[k])

    def psi(self, j, x, order=0):
        k, odd = self._pair(j)
        if not odd:
            return self.v(k, 1, x, order) + self.v(k, 2, x, order)
        return 2.0 * self.deltas[k] * self.v(k, 2, x, order)

    def phi_matrix(self, x, n, order=0):
        return np.array([self.phi(j, x, order) for j in range(n)])

    def psi_matrix(self, x, n, order=0):
        return np.array([self.psi(j, x, order) for j in range(n)])

    def trace_l(self, j) -> float:
        """l_j = psi_j'(0), the boundary trace entering the lifting identity."""
        k, odd = self._pair(j)
        beta, c2 = self.spectrum.betas[k], self.c2[k]
        if odd:
            val = 4.0 * self.deltas[k] * beta * c2
        else:
            val = 2.0 * beta * c2 + (2.0 / math.pi) * (2 * k + 1)
        if abs(val) < 1e-12:
            warnings.warn(f"trace l_{j} = {val:.3e} is numerically zero; rank condition at risk", RuntimeWarning)
        return val

    def traces(self, n):
        return np.array([self.trace_l(j) for j in range(n)])

    def gram(self, n, nodes=None):
        """Matrix of <phi_i, psi_j> under composite Gauss quadrature."""
        x, w = composite_gauss(0.0, math.pi, nodes or self.quad_nodes)
        P = self.phi_matrix(x, n)
        Q = self.psi_matrix(x, n)
        return (P * w) @ Q.T

    def table(self):
        """Rows (k, beta_k, lambda_2k, lambda_2k+1, C_k2, l_2k, l_2k+1)."""
        rows = []
        for k, beta in enumerate(self.spectrum.betas):
            c = self.c
            rows.append(
                (
                    k,
                    beta,
                    -float(2 * k + 1) ** 2 + c,
                    -(2.0 * beta) ** 2 + c,
                    self.c2[k],
                    self.trace_l(2 * k),
                    self.trace_l(2 * k + 1),
                )
            )
        return rows


def build_basis(count: int, c: float, alpha: float, quad_nodes: int = 400) -> BasisPair:
    """Spectrum and basis covering at least ``count`` indices (rounded up to pairs)."""
    n = count + (count % 2)
    return BasisPair(eigenvalues(n, c, alpha), quad_nodes=quad_nodes)


def eval_phi(basis: BasisPair, j, x):
    return basis.phi(j, x)


def eval_psi(basis: BasisPair, j, x):
    return basis.psi(j, x)
