"""Predictor layer compensating the input delay.

The projected dynamics ``Y' = Lambda Y + C U(t - tau)`` are closed by the
implicit equation

    U(t) = Y(t) + int_{max(t - tau, tau)}^{t} exp((t - tau - s) Lambda) C U(s) ds,

solved with the Neumann series ``U = sum_j T^j Y`` of the integral operator
``T``.  The integral is empty for ``t < tau`` and ``U`` vanishes before 0.

``DelayOperator(form="standard")`` switches to the textbook predictor
``U(t) = exp(tau Lambda) Y(t) + int_{t-tau}^{t} exp((t - s) Lambda) C U(s) ds``
whose closed loop is exactly ``Lambda + C``.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from .quadrature import simpson_weights


class SeriesDivergenceWarning(RuntimeWarning):
    pass


def mat_exp(M, s=1.0):
    """exp(s M); ``s`` may be an array, giving a stack of exponentials."""
    M = np.asarray(M, dtype=float)
    s = np.asarray(s, dtype=float)
    return scipy.linalg.expm(s[..., None, None] * M)


class ControlHistory:
    """Time-ordered samples of a vector signal, zero before t = 0.

    Values between samples are linearly interpolated.  Reading past the last
    stored sample raises, which keeps predictor evaluations causal.
    """

    def __init__(self, dim, tau=0.0, capacity=1024):
        self.dim = int(dim)
        self.tau = float(tau)
        self._t = np.empty(capacity)
        self._v = np.empty((capacity, self.dim))
        self._n = 0

    @classmethod
    def from_samples(cls, times, values, tau=0.0):
        values = np.asarray(values, dtype=float)
        if values.ndim == 1:
            values = values[:, None]
        h = cls(values.shape[1], tau=tau, capacity=max(len(times), 1))
        for t, v in zip(times, values):
            h.append(t, v)
        return h

    def __len__(self):
        return self._n

    @property
    def times(self):
        return self._t[: self._n]

    @property
    def values(self):
        return self._v[: self._n]

    @property
    def t_last(self):
        return self._t[self._n - 1] if self._n else -math.inf

    @property
    def spacing(self):
        if self._n < 2:
            return None
        return float(np.median(np.diff(self.times)))

    def append(self, t, value):
        t = float(t)
        if t < 0.0:
            raise ValueError("samples before t=0 are implicitly zero")
        if self._n and t <= self._t[self._n - 1]:
            raise ValueError(f"sample times must increase strictly ({t} after {self._t[self._n - 1]})")
        if self._n == len(self._t):
            self._t = np.concatenate([self._t, np.empty(len(self._t))])
            self._v = np.concatenate([self._v, np.empty_like(self._v)])
        self._t[self._n] = t
        self._v[self._n] = value
        self._n += 1

    def truncated(self, t):
        """Copy holding only samples at times <= t."""
        k = int(np.searchsorted(self.times, t, side="right"))
        h = ControlHistory(self.dim, self.tau, capacity=max(k, 1))
        h._t[:k] = self._t[:k]
        h._v[:k] = self._v[:k]
        h._n = k
        return h

    def __call__(self, t):
        t = np.asarray(t, dtype=float)
        scalar = t.ndim == 0
        t = np.atleast_1d(t)
        if self._n == 0:
            if np.any(t >= 0.0):
                raise ValueError("history is empty")
            out = np.zeros((len(t), self.dim))
            return out[0] if scalar else out
        if np.any(t > self.t_last * (1 + 1e-14) + 1e-14):
            raise ValueError(f"history ends at {self.t_last}, requested {t.max()}")
        out = _interp(self.times, self.values, t)
        return out[0] if scalar else out


def _interp(times, values, t):
    """Linear interpolation with zero before 0; exact at sample points."""
    out = np.zeros((len(t), values.shape[1]))
    pos = t >= 0.0
    if not np.any(pos):
        return out
    tp = np.minimum(t[pos], times[-1])
    if len(times) == 1:
        out[pos] = values[0]
        return out
    i = np.clip(np.searchsorted(times, tp, side="right") - 1, 0, len(times) - 2)
    t0, t1 = times[i], times[i + 1]
    lam = ((tp - t0) / (t1 - t0))[:, None]
    vals = (1.0 - lam) * values[i] + lam * values[i + 1]
    # histories that start after 0 are held at their first sample
    early = tp < times[0]
    if np.any(early):
        vals[early] = values[0]
    out[pos] = vals
    return out


@dataclass
class DelayOperator:
    tau: float
    Lambda: np.ndarray
    C: np.ndarray
    lower_limit: str = "delayed"  # "delayed": max(t-tau, tau); "zero": max(t-tau, 0)
    form: str = "shifted"  # kernel exp((t-tau-s)L) and U = Y + T U; "standard": exp((t-s)L), U = e^{tau L} Y + T U
    min_intervals: int = 64
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        self.Lambda = np.asarray(self.Lambda, dtype=float)
        self.C = np.asarray(self.C, dtype=float)
        if self.Lambda.shape != self.C.shape or self.Lambda.shape[0] != self.Lambda.shape[1]:
            raise ValueError("Lambda and C must be square and of equal size")
        if self.tau < 0:
            raise ValueError("tau must be nonnegative")
        if self.lower_limit not in ("delayed", "zero"):
            raise ValueError(f"unknown lower_limit {self.lower_limit!r}")
        if self.form not in ("shifted", "standard"):
            raise ValueError(f"unknown form {self.form!r}")
        self._shift = self.tau if self.form == "shifted" else 0.0
        self._y_map = mat_exp(self.Lambda, self.tau) if self.form == "standard" else None

    @property
    def d(self):
        return self.Lambda.shape[0]

    @classmethod
    def from_design(cls, design, tau, **kw):
        return cls(tau=tau, Lambda=design.Lambda, C=design.C, **kw)

    def lower(self, t):
        return max(t - self.tau, self.tau if self.lower_limit == "delayed" else 0.0)

    def zeroth_term(self, y):
        """T^0 applied to Y: Y itself, or exp(tau Lambda) Y for the standard form."""
        y = np.asarray(y, dtype=float)
        return y if self._y_map is None else self._y_map @ y

    def rule(self, t, spacing=None):
        """Quadrature nodes and kernel-weighted matrices for the window ending at t.

        Returns ``(nodes, K)`` with ``K[i] = w_i exp((t - shift - s_i) Lambda) C``
        or ``None`` when the window is empty.
        """
        a = self.lower(t)
        length = t - a
        if self.tau == 0.0 or length <= 1e-14 * max(1.0, abs(t)):
            return None
        n = self.min_intervals
        if spacing:
            n = max(n, int(math.ceil(length / spacing - 1e-6)))
        h = length / n
        key = (n, round(length, 12), round(t - self._shift - a, 12))
        K = self._cache.get(key)
        if K is None:
            offsets = (t - self._shift - a) - h * np.arange(n + 1)
            K = simpson_weights(n, h)[:, None, None] * (mat_exp(self.Lambda, offsets) @ self.C)
            if len(self._cache) > 4096:
                self._cache.clear()
            self._cache[key] = K
        return a + h * np.arange(n + 1), K


def _apply(op, times, values, t, spacing):
    r = op.rule(t, spacing)
    if r is None:
        return np.zeros(op.d)
    nodes, K = r
    F = _interp(times, values, nodes)
    return np.einsum("nij,nj->i", K, F)


def apply_T_tau(op: DelayOperator, F: ControlHistory, t: float) -> np.ndarray:
    """(T F)(t) = int_{lower(t)}^{t} exp((t - tau - s) Lambda) C F(s) ds by composite Simpson."""
    if len(F) == 0:
        return np.zeros(op.d)
    if t > F.t_last + 1e-12:
        raise ValueError("F does not cover the integration window")
    return _apply(op, F.times, F.values, t, F.spacing)


class NeumannPredictor:
    """Incremental evaluation of the fixed point U = T0 Y + T U on a growing time grid.

    ``mode="global"`` evaluates the series ``U = sum_j T^j Y`` literally: every
    term ``T^j Y`` is stored on the grid so the next one can be integrated
    over the window.  The j-th term at time t grows like ``(kappa t)^j / j!``,
    so this only stays accurate over a few delay lengths.

    ``mode="stepwise"`` (used by the simulators) keeps the already computed
    values of U as known data.  The only unknown at time t is U(t) itself,
    which enters the quadrature through the newest node with a small matrix
    ``M``; the Neumann series ``sum_j M^j g`` of that local equation
    converges geometrically and gives the same fixed point.
    """

    def __init__(self, op: DelayOperator, tol: float = 1e-10, jmax: int = 50, spacing: float | None = None,
                 capacity: int = 1024, mode: str = "stepwise"):
        if mode not in ("stepwise", "global"):
            raise ValueError(f"unknown mode {mode!r}")
        self.op = op
        self.tol = tol
        self.jmax = jmax
        self.spacing = spacing
        self.mode = mode
        self._t = np.empty(capacity)
        nterms = jmax + 1 if mode == "global" else 1
        self._terms = np.zeros((nterms, capacity, op.d))
        self._norms = np.zeros((nterms, capacity))
        self._n = 0
        self.last_tail = 0.0
        self.last_count = 0
        self.last_term_norms = []

    @property
    def times(self):
        return self._t[: self._n]

    @property
    def values(self):
        """U at the recorded times."""
        if self.mode == "stepwise":
            return self._terms[0, : self._n]
        return self._terms[:, : self._n].sum(axis=0)

    def _grow(self):
        cap = len(self._t)
        self._t = np.concatenate([self._t, np.empty(cap)])
        self._terms = np.concatenate([self._terms, np.zeros_like(self._terms)], axis=1)
        self._norms = np.concatenate([self._norms, np.zeros_like(self._norms)], axis=1)

    def update(self, t, y):
        """Record Y(t) and return U(t)."""
        t = float(t)
        if self._n and t <= self._t[self._n - 1]:
            raise ValueError("times must increase strictly")
        if self._n == len(self._t):
            self._grow()
        n = self._n
        self._t[n] = t
        self._n += 1
        times = self._t[: n + 1]
        spacing = self.spacing or (float(np.median(np.diff(times))) if n else None)
        first = self.op.zeroth_term(y)
        r = self.op.rule(t, spacing)
        if self.mode == "stepwise":
            total = self._stepwise(n, times, first, r)
        else:
            total = self._global(n, times, first, r)
        return total

    def _stepwise(self, n, times, first, r):
        norms = [float(np.linalg.norm(first))]
        if r is None:
            U = first.copy()
        else:
            nodes, K = r
            self._terms[0, n] = 0.0
            g = first + np.einsum("nij,nj->i", K, _interp(times, self._terms[0, : n + 1], nodes))
            # weight of the newest sample at each node (hat function on [t_{n-1}, t_n])
            if n:
                hat = np.clip((nodes - times[n - 1]) / (times[n] - times[n - 1]), 0.0, 1.0)
            else:
                hat = np.ones_like(nodes)
            M = np.einsum("n,nij->ij", hat, K)
            U = g.copy()
            term = g
            norms = [float(np.linalg.norm(g))]
            prev = math.inf
            for _ in range(self.jmax):
                term = M @ term
                tn = float(np.linalg.norm(term))
                U += term
                norms.append(tn)
                if tn <= self.tol:
                    break
                if tn >= prev and tn > 1e3 * self.tol:
                    warnings.warn(f"Neumann series not converging at t={times[n]:g} (tail {tn:.3e})",
                                  SeriesDivergenceWarning)
                    break
                prev = tn
        self._terms[0, n] = U
        self._norms[0, n] = np.linalg.norm(U)
        # tail = last correction kept; no corrections at all means zero
        self.last_tail = norms[-1] if len(norms) > 1 else 0.0
        self.last_count = len(norms)
        self.last_term_norms = norms
        return U

    def _global(self, n, times, first, r):
        self._terms[0, n] = first
        self._norms[0, n] = np.linalg.norm(first)
        total = first.copy()
        tail = self._norms[0, n]
        norms = [float(tail)]
        if r is not None:
            nodes, K = r
            lo = max(int(np.searchsorted(times, nodes[0], side="left")) - 1, 0)
            prev_tail = math.inf
            for j in range(1, self.jmax + 1):
                if self._norms[j - 1, lo : n + 1].max(initial=0.0) == 0.0:
                    tail = 0.0
                    break
                term = np.einsum("nij,nj->i", K, _interp(times, self._terms[j - 1, : n + 1], nodes))
                self._terms[j, n] = term
                self._norms[j, n] = np.linalg.norm(term)
                total += term
                tail = self._norms[j, n]
                norms.append(float(tail))
                if self._norms[j, lo : n + 1].max() <= self.tol:
                    break
                prev_tail = tail
            else:
                if tail >= prev_tail:
                    warnings.warn(f"Neumann series not converging at t={times[n]:g} (tail {tail:.3e})",
                                  SeriesDivergenceWarning)
        self.last_tail = float(tail) if len(norms) > 1 else 0.0
        self.last_count = len(norms)
        self.last_term_norms = norms
        return total


def neumann_U(op: DelayOperator, Y: ControlHistory, t: float, tol: float = 1e-10, jmax: int = 50,
              mode: str = "global", return_terms: bool = False):
    """U(t) from the Neumann series over the recorded history of Y.

    Only samples of Y up to t are read.  Returns ``(U(t), tail_norm)`` where
    ``tail_norm`` is the norm of the last term kept at time t; with
    ``return_terms`` the list of all term norms at t is appended.
    """
    if t < 0:
        return np.zeros(op.d), 0.0
    hist = Y.truncated(t)
    pred = NeumannPredictor(op, tol=tol, jmax=jmax, spacing=hist.spacing, capacity=len(hist) + 2, mode=mode)
    U = np.zeros(op.d)
    for s, y in zip(hist.times, hist.values):
        U = pred.update(s, y)
    if len(hist) == 0 or hist.t_last < t:
        U = pred.update(t, Y(t))
    if return_terms:
        return U, pred.last_tail, pred.last_term_norms
    return U, pred.last_tail


def artstein_residual(op: DelayOperator, U: ControlHistory, Y: ControlHistory, t: float) -> float:
    """|U(t) - Y(t) - (T U)(t)| (with exp(tau Lambda) Y(t) for the standard form)."""
    return float(np.linalg.norm(U(t) - op.zeroth_term(Y(t)) - apply_T_tau(op, U, t)))


def target_system_check(op: DelayOperator, U: ControlHistory, Y: ControlHistory, t: float,
                        kernels: str = "stated", n: int | None = None) -> float:
    """|W(tau, t)| for the backstepping transform of the transport model.

    ``Z(s, t) = U(t + s - tau)`` on ``s in [0, tau]``.  With
    ``kernels="stated"`` the transform uses ``Q(s, r) = exp((s - r) Lambda)``
    and ``Gamma(s) = exp(s Lambda) C``:

        W(tau, t) = Z(tau, t) - int_0^tau exp((tau - r) Lambda) Z(r, t) dr - exp(tau Lambda) C Y(t).

    ``kernels="consistent"`` uses the kernels that match the operator's own
    fixed-point equation (``C`` inside the integral), for which W vanishes
    once the operator's window is the whole segment, i.e. ``op.lower(t) ==
    t - tau`` (t >= 2 tau with the default lower limit).
    """
    tau, Lam, C = op.tau, op.Lambda, op.C
    if tau == 0.0:
        # no transport segment: the target condition reduces to U = Y
        return float(np.linalg.norm(U(t) - Y(t)))
    n = n or max(op.min_intervals, int(math.ceil(tau / (U.spacing or tau / op.min_intervals) - 1e-6)))
    h = tau / n
    r = h * np.arange(n + 1)
    w = simpson_weights(n, h)
    Z = U(t + r - tau)
    if kernels == "stated":
        E = mat_exp(Lam, tau - r)
        integral = np.einsum("n,nij,nj->i", w, E, Z)
        W = U(t) - integral - mat_exp(Lam, tau) @ C @ Y(t)
    elif kernels == "consistent":
        if op.form == "shifted":
            E = mat_exp(Lam, -r) @ C
            W = U(t) - np.einsum("n,nij,nj->i", w, E, Z) - Y(t)
        else:
            E = mat_exp(Lam, tau - r) @ C
            W = U(t) - np.einsum("n,nij,nj->i", w, E, Z) - mat_exp(Lam, tau) @ Y(t)
    else:
        raise ValueError(f"unknown kernels {kernels!r}")
    return float(np.linalg.norm(W))
