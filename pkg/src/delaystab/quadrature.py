import functools

import numpy as np


@functools.lru_cache(maxsize=32)
def _legendre(n):
    return np.polynomial.legendre.leggauss(n)


@functools.lru_cache(maxsize=32)
def composite_gauss(a=0.0, b=np.pi, nodes=400, per_panel=20):
    """Nodes and weights of a composite Gauss-Legendre rule on [a, b].

    ``nodes`` is rounded up to a multiple of ``per_panel``.
    """
    panels = max(1, -(-nodes // per_panel))
    xg, wg = _legendre(per_panel)
    edges = np.linspace(a, b, panels + 1)
    half = 0.5 * np.diff(edges)
    mid = 0.5 * (edges[1:] + edges[:-1])
    x = (mid[:, None] + half[:, None] * xg[None, :]).ravel()
    w = (half[:, None] * wg[None, :]).ravel()
    x.setflags(write=False)
    w.setflags(write=False)
    return x, w


def simpson_weights(n_intervals, h):
    """Composite Simpson weights for ``n_intervals`` equal steps of width h.

    An odd interval count is handled by closing the last three intervals
    with the 3/8 rule, so the rule stays fourth-order for any count >= 2.
    A single interval falls back to the trapezoid rule.
    """
    n = int(n_intervals)
    if n < 1:
        raise ValueError("need at least one interval")
    w = np.zeros(n + 1)
    if n == 1:
        w[:] = 0.5 * h
        return w
    if n % 2 == 0:
        m = n
        tail = 0
    else:
        m = n - 3
        tail = 3
    if m > 0:
        w[0:m + 1:2] += 2.0
        w[1:m:2] += 4.0
        w[0] -= 1.0
        w[m] -= 1.0
        w[:m + 1] *= h / 3.0
    if tail:
        w[m:] += np.array([1.0, 3.0, 3.0, 1.0]) * (3.0 * h / 8.0)
    return w
