"""Finite-difference simulation of the nonlocal heat equation with delayed boundary input.

    y_t = y'' + c y                      on (0, pi)
    y(t, 0) = u(t - tau)
    y'(t, 0) + y'(t, pi) + alpha y(t, pi) = 0

The interior nodes are advanced by Crank-Nicolson.  The value at x = pi is
eliminated through the one-sided second-order discretisation of the nonlocal
condition, which leaves a sparse system with one extra coupling row.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .delay import ControlHistory, DelayOperator, NeumannPredictor, mat_exp
from .design import DesignSet, build_design, feedback_u
from .errors import BlowUpError, ConfigError
from .quadrature import simpson_weights
from .spectral import BasisPair, build_basis, choose_unstable_dim

CONFIG_KEYS = ("alpha", "c", "rho", "tau", "gammas", "grid_m", "dt", "t_final", "y0", "seed")
Y0_PRESETS = ("sin1", "sin-mix", "random-smooth")


@dataclass(frozen=True)
class Grid:
    m: int

    def __post_init__(self):
        if self.m < 50:
            raise ValueError("grid needs at least 50 interior points")

    @property
    def h(self):
        return math.pi / (self.m + 1)

    @property
    def x(self):
        """All nodes including both endpoints."""
        return self.h * np.arange(self.m + 2)


@dataclass
class SimConfig:
    alpha: float = 1.0
    c: float = 2.0
    rho: float = 5.0
    tau: float = 0.2
    gammas: list | None = None
    grid_m: int = 400
    dt: float = 1e-3
    t_final: float = 10.0
    y0: object = "sin-mix"
    seed: int = 0

    def __post_init__(self):
        self.validate()

    def validate(self):
        if not self.dt > 0:
            raise ConfigError("dt must be positive")
        if self.tau < 0:
            raise ConfigError("tau must be nonnegative")
        if not self.t_final > self.tau:
            raise ConfigError("t_final must exceed tau")
        if self.alpha <= 0:
            raise ConfigError("alpha must be positive")
        if self.rho <= 0:
            raise ConfigError("rho must be positive")
        if int(self.grid_m) != self.grid_m or self.grid_m < 50:
            raise ConfigError("grid_m must be an integer >= 50")
        if 0 < self.tau < self.dt:
            raise ConfigError("a positive tau must be at least dt")
        if isinstance(self.y0, str) and self.y0 not in Y0_PRESETS:
            raise ConfigError(f"unknown y0 preset {self.y0!r}; choose from {Y0_PRESETS}")
        if self.gammas is not None:
            g = list(self.gammas)
            if any(v <= 0 for v in g) or any(b <= a for a, b in zip(g, g[1:])):
                raise ConfigError("gammas must be positive and strictly increasing")

    @property
    def d(self):
        return choose_unstable_dim(self.rho, self.c, self.alpha)

    @classmethod
    def from_dict(cls, data):
        unknown = set(data) - set(CONFIG_KEYS)
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        kw = {}
        for f in dataclasses.fields(cls):
            if f.name not in data:
                continue
            kw[f.name] = _coerce(f.name, data[f.name])
        return cls(**kw)

    def to_dict(self):
        return {k: getattr(self, k) for k in CONFIG_KEYS}

    def replace(self, **kw):
        return dataclasses.replace(self, **kw)


def _coerce(key, value):
    try:
        if key in ("alpha", "c", "rho", "tau", "dt", "t_final"):
            if isinstance(value, bool):
                raise TypeError
            return float(value)
        if key in ("grid_m", "seed"):
            if isinstance(value, bool) or float(value) != int(float(value)):
                raise TypeError
            return int(value)
        if key == "gammas":
            return None if value is None else [float(v) for v in value]
        if key == "y0":
            if isinstance(value, str):
                return value
            return [float(v) for v in value]
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad value for {key}: {value!r}") from exc
    raise ConfigError(f"unknown config key {key!r}")


def initial_profile(spec, grid: Grid, seed: int = 0) -> np.ndarray:
    """Initial data sampled on all grid nodes."""
    x = grid.x
    if isinstance(spec, str):
        if spec == "sin1":
            return np.sin(x)
        if spec == "sin-mix":
            return np.sin(x) + 0.5 * np.sin(2 * x)
        if spec == "random-smooth":
            rng = np.random.default_rng(seed)
            n = np.arange(1, 9)
            a = rng.standard_normal(len(n)) / n**2
            return np.sin(np.outer(x, n)) @ a
        raise ConfigError(f"unknown y0 preset {spec!r}")
    vals = np.asarray(spec, dtype=float)
    if vals.ndim != 1 or len(vals) < 2:
        raise ConfigError("sampled y0 needs at least two values")
    return np.interp(x, np.linspace(0.0, math.pi, len(vals)), vals)


class HeatModel:
    """Semi-discrete model y_int' = M y_int + b u for the interior nodes."""

    def __init__(self, grid: Grid, c: float, alpha: float):
        self.grid = grid
        self.c = c
        self.alpha = alpha
        m, h = grid.m, grid.h
        denom = 3.0 + 2.0 * h * alpha
        if abs(denom) < 1e-12:
            raise ValueError("singular boundary closure")
        self.kappa = 1.0 / denom
        inv_h2 = 1.0 / (h * h)
        main = np.full(m, -2.0 * inv_h2 + c)
        off = np.full(m - 1, inv_h2)
        M = sp.diags([off, main, off], [-1, 0, 1], format="lil")
        k = self.kappa * inv_h2
        # y_{m+1} = kappa (3 y_0 - 4 y_1 + y_2 + 4 y_m - y_{m-1}) enters row m
        M[m - 1, 0] += -4.0 * k
        M[m - 1, 1] += 1.0 * k
        M[m - 1, m - 1] += 4.0 * k
        M[m - 1, m - 2] += -1.0 * k
        self.M = M.tocsc()
        b = np.zeros(m)
        b[0] += inv_h2
        b[m - 1] += 3.0 * k
        self.b = b
        self.weights = simpson_weights(m + 1, h)

    def full_profile(self, y_int, u):
        y_right = self.kappa * (3.0 * u - 4.0 * y_int[0] + y_int[1] + 4.0 * y_int[-1] - y_int[-2])
        return np.concatenate([[u], y_int, [y_right]])

    def norm(self, full):
        return math.sqrt(max(float(self.weights @ (full * full)), 0.0))

    def boundary_residual(self, full):
        h = self.grid.h
        d0 = (-3 * full[0] + 4 * full[1] - full[2]) / (2 * h)
        dpi = (3 * full[-1] - 4 * full[-2] + full[-3]) / (2 * h)
        return d0 + dpi + self.alpha * full[-1]


class CrankNicolson:
    def __init__(self, model: HeatModel, dt: float):
        self.model = model
        self.dt = dt
        eye = sp.identity(model.grid.m, format="csc")
        self.lhs = spla.splu((eye - 0.5 * dt * model.M).tocsc())
        self.rhs_op = (eye + 0.5 * dt * model.M).tocsr()
        # response of one CN step to a unit boundary value at the new time
        self.g = self.lhs.solve(0.5 * dt * model.b)

    def predict(self, y, u_old):
        """CN step with zero boundary value at the new time."""
        return self.lhs.solve(self.rhs_op @ y + 0.5 * self.dt * self.model.b * u_old)

    def step(self, y, u_old, u_new):
        return self.predict(y, u_old) + self.g * u_new

    def damped_step(self, y, u_half, u_new):
        """Two backward-Euler half steps (same factorisation), used after jumps."""
        half = 0.5 * self.dt
        y1 = self.lhs.solve(y + half * self.model.b * u_half)
        return self.lhs.solve(y1 + half * self.model.b * u_new)


def step_open_loop(model: HeatModel, y_int, u_boundary, dt, u_prev=None):
    """Advance interior values by one CN step with boundary value ``u_boundary``."""
    cn = CrankNicolson(model, dt)
    return cn.step(y_int, u_boundary if u_prev is None else u_prev, u_boundary)


class ModeProjector:
    def __init__(self, basis: BasisPair, model: HeatModel, d: int):
        self.d = d
        psi = basis.psi_matrix(model.grid.x, d)
        self.rows = psi * model.weights

    def __call__(self, full):
        return self.rows @ full


def project_modes(basis: BasisPair, profile, d: int, grid: Grid | None = None) -> np.ndarray:
    """<y, psi_i>, i < d, for a profile sampled on all grid nodes (Simpson weights)."""
    profile = np.asarray(profile, dtype=float)
    grid = grid or Grid(len(profile) - 2)
    x = grid.x
    w = simpson_weights(grid.m + 1, grid.h)
    return basis.psi_matrix(x, d) @ (w * profile)


@dataclass
class Trajectory:
    t: np.ndarray
    norm_y: np.ndarray
    u: np.ndarray
    Y: np.ndarray
    U: np.ndarray | None = None
    command: np.ndarray | None = None
    tail: np.ndarray | None = None
    boundary_residual: np.ndarray | None = None
    profile_t: np.ndarray | None = None
    profiles: np.ndarray | None = None
    x: np.ndarray | None = None
    tau: float = 0.0
    meta: dict = field(default_factory=dict)

    @property
    def d(self):
        return self.Y.shape[1]

    def history(self, which="Y"):
        data = {"Y": self.Y, "U": self.U, "command": self.command}[which]
        if data.ndim == 1:
            data = data[:, None]
        return ControlHistory.from_samples(self.t, data, tau=self.tau)

    def csv_rows(self):
        header = ["t", "norm_y", "u"] + [f"Y{i}" for i in range(self.d)]
        rows = np.column_stack([self.t, self.norm_y, self.u, self.Y])
        return header, rows


def write_trajectory_csv(traj: Trajectory, path):
    header, rows = traj.csv_rows()
    with open(path, "w", newline="") as fh:
        fh.write(",".join(header) + "\n")
        for r in rows:
            fh.write(",".join(f"{v:.17g}" for v in r) + "\n")


def write_profile_csv(traj: Trajectory, path):
    if traj.profiles is None:
        raise ValueError("trajectory holds no profiles")
    with open(path, "w", newline="") as fh:
        fh.write("t,x,y\n")
        for t, prof in zip(traj.profile_t, traj.profiles):
            for x, y in zip(traj.x, prof):
                fh.write(f"{t:.17g},{x:.17g},{y:.17g}\n")


def _setup(config: SimConfig, design: DesignSet | None = None, basis: BasisPair | None = None,
           need_design: bool = True):
    d = design.d if design is not None else config.d
    if basis is None:
        basis = build_basis(d, config.c, config.alpha)
    if design is None and need_design:
        design = build_design(basis, config.rho, gammas=config.gammas, d=d)
    return basis, design, d


def run_closed_loop(config: SimConfig, *, control: bool = True, predictor: bool = True,
                    design: DesignSet | None = None, basis: BasisPair | None = None,
                    tol: float = 1e-10, jmax: int = 50, lower_limit: str = "delayed", form: str = "shifted",
                    profile_every: int | None = None, damping: bool = True,
                    blowup_factor: float = 1e6) -> Trajectory:
    """Simulate the PDE under the delayed predictor feedback.

    ``control=False`` forces u = 0 (open loop).  ``predictor=False`` bypasses
    the Neumann series and feeds U = Y (the undelayed proportional law).
    """
    # the open loop only needs the basis for the logged modes
    basis, design, d = _setup(config, design, basis, need_design=control)
    grid = Grid(config.grid_m)
    model = HeatModel(grid, config.c, config.alpha)
    cn = CrankNicolson(model, config.dt)
    proj = ModeProjector(basis, model, d)
    dt, tau = config.dt, config.tau
    nsteps = int(round(config.t_final / dt))
    if control:
        op = DelayOperator.from_design(design, tau, lower_limit=lower_limit, form=form)
        pred = NeumannPredictor(op, tol=tol, jmax=jmax, spacing=dt, capacity=nsteps + 2)

    full0 = initial_profile(config.y0, grid, config.seed)
    y = full0[1:-1].copy()
    t_arr = dt * np.arange(nsteps + 1)
    norm_y = np.empty(nsteps + 1)
    u_app = np.zeros(nsteps + 1)
    Ys = np.empty((nsteps + 1, d))
    Us = np.empty((nsteps + 1, d))
    cmd = np.zeros(nsteps + 1)
    tails = np.zeros(nsteps + 1)
    bres = np.zeros(nsteps + 1)
    profile_t, profiles = [], []

    def controller(n, Y):
        if not control:
            return np.zeros(d), 0.0
        U = pred.update(t_arr[n], Y) if predictor else Y.copy()
        tails[n] = pred.last_tail if predictor else 0.0
        return U, feedback_u(design, U)

    # tau = 0: the boundary value at t_n depends on Y(t_n) itself.  The step
    # is affine in the new boundary value, y = y_part + g u, so the fixed
    # point u = K Y(y_part + g u, u) is solved exactly.
    instant = control and tau == 0.0

    def implicit_u(y_part, g):
        base = proj(model.full_profile(y_part, 0.0))
        slope = proj(model.full_profile(g, 1.0))
        return float(design.gain @ base) / (1.0 - float(design.gain @ slope))

    full = full0
    Y = proj(full)
    norm_y[0] = model.norm(full)
    Ys[0] = Y
    Us[0], cmd[0] = controller(0, Y)
    u_app[0] = cmd[0] if instant else 0.0
    bres[0] = model.boundary_residual(full)
    if profile_every:
        profile_t.append(0.0)
        profiles.append(full.copy())
    n0 = max(norm_y[0], np.finfo(float).tiny)
    jump_step = int(round(tau / dt)) if control and tau > 0 else -1
    half = 0.5 * dt
    g_damped = cn.lhs.solve(cn.lhs.solve(half * model.b) + half * model.b)

    def delayed_command(s):
        if s < -1e-9 * dt:
            return 0.0
        j = max(s, 0.0) / dt
        i = int(math.floor(j + 1e-9))
        frac = j - i
        if frac < 1e-9:
            return cmd[i]
        return (1.0 - frac) * cmd[i] + frac * cmd[i + 1]

    for n in range(1, nsteps + 1):
        u_old = u_app[n - 1]
        damp = damping and (n <= 2 or n in (jump_step, jump_step + 1))
        if instant:
            if damp:
                y_part, g = cn.lhs.solve(cn.lhs.solve(y)), g_damped
            else:
                y_part, g = cn.predict(y, u_old), cn.g
            u_new = implicit_u(y_part, g)
            y = y_part + g * u_new
        else:
            u_new = delayed_command(t_arr[n] - tau) if control else 0.0
            if damp:
                u_half = delayed_command(t_arr[n] - half - tau) if control else 0.0
                y = cn.damped_step(y, u_half, u_new)
            else:
                y = cn.step(y, u_old, u_new)
        u_app[n] = u_new
        full = model.full_profile(y, u_new)
        Y = proj(full)
        Ys[n] = Y
        norm_y[n] = model.norm(full)
        bres[n] = model.boundary_residual(full)
        Us[n], cmd[n] = controller(n, Y)
        if profile_every and n % profile_every == 0:
            profile_t.append(t_arr[n])
            profiles.append(full.copy())
        if not np.isfinite(norm_y[n]) or norm_y[n] > blowup_factor * n0:
            raise BlowUpError(f"norm grew by more than {blowup_factor:g} at t={t_arr[n]:.4g}",
                              t=t_arr[n], ratio=norm_y[n] / n0)

    return Trajectory(
        t=t_arr, norm_y=norm_y, u=u_app, Y=Ys, U=Us, command=cmd, tail=tails,
        boundary_residual=bres,
        profile_t=np.array(profile_t) if profile_every else None,
        profiles=np.array(profiles) if profile_every else None,
        x=grid.x if profile_every else None,
        tau=tau,
        meta={"d": d, "gammas": design.gammas.tolist() if design is not None else None,
              "control": control, "predictor": predictor},
    )


def run_modal_ode(config: SimConfig, *, design: DesignSet | None = None, basis: BasisPair | None = None,
                  Y0=None, tol: float = 1e-10, jmax: int = 50, lower_limit: str = "delayed",
                  form: str = "shifted") -> Trajectory:
    """Integrate Y' = Lambda Y + C U(t - tau) with U from the same predictor.

    The input is piecewise linear in time, so each step is taken exactly
    with an augmented matrix exponential.  ``norm_y`` holds |Y|.
    """
    basis, design, d = _setup(config, design, basis)
    dt, tau = config.dt, config.tau
    nsteps = int(round(config.t_final / dt))
    if Y0 is None:
        grid = Grid(config.grid_m)
        Y0 = project_modes(basis, initial_profile(config.y0, grid, config.seed), d, grid)
    Y0 = np.asarray(Y0, dtype=float)
    t_arr = dt * np.arange(nsteps + 1)
    Ys = np.empty((nsteps + 1, d))
    Us = np.empty((nsteps + 1, d))
    Ys[0] = Y0
    Lam, C = design.Lambda, design.C

    if tau == 0.0:
        step = mat_exp(Lam + C, dt)
        for n in range(1, nsteps + 1):
            Ys[n] = step @ Ys[n - 1]
        Us[:] = Ys
    else:
        aug = np.zeros((3 * d, 3 * d))
        aug[:d, :d] = Lam
        aug[:d, d:2 * d] = C
        aug[d:2 * d, 2 * d:] = np.eye(d)
        E = scipy.linalg.expm(dt * aug)[:d]
        Ey, Ev, Ew = E[:, :d], E[:, d:2 * d], E[:, 2 * d:]
        op = DelayOperator.from_design(design, tau, lower_limit=lower_limit, form=form)
        pred = NeumannPredictor(op, tol=tol, jmax=jmax, spacing=dt, capacity=nsteps + 2)
        Us[0] = pred.update(0.0, Y0)
        hist = ControlHistory(d, tau, capacity=nsteps + 2)
        hist.append(0.0, Us[0])
        for n in range(1, nsteps + 1):
            v0 = hist(t_arr[n - 1] - tau) if t_arr[n - 1] - tau >= 0 else np.zeros(d)
            v1 = hist(t_arr[n] - tau) if t_arr[n] - tau >= -1e-12 else np.zeros(d)
            if t_arr[n - 1] - tau < 0 <= t_arr[n] - tau + 1e-12:
                # input switches on inside this step; with tau on the grid it does so at its end
                v0 = np.zeros(d) if t_arr[n] - tau > 1e-12 else v0
            Ys[n] = Ey @ Ys[n - 1] + Ev @ v0 + Ew @ (v1 - v0) / dt
            Us[n] = pred.update(t_arr[n], Ys[n])
            hist.append(t_arr[n], Us[n])
    norms = np.linalg.norm(Ys, axis=1)
    u = np.array([feedback_u(design, U) for U in Us])
    return Trajectory(t=t_arr, norm_y=norms, u=u, Y=Ys, U=Us, command=u, tau=tau,
                      meta={"d": d, "modal": True})


def lyapunov_values(design: DesignSet, Y) -> np.ndarray:
    """V = <A Y, Y> along a trajectory of mode vectors."""
    Y = np.atleast_2d(Y)
    return np.einsum("ni,ij,nj->n", Y, design.A, Y)


def estimate_decay_rate(traj: Trajectory, t_start: float, t_end: float | None = None) -> float:
    """Least-squares slope of log norm_y on [t_start, t_end]."""
    t_end = traj.t[-1] if t_end is None else t_end
    mask = (traj.t >= t_start - 1e-12) & (traj.t <= t_end + 1e-12)
    if mask.sum() < 2:
        raise ValueError("window holds fewer than two samples")
    vals = traj.norm_y[mask]
    if np.any(vals <= 0) or not np.all(np.isfinite(vals)):
        raise ValueError("non-positive or non-finite norms in the fit window")
    slope, _ = np.polyfit(traj.t[mask], np.log(vals), 1)
    return float(slope)
