"""1D grid solvers for the forward Kolmogorov equation and its reversals.

All densities live on M+1 equispaced nodes of [-L, L]. Three well-posed solves
share one conservative finite-volume core (Chang-Cooper flux weighting plus
Crank-Nicolson time stepping, zero-flux boundaries):

  solve_forward           d_t rho = d_x(x rho + d_x rho)
  solve_reverse_stable    d_s q = d_x((-x - 2 score) q + d_x q)
  solve_reverse_transport d_s q = d_x((-x - score) q)          (upwind, no diffusion)

The naive reversal d_s q = -d_x(x q) - d_xx q is ill-posed (anti-diffusion);
solve_reverse_unstable discretizes it with plain central differences and
explicit Euler precisely so that the blow-up is exhibited, not masked.
"""

from __future__ import annotations

from dataclasses import dataclass, field as dc_field
from typing import Callable, Optional, Sequence, Union

import numpy as np
from scipy.fft import dct
from scipy.linalg import solve_banded

from .core import ConfigError, NumericalError
from .scores import ScoreField

__all__ = [
    "DensityGrid",
    "mixture_density_grid",
    "PdeRunReport",
    "PdeSolution",
    "solve_forward",
    "solve_reverse_stable",
    "solve_reverse_unstable",
    "solve_reverse_transport",
    "highfreq_energy",
    "central_gradient",
    "central_laplacian",
]


@dataclass
class DensityGrid:
    """A density sampled on M+1 equispaced nodes of [-L, L]."""

    length: float
    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.length <= 0 or self.values.ndim != 1 or len(self.values) < 3:
            raise ValueError("need length > 0 and at least 3 nodes")

    @property
    def m(self) -> int:
        return len(self.values) - 1

    @property
    def dx(self) -> float:
        return 2.0 * self.length / self.m

    @property
    def x(self) -> np.ndarray:
        return np.linspace(-self.length, self.length, self.m + 1)

    def mass(self) -> float:
        return float(np.trapezoid(self.values, dx=self.dx))

    def mean(self) -> float:
        return float(np.trapezoid(self.x * self.values, dx=self.dx) / self.mass())

    def variance(self) -> float:
        mu = self.mean()
        return float(np.trapezoid((self.x - mu) ** 2 * self.values, dx=self.dx) / self.mass())

    def normalized(self) -> "DensityGrid":
        return DensityGrid(self.length, self.values / self.mass())

    def l1_distance(self, other: "DensityGrid") -> float:
        if len(other.values) != len(self.values) or other.length != self.length:
            raise ValueError("grids must match")
        return float(np.trapezoid(np.abs(self.values - other.values), dx=self.dx))

    def copy(self) -> "DensityGrid":
        return DensityGrid(self.length, self.values.copy())

    @classmethod
    def from_callable(cls, f: Callable, length: float, m: int, normalize: bool = True) -> "DensityGrid":
        x = np.linspace(-length, length, m + 1)
        g = cls(length, np.asarray(f(x), dtype=float))
        return g.normalized() if normalize else g

    @classmethod
    def gaussian(cls, mean: float, var: float, length: float, m: int) -> "DensityGrid":
        return cls.from_callable(
            lambda x: np.exp(-((x - mean) ** 2) / (2.0 * var)) / np.sqrt(2.0 * np.pi * var), length, m
        )

    def write_csv(self, path, header: Optional[dict] = None):
        lines = [f"# {k} = {v}" for k, v in (header or {}).items()]
        lines.append("x,value")
        np.savetxt(path, np.column_stack([self.x, self.values]), fmt="%.17g", delimiter=",",
                   header="\n".join(lines), comments="")


def mixture_density_grid(centers, weights, var: float, length: float, m: int) -> DensityGrid:
    """Gaussian-mixture density on the grid (the data law used by PDE runs)."""
    centers = np.atleast_1d(np.asarray(centers, dtype=float)).ravel()
    w = np.full(len(centers), 1.0 / len(centers)) if weights is None else np.asarray(weights, dtype=float)
    if var <= 0:
        raise ValueError("grid densities need a positive component variance")

    def f(x):
        comps = np.exp(-((x[:, None] - centers[None, :]) ** 2) / (2.0 * var))
        return (comps @ w) / np.sqrt(2.0 * np.pi * var)

    return DensityGrid.from_callable(f, length, m)


@dataclass
class PdeRunReport:
    """Per-step diagnostics of a PDE run."""

    times: np.ndarray
    mass: np.ndarray
    min_value: np.ndarray
    l2_norm: np.ndarray
    highfreq_energy: np.ndarray
    blowup_step: Optional[int] = None
    clipped_mass: float = 0.0

    @property
    def mass_drift_per_step(self) -> float:
        return float(np.max(np.abs(np.diff(self.mass)))) if len(self.mass) > 1 else 0.0

    def mass_drift_per_unit_time(self) -> float:
        span = self.times[-1] - self.times[0]
        return float(abs(self.mass[-1] - self.mass[0]) / span) if span > 0 else 0.0

    def to_json(self) -> dict:
        return {
            "times": self.times.tolist(),
            "mass": self.mass.tolist(),
            "min_value": self.min_value.tolist(),
            "l2_norm": self.l2_norm.tolist(),
            "highfreq_energy": self.highfreq_energy.tolist(),
            "blowup_step": self.blowup_step,
            "clipped_mass": self.clipped_mass,
            "mass_drift_per_step": self.mass_drift_per_step,
        }


@dataclass
class PdeSolution:
    """Saved snapshots of a solve plus its diagnostics report."""

    times: np.ndarray
    grids: list
    report: PdeRunReport

    def final(self) -> DensityGrid:
        return self.grids[-1]

    def at(self, time: float) -> DensityGrid:
        k = int(np.argmin(np.abs(self.times - time)))
        if abs(self.times[k] - time) > 1e-9 + 1e-6 * abs(time):
            raise ValueError(f"no snapshot near time {time}; saved: {self.times}")
        return self.grids[k]


def highfreq_energy(values) -> float:
    """Energy in the top third of the discrete cosine spectrum."""
    c = dct(np.asarray(values, dtype=float), type=2, norm="ortho")
    k0 = (2 * len(c)) // 3
    return float(np.sum(c[k0:] ** 2))


def central_gradient(values, dx: float) -> np.ndarray:
    """Centered first derivative, one-sided at the ends."""
    return np.gradient(np.asarray(values, dtype=float), dx)


def central_laplacian(values, dx: float) -> np.ndarray:
    """Standard three-point second derivative; one-sided copies at the ends."""
    v = np.asarray(values, dtype=float)
    out = np.empty_like(v)
    out[1:-1] = (v[2:] - 2.0 * v[1:-1] + v[:-2]) / dx**2
    out[0] = out[1]
    out[-1] = out[-2]
    return out


def _chang_cooper_bands(a_half: np.ndarray, dx: float):
    """Tridiagonal bands of the conservative operator d rho/dt = d_x(A rho + d_x rho).

    a_half holds the drift A at the M interface midpoints; zero flux is imposed
    at both domain ends. The Chang-Cooper weight delta = 1/w - 1/(e^w - 1) with
    w = A dx makes the discrete flux vanish on the local exponential
    equilibrium, which keeps the solution positive.
    """
    w = a_half * dx
    delta = np.where(np.abs(w) > 1e-8, 1.0 / np.where(w == 0, 1.0, w) - 1.0 / np.expm1(np.where(w == 0, 1.0, w)),
                     0.5 - w / 12.0)
    # flux F_{j+1/2} = A [(1-delta) rho_{j+1} + delta rho_j] + (rho_{j+1} - rho_j)/dx
    up = a_half * (1.0 - delta) + 1.0 / dx      # coefficient of rho_{j+1} in F_{j+1/2}
    lo = a_half * delta - 1.0 / dx              # coefficient of rho_j   in F_{j+1/2}
    m1 = len(a_half) + 1
    diag = np.zeros(m1)
    lower = np.zeros(m1 - 1)
    upper = np.zeros(m1 - 1)
    # node j gains F_{j+1/2} and loses F_{j-1/2}, both divided by dx
    diag[:-1] += lo / dx
    upper[:] = up / dx
    diag[1:] -= up / dx
    lower[:] = -lo / dx
    return lower, diag, upper


def _cn_step(rho: np.ndarray, bands, dt: float) -> np.ndarray:
    lower, diag, upper = bands
    m1 = len(rho)
    # explicit half step
    rhs = rho * (1.0 + 0.5 * dt * diag)
    rhs[:-1] += 0.5 * dt * upper * rho[1:]
    rhs[1:] += 0.5 * dt * lower * rho[:-1]
    # implicit half step via banded solve
    ab = np.zeros((3, m1))
    ab[0, 1:] = -0.5 * dt * upper
    ab[1, :] = 1.0 - 0.5 * dt * diag
    ab[2, :-1] = -0.5 * dt * lower
    out = solve_banded((1, 1), ab, rhs)
    if not np.all(np.isfinite(out)):
        raise NumericalError("implicit solve produced non-finite density")
    return out


def _resolve_saves(save_times, t_end: float, dt: float):
    if save_times is None:
        wanted = np.array([0.0, t_end])
    else:
        wanted = np.unique(np.concatenate([[0.0, t_end], np.atleast_1d(np.asarray(save_times, dtype=float))]))
    steps = int(round(t_end / dt))
    idx = np.unique(np.clip(np.round(wanted / dt).astype(int), 0, steps))
    return steps, set(idx.tolist())


def _score_eval(score) -> Callable:
    if isinstance(score, ScoreField):
        if score.dim != 1:
            raise ConfigError("PDE solves are 1D; the score field must have dim 1")
        return lambda x, t: np.asarray(score.score(x[:, None], t)).ravel()
    return lambda x, t: np.asarray(score(x, t), dtype=float).ravel()


def _conservative_solve(grid: DensityGrid, drift_at, t_end: float, dt: float, save_steps, steps: int):
    """Shared CN driver; drift_at(x_half, t_mid) -> interface drift values."""
    rho = grid.values.copy()
    x_half = 0.5 * (grid.x[:-1] + grid.x[1:])
    times, grids = [], []
    mass, minv, l2, hf = [], [], [], []
    clipped = 0.0

    def snapshot(k):
        g = DensityGrid(grid.length, rho.copy())
        times.append(k * dt)
        grids.append(g)
        mass.append(g.mass())
        minv.append(float(rho.min()))
        l2.append(float(np.sqrt(np.trapezoid(rho**2, dx=grid.dx))))
        hf.append(highfreq_energy(rho))

    if 0 in save_steps:
        snapshot(0)
    static = None
    for k in range(steps):
        t_mid = (k + 0.5) * dt
        if static is None:
            bands = _chang_cooper_bands(drift_at(x_half, t_mid), grid.dx)
            if getattr(drift_at, "time_independent", False):
                static = bands
        else:
            bands = static
        rho = _cn_step(rho, bands, dt)
        neg = rho < 0
        if np.any(neg):
            clipped += float(-np.trapezoid(np.where(neg, rho, 0.0), dx=grid.dx))
            rho[neg] = 0.0
        if (k + 1) in save_steps:
            snapshot(k + 1)
    report = PdeRunReport(np.asarray(times), np.asarray(mass), np.asarray(minv),
                          np.asarray(l2), np.asarray(hf), None, clipped)
    return PdeSolution(np.asarray(times), grids, report)


def solve_forward(rho0: DensityGrid, horizon: float, dt: float, save_times=None) -> PdeSolution:
    """Forward OU equation d_t rho = d_x(x rho + d_x rho) with zero-flux walls."""
    if horizon <= 0 or dt <= 0:
        raise ConfigError("horizon and dt must be positive")
    if rho0.length < 6:
        raise ConfigError("domain half-width must be >= 6 to hold the equilibrium mass")
    steps, save_steps = _resolve_saves(save_times, horizon, dt)

    def drift_at(x_half, t_mid):
        return x_half

    drift_at.time_independent = True
    return _conservative_solve(rho0, drift_at, horizon, dt, save_steps, steps)


def solve_reverse_stable(q0: DensityGrid, score, horizon: float, t_min: float, dt: float,
                         save_times=None) -> PdeSolution:
    """Stabilized reverse equation d_s q = d_x((-x - 2 score(x, T-s)) q + d_x q)."""
    if not (horizon > t_min > 0) or dt <= 0:
        raise ConfigError("need horizon > t_min > 0 and dt > 0")
    fn = _score_eval(score)
    s_end = horizon - t_min
    steps, save_steps = _resolve_saves(save_times, s_end, dt)

    def drift_at(x_half, s_mid):
        sc = fn(x_half, horizon - s_mid)
        if not np.all(np.isfinite(sc)):
            raise NumericalError(f"score is not finite on the grid at s = {s_mid}")
        return -x_half - 2.0 * sc

    return _conservative_solve(q0, drift_at, s_end, dt, save_steps, steps)


def solve_reverse_unstable(q0: DensityGrid, t_run: float, dt: float, record_every: int = 1) -> PdeRunReport:
    """Naive reversal d_s q = -d_x(x q) - d_xx q by central differences.

    Anti-diffusion amplifies the top of the spectrum exponentially; the run
    stops (and flags the step) once values overflow 1e12 or go non-finite.
    """
    if t_run <= 0 or t_run > 0.5:
        raise ConfigError("the ill-posed run is restricted to horizons in (0, 0.5]")
    if dt <= 0:
        raise ConfigError("dt must be positive")
    q = q0.values.copy()
    x = q0.x
    dx = q0.dx
    steps = int(round(t_run / dt))
    times, mass, minv, l2, hf = [], [], [], [], []
    blowup = None

    def record(k):
        times.append(k * dt)
        mass.append(float(np.trapezoid(q, dx=dx)))
        minv.append(float(q.min()))
        l2.append(float(np.sqrt(np.trapezoid(q**2, dx=dx))))
        hf.append(highfreq_energy(q))

    record(0)
    for k in range(steps):
        xq = x * q
        dq = np.zeros_like(q)
        dq[1:-1] = -(xq[2:] - xq[:-2]) / (2.0 * dx) - (q[2:] - 2.0 * q[1:-1] + q[:-2]) / dx**2
        q = q + dt * dq
        if not np.all(np.isfinite(q)) or np.max(np.abs(q)) > 1e12:
            blowup = k + 1
            record(k + 1)
            break
        if (k + 1) % record_every == 0 or k + 1 == steps:
            record(k + 1)
    return PdeRunReport(np.asarray(times), np.asarray(mass), np.asarray(minv),
                        np.asarray(l2), np.asarray(hf), blowup)


def solve_reverse_transport(q0: DensityGrid, score, horizon: float, t_min: float, dt: float,
                            save_times=None) -> PdeSolution:
    """Pure transport d_s q = d_x((-x - score) q) by first-order upwinding.

    The flux at each interface takes the donor cell of the velocity
    u = x + score; zero boundary flux keeps the mass exactly conserved.
    """
    if not (horizon > t_min > 0) or dt <= 0:
        raise ConfigError("need horizon > t_min > 0 and dt > 0")
    fn = _score_eval(score)
    s_end = horizon - t_min
    steps, save_steps = _resolve_saves(save_times, s_end, dt)
    q = q0.values.copy()
    x_half = 0.5 * (q0.x[:-1] + q0.x[1:])
    dx = q0.dx
    times, grids = [], []
    mass, minv, l2, hf = [], [], [], []

    def snapshot(k):
        g = DensityGrid(q0.length, q.copy())
        times.append(k * dt)
        grids.append(g)
        mass.append(g.mass())
        minv.append(float(q.min()))
        l2.append(float(np.sqrt(np.trapezoid(q**2, dx=dx))))
        hf.append(highfreq_energy(q))

    if 0 in save_steps:
        snapshot(0)
    for k in range(steps):
        sc = fn(x_half, horizon - (k + 0.5) * dt)
        if not np.all(np.isfinite(sc)):
            raise NumericalError(f"score is not finite on the grid at step {k}")
        u = x_half + sc
        cfl = np.max(np.abs(u)) * dt / dx
        if cfl > 1.0:
            raise ConfigError(f"transport CFL violated (|u| dt/dx = {cfl:.3f} > 1); reduce dt")
        flux = np.where(u >= 0, u * q[:-1], u * q[1:])
        dq = np.zeros_like(q)
        dq[:-1] -= flux / dx
        dq[1:] += flux / dx
        q = q + dt * dq
        if (k + 1) in save_steps:
            snapshot(k + 1)
    report = PdeRunReport(np.asarray(times), np.asarray(mass), np.asarray(minv),
                          np.asarray(l2), np.asarray(hf), None)
    return PdeSolution(np.asarray(times), grids, report)
