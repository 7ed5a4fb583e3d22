"""Reverse-time dynamics for the OU diffusion.

The reverse SDE is dX_s = X_s ds + 2 grad ln rho(X_s, T - s) ds + sqrt(2) dB_s.
Four integrators are provided:

  em_step     Euler-Maruyama on the SDE above.
  exact_step  the per-step exact transition obtained by freezing xbar0 over the
              step and integrating the resulting linear SDE in closed form
              (exponential-ratio coefficients).
  sinh_step   the same transition written with hyperbolic sines; kept as an
              independent implementation for cross-validation.
  ode_step    Heun step of the deterministic transport flow dX/ds = X + score.

When the data law is a single atom, the whole reverse path has the closed form
implemented by dirac_exact_marginal; the chain of exact steps reproduces it
for any step sizes.
"""

from __future__ import annotations

import io
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field as dc_field
from typing import Optional, Sequence, Union

import numpy as np

from .core import ConfigError, RandomStream, Schedule
from .scores import GaussianMixtureScore, KernelScore, ScoreField

__all__ = [
    "StepParams",
    "reverse_drift",
    "reverse_drift_hyperbolic",
    "em_step",
    "exact_step",
    "exact_step_coeffs",
    "sinh_step",
    "sinh_step_coeffs",
    "ode_step",
    "posterior_step",
    "gaussian_product",
    "dirac_exact_marginal",
    "InitialLaw",
    "TrajectoryBatch",
    "run_reverse",
    "read_binary",
]

# Test hook used by the verify command's negative control: flips the sign of
# the xbar coefficient in sinh_step so the dual-form check must fail.
_FAULT_FLIP_SINH = False

# Trajectories are integrated in fixed-size blocks; the block index is part of
# the substream key, so results never depend on execution order or workers.
_CHUNK = 1 << 18


@dataclass(frozen=True)
class StepParams:
    """One reverse step: forward times t_n -> t_next with delta = t_n - t_next."""

    t_n: float
    t_next: float
    delta: float = None  # type: ignore[assignment]

    def __post_init__(self):
        if self.delta is None:
            object.__setattr__(self, "delta", self.t_n - self.t_next)
        if not (self.t_next > 0 and self.t_n > self.t_next):
            raise ValueError(f"need t_n > t_next > 0, got {self.t_n}, {self.t_next}")
        if self.delta <= 0 or abs(self.delta - (self.t_n - self.t_next)) > 1e-12 * max(1.0, self.t_n):
            raise ValueError("delta must equal t_n - t_next")

    @classmethod
    def from_schedule(cls, schedule: Schedule, n: int) -> "StepParams":
        t = schedule.t_values
        return cls(float(t[n]), float(t[n + 1]), float(schedule.s_values[n + 1] - schedule.s_values[n]))


def reverse_drift(x, t, xbar):
    """Reverse drift x + 2 (e^{-t} xbar - x) / (1 - e^{-2t})."""
    x = np.asarray(x, dtype=float)
    beta_sq = -np.expm1(-2.0 * t)
    return x + 2.0 * (np.exp(-t) * np.asarray(xbar, dtype=float) - x) / beta_sq


def reverse_drift_hyperbolic(x, t, xbar):
    """Same drift in hyperbolic form: -tanh(t/2) x + csch(t) (xbar - x)."""
    x = np.asarray(x, dtype=float)
    return -np.tanh(t / 2.0) * x + (np.asarray(xbar, dtype=float) - x) / np.sinh(t)


def em_step(x, p: StepParams, field: ScoreField, noise, noise_scale: str = "sde"):
    """Euler-Maruyama step of the reverse SDE.

    noise_scale "sde" uses sqrt(2 delta) matching the sqrt(2) diffusion of the
    SDE; "half" uses sqrt(delta) (the variant with half the noise variance,
    kept selectable for comparison runs).
    """
    if noise_scale not in ("sde", "half"):
        raise ValueError("noise_scale must be 'sde' or 'half'")
    x = np.asarray(x, dtype=float)
    drift = x + 2.0 * field.score(x, p.t_n)
    scale = np.sqrt(2.0 * p.delta) if noise_scale == "sde" else np.sqrt(p.delta)
    return x + p.delta * drift + scale * np.asarray(noise, dtype=float)


def exact_step_coeffs(p: StepParams):
    """(c_x, c_xbar, sigma_sq) of the frozen-xbar exact transition.

    mu = c_x * x + c_xbar * xbar, variance sigma_sq per component, with
    c_x = e^{-delta} (1 - e^{-2 t_next}) / (1 - e^{-2 t_n}),
    c_xbar = e^{-t_next} (1 - e^{-2 delta}) / (1 - e^{-2 t_n}),
    sigma_sq = (1 - e^{-2 t_next}) (1 - e^{-2 delta}) / (1 - e^{-2 t_n}).
    """
    em_tn = -np.expm1(-2.0 * p.t_n)
    em_next = -np.expm1(-2.0 * p.t_next)
    em_ds = -np.expm1(-2.0 * p.delta)
    c_x = np.exp(-p.delta) * em_next / em_tn
    c_xbar = np.exp(-p.t_next) * em_ds / em_tn
    sigma_sq = em_next * em_ds / em_tn
    return float(c_x), float(c_xbar), float(sigma_sq)


def exact_step(x, p: StepParams, xbar, noise):
    """Exact reverse transition with xbar0 held constant over the step."""
    c_x, c_xbar, sigma_sq = exact_step_coeffs(p)
    x = np.asarray(x, dtype=float)
    return c_x * x + c_xbar * np.asarray(xbar, dtype=float) + np.sqrt(sigma_sq) * np.asarray(noise, dtype=float)


def _log_sinh(a: float) -> float:
    # ln sinh(a) = a + ln(1 - e^{-2a}) - ln 2, stable for any a > 0
    return a + np.log1p(-np.exp(-2.0 * a)) - np.log(2.0)


def sinh_step_coeffs(p: StepParams):
    """(c_x, c_xbar, sigma_sq) via hyperbolic sines; log-space beyond t_n = 30."""
    if p.t_n <= 30.0:
        sh_tn = np.sinh(p.t_n)
        c_x = np.sinh(p.t_next) / sh_tn
        c_xbar = np.sinh(p.delta) / sh_tn
        sigma_sq = 2.0 * np.sinh(p.t_next) * np.sinh(p.delta) / sh_tn
    else:
        ls_tn = _log_sinh(p.t_n)
        c_x = np.exp(_log_sinh(p.t_next) - ls_tn)
        c_xbar = np.exp(_log_sinh(p.delta) - ls_tn)
        sigma_sq = np.exp(np.log(2.0) + _log_sinh(p.t_next) + _log_sinh(p.delta) - ls_tn)
    if _FAULT_FLIP_SINH:
        c_xbar = -c_xbar
    return float(c_x), float(c_xbar), float(sigma_sq)


def sinh_step(x, p: StepParams, xbar, noise):
    """Independent sinh-form implementation of the exact reverse transition."""
    c_x, c_xbar, sigma_sq = sinh_step_coeffs(p)
    x = np.asarray(x, dtype=float)
    return c_x * x + c_xbar * np.asarray(xbar, dtype=float) + np.sqrt(sigma_sq) * np.asarray(noise, dtype=float)


def ode_step(x, p: StepParams, field: ScoreField):
    """Heun step of the transport flow dX/ds = X + grad ln rho(X, t)."""
    x = np.asarray(x, dtype=float)
    k1 = x + field.score(x, p.t_n)
    euler = x + p.delta * k1
    k2 = euler + field.score(euler, p.t_next)
    return x + 0.5 * p.delta * (k1 + k2)


def gaussian_product(mu1, var1, mu2, var2):
    """Product of two Gaussian densities: N(mu1,var1) N(mu2,var2) prop N(mu,var).

    mu = (var2 mu1 + var1 mu2) / (var1 + var2), var = var1 var2 / (var1 + var2).
    """
    if not (var1 > 0 and var2 > 0):
        raise ValueError("variances must be positive")
    mu1 = np.asarray(mu1, dtype=float)
    mu2 = np.asarray(mu2, dtype=float)
    denom = var1 + var2
    return (var2 * mu1 + var1 * mu2) / denom, float(var1 * var2 / denom)


def posterior_step(x_m, x0, t_prev: float, t_m: float, noise):
    """Sample X_{t_prev} | (X_{t_m} = x_m, X_0 = x0) for the forward chain.

    Built from the Gaussian-product lemma: the likelihood of the step
    t_prev -> t_m read as a function of the earlier state, times the forward
    marginal started at x0. Coincides with exact_step using xbar = x0.
    """
    if not (0 < t_prev < t_m):
        raise ValueError(f"need 0 < t_prev < t_m, got {t_prev}, {t_m}")
    delta = t_m - t_prev
    x_m = np.asarray(x_m, dtype=float)
    mu1 = np.exp(delta) * x_m
    var1 = float(np.expm1(2.0 * delta))
    mu2 = np.exp(-t_prev) * np.asarray(x0, dtype=float)
    var2 = float(-np.expm1(-2.0 * t_prev))
    mu, var = gaussian_product(mu1, var1, mu2, var2)
    return mu + np.sqrt(var) * np.asarray(noise, dtype=float)


def dirac_exact_marginal(x0, start, s: float, horizon: float):
    """Closed-form reverse marginal for a single-atom data law.

    With X_0 = x0 fixed and the reverse path started at ``start``:
    mean = sinh(T-s)/sinh(T) start + sinh(s)/sinh(T) x0,
    var  = 2 sinh(T-s) sinh(s) / sinh(T)  per component.
    """
    if not (0 <= s <= horizon):
        raise ValueError(f"s must lie in [0, {horizon}], got {s}")
    sh_T = np.sinh(horizon)
    a = np.sinh(horizon - s) / sh_T
    b = np.sinh(s) / sh_T
    var = 2.0 * np.sinh(horizon - s) * np.sinh(s) / sh_T
    mean = a * np.asarray(start, dtype=float) + b * np.asarray(x0, dtype=float)
    return mean, float(var)


@dataclass(frozen=True)
class InitialLaw:
    """Initial law q0 of the reverse process.

    kind "normal": standard N(0, Id); "delta": a fixed point; "rho_T": the
    forward law at the horizon (atom or mixture component plus forward noise),
    which makes the reverse run an exact round trip.
    """

    kind: str
    point: Optional[np.ndarray] = None

    KINDS = ("normal", "delta", "rho_T")

    def __post_init__(self):
        if self.kind not in self.KINDS:
            raise ConfigError(f"q0 kind must be one of {self.KINDS}, got {self.kind!r}")
        if self.kind == "delta":
            if self.point is None:
                raise ConfigError("q0 kind 'delta' needs a point")
            object.__setattr__(self, "point", np.atleast_1d(np.asarray(self.point, dtype=float)))

    @classmethod
    def normal(cls):
        return cls("normal")

    @classmethod
    def delta(cls, point):
        return cls("delta", np.asarray(point, dtype=float))

    @classmethod
    def rho_T(cls):
        return cls("rho_T")

    def sample(self, rng: np.random.Generator, n: int, dim: int, field: Optional[ScoreField] = None, horizon: Optional[float] = None):
        if self.kind == "normal":
            return rng.standard_normal((n, dim))
        if self.kind == "delta":
            if self.point.shape != (dim,):
                raise ConfigError(f"q0 point has dim {self.point.shape[0]}, field has {dim}")
            return np.tile(self.point, (n, 1))
        # rho_T: component draw, then the forward transition to t = horizon
        if field is None or horizon is None:
            raise ConfigError("q0 kind 'rho_T' needs a score field and horizon")
        if isinstance(field, KernelScore):
            centers, weights, v = field.samples.points, field.samples.weights, 0.0
        elif isinstance(field, GaussianMixtureScore):
            centers, weights, v = field.centers, field.weights_0, field.bandwidth
        else:
            raise ConfigError("q0 kind 'rho_T' needs a kernel or mixture field")
        idx = rng.choice(len(centers), size=n, p=weights)
        alpha = np.exp(-horizon)
        var_t = v * alpha**2 - np.expm1(-2.0 * horizon)
        return alpha * centers[idx] + np.sqrt(var_t) * rng.standard_normal((n, dim))

    def describe(self) -> str:
        if self.kind == "delta":
            return "delta@" + ",".join(f"{v:g}" for v in self.point)
        return self.kind


_MAGIC = b"RDLB1"


@dataclass
class TrajectoryBatch:
    """Ensemble of reverse trajectories recorded at selected schedule nodes.

    states has shape (n_traj, n_recorded, d); node_indices maps the recorded
    axis back to schedule node numbers.
    """

    states: np.ndarray
    schedule: Schedule
    sampler: str
    master_seed: int
    node_indices: np.ndarray
    q0: InitialLaw = dc_field(default_factory=InitialLaw.normal)

    @property
    def n_traj(self) -> int:
        return self.states.shape[0]

    @property
    def dim(self) -> int:
        return self.states.shape[2]

    @property
    def terminal(self) -> np.ndarray:
        """States at the last recorded node, shape (n_traj, d)."""
        return self.states[:, -1, :]

    def states_at(self, node: int) -> np.ndarray:
        rec = np.nonzero(self.node_indices == node)[0]
        if len(rec) == 0:
            raise ValueError(f"node {node} was not recorded")
        return self.states[:, rec[0], :]

    def recorded_s(self) -> np.ndarray:
        return self.schedule.s_values[self.node_indices]

    def write_csv(self, path, header: Optional[dict] = None):
        n, m, d = self.states.shape
        s = self.recorded_s()
        t = self.schedule.horizon - s
        cols = [
            np.repeat(np.arange(n), m),
            np.tile(self.node_indices, n),
            np.tile(s, n),
            np.tile(t, n),
        ]
        cols += [self.states[:, :, j].ravel() for j in range(d)]
        table = np.column_stack(cols)
        fmt = ["%d", "%d", "%.17g", "%.17g"] + ["%.17g"] * d
        lines = [f"# {k} = {v}" for k, v in (header or {}).items()]
        lines.append("traj_id,step,s,t," + ",".join(f"x_{j}" for j in range(d)))
        np.savetxt(path, table, fmt=fmt, delimiter=",", header="\n".join(lines), comments="")

    def write_binary(self, path, header: Optional[dict] = None):
        """Compact dump: magic RDLB1, then little-endian integers and f64 blocks."""
        n, m, d = self.states.shape
        cfg = (header or {}).get("config", "0" * 64)
        cfg = (str(cfg) + "0" * 64)[:64].encode("ascii")
        with open(path, "wb") as fh:
            fh.write(_MAGIC + b"\x01\x00\x00")
            fh.write(cfg)
            fh.write(struct.pack("<QQQQ", n, m, d, int(self.master_seed)))
            fh.write(struct.pack("<d", float(self.schedule.horizon)))
            fh.write(np.asarray(self.node_indices, dtype="<i8").tobytes())
            fh.write(np.asarray(self.recorded_s(), dtype="<f8").tobytes())
            fh.write(np.ascontiguousarray(self.states, dtype="<f8").tobytes())


def read_binary(path):
    """Read an RDLB1 dump; returns (meta dict, node_indices, s_values, states)."""
    with open(path, "rb") as fh:
        raw = fh.read()
    buf = io.BytesIO(raw)
    magic = buf.read(8)
    if magic[:5] != _MAGIC:
        raise ValueError(f"not an RDLB1 file: {path}")
    cfg = buf.read(64).decode("ascii")
    n, m, d, seed = struct.unpack("<QQQQ", buf.read(32))
    (horizon,) = struct.unpack("<d", buf.read(8))
    nodes = np.frombuffer(buf.read(8 * m), dtype="<i8")
    s = np.frombuffer(buf.read(8 * m), dtype="<f8")
    states = np.frombuffer(buf.read(8 * n * m * d), dtype="<f8").reshape(n, m, d)
    meta = {"config": cfg, "n_traj": n, "n_nodes": m, "dim": d, "master_seed": seed, "horizon": horizon}
    return meta, nodes, s, states


def _normalize_record(record, steps: int):
    if record is None or record == "all":
        return np.arange(steps + 1)
    if record == "terminal":
        return np.array([steps])
    idx = np.unique(np.asarray(record, dtype=int))
    if np.any(idx < 0) or np.any(idx > steps):
        raise ValueError(f"recorded nodes must lie in [0, {steps}]")
    return idx


def run_reverse(
    field: ScoreField,
    schedule: Schedule,
    q0: InitialLaw,
    n_traj: int,
    stream: Union[RandomStream, int],
    sampler: str = "exact",
    noise_scale: str = "sde",
    record=None,
    workers: int = 1,
) -> TrajectoryBatch:
    """Integrate an ensemble of reverse trajectories over the schedule.

    sampler "exact" freezes xbar0 at the step's left endpoint and applies the
    closed-form transition; "em" is Euler-Maruyama; "ode" the Heun transport
    flow (no noise). Substreams are keyed by (purpose, block, step), so the
    result is a pure function of (master seed, arguments): workers only
    parallelizes the fixed-size blocks and never changes the output.
    """
    if sampler not in ("em", "exact", "ode"):
        raise ConfigError(f"sampler must be em, exact or ode, got {sampler!r}")
    if n_traj < 1:
        raise ValueError("n_traj must be >= 1")
    if workers < 1:
        raise ValueError("workers must be >= 1")
    if isinstance(stream, (int, np.integer)):
        stream = RandomStream(int(stream))
    dim = field.dim
    steps = schedule.steps
    rec = _normalize_record(record, steps)
    rec_pos = {int(node): k for k, node in enumerate(rec)}
    states = np.empty((n_traj, len(rec), dim))

    params = [StepParams.from_schedule(schedule, n) for n in range(steps)]

    def run_chunk(ci: int, a: int, b: int) -> None:
        x = q0.sample(stream.generator("q0", ci), b - a, dim, field=field, horizon=schedule.horizon)
        if 0 in rec_pos:
            states[a:b, rec_pos[0]] = x
        for n, p in enumerate(params):
            if sampler == "ode":
                x = ode_step(x, p, field)
            else:
                z = stream.generator("reverse", ci, n).standard_normal((b - a, dim))
                if sampler == "exact":
                    x = exact_step(x, p, field.xbar0(x, p.t_n), z)
                else:
                    x = em_step(x, p, field, z, noise_scale)
            if (n + 1) in rec_pos:
                states[a:b, rec_pos[n + 1]] = x

    chunks = [(ci, a, min(a + _CHUNK, n_traj)) for ci, a in enumerate(range(0, n_traj, _CHUNK))]
    if workers == 1 or len(chunks) == 1:
        for ci, a, b in chunks:
            run_chunk(ci, a, b)
    else:
        # blocks write disjoint slices of states, so threads are safe
        with ThreadPoolExecutor(max_workers=workers) as pool:
            for fut in [pool.submit(run_chunk, *c) for c in chunks]:
                fut.result()
    return TrajectoryBatch(states, schedule, sampler, stream.master_seed, rec, q0)
