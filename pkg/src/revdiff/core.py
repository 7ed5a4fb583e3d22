"""Foundational types: OU transition coefficients, sample sets, schedules, RNG streams.

The forward process is the Ornstein-Uhlenbeck SDE dX_t = -X_t dt + sqrt(2) dB_t,
whose transition kernel is Gaussian with mean e^{-t} x0 and variance 1 - e^{-2t}.
Everything downstream (scores, samplers, losses) is built on these two numbers.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "ConfigError",
    "NumericalError",
    "StatisticsError",
    "TransitionCoeffs",
    "coeffs",
    "forward_sample",
    "SampleSet",
    "make_grid",
    "make_ring",
    "make_blobs",
    "Schedule",
    "make_schedule",
    "RandomStream",
]


class ConfigError(ValueError):
    """Invalid configuration (CLI exit code 2)."""


class NumericalError(RuntimeError):
    """Numerical failure during a run (CLI exit code 3)."""


class StatisticsError(NumericalError):
    """Not enough samples to estimate the requested quantity."""


@dataclass(frozen=True)
class TransitionCoeffs:
    """OU transition coefficients (alpha_t, beta_t^2) = (e^{-t}, 1 - e^{-2t})."""

    alpha: float
    beta_sq: float

    @property
    def beta(self) -> float:
        return float(np.sqrt(self.beta_sq))


def coeffs(t) -> TransitionCoeffs:
    """Transition coefficients of the forward OU kernel at forward time t >= 0.

    alpha^2 + beta_sq = 1 holds exactly up to rounding since beta_sq = 1 - alpha^2.
    """
    t = float(t)
    if not np.isfinite(t) or t < 0:
        raise ValueError(f"forward time must be finite and >= 0, got {t}")
    alpha = np.exp(-t)
    # -expm1(-2t) = 1 - e^{-2t} without cancellation for small t
    beta_sq = -np.expm1(-2.0 * t)
    return TransitionCoeffs(float(alpha), float(beta_sq))


def forward_sample(x0, t, noise):
    """One draw of X_t = e^{-t} x0 + sqrt(1 - e^{-2t}) noise.

    Deterministic given ``noise``; ``x0`` and ``noise`` must share their shape.
    Accepts a single point of shape (d,) or a batch of shape (n, d).
    """
    x0 = np.asarray(x0, dtype=float)
    noise = np.asarray(noise, dtype=float)
    if x0.shape != noise.shape:
        raise ValueError(f"shape mismatch: x0 {x0.shape} vs noise {noise.shape}")
    c = coeffs(t)
    return c.alpha * x0 + c.beta * noise


class SampleSet:
    """The training atoms {x_i} with convex weights: an atomic data law rho_0.

    Parameters
    ----------
    points : (N, d) array_like
        Atom coordinates. A 1D array of length N is treated as N points in d=1.
    weights : (N,) array_like, optional
        Nonnegative weights; normalized to sum to one. Default uniform 1/N.
    """

    def __init__(self, points, weights=None):
        pts = np.asarray(points, dtype=float)
        if pts.ndim == 1:
            pts = pts[:, None]
        if pts.ndim != 2 or pts.shape[0] < 1:
            raise ValueError("points must be a nonempty N x d array")
        if not np.all(np.isfinite(pts)):
            raise ValueError("points must be finite")
        n = pts.shape[0]
        if weights is None:
            w = np.full(n, 1.0 / n)
        else:
            w = np.asarray(weights, dtype=float)
            if w.shape != (n,):
                raise ValueError("weights must have one entry per point")
            if not np.all(np.isfinite(w)) or np.any(w < 0):
                raise ValueError("weights must be finite and nonnegative")
            tot = w.sum()
            if tot <= 0:
                raise ValueError("weights must not all vanish")
            w = w / tot
        self.points = pts
        self.weights = w
        self.points.setflags(write=False)
        self.weights.setflags(write=False)

    @property
    def n(self) -> int:
        return self.points.shape[0]

    @property
    def dim(self) -> int:
        return self.points.shape[1]

    @property
    def scale(self) -> float:
        """Max pairwise distance; 1.0 for a single atom (no intrinsic scale)."""
        if self._scale is None:
            if self.n < 2:
                self._scale = 1.0
            else:
                diff = self.points[:, None, :] - self.points[None, :, :]
                self._scale = float(np.sqrt((diff**2).sum(-1)).max())
        return self._scale

    _scale = None

    def mean(self):
        return self.weights @ self.points

    @classmethod
    def from_csv(cls, path, weights=None) -> "SampleSet":
        """Load one point per row, d columns; a non-numeric first row is a header."""
        try:
            pts = np.loadtxt(path, delimiter=",", ndmin=2)
        except ValueError:
            pts = np.loadtxt(path, delimiter=",", ndmin=2, skiprows=1)
        return cls(pts, weights)

    def __repr__(self):
        return f"SampleSet(n={self.n}, dim={self.dim})"


def make_grid(n_side: int, dim: int = 2, span: float = 2.0) -> SampleSet:
    """Regular lattice of n_side^dim atoms on [-span/2, span/2]^dim."""
    if n_side < 1 or dim < 1:
        raise ValueError("n_side and dim must be positive")
    axis = np.linspace(-span / 2, span / 2, n_side) if n_side > 1 else np.zeros(1)
    mesh = np.meshgrid(*([axis] * dim), indexing="ij")
    pts = np.stack([m.ravel() for m in mesh], axis=-1)
    return SampleSet(pts)


def make_ring(n: int, radius: float = 1.0) -> SampleSet:
    """n atoms equally spaced on a circle of given radius in d = 2."""
    if n < 1:
        raise ValueError("n must be positive")
    theta = 2 * np.pi * np.arange(n) / n
    return SampleSet(radius * np.stack([np.cos(theta), np.sin(theta)], axis=-1))


def make_blobs(n: int, dim: int = 2, n_clusters: int = 3, spread: float = 0.1, seed: int = 0) -> SampleSet:
    """n atoms drawn around n_clusters random centers (seeded, reproducible)."""
    if n < 1 or n_clusters < 1:
        raise ValueError("n and n_clusters must be positive")
    rng = np.random.default_rng(seed)
    centers = rng.uniform(-2.0, 2.0, size=(n_clusters, dim))
    which = rng.integers(0, n_clusters, size=n)
    pts = centers[which] + spread * rng.standard_normal((n, dim))
    return SampleSet(pts)


@dataclass(frozen=True)
class Schedule:
    """Reverse-time grid 0 = s_0 < ... < s_last = T* - t_min.

    Reverse time s and forward time t are tied by t = horizon - s; integration
    stops at the forward-time floor t_min because the score blows up like 1/t.
    """

    horizon: float
    s_values: np.ndarray
    t_min: float
    kind: str

    def __post_init__(self):
        s = np.asarray(self.s_values, dtype=float)
        object.__setattr__(self, "s_values", s)
        if self.horizon <= 0 or self.t_min <= 0:
            raise ValueError("horizon and t_min must be positive")
        if self.t_min >= self.horizon:
            raise ValueError("t_min must be smaller than the horizon")
        if s.ndim != 1 or len(s) < 1:
            raise ValueError("s_values must be a 1D array")
        if s[0] != 0.0:
            raise ValueError("schedule must start at s = 0")
        if np.any(np.diff(s) <= 0):
            raise ValueError("s_values must be strictly increasing")
        if abs(s[-1] - (self.horizon - self.t_min)) > 1e-12 * max(1.0, self.horizon):
            raise ValueError("schedule must end at s = horizon - t_min")
        s.setflags(write=False)

    @property
    def steps(self) -> int:
        return len(self.s_values) - 1

    @property
    def t_values(self) -> np.ndarray:
        """Forward times t_n = horizon - s_n, decreasing from horizon to t_min."""
        return self.horizon - self.s_values

    @property
    def deltas(self) -> np.ndarray:
        return np.diff(self.s_values)

    def with_nodes(self, extra_s) -> "Schedule":
        """Insert extra s-nodes (exactly, deduplicated); spacing family unchanged."""
        extra = np.atleast_1d(np.asarray(extra_s, dtype=float))
        if np.any(extra < 0) or np.any(extra > self.s_values[-1]):
            raise ValueError("extra nodes must lie within [0, horizon - t_min]")
        merged = np.unique(np.concatenate([self.s_values, extra]))
        return Schedule(self.horizon, merged, self.t_min, self.kind)

    def node_index(self, s: float) -> int:
        """Index of the node equal to s (within 1e-12); error if absent."""
        hits = np.nonzero(np.abs(self.s_values - s) <= 1e-12)[0]
        if len(hits) == 0:
            raise ValueError(f"s = {s} is not a schedule node")
        return int(hits[0])


def make_schedule(kind: str, horizon: float, steps: int, t_min: float = 1e-4) -> Schedule:
    """Build a reverse-time schedule.

    uniform   : equal reverse-time increments on [0, horizon - t_min].
    geometric : forward times log-spaced from horizon down to t_min, so reverse
                steps shrink as t -> 0 where the dynamics stiffen.
    """
    if steps < 1:
        raise ValueError("steps must be >= 1")
    if not (horizon > t_min > 0):
        raise ValueError("need horizon > t_min > 0")
    if kind == "uniform":
        s = np.linspace(0.0, horizon - t_min, steps + 1)
    elif kind == "geometric":
        k = np.arange(steps + 1)
        t = horizon * (t_min / horizon) ** (k / steps)
        s = horizon - t
    else:
        raise ValueError(f"unknown schedule kind {kind!r}")
    s[0] = 0.0
    s[-1] = horizon - t_min
    return Schedule(horizon, s, t_min, kind)


def _purpose_tag(purpose: str) -> int:
    digest = hashlib.sha256(purpose.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


@dataclass(frozen=True)
class RandomStream:
    """Counter-based substreams: one independent Philox generator per key.

    A key is (purpose string, *integer indices). Identical (master_seed, key)
    always yields bit-identical draws; distinct keys are independent by the
    seed-sequence construction, so execution order and worker count can never
    change results.
    """

    master_seed: int

    def __post_init__(self):
        if not (0 <= int(self.master_seed) < 2**64):
            raise ValueError("master_seed must be a 64-bit unsigned integer")

    def generator(self, purpose: str, *indices: int) -> np.random.Generator:
        entropy = (int(self.master_seed), _purpose_tag(purpose), *[int(i) for i in indices])
        return np.random.Generator(np.random.Philox(np.random.SeedSequence(entropy)))
