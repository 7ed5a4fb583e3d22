"""Monte Carlo evaluation of the score-matching loss ladder.

With c(t) = e^{-t} / (1 - e^{-2t}), the score-matching loss of a predictor
x̄_theta decomposes as

    E |s_theta - score|^2  =  E[c(t)^2 |x̄_theta - X_0|^2]  -  floor,

where the floor is theta-independent (the posterior variance term) and the
kernel x̄0 is the exact minimizer. All estimators draw the same (t, X_0, eps)
triples from one substream when handed the same stream, so differences of
estimates are common-random-number differences: total_loss at the optimal
predictor minus variance_floor vanishes pathwise, not just in expectation.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Callable, Optional, Sequence, Union

import numpy as np

from .core import RandomStream, SampleSet
from .scores import KernelScore, ScoreField

__all__ = [
    "c_weight",
    "TimeSampling",
    "LossEstimate",
    "score_loss",
    "total_loss",
    "eps_total_loss",
    "riemann_eps_loss",
    "variance_floor",
    "zero_predictor",
    "kernel_xbar_predictor",
    "constant_shift_predictor",
    "nearest_atom_predictor",
    "random_feature_perturbation",
]


def c_weight(t):
    """The weight c(t) = e^{-t} / (1 - e^{-2t}) tying x̄0 error to score error."""
    t = np.asarray(t, dtype=float)
    return np.exp(-t) / (-np.expm1(-2.0 * t))


@dataclass(frozen=True)
class TimeSampling:
    """How evaluation times are drawn: uniform on [lo, hi] or uniform over a grid."""

    kind: str
    lo: float = 1e-4
    hi: float = 4.0
    grid: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.kind == "uniform":
            if not (0 < self.lo < self.hi):
                raise ValueError("need 0 < lo < hi")
        elif self.kind == "grid":
            g = np.asarray(self.grid, dtype=float)
            if g.ndim != 1 or len(g) == 0:
                raise ValueError("grid must be a nonempty 1D array")
            if np.any(g <= 0):
                raise ValueError("grid times must be positive")
            object.__setattr__(self, "grid", g)
        else:
            raise ValueError(f"unknown time sampling kind {self.kind!r}")

    @classmethod
    def uniform(cls, lo: float = 1e-4, hi: float = 4.0) -> "TimeSampling":
        return cls("uniform", lo=lo, hi=hi)

    @classmethod
    def from_grid(cls, values) -> "TimeSampling":
        return cls("grid", grid=np.asarray(values, dtype=float))

    def draw(self, rng: np.random.Generator, n: int) -> np.ndarray:
        if self.kind == "uniform":
            return rng.uniform(self.lo, self.hi, n)
        return self.grid[rng.integers(0, len(self.grid), n)]

    def describe(self) -> str:
        if self.kind == "uniform":
            return f"uniform[{self.lo:g},{self.hi:g}]"
        return f"grid[{len(self.grid)} nodes]"


@dataclass(frozen=True)
class LossEstimate:
    value: float
    std_error: float
    n_mc: int
    sampling: str
    weight: str

    def to_json(self) -> str:
        return json.dumps(
            {"value": self.value, "se": self.std_error, "n": self.n_mc,
             "sampler": self.sampling, "weight": self.weight},
            indent=2,
        )


def _as_stream(stream) -> RandomStream:
    if isinstance(stream, (int, np.integer)):
        return RandomStream(int(stream))
    return stream


def _draw_triples(samples: SampleSet, sampling: TimeSampling, n_mc: int, stream):
    """Common draws (t, X_0, eps, X_t); identical stream => identical triples."""
    rng = _as_stream(stream).generator("loss-mc")
    t = sampling.draw(rng, n_mc)
    idx = rng.choice(samples.n, size=n_mc, p=samples.weights)
    x0 = samples.points[idx]
    eps = rng.standard_normal((n_mc, samples.dim))
    alpha = np.exp(-t)
    beta = np.sqrt(-np.expm1(-2.0 * t))
    xt = alpha[:, None] * x0 + beta[:, None] * eps
    return t, x0, eps, xt


def _estimate(vals: np.ndarray, n_mc: int, sampling: TimeSampling, weight: str) -> LossEstimate:
    se = float(np.std(vals, ddof=1) / np.sqrt(n_mc)) if n_mc > 1 else 0.0
    return LossEstimate(float(np.mean(vals)), se, n_mc, sampling.describe(), weight)


def _eval_field(obj, x, t, attr: str):
    fn = getattr(obj, attr) if isinstance(obj, ScoreField) else obj
    return np.asarray(fn(x, t), dtype=float).reshape(x.shape)


def score_loss(s_theta, ref: KernelScore, sampling: TimeSampling, n_mc: int,
               stream: Union[RandomStream, int]) -> LossEstimate:
    """E |s_theta(X_t, t) - grad ln rho(X_t, t)|^2 over the forward law."""
    t, _, _, xt = _draw_triples(ref.samples, sampling, n_mc, stream)
    diff = _eval_field(s_theta, xt, t, "score") - ref.score(xt, t)
    vals = np.einsum("ij,ij->i", diff, diff)
    return _estimate(vals, n_mc, sampling, "score")


def total_loss(xbar_theta, samples: SampleSet, sampling: TimeSampling, n_mc: int,
               stream: Union[RandomStream, int]) -> LossEstimate:
    """E [c(t)^2 |x̄_theta(X_t, t) - X_0|^2] with (X_0, X_t) jointly sampled."""
    t, x0, _, xt = _draw_triples(samples, sampling, n_mc, stream)
    diff = _eval_field(xbar_theta, xt, t, "xbar0") - x0
    vals = c_weight(t) ** 2 * np.einsum("ij,ij->i", diff, diff)
    return _estimate(vals, n_mc, sampling, "c(t)^2")


def eps_total_loss(eps_theta, samples: SampleSet, sampling: TimeSampling, n_mc: int,
                   stream: Union[RandomStream, int]) -> LossEstimate:
    """E [ |eps_theta(X_t, t) - eps_0|^2 / (1 - e^{-2t}) ] on explicit triples."""
    t, _, eps, xt = _draw_triples(samples, sampling, n_mc, stream)
    diff = np.asarray(eps_theta(xt, t), dtype=float).reshape(xt.shape) - eps
    vals = np.einsum("ij,ij->i", diff, diff) / (-np.expm1(-2.0 * t))
    return _estimate(vals, n_mc, sampling, "1/(1-e^{-2t})")


def riemann_eps_loss(eps_theta, samples: SampleSet, grid, n_mc: int,
                     stream: Union[RandomStream, int]) -> LossEstimate:
    """Unweighted noise-prediction loss over a finite time grid (uniform in k)."""
    sampling = TimeSampling.from_grid(grid)
    t, _, eps, xt = _draw_triples(samples, sampling, n_mc, stream)
    diff = np.asarray(eps_theta(xt, t), dtype=float).reshape(xt.shape) - eps
    vals = np.einsum("ij,ij->i", diff, diff)
    return _estimate(vals, n_mc, sampling, "1")


def variance_floor(samples: SampleSet, sampling: TimeSampling, n_mc: int,
                   stream: Union[RandomStream, int]) -> LossEstimate:
    """The theta-independent floor of total_loss, estimated at the minimizer.

    Plugging the exact posterior mean into the total loss estimates the
    posterior-variance term; with common random numbers this is pathwise equal
    to total_loss(kernel x̄0).
    """
    return total_loss(KernelScore(samples).xbar0, samples, sampling, n_mc, stream)


def zero_predictor(x, t):
    return np.zeros_like(np.asarray(x, dtype=float))


def kernel_xbar_predictor(samples: SampleSet) -> Callable:
    """The exact minimizer of the total loss: the kernel posterior mean."""
    return KernelScore(samples).xbar0


def constant_shift_predictor(base: Callable, shift) -> Callable:
    shift = np.asarray(shift, dtype=float)

    def predictor(x, t):
        return np.asarray(base(x, t), dtype=float) + shift

    return predictor


def nearest_atom_predictor(samples: SampleSet) -> Callable:
    """Predict the nearest atom (the t -> 0 limit of the posterior mean)."""
    from .analysis import voronoi_assign

    def predictor(x, t):
        return samples.points[voronoi_assign(np.atleast_2d(x), samples)]

    return predictor


def random_feature_perturbation(dim: int, seed: int, n_features: int = 8,
                                amplitude: float = 0.1) -> Callable:
    """A smooth seeded bump delta(x, t) for building perturbed predictors."""
    rng = np.random.default_rng(seed)
    w_x = rng.standard_normal((dim, n_features))
    w_t = rng.standard_normal(n_features)
    phase = rng.uniform(0, 2 * np.pi, n_features)
    v_out = rng.standard_normal((n_features, dim)) / np.sqrt(n_features)

    def delta(x, t):
        x = np.atleast_2d(np.asarray(x, dtype=float))
        t = np.broadcast_to(np.asarray(t, dtype=float), (x.shape[0],))
        feats = np.cos(x @ w_x + t[:, None] * w_t[None, :] + phase[None, :])
        return amplitude * feats @ v_out

    return delta
