"""Terminal-law analysis of the reverse process.

For an atomic data law the exact reverse process collapses onto the atoms: the
terminal law started at x_start puts mass

    omega_i  prop  w_i exp(-|x_i e^{-T} - x_start|^2 / (2 (1 - e^{-2T})))

on atom i. The tools here measure that collapse on simulated ensembles
(memorization_report), compare empirical terminal frequencies against the
closed form, compute Wasserstein distances, and check the past/future identity
rho(x, t1 | y, t2) = q(x, T-t1 | y, T-t2) by twin simulation.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Optional, Union

import numpy as np
from scipy.special import logsumexp
from scipy.stats import norm

from .core import RandomStream, SampleSet, StatisticsError, coeffs, make_schedule
from .samplers import InitialLaw, TrajectoryBatch, run_reverse
from .scores import GaussianMixtureScore, KernelScore, ScoreField

__all__ = [
    "voronoi_assign",
    "terminal_weights",
    "expected_terminal_weights",
    "MemorizationReport",
    "memorization_report",
    "wasserstein1d",
    "sliced_w2",
    "w2_to_dirac",
    "TimeReversalReport",
    "time_reversal_check",
]


def voronoi_assign(x, samples: SampleSet):
    """Index of the nearest atom; ties resolve to the lowest index.

    Accepts one point (d,) -> int, or a batch (n, d) -> (n,) ints.
    """
    pts = np.asarray(x, dtype=float)
    single = pts.ndim == 1
    if single:
        pts = pts[None, :]
    diff = pts[:, None, :] - samples.points[None, :, :]
    sq = np.einsum("ijk,ijk->ij", diff, diff)
    idx = np.argmin(sq, axis=1)
    return int(idx[0]) if single else idx


def terminal_weights(x_start, samples: SampleSet, horizon: float):
    """Closed-form landing probabilities of the exact reverse process.

    Returns (N,) for a single start or (n, N) for a batch of starts.
    """
    if horizon <= 0:
        raise ValueError("horizon must be positive")
    X = np.asarray(x_start, dtype=float)
    single = X.ndim <= 1
    X = np.atleast_2d(X if X.ndim else X.reshape(1))
    if X.shape[1] != samples.dim:
        raise ValueError(f"x_start has dim {X.shape[1]}, atoms have {samples.dim}")
    c = coeffs(horizon)
    diff = c.alpha * samples.points[None, :, :] - X[:, None, :]
    sq = np.einsum("ijk,ijk->ij", diff, diff)
    logw = np.log(samples.weights)[None, :] - sq / (2.0 * c.beta_sq)
    omega = np.exp(logw - logsumexp(logw, axis=1, keepdims=True))
    return omega[0] if single else omega


def expected_terminal_weights(samples: SampleSet, q0: InitialLaw, horizon: float, n_mc: int,
                              stream: Union[RandomStream, int]):
    """Monte Carlo average of terminal_weights over x_start ~ q0."""
    if n_mc < 1:
        raise ValueError("n_mc must be >= 1")
    if isinstance(stream, (int, np.integer)):
        stream = RandomStream(int(stream))
    rng = stream.generator("terminal-weights-mc")
    starts = q0.sample(rng, n_mc, samples.dim, field=KernelScore(samples), horizon=horizon)
    return terminal_weights(starts, samples, horizon).mean(axis=0)


@dataclass
class MemorizationReport:
    """Collapse statistics of a terminal ensemble against the training atoms."""

    n_traj: int
    eps: float
    frac_within_eps: float
    median_dist: float
    p90_dist: float
    hits: np.ndarray
    empirical_weights: np.ndarray
    omega_ref: np.ndarray
    tv_gap: float

    def to_json(self) -> str:
        return json.dumps(
            {
                "n_traj": self.n_traj,
                "eps": self.eps,
                "frac_within_eps": self.frac_within_eps,
                "median_dist": self.median_dist,
                "p90_dist": self.p90_dist,
                "hits": [int(h) for h in self.hits],
                "empirical_weights": [float(w) for w in self.empirical_weights],
                "omega_ref": [float(w) for w in self.omega_ref],
                "tv_gap": self.tv_gap,
            },
            indent=2,
        )


def memorization_report(batch: TrajectoryBatch, samples: SampleSet, eps: Optional[float] = None,
                        n_mc_ref: int = 100_000) -> MemorizationReport:
    """Measure terminal support collapse of a reverse ensemble.

    The reference weights come from expected_terminal_weights under the batch's
    own q0 (substream derived from the batch seed, so the report is
    reproducible). eps defaults to 0.1 * atom scale / sqrt(d).
    """
    if eps is None:
        eps = 0.1 * samples.scale / np.sqrt(samples.dim)
    if eps <= 0:
        raise ValueError("eps must be positive")
    terminal = batch.terminal
    if not np.all(np.isfinite(terminal)):
        raise ValueError("terminal states must be finite")
    assign = voronoi_assign(terminal, samples)
    dist = np.sqrt(((terminal - samples.points[assign]) ** 2).sum(axis=1))
    within = dist <= eps
    hits = np.bincount(assign[within], minlength=samples.n)
    empirical = np.bincount(assign, minlength=samples.n) / batch.n_traj
    omega_ref = expected_terminal_weights(samples, batch.q0, batch.schedule.horizon, n_mc_ref,
                                          RandomStream(batch.master_seed ^ 0x5EED0F0F))
    return MemorizationReport(
        n_traj=batch.n_traj,
        eps=float(eps),
        frac_within_eps=float(within.mean()),
        median_dist=float(np.median(dist)),
        p90_dist=float(np.quantile(dist, 0.9)),
        hits=hits,
        empirical_weights=empirical,
        omega_ref=omega_ref,
        tv_gap=float(0.5 * np.abs(empirical - omega_ref).sum()),
    )


def wasserstein1d(a, b, p: int = 2) -> float:
    """p-Wasserstein distance between 1D empirical laws via order statistics.

    Equal sizes couple sorted samples directly; unequal sizes couple
    interpolated quantiles on the finer midpoint grid.
    """
    if p not in (1, 2):
        raise ValueError("p must be 1 or 2")
    a = np.sort(np.asarray(a, dtype=float).ravel())
    b = np.sort(np.asarray(b, dtype=float).ravel())
    if len(a) == 0 or len(b) == 0:
        raise ValueError("empty sample list")
    if len(a) != len(b):
        m = max(len(a), len(b))
        q = (np.arange(m) + 0.5) / m
        a = np.quantile(a, q)
        b = np.quantile(b, q)
    gaps = np.abs(a - b)
    return float(np.mean(gaps)) if p == 1 else float(np.sqrt(np.mean(gaps**2)))


def sliced_w2(a, b, n_proj: int = 64, seed: int = 0) -> float:
    """Sliced 2-Wasserstein: root-mean-square of W2 over seeded projections."""
    a = np.atleast_2d(np.asarray(a, dtype=float))
    b = np.atleast_2d(np.asarray(b, dtype=float))
    if a.shape[1] != b.shape[1]:
        raise ValueError("point clouds must share their dimension")
    if a.shape[1] == 1:
        return wasserstein1d(a.ravel(), b.ravel(), p=2)
    rng = np.random.default_rng(seed)
    total = 0.0
    for _ in range(n_proj):
        u = rng.standard_normal(a.shape[1])
        u /= np.linalg.norm(u)
        total += wasserstein1d(a @ u, b @ u, p=2) ** 2
    return float(np.sqrt(total / n_proj))


def w2_to_dirac(batch: TrajectoryBatch, x0) -> np.ndarray:
    """W2 distance to the point mass at x0 per recorded node: sqrt E|X_s - x0|^2."""
    x0 = np.atleast_1d(np.asarray(x0, dtype=float))
    sq = ((batch.states - x0[None, None, :]) ** 2).sum(axis=2)
    return np.sqrt(sq.mean(axis=0))


def _sample_data_law(field: ScoreField, rng: np.random.Generator, n: int):
    """Draw X_0 from the data law held by a kernel or mixture field."""
    if isinstance(field, KernelScore):
        centers, weights, v = field.samples.points, field.samples.weights, 0.0
    elif isinstance(field, GaussianMixtureScore):
        centers, weights, v = field.centers, field.weights_0, field.bandwidth
    else:
        raise ValueError("need a kernel or mixture field to sample the data law")
    idx = rng.choice(len(centers), size=n, p=weights)
    x0 = centers[idx]
    if v > 0:
        x0 = x0 + np.sqrt(v) * rng.standard_normal(x0.shape)
    return x0


@dataclass
class TimeReversalReport:
    """Conditional-histogram comparison between forward and reverse simulations."""

    t1: float
    t2: float
    horizon: float
    y_edges: np.ndarray
    x_edges: np.ndarray
    l1_forward_reverse: np.ndarray
    l1_forward_analytic: Optional[np.ndarray]
    l1_reverse_analytic: Optional[np.ndarray]
    counts_forward: np.ndarray
    counts_reverse: np.ndarray

    @property
    def max_l1(self) -> float:
        return float(self.l1_forward_reverse.max())

    def to_json(self) -> str:
        payload = {
            "t1": self.t1,
            "t2": self.t2,
            "horizon": self.horizon,
            "y_edges": self.y_edges.tolist(),
            "x_edges": self.x_edges.tolist(),
            "l1_forward_reverse": self.l1_forward_reverse.tolist(),
            "counts_forward": self.counts_forward.tolist(),
            "counts_reverse": self.counts_reverse.tolist(),
            "max_l1": self.max_l1,
        }
        if self.l1_forward_analytic is not None:
            payload["l1_forward_analytic"] = self.l1_forward_analytic.tolist()
            payload["l1_reverse_analytic"] = self.l1_reverse_analytic.tolist()
            payload["max_l1_analytic"] = float(
                max(self.l1_forward_analytic.max(), self.l1_reverse_analytic.max())
            )
        return json.dumps(payload, indent=2)


def _analytic_bin_probs(field: GaussianMixtureScore, t1: float, t2: float, y_edges, x_edges):
    """Conditional bin masses of X_{t1} | X_{t2} in a y-bin for a Gaussian rho_0.

    The forward pair is jointly Gaussian with Cov(X_{t1}, X_{t2}) =
    e^{-(t2-t1)} Var(X_{t1}); each y-bin probability vector is the bin-averaged
    conditional Gaussian, integrated by Gauss-Legendre quadrature over the bin.
    """
    mu0 = float(field.centers[0, 0])
    v = field.bandwidth
    a1, a2 = np.exp(-t1), np.exp(-t2)
    m1, m2 = a1 * mu0, a2 * mu0
    v1 = v * a1**2 - np.expm1(-2.0 * t1)
    v2 = v * a2**2 - np.expm1(-2.0 * t2)
    cov = np.exp(-(t2 - t1)) * v1
    slope = cov / v2
    # t1 = t2 collapses the conditional law to a point mass; cond_sd = 0 then
    # sends the cdf arguments to +-inf, which is exactly the indicator we want
    cond_sd = np.sqrt(max(v1 - cov**2 / v2, 0.0))
    nodes, weights = np.polynomial.legendre.leggauss(24)
    out = []
    for lo, hi in zip(y_edges[:-1], y_edges[1:]):
        y = 0.5 * (hi - lo) * nodes + 0.5 * (hi + lo)
        wy = weights * norm.pdf(y, loc=m2, scale=np.sqrt(v2))
        mu_c = m1 + slope * (y - m2)
        with np.errstate(divide="ignore"):
            cdf = norm.cdf((x_edges[:, None] - mu_c[None, :]) / cond_sd)
        probs = (cdf[1:] - cdf[:-1]) @ wy
        out.append(probs / wy.sum())
    return np.asarray(out)


def time_reversal_check(field: ScoreField, t1: float, t2: float, horizon: float, n_mc: int,
                        stream: Union[RandomStream, int], bins: int = 40, n_ybins: int = 8,
                        steps: int = 400, min_count: int = 500) -> TimeReversalReport:
    """Compare forward and reverse conditional laws at forward times t1 <= t2.

    Forward: n_mc OU pairs (X_{t1}, X_{t2}) from the field's data law. Reverse:
    n_mc exact-sampler trajectories from q0 = N(0,1) recorded at s2 = T - t2
    and s1 = T - t1. For y in a central window the conditional histograms of
    the t1-states given the t2-state's y-bin are compared in L1; with a
    single-Gaussian data law both are also compared to the closed-form bridge.
    """
    if not (0 < t1 <= t2 <= horizon):
        raise ValueError("need 0 < t1 <= t2 <= horizon")
    if field.dim != 1:
        raise ValueError("the conditional-histogram check is 1D only")
    if isinstance(stream, (int, np.integer)):
        stream = RandomStream(int(stream))

    rng = stream.generator("reversal-forward")
    x0 = _sample_data_law(field, rng, n_mc)
    c1 = coeffs(t1)
    f_t1 = (c1.alpha * x0 + c1.beta * rng.standard_normal((n_mc, 1))).ravel()
    if t2 > t1:
        cd = coeffs(t2 - t1)
        f_t2 = cd.alpha * f_t1 + cd.beta * rng.standard_normal(n_mc)
    else:
        f_t2 = f_t1.copy()

    s2, s1 = horizon - t2, horizon - t1
    t_min = min(1e-3, t1 / 4.0)
    schedule = make_schedule("geometric", horizon, steps, t_min).with_nodes([s2, s1])
    i2, i1 = schedule.node_index(s2), schedule.node_index(s1)
    batch = run_reverse(field, schedule, InitialLaw.normal(), n_mc, stream, sampler="exact",
                        record=[i2, i1])
    r_s2 = batch.states_at(i2).ravel()
    r_s1 = batch.states_at(i1).ravel()

    y_lo, y_hi = np.quantile(f_t2, [0.10, 0.90])
    y_edges = np.linspace(y_lo, y_hi, n_ybins + 1)
    x_lo, x_hi = np.quantile(f_t1, [0.001, 0.999])
    pad = 0.1 * (x_hi - x_lo)
    x_edges = np.linspace(x_lo - pad, x_hi + pad, bins + 1)

    analytic = None
    if isinstance(field, GaussianMixtureScore) and len(field.centers) == 1 and field.bandwidth > 0:
        analytic = _analytic_bin_probs(field, t1, t2, y_edges, x_edges)

    l1_fr, l1_fa, l1_ra = [], [], []
    counts_f, counts_r = [], []
    for k, (lo, hi) in enumerate(zip(y_edges[:-1], y_edges[1:])):
        sel_f = (f_t2 >= lo) & (f_t2 < hi)
        sel_r = (r_s2 >= lo) & (r_s2 < hi)
        nf, nr = int(sel_f.sum()), int(sel_r.sum())
        counts_f.append(nf)
        counts_r.append(nr)
        if nf < min_count or nr < min_count:
            raise StatisticsError(
                f"y-bin [{lo:.3f}, {hi:.3f}) holds {min(nf, nr)} samples (< {min_count}); raise n_mc"
            )
        p_f = np.histogram(f_t1[sel_f], bins=x_edges)[0] / nf
        p_r = np.histogram(r_s1[sel_r], bins=x_edges)[0] / nr
        l1_fr.append(np.abs(p_f - p_r).sum())
        if analytic is not None:
            l1_fa.append(np.abs(p_f - analytic[k]).sum())
            l1_ra.append(np.abs(p_r - analytic[k]).sum())

    return TimeReversalReport(
        t1=t1, t2=t2, horizon=horizon,
        y_edges=y_edges, x_edges=x_edges,
        l1_forward_reverse=np.asarray(l1_fr),
        l1_forward_analytic=np.asarray(l1_fa) if analytic is not None else None,
        l1_reverse_analytic=np.asarray(l1_ra) if analytic is not None else None,
        counts_forward=np.asarray(counts_f),
        counts_reverse=np.asarray(counts_r),
    )
