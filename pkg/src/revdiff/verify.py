"""Fast self-check suite behind the ``verify`` subcommand.

Every check measures a closed-form identity or a structural contract against a
pinned tolerance and runs in at most a couple of seconds. Seeds are fixed, so
the suite is deterministic. The dual-form check doubles as the negative
control for the --break-sinh fault hook.
"""

from __future__ import annotations

import numpy as np

from .analysis import terminal_weights, wasserstein1d
from .core import RandomStream, SampleSet, Schedule, coeffs, make_blobs, make_schedule
from .losses import TimeSampling, total_loss, variance_floor
from .pde import DensityGrid, mixture_density_grid, solve_forward, solve_reverse_transport, solve_reverse_unstable
from .samplers import (
    InitialLaw,
    StepParams,
    dirac_exact_marginal,
    exact_step,
    exact_step_coeffs,
    posterior_step,
    reverse_drift,
    reverse_drift_hyperbolic,
    run_reverse,
    sinh_step_coeffs,
)
from .scores import GaussianMixtureScore, KernelScore, score_from_eps_predictor

__all__ = ["CHECKS", "run_checks", "check_names"]


def _transition_identity():
    t = np.logspace(-8, np.log10(50.0), 200)
    measured = max(abs(coeffs(tk).alpha ** 2 + coeffs(tk).beta_sq - 1.0) for tk in t)
    return measured, "<=", 1e-12


def _schedule_structure():
    sch = make_schedule("geometric", 4.0, 500, 1e-4)
    errs = [abs(sch.s_values[0]), abs(sch.s_values[-1] - (4.0 - 1e-4)), -np.diff(sch.s_values).min()]
    uni = make_schedule("uniform", 2.0, 100, 1e-3)
    errs += [abs(uni.s_values[0]), float(np.ptp(np.diff(uni.s_values)))]
    return max(errs), "<=", 1e-12


def _softmax_limits():
    samples = SampleSet([[-1.0], [1.0]])
    field = KernelScore(samples)
    x = np.array([[0.3]])
    late = np.abs(field.weights(x, 50.0) - 0.5).max()
    early = np.abs(field.weights(x, 1e-8) - np.array([0.0, 1.0])).max()
    return max(late, early), "<=", 1e-10


def _score_gradient():
    samples = make_blobs(6, 2, n_clusters=3, spread=0.3, seed=11)
    field = KernelScore(samples)
    rng = np.random.default_rng(5)
    worst = 0.0
    for _ in range(50):
        t = float(rng.uniform(0.05, 4.0))
        idx = rng.integers(samples.n)
        c = coeffs(t)
        x = c.alpha * samples.points[idx] + c.beta * rng.standard_normal(2)
        fd = np.zeros(2)
        for j in range(2):
            h = 1e-5 * (1.0 + abs(x[j]))
            xp, xm = x.copy(), x.copy()
            xp[j] += h
            xm[j] -= h
            fd[j] = (field.log_density(xp[None, :], t) - field.log_density(xm[None, :], t))[0] / (2 * h)
        s = field.score(x, t)
        worst = max(worst, float(np.linalg.norm(fd - s) / np.linalg.norm(s)))
    return worst, "<=", 1e-5


def _dual_form_agreement():
    t_grid = np.concatenate([np.logspace(-3, 1, 20), [35.0, 40.0]])
    fracs = np.linspace(0.05, 0.95, 20)
    worst = 0.0
    for t_n in t_grid:
        for f in fracs:
            p = StepParams(t_n, t_n * f)
            a = np.array(exact_step_coeffs(p))
            b = np.array(sinh_step_coeffs(p))
            worst = max(worst, float(np.abs(a - b).max()))
    return worst, "<=", 1e-12


def _large_time_drift():
    xs = np.linspace(-3, 3, 7)
    xbars = np.linspace(-1, 1, 5)
    worst = 0.0
    for delta in (0.1, 0.5, 1.0):
        c_x, c_xbar, _ = exact_step_coeffs(StepParams(20.0, 20.0 - delta))
        for x in xs:
            for xb in xbars:
                worst = max(worst, abs(c_x * x + c_xbar * xb - np.exp(-delta) * x))
    return worst, "<=", 1e-8


def _drift_identity():
    rng = np.random.default_rng(17)
    worst = 0.0
    for _ in range(100):
        t = float(rng.uniform(0.01, 8.0))
        x = rng.standard_normal(3)
        xbar = rng.standard_normal(3)
        d1 = reverse_drift(x, t, xbar)
        d2 = reverse_drift_hyperbolic(x, t, xbar)
        worst = max(worst, float(np.abs(d1 - d2).max()))
    return worst, "<=", 1e-10


def _stiff_relaxation():
    t = 1e-3
    rng = np.random.default_rng(3)
    worst = 0.0
    for _ in range(20):
        x = rng.standard_normal(2)
        xbar = x + np.sign(rng.standard_normal(2)) * rng.uniform(0.5, 2.0, 2)
        ratio = t * reverse_drift(x, t, xbar) / (xbar - x)
        worst = max(worst, float(np.abs(ratio - 1.0).max()))
    return worst, "<=", 0.01


def _posterior_consistency():
    rng = np.random.default_rng(23)
    worst = 0.0
    for _ in range(50):
        t_m = float(rng.uniform(0.05, 6.0))
        t_prev = float(t_m * rng.uniform(0.05, 0.95))
        x_m = rng.standard_normal(2)
        x0 = rng.standard_normal(2)
        z = rng.standard_normal(2)
        a = posterior_step(x_m, x0, t_prev, t_m, z)
        b = exact_step(x_m, StepParams(t_m, t_prev), x0, z)
        worst = max(worst, float(np.abs(a - b).max()))
    return worst, "<=", 1e-12


def _dirac_chain():
    horizon, x0, start = 2.0, -0.4, 0.9
    sch = make_schedule("geometric", horizon, 16, 1e-3)
    mean, var = start, 0.0
    worst = 0.0
    for n in range(sch.steps):
        c_x, c_xbar, sig_sq = exact_step_coeffs(StepParams.from_schedule(sch, n))
        mean = c_x * mean + c_xbar * x0
        var = c_x**2 * var + sig_sq
        m_ref, v_ref = dirac_exact_marginal(x0, start, float(sch.s_values[n + 1]), horizon)
        worst = max(worst, abs(mean - float(m_ref)), abs(var - v_ref))
    return worst, "<=", 1e-10


def _terminal_weight_values():
    w = terminal_weights(np.array([0.5]), SampleSet([[-1.0], [1.0]]), 1.0)
    ref = np.array([0.3952111848228865, 0.6047888151771135])
    return float(np.abs(w - ref).max()), "<=", 1e-12


def _eps_roundtrip():
    samples = make_blobs(5, 2, n_clusters=2, spread=0.4, seed=9)
    field = KernelScore(samples)
    rng = np.random.default_rng(31)
    x = rng.standard_normal((40, 2))
    t = 0.7

    def eps_pred(xx, tt):
        beta = np.sqrt(-np.expm1(-2.0 * np.asarray(tt, dtype=float)))
        return -np.atleast_1d(beta)[:, None] * field.score(xx, tt)

    rebuilt = score_from_eps_predictor(eps_pred, x, t)
    return float(np.abs(rebuilt - field.score(x, t)).max()), "<=", 1e-12


def _mixture_degeneracy():
    samples = make_blobs(4, 2, n_clusters=2, spread=0.5, seed=13)
    kernel = KernelScore(samples)
    mixture = GaussianMixtureScore(samples.points, samples.weights, 0.0)
    rng = np.random.default_rng(41)
    x = rng.standard_normal((50, 2))
    worst = 0.0
    for t in (0.05, 0.5, 2.0):
        worst = max(worst, float(np.abs(kernel.score(x, t) - mixture.score(x, t)).max()))
        worst = max(worst, float(np.abs(kernel.xbar0(x, t) - mixture.xbar0(x, t)).max()))
    return worst, "<=", 1e-12


def _pde_stationarity():
    rho0 = DensityGrid.gaussian(0.0, 1.0, 8.0, 301)
    sol = solve_forward(rho0, 0.5, 1e-3)
    sup = float(np.abs(sol.final().values - rho0.values).max())
    drift = sol.report.mass_drift_per_step
    return max(sup, drift), "<=", 1e-6


def _transport_stationarity():
    field = GaussianMixtureScore(np.array([[0.0]]), None, 1.0)
    q0 = DensityGrid.gaussian(0.0, 1.0, 8.0, 301)
    sol = solve_reverse_transport(q0, field, 1.0, 0.5, 1e-3)
    return float(np.abs(sol.final().values - q0.values).max()), "<=", 1e-13


def _unstable_blowup():
    grid = DensityGrid.gaussian(0.0, 0.5, 8.0, 200)
    values = grid.values + 1e-6 * np.cos(np.pi * np.arange(grid.m + 1))
    report = solve_reverse_unstable(DensityGrid(8.0, values), 0.02, 1e-5)
    ratio = float(report.highfreq_energy[-1] / report.highfreq_energy[0])
    return ratio, ">=", 1e3


def _loss_floor_identity():
    samples = make_blobs(6, 2, n_clusters=3, spread=0.4, seed=7)
    sampling = TimeSampling.uniform(0.05, 4.0)
    total = total_loss(KernelScore(samples).xbar0, samples, sampling, 2000, 77)
    floor = variance_floor(samples, sampling, 2000, 77)
    return abs(total.value - floor.value), "<=", 1e-10


def _reproducibility():
    samples = SampleSet([[-1.0], [1.0]])
    field = KernelScore(samples)
    sch = make_schedule("geometric", 2.0, 20, 1e-3)
    runs = [
        run_reverse(field, sch, InitialLaw.normal(), 500, 123, "exact", workers=w)
        for w in (1, 1, 3)
    ]
    a, b, c = (r.states for r in runs)
    equal = a.tobytes() == b.tobytes() == c.tobytes()
    return (0.0 if equal else 1.0), "<=", 0.0


def _wasserstein_sanity():
    rng = np.random.default_rng(19)
    a = rng.standard_normal(400)
    errs = [wasserstein1d(a, a, p=2), abs(wasserstein1d(a, a + 0.25, p=1) - 0.25)]
    return max(errs), "<=", 1e-12


CHECKS = [
    ("transition-identity", _transition_identity),
    ("schedule-structure", _schedule_structure),
    ("softmax-limits", _softmax_limits),
    ("score-gradient", _score_gradient),
    ("dual-form-agreement", _dual_form_agreement),
    ("large-time-drift", _large_time_drift),
    ("drift-form-identity", _drift_identity),
    ("stiff-relaxation", _stiff_relaxation),
    ("posterior-consistency", _posterior_consistency),
    ("dirac-chain", _dirac_chain),
    ("terminal-weight-values", _terminal_weight_values),
    ("eps-score-roundtrip", _eps_roundtrip),
    ("mixture-kernel-degeneracy", _mixture_degeneracy),
    ("pde-stationarity", _pde_stationarity),
    ("transport-stationarity", _transport_stationarity),
    ("unstable-blowup", _unstable_blowup),
    ("loss-floor-identity", _loss_floor_identity),
    ("reproducibility", _reproducibility),
    ("wasserstein-sanity", _wasserstein_sanity),
]


def check_names():
    return [name for name, _ in CHECKS]


def run_checks(names=None, log=print):
    """Run the suite; returns True when every check passes."""
    selected = CHECKS if names is None else [c for c in CHECKS if c[0] in set(names)]
    all_ok = True
    for name, fn in selected:
        measured, op, tol = fn()
        ok = measured <= tol if op == "<=" else measured >= tol
        all_ok &= ok
        log(f"{name:28s} measured={measured:12.5e} {op} tol={tol:8.1e}  {'PASS' if ok else 'FAIL'}")
    log(f"{'all checks passed' if all_ok else 'FAILURES detected'} ({len(selected)} checks)")
    return all_ok
