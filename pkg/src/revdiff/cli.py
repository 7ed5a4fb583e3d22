"""Command line entry point.

One executable, one subcommand per experiment family:

  forward       forward OU trajectories (or densities with --kind pde)
  reverse       reverse-sampler ensemble + memorization report
  pde           density solves: forward | reverse-stable | reverse-unstable | reverse-transport
  loss          loss ladder for a chosen predictor
  timereversal  forward/reverse conditional-histogram comparison
  weights       closed-form terminal-weight table over a grid of starts
  verify        fast invariant suite (nonzero exit on any failure)

Exit codes: 0 ok, 1 verification failure, 2 config error, 3 numerical error.
Outputs land in --out (or $REVDIFF_OUT, default ./out); every file carries the
config hash, and a fixed (config, seed) pair reproduces identical bytes.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__, samplers, verify
from .analysis import memorization_report, terminal_weights, time_reversal_check
from .config import ExperimentConfig, load_config
from .core import ConfigError, NumericalError, RandomStream
from .losses import (
    constant_shift_predictor,
    kernel_xbar_predictor,
    nearest_atom_predictor,
    random_feature_perturbation,
    score_loss,
    total_loss,
    variance_floor,
    zero_predictor,
)
from .pde import (
    DensityGrid,
    mixture_density_grid,
    solve_forward,
    solve_reverse_stable,
    solve_reverse_transport,
    solve_reverse_unstable,
)
from .samplers import run_reverse
from .scores import KernelScore, PredictorScore

_PDE_KINDS = ("forward", "reverse-stable", "reverse-unstable", "reverse-transport")


def _out_dir(args) -> Path:
    out = args.out or os.environ.get("REVDIFF_OUT") or "out"
    path = Path(out)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _header(cfg: ExperimentConfig, **extra) -> dict:
    h = {"config": cfg.hash(), "seed": cfg.seed}
    h.update(extra)
    return h


def _write_json(path: Path, payload: dict):
    path.write_text(json.dumps(payload, sort_keys=True, indent=2) + "\n")


def _payload(report) -> dict:
    out = report.to_json()
    return json.loads(out) if isinstance(out, str) else out


def _est(e) -> dict:
    return {"value": e.value, "se": e.std_error, "n": e.n_mc}


def _manifest(outdir: Path, command: str, cfg: ExperimentConfig, outputs):
    _write_json(outdir / "manifest.json", {
        "command": command,
        "config_hash": cfg.hash(),
        "seed": cfg.seed,
        "versions": {"revdiff": __version__, "numpy": np.__version__},
        "outputs": sorted(str(o) for o in outputs),
        "config": cfg.raw,
    })


def _density_files(outdir: Path, stem: str, solution, cfg: ExperimentConfig):
    names = []
    for k, (time, grid) in enumerate(zip(solution.times, solution.grids)):
        name = f"{stem}_{k:03d}.csv"
        grid.write_csv(outdir / name, _header(cfg, time=repr(float(time))))
        names.append(name)
    return names


def _mixture_now(cfg: ExperimentConfig, at_time: float | None = None) -> DensityGrid:
    """Data-law density on the grid, optionally pushed forward to a later time."""
    samples = cfg.build_samples()
    if samples.dim != 1:
        raise ConfigError("PDE runs are one-dimensional; use 1D data")
    p = cfg["pde"]
    centers = samples.points.ravel()
    var = p["bandwidth"]
    if at_time is not None:
        a = np.exp(-at_time)
        centers = a * centers
        var = var * a**2 - np.expm1(-2.0 * at_time)
    try:
        return mixture_density_grid(centers, samples.weights, var, p["length"], p["m"])
    except ValueError as exc:
        raise ConfigError(f"[pde] {exc}") from exc


# ---------------------------------------------------------------------------
# subcommands


def cmd_forward(cfg: ExperimentConfig, args, outdir: Path) -> int:
    if args.kind == "pde":
        return _pde_forward(cfg, outdir, command="forward")
    samples = cfg.build_samples()
    sch = cfg["schedule"]
    n_traj = cfg["sampler"]["n_traj"]
    t_nodes = np.linspace(0.0, sch["horizon"], sch["steps"] + 1)
    stream = RandomStream(cfg.seed)
    idx = stream.generator("forward-init").choice(samples.n, size=n_traj, p=samples.weights)
    x = samples.points[idx]
    states = np.empty((n_traj, len(t_nodes), samples.dim))
    states[:, 0] = x
    for k in range(len(t_nodes) - 1):
        dt = t_nodes[k + 1] - t_nodes[k]
        z = stream.generator("forward", k).standard_normal(x.shape)
        x = np.exp(-dt) * x + np.sqrt(-np.expm1(-2.0 * dt)) * z
        states[:, k + 1] = x

    n, m, d = states.shape
    cols = [np.repeat(np.arange(n), m), np.tile(np.arange(m), n), np.tile(t_nodes, n)]
    cols += [states[:, :, j].ravel() for j in range(d)]
    header = _header(cfg, command="forward", horizon=sch["horizon"], steps=sch["steps"])
    lines = [f"# {k} = {v}" for k, v in header.items()]
    lines.append("traj_id,step,t," + ",".join(f"x_{j}" for j in range(d)))
    path = outdir / "forward.csv"
    np.savetxt(path, np.column_stack(cols), fmt=["%d", "%d", "%.17g"] + ["%.17g"] * d,
               delimiter=",", header="\n".join(lines), comments="")
    _manifest(outdir, "forward", cfg, ["forward.csv"])
    print(f"wrote {path} ({n} trajectories x {m} nodes, dim {d})")
    return 0


def _pde_forward(cfg: ExperimentConfig, outdir: Path, command: str) -> int:
    p = cfg["pde"]
    horizon = cfg["schedule"]["horizon"]
    rho0 = _mixture_now(cfg)
    save = list(p["save"]) or [k * horizon / 4.0 for k in range(5)]
    solution = solve_forward(rho0, horizon, p["dt"], save)
    names = _density_files(outdir, "density_forward", solution, cfg)
    _write_json(outdir / "pde_forward_report.json",
                {"config": cfg.hash(), "seed": cfg.seed, "report": _payload(solution.report)})
    _manifest(outdir, command, cfg, names + ["pde_forward_report.json"])
    print(f"forward solve: {len(names)} snapshots, mass drift/step "
          f"{solution.report.mass_drift_per_step:.3e}")
    return 0


def cmd_reverse(cfg: ExperimentConfig, args, outdir: Path) -> int:
    samples = cfg.build_samples()
    field = KernelScore(samples)
    schedule = cfg.build_schedule()
    sm = cfg["sampler"]
    q0 = cfg.build_q0()
    if q0.kind == "delta" and q0.point.shape != (samples.dim,):
        raise ConfigError(f"q0 point has dim {q0.point.shape[0]}, data has {samples.dim}")
    batch = run_reverse(field, schedule, q0, sm["n_traj"], RandomStream(cfg.seed),
                        sampler=sm["kind"], noise_scale=sm["em_noise_scale"],
                        record=sm["record"], workers=args.workers)
    header = _header(cfg, command="reverse", sampler=sm["kind"], q0=q0.describe(),
                     horizon=schedule.horizon, steps=schedule.steps)
    traj_name = f"trajectories.{args.format}"
    path = outdir / traj_name
    if args.format == "csv":
        batch.write_csv(path, header)
    elif args.format == "bin":
        batch.write_binary(path, header)
    else:
        _write_json(path, {**header,
                           "node_indices": batch.node_indices.tolist(),
                           "s": batch.recorded_s().tolist(),
                           "states": batch.states.tolist()})
    an = cfg["analysis"]
    report = memorization_report(batch, samples, eps=an["eps"] or None, n_mc_ref=an["n_mc"])
    _write_json(outdir / "memorization.json",
                {"config": cfg.hash(), "seed": cfg.seed, "report": _payload(report)})
    _manifest(outdir, "reverse", cfg, [traj_name, "memorization.json"])
    print(f"wrote {path} ({batch.n_traj} trajectories, sampler {sm['kind']})")
    print(f"terminal collapse: frac within eps = {report.frac_within_eps:.4f}, "
          f"TV gap to reference weights = {report.tv_gap:.4f}")
    return 0


def cmd_pde(cfg: ExperimentConfig, args, outdir: Path) -> int:
    kind = args.kind or cfg["pde"]["kind"]
    p = cfg["pde"]
    horizon = cfg["schedule"]["horizon"]
    if kind == "forward":
        return _pde_forward(cfg, outdir, command="pde")

    if kind == "reverse-stable":
        rho0 = _mixture_now(cfg)
        forward = solve_forward(rho0, horizon, p["dt"], [p["t_min"], horizon])
        field = cfg.build_mixture_field()
        s_end = horizon - p["t_min"]
        save = list(p["save"]) or [k * s_end / 4.0 for k in range(5)]
        reverse = solve_reverse_stable(forward.final(), field, horizon, p["t_min"], p["dt"], save)
        roundtrip = reverse.final().l1_distance(forward.at(p["t_min"]))
        names = _density_files(outdir, "density_reverse", reverse, cfg)
        _write_json(outdir / "pde_reverse_report.json", {
            "config": cfg.hash(), "seed": cfg.seed,
            "roundtrip_l1": roundtrip,
            "forward": _payload(forward.report),
            "reverse": _payload(reverse.report),
        })
        _manifest(outdir, "pde", cfg, names + ["pde_reverse_report.json"])
        print(f"reverse-stable solve: round-trip L1 vs stored forward = {roundtrip:.3e}")
        return 0

    if kind == "reverse-unstable":
        qT = _mixture_now(cfg, at_time=horizon)
        values = qT.values + p["perturb"] * np.cos(np.pi * np.arange(qT.m + 1))
        report = solve_reverse_unstable(DensityGrid(p["length"], values), p["run_time"], p["dt"],
                                        record_every=max(1, int(round(p["run_time"] / p["dt"])) // 200))
        growth = float(report.highfreq_energy[-1] / max(report.highfreq_energy[0], 1e-300))
        _write_json(outdir / "pde_unstable_report.json", {
            "config": cfg.hash(), "seed": cfg.seed,
            "highfreq_growth": growth, "report": _payload(report),
        })
        _manifest(outdir, "pde", cfg, ["pde_unstable_report.json"])
        blown = f"blew up at step {report.blowup_step}" if report.blowup_step else "no overflow"
        print(f"reverse-unstable run: high-frequency energy x{growth:.3e}, {blown}")
        return 0

    # reverse-transport
    qT = _mixture_now(cfg, at_time=horizon)
    field = cfg.build_mixture_field()
    s_end = horizon - p["t_min"]
    save = list(p["save"]) or [k * s_end / 4.0 for k in range(5)]
    solution = solve_reverse_transport(qT, field, horizon, p["t_min"], p["dt"], save)
    names = _density_files(outdir, "density_transport", solution, cfg)
    _write_json(outdir / "pde_transport_report.json",
                {"config": cfg.hash(), "seed": cfg.seed, "report": _payload(solution.report)})
    _manifest(outdir, "pde", cfg, names + ["pde_transport_report.json"])
    print(f"reverse-transport solve: {len(names)} snapshots, mass drift/step "
          f"{solution.report.mass_drift_per_step:.3e}")
    return 0


def _build_predictor(cfg: ExperimentConfig, samples):
    lo = cfg["loss"]
    kernel = kernel_xbar_predictor(samples)
    name = lo["predictor"]
    if name == "kernel":
        return name, kernel
    if name == "zero":
        return name, zero_predictor
    if name == "shift":
        return name, constant_shift_predictor(kernel, np.full(samples.dim, lo["shift"]))
    if name == "nearest":
        return name, nearest_atom_predictor(samples)
    delta = random_feature_perturbation(samples.dim, lo["feature_seed"], amplitude=lo["amplitude"])
    return name, lambda x, t: kernel(x, t) + delta(x, t)


def cmd_loss(cfg: ExperimentConfig, args, outdir: Path) -> int:
    samples = cfg.build_samples()
    sampling = cfg.build_time_sampling()
    n_mc = cfg["loss"]["n_mc"]
    stream = RandomStream(cfg.seed)
    name, predictor = _build_predictor(cfg, samples)
    total = total_loss(predictor, samples, sampling, n_mc, stream)
    floor = variance_floor(samples, sampling, n_mc, stream)
    s_field = PredictorScore(predictor, "xbar0", samples.dim)
    s_loss = score_loss(s_field, KernelScore(samples), sampling, n_mc, stream)
    payload = {
        "config": cfg.hash(), "seed": cfg.seed,
        "predictor": name, "sampling": sampling.describe(),
        "total_loss": _est(total), "variance_floor": _est(floor),
        "excess": total.value - floor.value, "score_loss": _est(s_loss),
    }
    _write_json(outdir / "loss.json", payload)
    _manifest(outdir, "loss", cfg, ["loss.json"])
    print(f"predictor {name}: total_loss = {total.value:.6f} (se {total.std_error:.2e}), "
          f"excess over floor = {payload['excess']:.3e}")
    return 0


def cmd_timereversal(cfg: ExperimentConfig, args, outdir: Path) -> int:
    an = cfg["analysis"]
    field = cfg.build_mixture_field()
    report = time_reversal_check(field, an["t1"], an["t2"], cfg["schedule"]["horizon"],
                                 an["n_mc"], RandomStream(cfg.seed), bins=an["bins"])
    _write_json(outdir / "timereversal.json",
                {"config": cfg.hash(), "seed": cfg.seed, "report": _payload(report)})
    _manifest(outdir, "timereversal", cfg, ["timereversal.json"])
    print(f"forward vs reverse conditionals: max per-bin L1 = {report.max_l1:.4f}")
    return 0


def cmd_weights(cfg: ExperimentConfig, args, outdir: Path) -> int:
    samples = cfg.build_samples()
    horizon = cfg["schedule"]["horizon"]
    xg = cfg["analysis"]["x_grid"]
    if xg:
        starts = np.asarray(xg, dtype=float)
        if starts.ndim == 1:
            starts = starts[:, None]
        if starts.shape[1] != samples.dim:
            raise ConfigError(f"[analysis] x_grid entries have dim {starts.shape[1]}, data has {samples.dim}")
    elif samples.dim == 1:
        lo, hi = samples.points.min() - 1.0, samples.points.max() + 1.0
        starts = np.linspace(lo, hi, 41)[:, None]
    else:
        raise ConfigError("provide [analysis] x_grid start points for data with dim > 1")
    omega = terminal_weights(starts, samples, horizon)
    d, n_atoms = starts.shape[1], samples.n
    header = _header(cfg, command="weights", horizon=horizon)
    lines = [f"# {k} = {v}" for k, v in header.items()]
    lines.append(",".join([f"x_{j}" for j in range(d)] + [f"w_{i}" for i in range(n_atoms)]))
    path = outdir / "weights.csv"
    np.savetxt(path, np.column_stack([starts, omega]), fmt="%.17g", delimiter=",",
               header="\n".join(lines), comments="")
    _manifest(outdir, "weights", cfg, ["weights.csv"])
    print(f"wrote {path} ({len(starts)} start points x {n_atoms} atoms)")
    return 0


def cmd_verify(args) -> int:
    if args.list_checks:
        for name in verify.check_names():
            print(name)
        return 0
    if args.break_sinh:
        samplers._FAULT_FLIP_SINH = True
    try:
        ok = verify.run_checks()
    finally:
        samplers._FAULT_FLIP_SINH = False
    return 0 if ok else 1


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="revdiff",
        description="Numerics laboratory for the exact time reversal of an OU diffusion.",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="TOML experiment config")
    common.add_argument("--seed", type=int, metavar="U64", help="override the config seed")
    common.add_argument("--out", metavar="DIR", help="output directory (default $REVDIFF_OUT or ./out)")
    common.add_argument("--workers", type=int, default=1, metavar="N",
                        help="worker threads for trajectory blocks (results are worker-independent)")
    common.add_argument("--sampler", choices=("em", "exact", "ode"), help="override [sampler] kind")
    common.add_argument("--em-noise-scale", choices=("sde", "half"), dest="em_noise_scale",
                        help="EM noise convention: sqrt(2 ds) (sde) or sqrt(ds) (half)")
    common.add_argument("--format", choices=("csv", "bin", "json"), default="csv",
                        help="trajectory dump format (reverse command)")

    sub = parser.add_subparsers(dest="command", required=True)
    sp = sub.add_parser("forward", parents=[common], help="forward OU trajectories or densities")
    sp.add_argument("--kind", choices=("traj", "pde"), default="traj")
    sub.add_parser("reverse", parents=[common], help="reverse ensemble + memorization report")
    sp = sub.add_parser("pde", parents=[common], help="density solves")
    sp.add_argument("--kind", choices=_PDE_KINDS, default=None,
                    help="solver (default: [pde] kind from the config)")
    sub.add_parser("loss", parents=[common], help="loss ladder for a predictor")
    sub.add_parser("timereversal", parents=[common], help="forward/reverse conditional check")
    sub.add_parser("weights", parents=[common], help="terminal-weight table")
    sp = sub.add_parser("verify", parents=[common], help="fast invariant suite")
    sp.add_argument("--list", action="store_true", dest="list_checks", help="list check names and exit")
    sp.add_argument("--break-sinh", action="store_true", dest="break_sinh",
                    help="negative control: flip a sign in the sinh-form step")
    return parser


_COMMANDS = {
    "forward": cmd_forward,
    "reverse": cmd_reverse,
    "pde": cmd_pde,
    "loss": cmd_loss,
    "timereversal": cmd_timereversal,
    "weights": cmd_weights,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "verify":
            return cmd_verify(args)
        if args.workers < 1:
            raise ConfigError("--workers must be >= 1")
        cfg = load_config(args.config).with_overrides(
            seed=args.seed, sampler=args.sampler, em_noise_scale=args.em_noise_scale)
        return _COMMANDS[args.command](cfg, args, _out_dir(args))
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except NumericalError as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
