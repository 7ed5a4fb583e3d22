"""Experiment configuration: a sectioned TOML file, strictly validated.

Unknown sections or keys are rejected so a typo cannot silently fall back to a
default. The resolved config (defaults filled in) is hashed canonically; every
output file carries that hash, and identical (config, seed) pairs reproduce
byte-identical artifacts.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # Python 3.10
    import tomli as tomllib

from .core import ConfigError, SampleSet, Schedule, make_blobs, make_grid, make_ring, make_schedule
from .losses import TimeSampling
from .samplers import InitialLaw
from .scores import GaussianMixtureScore, KernelScore

__all__ = ["ExperimentConfig", "load_config"]

_PDE_KINDS = ("forward", "reverse-stable", "reverse-unstable", "reverse-transport")

# section -> key -> (default, allowed choices or None)
_SCHEMA = {
    "data": {
        "kind": ("atoms", ("csv", "grid", "ring", "blobs", "atoms")),
        "path": ("", None),
        "points": ([[-1.0], [1.0]], None),
        "weights": ([], None),
        "n": (10, None),
        "n_side": (3, None),
        "dim": (2, None),
        "span": (2.0, None),
        "radius": (1.0, None),
        "n_clusters": (3, None),
        "spread": (0.1, None),
        "blob_seed": (0, None),
    },
    "schedule": {
        "kind": ("geometric", ("uniform", "geometric")),
        "horizon": (4.0, None),
        "steps": (500, None),
        "t_min": (1e-4, None),
    },
    "sampler": {
        "kind": ("exact", ("em", "exact", "ode")),
        "n_traj": (1000, None),
        "q0": ("normal", None),
        "em_noise_scale": ("sde", ("sde", "half")),
        "record": ("all", ("all", "terminal")),
    },
    "pde": {
        "kind": ("forward", _PDE_KINDS),
        "length": (8.0, None),
        "m": (400, None),
        "dt": (1e-3, None),
        "bandwidth": (0.05, None),
        "t_min": (1e-2, None),
        "run_time": (0.2, None),
        "perturb": (0.0, None),
        "save": ([], None),
    },
    "analysis": {
        "eps": (0.0, None),  # 0 means: derive from the atom scale
        "bins": (40, None),
        "t1": (0.5, None),
        "t2": (2.0, None),
        "n_mc": (100_000, None),
        "x_grid": ([], None),
    },
    "loss": {
        "predictor": ("kernel", ("kernel", "zero", "shift", "nearest", "feature")),
        "sampling": ("uniform", ("uniform", "grid")),
        "n_mc": (100_000, None),
        "t_lo": (1e-4, None),
        "t_hi": (4.0, None),
        "grid": ([], None),
        "shift": (0.1, None),
        "feature_seed": (7, None),
        "amplitude": (0.1, None),
    },
}


def _coerce(section: str, key: str, value, default, choices):
    if choices is not None:
        if value not in choices:
            raise ConfigError(f"[{section}] {key} must be one of {choices}, got {value!r}")
        return value
    if isinstance(default, bool):
        raise AssertionError("no boolean keys in the schema")
    if isinstance(default, int) and not isinstance(default, bool):
        if isinstance(value, bool) or (not isinstance(value, (int, float)) or int(value) != value):
            raise ConfigError(f"[{section}] {key} must be an integer, got {value!r}")
        return int(value)
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"[{section}] {key} must be a number, got {value!r}")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"[{section}] {key} must be a string, got {value!r}")
        return value
    if isinstance(default, list):
        if not isinstance(value, list):
            raise ConfigError(f"[{section}] {key} must be a list, got {value!r}")
        return value
    raise AssertionError(f"unhandled schema type for [{section}] {key}")


def _resolve(usercfg: dict) -> dict:
    known_top = set(_SCHEMA) | {"seed"}
    unknown = set(usercfg) - known_top
    if unknown:
        raise ConfigError(f"unknown config section(s): {sorted(unknown)}")
    resolved = {}
    seed = usercfg.get("seed", 0)
    if isinstance(seed, bool) or not isinstance(seed, int) or not (0 <= seed < 2**64):
        raise ConfigError(f"seed must be an unsigned 64-bit integer, got {seed!r}")
    resolved["seed"] = seed
    for section, keys in _SCHEMA.items():
        given = usercfg.get(section, {})
        if not isinstance(given, dict):
            raise ConfigError(f"[{section}] must be a table")
        unknown = set(given) - set(keys)
        if unknown:
            raise ConfigError(f"unknown key(s) in [{section}]: {sorted(unknown)}")
        resolved[section] = {
            key: _coerce(section, key, given.get(key, default), default, choices)
            for key, (default, choices) in keys.items()
        }
    return resolved


@dataclass(frozen=True)
class ExperimentConfig:
    """Validated, fully resolved experiment configuration."""

    raw: dict

    @property
    def seed(self) -> int:
        return self.raw["seed"]

    def __getitem__(self, section: str) -> dict:
        return self.raw[section]

    def with_overrides(self, seed=None, sampler=None, em_noise_scale=None) -> "ExperimentConfig":
        raw = json.loads(json.dumps(self.raw))
        if seed is not None:
            raw["seed"] = int(seed)
        if sampler is not None:
            raw["sampler"]["kind"] = sampler
        if em_noise_scale is not None:
            raw["sampler"]["em_noise_scale"] = em_noise_scale
        return ExperimentConfig(_resolve(raw))

    def hash(self) -> str:
        blob = json.dumps(self.raw, sort_keys=True, separators=(",", ":")).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    # ---- builders -------------------------------------------------------

    def build_samples(self) -> SampleSet:
        d = self.raw["data"]
        kind = d["kind"]
        if kind == "csv":
            if not d["path"]:
                raise ConfigError("[data] kind 'csv' needs a path")
            return SampleSet.from_csv(d["path"])
        if kind == "grid":
            return make_grid(d["n_side"], d["dim"], d["span"])
        if kind == "ring":
            return make_ring(d["n"], d["radius"])
        if kind == "blobs":
            return make_blobs(d["n"], d["dim"], d["n_clusters"], d["spread"], d["blob_seed"])
        pts = np.asarray(d["points"], dtype=float)
        if pts.size == 0:
            raise ConfigError("[data] kind 'atoms' needs a points list")
        weights = np.asarray(d["weights"], dtype=float) if d["weights"] else None
        try:
            return SampleSet(pts, weights)
        except ValueError as exc:
            raise ConfigError(f"[data] invalid atoms: {exc}") from exc

    def build_schedule(self) -> Schedule:
        s = self.raw["schedule"]
        try:
            return make_schedule(s["kind"], s["horizon"], s["steps"], s["t_min"])
        except ValueError as exc:
            raise ConfigError(f"[schedule] {exc}") from exc

    def build_kernel_field(self) -> KernelScore:
        return KernelScore(self.build_samples())

    def build_mixture_field(self) -> GaussianMixtureScore:
        samples = self.build_samples()
        return GaussianMixtureScore(samples.points, samples.weights, self.raw["pde"]["bandwidth"])

    def build_q0(self) -> InitialLaw:
        spec = self.raw["sampler"]["q0"]
        if spec == "normal":
            return InitialLaw.normal()
        if spec == "rho_T":
            return InitialLaw.rho_T()
        if spec.startswith("delta@"):
            try:
                point = [float(v) for v in spec[len("delta@"):].split(",")]
            except ValueError as exc:
                raise ConfigError(f"bad q0 point spec {spec!r}") from exc
            return InitialLaw.delta(point)
        raise ConfigError(f"q0 must be 'normal', 'rho_T' or 'delta@x[,y...]', got {spec!r}")

    def build_time_sampling(self) -> TimeSampling:
        lo = self.raw["loss"]
        if lo["sampling"] == "grid":
            if not lo["grid"]:
                raise ConfigError("[loss] sampling 'grid' needs grid values")
            return TimeSampling.from_grid(lo["grid"])
        try:
            return TimeSampling.uniform(lo["t_lo"], lo["t_hi"])
        except ValueError as exc:
            raise ConfigError(f"[loss] {exc}") from exc


def load_config(path=None) -> ExperimentConfig:
    """Load and validate a TOML config; None gives the all-defaults config."""
    if path is None:
        return ExperimentConfig(_resolve({}))
    try:
        with open(path, "rb") as fh:
            user = tomllib.load(fh)
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"config parse error in {path}: {exc}") from exc
    return ExperimentConfig(_resolve(user))
