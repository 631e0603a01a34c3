"""Twin-experiment drivers: configuration, priors, and study runners.

Everything here is plumbing around the library modules: a structured
config file describes a scenario (system parameters, prior, window,
measurement, algorithm knobs), and the runners generate a synthetic
truth, synthesize a noisy measurement, build a chain of prior
expansions at the report times, run a smoother, and write
machine-readable outputs. Model time is dimensionless inside the
integrator; the config carries the hours-per-model-unit conversion and
all user-facing times are in hours.
"""

from __future__ import annotations

import concurrent.futures
import hashlib
import json
import os
import time as _time
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # python < 3.11
    import tomli as tomllib

from .basis_adapt import mgs_orthonormalize, nataf_apply, nataf_fit
from .dynsys import (
    IntegratorConfig,
    SystemParams,
    integrate,
    lorenz84,
    propagate_ensemble,
)
from .filtering import (
    FilterConfig,
    MeasurementModel,
    SmootherProblem,
    SmootherResult,
    direct_smooth,
    estimate_forward_map_bayes,
    ps1_smooth,
    ps2_smooth,
    report_times,
)
from .pce import (
    HermiteBasis,
    MgsOrthonormalBasis,
    MultiIndexSet,
    NmapMonomialBasis,
    PCExpansion,
    pce_cov,
    pce_eval,
    pce_mean,
    sample_germ,
    total_degree_index_set,
    write_pce,
)
from .sparse_bayes import RvmConfig, fit_pce_full

__all__ = [
    "ConfigError",
    "ExperimentConfig",
    "PriorChain",
    "RunSummary",
    "build_prior_chain",
    "truth_trajectory",
    "synthesize_measurement",
    "run_experiment",
    "basis_study",
    "jacobian_check",
    "run_sweep",
    "config_hash",
]


class ConfigError(Exception):
    """Invalid experiment configuration; carries per-field messages."""

    def __init__(self, problems: list[str]):
        self.problems = list(problems)
        super().__init__("; ".join(self.problems))


# seed-stream tags so different random purposes never share a stream
_STREAM_PRIOR = 11
_STREAM_MEASUREMENT = 23
_STREAM_VALIDATION = 37
_STREAM_JACOBIAN = 41
_STREAM_QUANTILE = 53
_STREAM_NATAF_POP = 67


def _rng(seed: int, stream: int) -> np.random.Generator:
    return np.random.default_rng([int(seed), int(stream)])


@dataclass(frozen=True)
class ExperimentConfig:
    """Fully resolved scenario description.

    Times are hours; ``hours_per_model_unit`` converts to the
    dimensionless model time of the dynamical system. The seed is
    mandatory (no default) so every run is reproducible by construction.
    """

    seed: int
    # system
    a: float = 0.25
    b: float = 4.0
    f1: float = 8.0
    f2: float = 1.0
    truth_ic: tuple[float, ...] = (1.0, 0.0, -0.75)
    hours_per_model_unit: float = 120.0
    # prior at t0
    prior_mean: tuple[float, ...] = (0.0, 0.0, 0.0)
    prior_std: tuple[float, ...] = (1.0, 1.0, 1.0)
    # window
    t0_hours: float = 0.0
    horizon_hours: float = 48.0
    delta_tau_hours: float = 6.0
    # measurement
    noise_coeff: float = 0.1
    observed: tuple[int, ...] = (0, 1, 2)
    # algorithm
    smoother: str = "ps2"
    map_mode: str = "projection"
    bias_correct: bool = False
    basis: str = "nmap"
    order: int = 4
    basis_tolerance: float = 0.05
    n_samples: int = 100
    tol: float = 1e-3
    max_iter: int = 100
    # run controls
    out_dir: str | None = None
    quantile_samples: int = 100_000
    integrator_tol: float = 1e-8
    # fit-pce study
    fit_policies: tuple[str, ...] = ("fixed-hermite", "mgs", "nmap")
    fit_validation_samples: int = 2000
    fit_anchor_hours: float = 6.0
    # jacobian study
    jacobian_windows_hours: tuple[float, ...] = (6.0, 24.0)
    jacobian_spread: float = 0.05
    jacobian_center: tuple[float, ...] | None = None
    # sweep
    sweep_delta_tau_hours: tuple[float, ...] = (6.0, 3.0)
    sweep_noise_coeff: tuple[float, ...] = (0.05, 0.1, 0.2)
    sweep_smoother: tuple[str, ...] = ("ds", "ps2")

    def to_dict(self) -> dict:
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                v = list(v)
            out[f.name] = v
        return out


# TOML section/key -> dataclass field, with coercion kind
_TOML_LAYOUT = {
    "model": {
        "a": ("a", "float"),
        "b": ("b", "float"),
        "f1": ("f1", "float"),
        "f2": ("f2", "float"),
        "truth_ic": ("truth_ic", "floats"),
        "hours_per_model_unit": ("hours_per_model_unit", "float"),
    },
    "prior": {
        "mean": ("prior_mean", "floats"),
        "std": ("prior_std", "floats"),
    },
    "window": {
        "t0_hours": ("t0_hours", "float"),
        "horizon_hours": ("horizon_hours", "float"),
        "delta_tau_hours": ("delta_tau_hours", "float"),
    },
    "measurement": {
        "noise_coeff": ("noise_coeff", "float"),
        "observed": ("observed", "ints"),
    },
    "algorithm": {
        "smoother": ("smoother", "str"),
        "map_mode": ("map_mode", "str"),
        "bias_correct": ("bias_correct", "bool"),
        "basis": ("basis", "str"),
        "order": ("order", "int"),
        "basis_tolerance": ("basis_tolerance", "float"),
        "n_samples": ("n_samples", "int"),
        "tol": ("tol", "float"),
        "max_iter": ("max_iter", "int"),
    },
    "run": {
        "seed": ("seed", "int"),
        "out_dir": ("out_dir", "str"),
        "quantile_samples": ("quantile_samples", "int"),
        "integrator_tol": ("integrator_tol", "float"),
    },
    "fit_pce": {
        "policies": ("fit_policies", "strs"),
        "validation_samples": ("fit_validation_samples", "int"),
        "anchor_hours": ("fit_anchor_hours", "float"),
    },
    "jacobian": {
        "windows_hours": ("jacobian_windows_hours", "floats"),
        "spread": ("jacobian_spread", "float"),
        "center": ("jacobian_center", "floats"),
    },
    "sweep": {
        "delta_tau_hours": ("sweep_delta_tau_hours", "floats"),
        "noise_coeff": ("sweep_noise_coeff", "floats"),
        "smoother": ("sweep_smoother", "strs"),
    },
}


def _coerce(value, kind: str, path: str, problems: list[str]):
    try:
        if kind == "float":
            if isinstance(value, bool) or not isinstance(value, (int, float)):
                raise TypeError
            return float(value)
        if kind == "int":
            if isinstance(value, bool) or not isinstance(value, int):
                raise TypeError
            return int(value)
        if kind == "bool":
            if not isinstance(value, bool):
                raise TypeError
            return value
        if kind == "str":
            if not isinstance(value, str):
                raise TypeError
            return value
        if kind == "floats":
            return tuple(float(v) for v in value)
        if kind == "ints":
            return tuple(int(v) for v in value)
        if kind == "strs":
            return tuple(str(v) for v in value)
    except (TypeError, ValueError):
        problems.append(f"{path}: expected {kind}, got {value!r}")
        return None
    raise AssertionError(kind)


def load_config(path: str | Path, overrides: dict | None = None) -> ExperimentConfig:
    """Parse and validate a TOML scenario file.

    ``overrides`` maps dataclass field names to replacement values
    (used for --seed / --out command-line overrides). Raises
    ConfigError listing every problem with its section.key path.
    """
    try:
        with open(path, "rb") as fh:
            raw = tomllib.load(fh)
    except FileNotFoundError:
        raise ConfigError([f"config file not found: {path}"])
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError([f"config parse error: {exc}"])

    problems: list[str] = []
    values: dict = {}
    for section, content in raw.items():
        layout = _TOML_LAYOUT.get(section)
        if layout is None:
            problems.append(f"{section}: unknown section")
            continue
        if not isinstance(content, dict):
            problems.append(f"{section}: must be a table")
            continue
        for key, value in content.items():
            slot = layout.get(key)
            if slot is None:
                problems.append(f"{section}.{key}: unknown key")
                continue
            name, kind = slot
            coerced = _coerce(value, kind, f"{section}.{key}", problems)
            if coerced is not None:
                values[name] = coerced

    if overrides:
        values.update(overrides)
    if "seed" not in values:
        problems.append("run.seed: required (every run must be seeded)")
    if problems:
        raise ConfigError(problems)

    config = ExperimentConfig(**values)
    validate_config(config)
    return config


def validate_config(config: ExperimentConfig) -> None:
    p: list[str] = []
    if len(config.truth_ic) != 3:
        p.append("model.truth_ic: must have 3 components")
    if config.hours_per_model_unit <= 0:
        p.append("model.hours_per_model_unit: must be positive")
    if len(config.prior_mean) != 3 or len(config.prior_std) != 3:
        p.append("prior.mean / prior.std: must have 3 components")
    elif any(s <= 0 for s in config.prior_std):
        p.append("prior.std: all standard deviations must be positive")
    if config.horizon_hours < config.t0_hours:
        p.append("window.horizon_hours: must be >= window.t0_hours")
    if config.delta_tau_hours <= 0:
        p.append("window.delta_tau_hours: must be positive")
    if config.noise_coeff <= 0:
        p.append("measurement.noise_coeff: must be positive")
    obs = config.observed
    if len(obs) == 0 or len(set(obs)) != len(obs) or any(i not in (0, 1, 2) for i in obs):
        p.append("measurement.observed: distinct indices from {0, 1, 2}")
    if config.smoother not in ("ds", "ps1", "ps2"):
        p.append(f"algorithm.smoother: unknown kind {config.smoother!r}")
    if config.map_mode not in ("projection", "bayes"):
        p.append(f"algorithm.map_mode: unknown mode {config.map_mode!r}")
    if config.basis not in ("fixed-hermite", "mgs", "nmap"):
        p.append(f"algorithm.basis: unknown policy {config.basis!r}")
    if config.order < 1:
        p.append("algorithm.order: must be >= 1")
    if not (0 < config.basis_tolerance < 1):
        p.append("algorithm.basis_tolerance: must be in (0, 1)")
    if config.n_samples < 8:
        p.append("algorithm.n_samples: must be >= 8")
    if config.tol <= 0 or config.max_iter < 1:
        p.append("algorithm.tol / algorithm.max_iter: tol > 0, max_iter >= 1")
    if config.quantile_samples < 1000:
        p.append("run.quantile_samples: must be >= 1000")
    if config.integrator_tol <= 0:
        p.append("run.integrator_tol: must be positive")
    if config.fit_validation_samples < 100:
        p.append("fit_pce.validation_samples: must be >= 100")
    if config.fit_anchor_hours <= 0:
        p.append("fit_pce.anchor_hours: must be positive")
    if any(pol not in ("fixed-hermite", "mgs", "nmap") for pol in config.fit_policies):
        p.append("fit_pce.policies: entries must be fixed-hermite | mgs | nmap")
    if any(w <= 0 for w in config.jacobian_windows_hours):
        p.append("jacobian.windows_hours: all windows must be positive")
    if config.jacobian_spread <= 0:
        p.append("jacobian.spread: must be positive")
    if config.jacobian_center is not None and len(config.jacobian_center) != 3:
        p.append("jacobian.center: must have 3 components")
    if p:
        raise ConfigError(p)


def config_hash(config: ExperimentConfig) -> str:
    """Short stable digest of the fully resolved configuration."""
    text = json.dumps(config.to_dict(), sort_keys=True)
    return hashlib.sha256(text.encode()).hexdigest()[:16]


# ---------------------------------------------------------------------------
# model-time plumbing, truth, measurement
# ---------------------------------------------------------------------------


def _model_rhs(config: ExperimentConfig):
    return lorenz84(SystemParams(config.a, config.b, config.f1, config.f2))


def _to_model_time(config: ExperimentConfig, hours: float) -> float:
    return hours / config.hours_per_model_unit


def _make_propagator(config: ExperimentConfig):
    """Hours-in, hours-out batched ensemble propagator."""
    rhs = _model_rhs(config)
    integ = IntegratorConfig(rel_tol=config.integrator_tol, abs_tol=config.integrator_tol)

    def propagate(states: np.ndarray, t_start_hours: float, t_end_hours: float):
        return propagate_ensemble(
            rhs,
            states,
            _to_model_time(config, t_start_hours),
            _to_model_time(config, t_end_hours),
            integ,
            vectorized=True,
        )

    return propagate


def truth_trajectory(
    config: ExperimentConfig, times_hours: np.ndarray
) -> np.ndarray:
    """Reference trajectory from the true initial condition at given hours."""
    rhs = _model_rhs(config)
    integ = IntegratorConfig(rel_tol=config.integrator_tol, abs_tol=config.integrator_tol)
    out = np.empty((len(times_hours), 3))
    state = np.asarray(config.truth_ic, dtype=float)
    t_prev = _to_model_time(config, config.t0_hours)
    start = _to_model_time(config, float(times_hours[0]))
    if start != t_prev:
        state = integrate(rhs, state, t_prev, start, integ)
        t_prev = start
    out[0] = state
    for k in range(1, len(times_hours)):
        t_next = _to_model_time(config, float(times_hours[k]))
        state = integrate(rhs, state, t_prev, t_next, integ)
        out[k] = state
        t_prev = t_next
    return out


def synthesize_measurement(
    config: ExperimentConfig, truth_at_horizon: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Noisy observation of the truth at the horizon.

    The noise standard deviation per observed component is the noise
    coefficient times that component's magnitude (floored away from an
    exactly singular density), drawn from the measurement seed stream.
    """
    sel = list(config.observed)
    values = np.asarray(truth_at_horizon, dtype=float)[sel]
    std = np.maximum(config.noise_coeff * np.abs(values), 1e-8)
    cov = np.diag(std**2)
    rng = _rng(config.seed, _STREAM_MEASUREMENT)
    y = values + std * rng.standard_normal(len(sel))
    return y, cov


# ---------------------------------------------------------------------------
# prior chain with optional basis adaptation
# ---------------------------------------------------------------------------


@dataclass
class PriorStage:
    """Surrogate of the unconditioned state at one report time.

    ``surrogate`` maps the stage's anchor variables to the state;
    ``anchor_index`` is the report index whose state the anchor is, or
    -1 for the germ itself. ``filter_prior`` is the Hermite-germ
    expansion the smoother consumes.
    """

    time_hours: float
    surrogate: PCExpansion
    anchor_index: int
    filter_prior: PCExpansion
    rel_residual: float
    flags: list[str] = field(default_factory=list)


@dataclass
class PriorChain:
    times_hours: np.ndarray
    stages: list[PriorStage]
    germ_samples: np.ndarray
    ensemble: np.ndarray  # (n_times, n_samples, 3) integrator training states
    flags: list[str] = field(default_factory=list)

    def stage_at(self, t_hours: float, atol: float = 1e-9) -> PriorStage:
        for s in self.stages:
            if abs(s.time_hours - t_hours) <= atol:
                return s
        raise KeyError(f"no prior stage at t = {t_hours} h")

    def at(self, t_hours: float) -> PCExpansion:
        return self.stage_at(t_hours).filter_prior

    def compose(self, stage_index: int, germ_points: np.ndarray) -> np.ndarray:
        """Evaluate the composed surrogate chain at germ points."""
        memo: dict[int, np.ndarray] = {}

        def values_at(idx: int) -> np.ndarray:
            if idx == -1:
                return germ_points
            if idx not in memo:
                stage = self.stages[idx]
                memo[idx] = pce_eval(stage.surrogate, values_at(stage.anchor_index))
            return memo[idx]

        return values_at(stage_index)

    @property
    def anchor_times(self) -> list[float]:
        out = []
        for s in self.stages:
            if s.anchor_index >= 0:
                t = float(self.times_hours[s.anchor_index])
                if t not in out:
                    out.append(t)
        return out


def _initial_expansion(config: ExperimentConfig) -> PCExpansion:
    index_set = total_degree_index_set(3, 1)
    coeffs = np.zeros((3, len(index_set)))
    coeffs[:, 0] = config.prior_mean
    for d in range(3):
        alpha = tuple(1 if k == d else 0 for k in range(3))
        coeffs[d, index_set.position(alpha)] = config.prior_std[d]
    return PCExpansion(coeffs, index_set, HermiteBasis())


def _fit_on_anchor(
    policy: str,
    anchor_values: np.ndarray,
    targets: np.ndarray,
    order: int,
    anchor_label: str,
    rvm: RvmConfig,
) -> tuple[PCExpansion, float]:
    """Fit targets on features of the anchor variables; return fit + residual."""
    if policy == "hermite":
        expansion, results = fit_pce_full(anchor_values, targets, HermiteBasis(), order, rvm)
    elif policy == "nmap":
        expansion, results = fit_pce_full(
            anchor_values, targets, NmapMonomialBasis(anchor_label), order, rvm
        )
    elif policy == "mgs":
        raw_set = total_degree_index_set(anchor_values.shape[1], order)
        raw_design = NmapMonomialBasis("raw").design(anchor_values, raw_set)
        _, transform, kept = mgs_orthonormalize(raw_design)
        kept_set = MultiIndexSet(
            raw_set.dim, raw_set.order, tuple(raw_set.indices[i] for i in kept)
        )
        basis = MgsOrthonormalBasis(raw_set, transform)
        expansion, results = fit_pce_full(
            anchor_values, targets, basis, order, rvm, index_set=kept_set
        )
    else:
        raise ValueError(f"unknown basis policy {policy!r}")
    stds = np.maximum(targets.std(axis=0), 1e-12)
    rel = float(np.max(np.sqrt([r.noise_var for r in results]) / stds))
    return expansion, rel


def build_prior_chain(
    config: ExperimentConfig, times_hours: np.ndarray | None = None
) -> PriorChain:
    """Propagate a germ-seeded ensemble and fit a prior at every report time.

    With the fixed-hermite policy every stage regresses on Hermite
    polynomials of the original germ. The adaptive policies start the
    same way but re-anchor onto the previous report state whenever the
    fit residual exceeds the basis tolerance; after a re-anchor the
    filter-facing prior is rebuilt as a Hermite expansion in the
    gaussianized anchor (Nataf-transformed), calibrated on a large
    surrogate-composed population.
    """
    if times_hours is None:
        times_hours = report_times(
            config.t0_hours, config.horizon_hours, config.delta_tau_hours
        )
    times_hours = np.asarray(times_hours, dtype=float)
    policy = {"fixed-hermite": "hermite", "mgs": "mgs", "nmap": "nmap"}[config.basis]
    rvm = RvmConfig()

    xi = sample_germ(config.n_samples, 3, _rng(config.seed, _STREAM_PRIOR))
    init = _initial_expansion(config)
    ensemble = np.empty((len(times_hours), config.n_samples, 3))
    ensemble[0] = pce_eval(init, xi)
    propagate = _make_propagator(config)
    for k in range(1, len(times_hours)):
        ensemble[k] = propagate(
            ensemble[k - 1], float(times_hours[k - 1]), float(times_hours[k])
        )

    chain = PriorChain(times_hours, [], xi, ensemble)
    chain.stages.append(
        PriorStage(float(times_hours[0]), init, -1, init, 0.0)
    )

    anchor_index = -1
    anchor_values = xi
    big_pop: np.ndarray | None = None  # composed anchor population for Nataf
    nataf = None

    for k in range(1, len(times_hours)):
        targets = ensemble[k]
        label = f"state-t{times_hours[anchor_index]:g}h" if anchor_index >= 0 else "germ"
        active = "hermite" if anchor_index == -1 else policy
        surrogate, rel = _fit_on_anchor(active, anchor_values, targets, config.order, label, rvm)
        stage_flags: list[str] = []

        if rel > config.basis_tolerance and policy != "hermite" and anchor_index != k - 1:
            anchor_index = k - 1
            anchor_values = ensemble[k - 1]
            label = f"state-t{times_hours[anchor_index]:g}h"
            surrogate, rel = _fit_on_anchor(
                policy, anchor_values, targets, config.order, label, rvm
            )
            stage_flags.append(
                f"re-anchored on the state at t = {times_hours[anchor_index]:g} h"
            )
            pop_points = sample_germ(
                10_000, 3, _rng(config.seed, _STREAM_NATAF_POP)
            )
            big_pop = chain.compose(anchor_index, pop_points)
            nataf = nataf_fit(big_pop)
            stage_flags.extend(f"gaussianization: {f}" for f in nataf.flags)
        elif rel > config.basis_tolerance:
            stage_flags.append(
                f"fit residual {rel:.3g} above tolerance {config.basis_tolerance:g}"
            )

        if anchor_index == -1:
            filter_prior = surrogate
        else:
            theta = nataf_apply(nataf, anchor_values)
            filter_prior, _ = fit_pce_full(
                theta, targets, HermiteBasis(), config.order, rvm
            )

        stage = PriorStage(float(times_hours[k]), surrogate, anchor_index, filter_prior, rel, stage_flags)
        chain.stages.append(stage)
        chain.flags.extend(f"t={times_hours[k]:g}h: {f}" for f in stage_flags)

    return chain


# ---------------------------------------------------------------------------
# the twin experiment
# ---------------------------------------------------------------------------


@dataclass
class RunSummary:
    times_hours: np.ndarray
    truth: np.ndarray
    posterior_mean: np.ndarray
    posterior_var: np.ndarray
    quantile_lo: np.ndarray
    quantile_hi: np.ndarray
    iterations: list[int]
    converged: list[bool]
    diverged: list[bool]
    bias_corrections: list
    coverage_cells: float
    coverage_times: float
    wall_clock_s: float
    config_hash: str
    flags: list[str]
    config: dict
    measurement: np.ndarray
    measurement_cov: np.ndarray

    def to_dict(self) -> dict:
        return {
            "config_hash": self.config_hash,
            "times_hours": self.times_hours.tolist(),
            "truth": self.truth.tolist(),
            "posterior_mean": self.posterior_mean.tolist(),
            "posterior_var": self.posterior_var.tolist(),
            "quantile_lo": self.quantile_lo.tolist(),
            "quantile_hi": self.quantile_hi.tolist(),
            "iterations": list(self.iterations),
            "converged": list(self.converged),
            "diverged": list(self.diverged),
            "bias_corrections": [
                None if b is None else np.asarray(b).tolist()
                for b in self.bias_corrections
            ],
            "coverage_cells": self.coverage_cells,
            "coverage_times": self.coverage_times,
            "wall_clock_s": self.wall_clock_s,
            "flags": list(self.flags),
            "measurement": self.measurement.tolist(),
            "measurement_cov": self.measurement_cov.tolist(),
            "config": self.config,
        }


def _filter_config(config: ExperimentConfig) -> FilterConfig:
    return FilterConfig(
        tol=config.tol,
        max_iter=config.max_iter,
        map_mode=config.map_mode,
        delta_tau=config.delta_tau_hours,
        bias_correct=config.bias_correct,
        order=config.order,
        n_samples=config.n_samples,
        seed=config.seed,
    )


def run_smoother(
    config: ExperimentConfig,
    chain: PriorChain | None = None,
    y_mes: np.ndarray | None = None,
    noise_cov: np.ndarray | None = None,
) -> tuple[SmootherResult, PriorChain, np.ndarray, np.ndarray]:
    """Assemble the smoothing problem from a config and run it."""
    times = report_times(config.t0_hours, config.horizon_hours, config.delta_tau_hours)
    if chain is None:
        chain = build_prior_chain(config, times)
    if y_mes is None or noise_cov is None:
        truth_T = truth_trajectory(config, np.array([config.horizon_hours]))[0]
        y_mes, noise_cov = synthesize_measurement(config, truth_T)
    problem = SmootherProblem(
        propagate=_make_propagator(config),
        prior_at=chain.at,
        y_mes=y_mes,
        model=MeasurementModel(config.observed, noise_cov),
        t0=config.t0_hours,
        final_time=config.horizon_hours,
    )
    fcfg = _filter_config(config)
    runner = {"ds": direct_smooth, "ps1": ps1_smooth, "ps2": ps2_smooth}[config.smoother]
    return runner(problem, fcfg), chain, y_mes, noise_cov


def _posterior_quantiles(
    posterior: PCExpansion, n: int, rng: np.random.Generator
) -> tuple[np.ndarray, np.ndarray]:
    points = sample_germ(n, posterior.germ_dim, rng)
    values = pce_eval(posterior, points)
    lo = np.quantile(values, 0.01, axis=0)
    hi = np.quantile(values, 0.99, axis=0)
    return lo, hi


def run_experiment(
    config: ExperimentConfig, out_dir: str | Path | None = None
) -> RunSummary:
    """Full twin experiment: truth, measurement, smoothing, reporting.

    Writes (when an output directory is given) a trajectory CSV, a JSON
    summary and the serialized posterior expansions, all stamped with
    the config hash. Deterministic for a fixed config.
    """
    started = _time.perf_counter()
    times = report_times(config.t0_hours, config.horizon_hours, config.delta_tau_hours)
    truth = truth_trajectory(config, times)
    y_mes, noise_cov = synthesize_measurement(config, truth[-1])
    result, chain, _, _ = run_smoother(config, y_mes=y_mes, noise_cov=noise_cov)

    n_times = len(times)
    mean = np.empty((n_times, 3))
    var = np.empty((n_times, 3))
    lo = np.empty((n_times, 3))
    hi = np.empty((n_times, 3))
    iterations: list[int] = []
    converged: list[bool] = []
    diverged: list[bool] = []
    biases: list = []
    qrng = _rng(config.seed, _STREAM_QUANTILE)
    for k, step in enumerate(result.steps):
        mean[k] = pce_mean(step.posterior)
        var[k] = np.diag(pce_cov(step.posterior))
        lo[k], hi[k] = _posterior_quantiles(step.posterior, config.quantile_samples, qrng)
        iterations.append(step.iterations)
        converged.append(step.converged)
        diverged.append(step.diverged)
        biases.append(step.bias_correction)

    inside = (truth >= lo) & (truth <= hi)
    coverage_cells = float(inside.mean())
    coverage_times = float(inside.all(axis=1).mean())

    flags = list(chain.flags) + list(result.flags)
    summary = RunSummary(
        times_hours=times,
        truth=truth,
        posterior_mean=mean,
        posterior_var=var,
        quantile_lo=lo,
        quantile_hi=hi,
        iterations=iterations,
        converged=converged,
        diverged=diverged,
        bias_corrections=biases,
        coverage_cells=coverage_cells,
        coverage_times=coverage_times,
        wall_clock_s=_time.perf_counter() - started,
        config_hash=config_hash(config),
        flags=flags,
        config=config.to_dict(),
        measurement=y_mes,
        measurement_cov=noise_cov,
    )

    target = out_dir if out_dir is not None else config.out_dir
    if target is not None:
        _write_outputs(Path(target), config, summary, result)
    return summary


def _check_dir_hash(directory: Path, digest: str) -> None:
    """Refuse to mix outputs of different configs in one directory."""
    for csv_file in directory.glob("*.csv"):
        with open(csv_file) as fh:
            first = fh.readline().strip()
        if first.startswith("# config_hash=") and first.split("=", 1)[1] != digest:
            raise ConfigError(
                [f"{csv_file}: holds outputs of config {first.split('=', 1)[1]}, "
                 f"refusing to mix with {digest}"]
            )
    for json_file in directory.glob("*.json"):
        try:
            with open(json_file) as fh:
                payload = json.load(fh)
        except (OSError, json.JSONDecodeError):
            continue
        old = payload.get("config_hash")
        if old is not None and old != digest:
            raise ConfigError(
                [f"{json_file}: holds outputs of config {old}, refusing to mix with {digest}"]
            )


def _write_outputs(
    directory: Path,
    config: ExperimentConfig,
    summary: RunSummary,
    result: SmootherResult,
) -> None:
    directory.mkdir(parents=True, exist_ok=True)
    digest = summary.config_hash
    _check_dir_hash(directory, digest)

    columns = ["time_hours"]
    for group in ("truth", "mean", "var", "p01", "p99"):
        columns += [f"{group}_{c}" for c in "xyz"]
    lines = [f"# config_hash={digest}", ",".join(columns)]
    table = np.hstack(
        [
            summary.times_hours[:, None],
            summary.truth,
            summary.posterior_mean,
            summary.posterior_var,
            summary.quantile_lo,
            summary.quantile_hi,
        ]
    )
    for row in table:
        lines.append(",".join(format(v, ".17g") for v in row))
    (directory / "trajectory.csv").write_text("\n".join(lines) + "\n")

    with open(directory / "summary.json", "w") as fh:
        json.dump(summary.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")

    for step in result.steps:
        name = f"posterior_t{step.time:g}h.pce"
        write_pce(step.posterior, directory / name, config_hash=digest)


def write_simulation(config: ExperimentConfig, out_dir: str | Path) -> dict:
    """Emit the synthetic truth and the noisy measurement (no smoothing)."""
    directory = Path(out_dir)
    directory.mkdir(parents=True, exist_ok=True)
    digest = config_hash(config)
    _check_dir_hash(directory, digest)

    times = report_times(config.t0_hours, config.horizon_hours, config.delta_tau_hours)
    truth = truth_trajectory(config, times)
    y_mes, noise_cov = synthesize_measurement(config, truth[-1])

    lines = [f"# config_hash={digest}", "time_hours,truth_x,truth_y,truth_z"]
    for t, row in zip(times, truth):
        lines.append(",".join(format(v, ".17g") for v in (t, *row)))
    (directory / "truth.csv").write_text("\n".join(lines) + "\n")

    lines = [f"# config_hash={digest}", "component,truth,measured,noise_std"]
    std = np.sqrt(np.diag(noise_cov))
    for i, comp in enumerate(config.observed):
        lines.append(
            ",".join(
                [str(comp)]
                + [format(v, ".17g") for v in (truth[-1][comp], y_mes[i], std[i])]
            )
        )
    (directory / "measurement.csv").write_text("\n".join(lines) + "\n")
    return {
        "config_hash": digest,
        "times_hours": times.tolist(),
        "measurement": y_mes.tolist(),
    }


# ---------------------------------------------------------------------------
# studies: basis comparison, jacobian recovery, sweeps
# ---------------------------------------------------------------------------


def basis_study(config: ExperimentConfig, out_dir: str | Path | None = None) -> dict:
    """Validation RMSE of the basis policies at the horizon.

    Each policy builds its own surrogate chain on the shared training
    ensemble, then its horizon-stage surrogate is scored on a fresh
    validation ensemble, evaluated at the true anchor states (the
    validation members integrated to the stage's anchor time). That
    isolates how well the stage's coordinates represent the horizon
    state from error accumulated along the chain; the fully composed
    chain is reported alongside.
    """
    times = report_times(config.t0_hours, config.horizon_hours, config.fit_anchor_hours)
    chains = {
        pol: build_prior_chain(replace(config, basis=pol), times)
        for pol in config.fit_policies
    }

    m = config.fit_validation_samples
    xi_val = sample_germ(m, 3, _rng(config.seed, _STREAM_VALIDATION))
    init = _initial_expansion(config)
    val_states = [pce_eval(init, xi_val)]
    propagate = _make_propagator(config)
    for k in range(1, len(times)):
        val_states.append(propagate(val_states[-1], float(times[k - 1]), float(times[k])))
    truth = val_states[-1]

    report: dict = {
        "config_hash": config_hash(config),
        "horizon_hours": float(times[-1]),
        "anchor_step_hours": config.fit_anchor_hours,
        "n_train": config.n_samples,
        "n_validation": m,
        "order": config.order,
        "policies": {},
    }
    last = len(times) - 1
    for pol, chain in chains.items():
        stage = chain.stages[last]
        anchors = xi_val if stage.anchor_index == -1 else val_states[stage.anchor_index]
        err = pce_eval(stage.surrogate, anchors) - truth
        err_comp = chain.compose(last, xi_val) - truth
        per_comp = np.sqrt(np.mean(err**2, axis=0))
        report["policies"][pol] = {
            "rmse": float(np.sqrt(np.mean(err**2))),
            "rmse_per_component": per_comp.tolist(),
            "rmse_composed": float(np.sqrt(np.mean(err_comp**2))),
            "anchor_times_hours": chain.anchor_times,
            "flags": list(chain.flags),
        }

    if out_dir is not None:
        directory = Path(out_dir)
        directory.mkdir(parents=True, exist_ok=True)
        _check_dir_hash(directory, report["config_hash"])
        with open(directory / "basis_study.json", "w") as fh:
            json.dump(report, fh, indent=2, sort_keys=True)
            fh.write("\n")
    return report


def _finite_difference_jacobian(
    config: ExperimentConfig, center: np.ndarray, window_hours: float
) -> np.ndarray:
    rhs = _model_rhs(config)
    integ = IntegratorConfig(rel_tol=1e-10, abs_tol=1e-10)
    t0 = 0.0
    t1 = _to_model_time(config, window_hours)
    jac = np.empty((3, 3))
    for j in range(3):
        h = 1e-5 * max(1.0, abs(center[j]))
        plus = center.copy()
        minus = center.copy()
        plus[j] += h
        minus[j] -= h
        f_plus = integrate(rhs, plus, t0, t1, integ)
        f_minus = integrate(rhs, minus, t0, t1, integ)
        jac[:, j] = (f_plus - f_minus) / (2 * h)
    return jac


def jacobian_check(config: ExperimentConfig, out_dir: str | Path | None = None) -> dict:
    """Statistically estimated propagation Jacobians vs finite differences.

    For each window length, an ensemble spread around the center state is
    propagated and the affine map is recovered by both estimators; errors
    are relative Frobenius distances to the central-difference Jacobian.
    """
    center = (
        np.asarray(config.jacobian_center, dtype=float)
        if config.jacobian_center is not None
        else np.asarray(config.truth_ic, dtype=float)
    )
    sigma = config.jacobian_spread
    rhs = _model_rhs(config)
    integ = IntegratorConfig(rel_tol=config.integrator_tol, abs_tol=config.integrator_tol)
    xi = sample_germ(config.n_samples, 3, _rng(config.seed, _STREAM_JACOBIAN))
    x_samples = center + sigma * xi

    report: dict = {"config_hash": config_hash(config), "center": center.tolist(),
                    "spread": sigma, "windows": {}}
    for window in config.jacobian_windows_hours:
        t1 = _to_model_time(config, window)
        z_samples = propagate_ensemble(rhs, x_samples, 0.0, t1, integ, vectorized=True)
        fd = _finite_difference_jacobian(config, center, window)
        # Both estimators see the same raw ensemble: the covariance route
        # applies the cross-covariance formula to the empirical moments,
        # the regression route runs the sparse Bayes fit per output row.
        dx = x_samples - x_samples.mean(axis=0)
        dz = z_samples - z_samples.mean(axis=0)
        c_x = dx.T @ dx / len(x_samples)
        c_zx = dz.T @ dx / len(x_samples)
        h_cov = c_zx @ np.linalg.pinv(c_x, rcond=1e-10)
        bayes = estimate_forward_map_bayes(x_samples, z_samples, center)
        denom = np.linalg.norm(fd)
        report["windows"][f"{window:g}"] = {
            "fd": fd.tolist(),
            "projection": h_cov.tolist(),
            "bayes": bayes.matrix.tolist(),
            "projection_rel_error": float(np.linalg.norm(h_cov - fd) / denom),
            "bayes_rel_error": float(np.linalg.norm(bayes.matrix - fd) / denom),
        }

    if out_dir is not None:
        directory = Path(out_dir)
        directory.mkdir(parents=True, exist_ok=True)
        _check_dir_hash(directory, report["config_hash"])
        with open(directory / "jacobian_check.json", "w") as fh:
            json.dump(report, fh, indent=2, sort_keys=True)
            fh.write("\n")
    return report


def _sweep_cell(args: tuple) -> tuple[str, dict]:
    config, cell_dir = args
    summary = run_experiment(config, cell_dir)
    return str(cell_dir), {
        "config_hash": summary.config_hash,
        "coverage_cells": summary.coverage_cells,
        "coverage_times": summary.coverage_times,
        "iterations": summary.iterations,
        "diverged": summary.diverged,
        "wall_clock_s": summary.wall_clock_s,
    }


def run_sweep(
    config: ExperimentConfig,
    out_dir: str | Path,
    parallel: bool = True,
) -> dict:
    """Run the (delta_tau x noise x smoother) matrix, one directory per cell."""
    base = Path(out_dir)
    base.mkdir(parents=True, exist_ok=True)
    cells = []
    for dt in config.sweep_delta_tau_hours:
        for c_eps in config.sweep_noise_coeff:
            for kind in config.sweep_smoother:
                cell = replace(
                    config,
                    delta_tau_hours=dt,
                    noise_coeff=c_eps,
                    smoother=kind,
                    out_dir=None,
                )
                name = f"cell_dt{dt:g}_c{c_eps:g}_{kind}"
                cells.append((cell, base / name))

    results: dict = {}
    if parallel and len(cells) > 1:
        workers = min(len(cells), os.cpu_count() or 1)
        with concurrent.futures.ProcessPoolExecutor(max_workers=workers) as pool:
            for key, payload in pool.map(_sweep_cell, cells):
                results[key] = payload
    else:
        for args in cells:
            key, payload = _sweep_cell(args)
            results[key] = payload

    report = {"sweep_config_hash": config_hash(config), "cells": results}
    with open(base / "sweep.json", "w") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return report
