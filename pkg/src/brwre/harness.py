"""Experiment orchestration: configuration, seeding, parallel replication
and deterministic CSV/JSON output.

Reproducibility: the master seed determines per-replica seeds by index
(see :mod:`brwre.rng`), every worker writes nothing itself, and the
single writer emits rows in replica order, so output bytes are identical
across runs and across worker counts.  The manifest records the config
hash (semantic fields only: output paths and worker counts do not change
it) plus timings and record counts.
"""

from __future__ import annotations

import json
import math
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from . import edgeworth as edgeworth_mod
from .edgeworth import (
    CumulantWindow,
    GridConvolutionOracle,
    MonteCarloOracle,
    edgeworth_cdf,
    lambda_coeffs,
    oracle_cdf,
    partition_solutions,
    q1_series,
    q2_series,
    q3_series,
    scaled_correction_series,
)
from .environment import (
    EnvironmentModel,
    EnvState,
    ExplicitPmf,
    Gaussian,
    GeometricTruncated,
    PoissonTruncated,
    ShiftedExponential,
    TwoPoint,
    Uniform,
    cumulants_from_central_moments,
    sample_environment,
    validate_model,
)
from .errors import BrwreError, ConfigError
from .expansion import ab_decompose, replica_rows, rhs
from .martingales import (
    compute_series,
    compute_truncated,
    estimate_limits,
    one_step_increment_samples,
)
from .rng import derive_seed, make_generator
from .simulator import SimConfig, normalized_lhs, simulate
from .special import (
    hermite_coefficients,
    hermite_explicit,
    hermite_recurrence,
    std_normal_cdf,
    std_normal_pdf,
)
from .textio import canonical_json, sha256_of, write_csv, write_json

DEFAULT_T_GRID = (-2.0, -1.0, -0.5, 0.0, 0.5, 1.0, 2.0)

MARTINGALE_HEADER = [
    "replica",
    "n",
    "w",
    "n1",
    "n2",
    "n3",
    "wbar_k",
    "n1bar_k",
    "n2bar_k",
    "n3bar_k",
]

EXPANSION_HEADER = [
    "replica",
    "n",
    "t",
    "lhs",
    "rhs0",
    "rhs1",
    "rhs2",
    "rhs3",
    "res0",
    "res1",
    "res2",
    "res3",
    "a",
    "b",
    "termination",
]


def split_generation(n: int, beta: float) -> int:
    """k_n = floor(n^beta), the ancestor generation for decompositions."""
    return int(math.floor(n**beta)) if n > 0 else 0


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------


@dataclass
class OracleConfig:
    method: str = "grid_convolution"
    cells: int = 400
    half_width: float = 12.0
    mc_samples: int = 100_000
    lengths: tuple[int, ...] = (8, 16, 32, 64)

    def to_dict(self) -> dict:
        return {
            "method": self.method,
            "cells": self.cells,
            "half_width": self.half_width,
            "mc_samples": self.mc_samples,
            "lengths": list(self.lengths),
        }

    def grid(self) -> GridConvolutionOracle:
        return GridConvolutionOracle(cells=self.cells, half_width=self.half_width)

    def monte_carlo(self, seed: int) -> MonteCarloOracle:
        return MonteCarloOracle(n_samples=self.mc_samples, seed=seed)


@dataclass
class ExperimentConfig:
    model_dict: dict
    n_list: list[int]
    t_grid: list[float]
    replicas: int
    seed: int
    beta: float = 0.12
    order_max: int = 3
    n_max: int | None = None
    particle_cap: int = 2_000_000
    track_ancestors_at: int | None = None
    batches: int = 10
    monotone_check_n: int | None = None
    oracle: OracleConfig = field(default_factory=OracleConfig)
    workers: int = 1
    output_dir: str = "out"

    def __post_init__(self):
        if self.replicas < 1:
            raise ConfigError("replicas must be >= 1")
        if not 0.0 < self.beta < 0.5:
            raise ConfigError("beta must lie in (0, 0.5)")
        if not self.n_list:
            raise ConfigError("n_list must be non-empty")
        self.n_list = sorted(int(n) for n in self.n_list)
        if self.n_list[0] < 1:
            raise ConfigError("n_list entries must be >= 1")
        if self.n_max is None:
            self.n_max = self.n_list[-1]
        if self.n_max < self.n_list[-1]:
            raise ConfigError("n_max smaller than max(n_list)")
        if not 1 <= self.n_max <= 64:
            raise ConfigError("n_max must be in 1..64")
        if self.order_max not in (0, 1, 2, 3):
            raise ConfigError("order_max must be 0..3")
        if not self.t_grid:
            raise ConfigError("t_grid must be non-empty")
        self.t_grid = [float(t) for t in self.t_grid]
        if self.batches < 1:
            raise ConfigError("batches must be >= 1")
        if self.oracle.method not in ("grid_convolution", "monte_carlo"):
            raise ConfigError(f"unknown oracle method {self.oracle.method!r}")

    @property
    def model(self) -> EnvironmentModel:
        return EnvironmentModel.from_dict(self.model_dict)

    def semantic_dict(self) -> dict:
        """Fields that define the experiment (excludes workers/paths)."""
        return {
            "model": self.model_dict,
            "n_list": self.n_list,
            "t_grid": self.t_grid,
            "replicas": self.replicas,
            "seed": self.seed,
            "beta": self.beta,
            "order_max": self.order_max,
            "n_max": self.n_max,
            "particle_cap": self.particle_cap,
            "track_ancestors_at": self.track_ancestors_at,
            "batches": self.batches,
            "monotone_check_n": self.monotone_check_n,
            "oracle": self.oracle.to_dict(),
        }

    def config_hash(self) -> str:
        return sha256_of(canonical_json(self.semantic_dict()))

    @classmethod
    def from_dict(cls, raw: dict, **overrides) -> "ExperimentConfig":
        if not isinstance(raw, dict):
            raise ConfigError("config root must be a JSON object")
        if "model" not in raw:
            raise ConfigError("config is missing the 'model' field")
        known = {
            "model",
            "n_list",
            "t_grid",
            "replicas",
            "seed",
            "beta",
            "order_max",
            "n_max",
            "particle_cap",
            "track_ancestors_at",
            "batches",
            "monotone_check_n",
            "oracle",
            "workers",
            "output_dir",
        }
        unknown = set(raw) - known
        if unknown:
            raise ConfigError(f"unknown config fields: {sorted(unknown)}")
        oracle_raw = raw.get("oracle", {})
        oracle = OracleConfig(
            method=oracle_raw.get("method", "grid_convolution"),
            cells=int(oracle_raw.get("cells", 400)),
            half_width=float(oracle_raw.get("half_width", 12.0)),
            mc_samples=int(oracle_raw.get("mc_samples", 100_000)),
            lengths=tuple(int(x) for x in oracle_raw.get("lengths", (8, 16, 32, 64))),
        )
        cfg = dict(
            model_dict=raw["model"],
            n_list=list(raw.get("n_list", [8, 12, 16, 24, 32])),
            t_grid=list(raw.get("t_grid", DEFAULT_T_GRID)),
            replicas=int(raw.get("replicas", 100)),
            seed=int(raw.get("seed", 0)),
            beta=float(raw.get("beta", 0.12)),
            order_max=int(raw.get("order_max", 3)),
            n_max=raw.get("n_max"),
            particle_cap=int(raw.get("particle_cap", 2_000_000)),
            track_ancestors_at=raw.get("track_ancestors_at"),
            batches=int(raw.get("batches", 10)),
            monotone_check_n=raw.get("monotone_check_n"),
            oracle=oracle,
            workers=int(raw.get("workers", 1)),
            output_dir=str(raw.get("output_dir", "out")),
        )
        for key, value in overrides.items():
            if value is not None:
                cfg[key] = value
        config = cls(**cfg)
        # Fail fast on a structurally broken model.
        config.model
        return config

    @classmethod
    def from_file(cls, path: str | Path, **overrides) -> "ExperimentConfig":
        try:
            with open(path) as fh:
                raw = json.load(fh)
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(
                f"{path}: invalid JSON at line {exc.lineno}, column {exc.colno}: {exc.msg}"
            ) from exc
        return cls.from_dict(raw, **overrides)


def resolve_workers(config: ExperimentConfig, flag_workers: int | None = None) -> int:
    """Effective worker count: BRWRE_WORKERS env > --workers flag > config."""
    env_value = os.environ.get("BRWRE_WORKERS")
    if env_value:
        try:
            workers = int(env_value)
        except ValueError as exc:
            raise ConfigError(f"BRWRE_WORKERS={env_value!r} is not an integer") from exc
    elif flag_workers is not None:
        workers = flag_workers
    else:
        workers = config.workers
    if workers < 1:
        raise ConfigError("worker count must be >= 1")
    return workers


def pool_map(fn, items, workers: int):
    """Order-preserving map, in-process or over a process pool."""
    items = list(items)
    if workers == 1 or len(items) <= 1:
        return [fn(item) for item in items]
    chunksize = max(1, len(items) // (workers * 8))
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items, chunksize=chunksize))


# ---------------------------------------------------------------------------
# Manifest
# ---------------------------------------------------------------------------


def build_manifest(
    command: str,
    config: ExperimentConfig,
    workers: int,
    timings: dict[str, float],
    records: dict[str, int],
) -> dict:
    return {
        "command": command,
        "version": __version__,
        "config_hash": config.config_hash(),
        "seed": config.seed,
        "replicas": config.replicas,
        "workers": workers,
        "rng": (
            "philox4x64-10 keyed directly with the 64-bit seed; replica i uses "
            "splitmix64(master + (i+1)*0x9E3779B97F4A7C15); environment and tree "
            "streams are sub-seeds 1 and 2 of the replica seed"
        ),
        "replica_seed_preview": [
            derive_seed(config.seed, i) for i in range(min(5, config.replicas))
        ],
        "timings": {k: round(v, 6) for k, v in timings.items()},
        "records": records,
    }


# ---------------------------------------------------------------------------
# validate
# ---------------------------------------------------------------------------


def run_validate(config: ExperimentConfig) -> tuple[int, list[str]]:
    report = validate_model(config.model)
    lines = [f"[{f.level}] {f.code}: {f.message}" for f in report.findings]
    return (0 if report.ok else 1), lines


# ---------------------------------------------------------------------------
# simulate
# ---------------------------------------------------------------------------


class _SimulateTask:
    def __init__(self, config: ExperimentConfig, dump: bool = False):
        self.model_dict = config.model_dict
        self.n_max = config.n_max
        self.beta = config.beta
        self.seed = config.seed
        self.particle_cap = config.particle_cap
        self.track = config.track_ancestors_at
        self.dump = dump

    def __call__(self, replica: int):
        model = EnvironmentModel.from_dict(self.model_dict)
        rep_seed = derive_seed(self.seed, replica)
        env = sample_environment(model, self.n_max, derive_seed(rep_seed, 1))
        traj = simulate(
            env,
            SimConfig(
                n_max=self.n_max,
                seed=derive_seed(rep_seed, 2),
                particle_cap=self.particle_cap,
                track_ancestors_at=self.track,
            ),
        )
        series = compute_series(traj)
        rows = []
        for n in range(series.last_generation + 1):
            trunc = compute_truncated(traj, split_generation(n, self.beta))
            rows.append(
                (
                    replica,
                    n,
                    float(series.w[n]),
                    float(series.n1[n]),
                    float(series.n2[n]),
                    float(series.n3[n]),
                    trunc.w,
                    trunc.n1,
                    trunc.n2,
                    trunc.n3,
                )
            )
        dump = None
        if self.track is not None or True:
            dump = [
                (snap.generation, i, -1 if snap.ancestor_ids is None else int(snap.ancestor_ids[i]), float(p))
                for snap in traj.snapshots
                for i, p in enumerate(snap.positions)
            ]
        return replica, rows, traj.termination.status, traj.termination.generation, dump


def run_simulate(
    config: ExperimentConfig,
    workers: int,
    dump_trajectories: bool = False,
) -> tuple[int, dict]:
    out = Path(config.output_dir)
    t0 = time.perf_counter()
    results = pool_map(_SimulateTask(config), range(config.replicas), workers)
    t_sim = time.perf_counter() - t0

    t0 = time.perf_counter()
    all_rows = []
    statuses = {"completed": 0, "extinct": 0, "cap_exceeded": 0}
    for replica, rows, status, gen, dump in results:
        all_rows.extend(rows)
        statuses[status] += 1
        if dump_trajectories:
            dump_dir = out / "trajectories"
            n_rows = write_csv(
                dump_dir / f"replica_{replica:05d}.csv",
                ["generation", "particle_index", "ancestor_index_at_k", "position"],
                dump,
            )
            write_json(
                dump_dir / f"replica_{replica:05d}.json",
                {
                    "replica": replica,
                    "termination": {"status": status, "generation": gen},
                    "environment_seed": derive_seed(derive_seed(config.seed, replica), 1),
                    "tree_seed": derive_seed(derive_seed(config.seed, replica), 2),
                    "rows": n_rows,
                },
            )
    n_records = write_csv(out / "martingales.csv", MARTINGALE_HEADER, all_rows)
    t_write = time.perf_counter() - t0

    manifest = build_manifest(
        "simulate",
        config,
        workers,
        {"simulate": t_sim, "write": t_write},
        {"martingale_rows": n_records, **statuses},
    )
    write_json(out / "manifest.json", manifest)

    capped_fraction = statuses["cap_exceeded"] / config.replicas
    exit_code = 0
    if capped_fraction > 0.5:
        exit_code = 3  # advisory: most replicas hit the particle cap
    return exit_code, manifest


# ---------------------------------------------------------------------------
# verify-edgeworth
# ---------------------------------------------------------------------------


def _sup_abs(a, b) -> float:
    return float(np.max(np.abs(np.asarray(a) - np.asarray(b))))


def run_verify_edgeworth(config: ExperimentConfig) -> tuple[int, dict]:
    xs = np.linspace(-2.5, 2.5, 21)
    summary: dict = {}

    # Gaussian window: every correction vanishes identically and the
    # grid oracle must reproduce Phi within its own uncertainty report.
    gauss_model = EnvironmentModel.from_dict(
        {
            "states": [
                {
                    "probability": 1.0,
                    "offspring": {"family": "explicit_pmf", "pmf": [0.0, 0.0, 1.0]},
                    "moving": {"family": "gaussian", "mu": 0.0, "sigma": 1.0},
                }
            ]
        }
    )
    genv = sample_environment(gauss_model, 32, seed=derive_seed(config.seed, 101))
    gwin = CumulantWindow(genv, 0, 16)
    exact_gap = max(
        _sup_abs(edgeworth_cdf(gwin, order, xs), std_normal_cdf(xs))
        for order in (3, 4, 5)
    )
    summary["gaussian_exact"] = {"max_abs_diff": exact_gap, "pass": exact_gap <= 1e-15}
    est = oracle_cdf(gwin, xs, config.oracle.grid())
    gauss_err = _sup_abs(est.value, std_normal_cdf(xs))
    tol = float(np.max(est.uncertainty)) + 1e-7
    summary["gaussian_oracle"] = {
        "max_abs_err": gauss_err,
        "tolerance": tol,
        "pass": gauss_err <= tol,
    }

    # Two uniform steps give the triangular law, analytically known.
    uni_model = EnvironmentModel.from_dict(
        {
            "states": [
                {
                    "probability": 1.0,
                    "offspring": {"family": "explicit_pmf", "pmf": [0.0, 0.0, 1.0]},
                    "moving": {"family": "uniform", "a": -1.0, "b": 1.0},
                }
            ]
        }
    )
    uenv = sample_environment(uni_model, 72, seed=derive_seed(config.seed, 102))
    w2 = CumulantWindow(uenv, 0, 2)
    y = xs * w2.scale
    y = np.clip(y, -2.0, 2.0)
    triangle = np.where(y <= 0, (y + 2.0) ** 2 / 8.0, 1.0 - (2.0 - y) ** 2 / 8.0)
    tri_err = _sup_abs(oracle_cdf(w2, xs, config.oracle.grid()).value, triangle)
    summary["uniform_two_step_triangle"] = {"max_abs_err": tri_err, "pass": tri_err <= 1e-5}

    # Homogeneous uniform windows: the order-5 main term must beat plain
    # Phi at every length and its sup error must decay with slope <= -1.
    lengths = [int(x) for x in config.oracle.lengths]
    phi_sup, k5_sup = [], []
    for length in lengths:
        win = CumulantWindow(uenv, 0, length)
        oracle_vals = oracle_cdf(win, xs, config.oracle.grid()).value
        phi_sup.append(_sup_abs(std_normal_cdf(xs), oracle_vals))
        k5_sup.append(_sup_abs(edgeworth_cdf(win, 5, xs), oracle_vals))
    slope = float(np.polyfit(np.log(lengths), np.log(k5_sup), 1)[0])
    improves = all(k <= p for k, p in zip(k5_sup, phi_sup))
    summary["uniform_k5_study"] = {
        "lengths": lengths,
        "phi_sup": phi_sup,
        "k5_sup": k5_sup,
        "slope": slope,
        "improves_everywhere": improves,
        "pass": improves and slope <= -1.0,
    }

    # Windows drawn from the configured model: order-3 main term should
    # beat plain Phi for most seeds (ties count as improvements).
    model = config.model
    improved = 0
    trials = 20
    for i in range(trials):
        env_i = sample_environment(
            model, max(lengths), seed=derive_seed(config.seed, 200 + i)
        )
        win = CumulantWindow(env_i, 0, 16)
        oracle_vals = oracle_cdf(win, xs, config.oracle.grid()).value
        if _sup_abs(edgeworth_cdf(win, 3, xs), oracle_vals) <= _sup_abs(
            std_normal_cdf(xs), oracle_vals
        ):
            improved += 1
    frac = improved / trials
    summary["model_improvement"] = {
        "window_length": 16,
        "trials": trials,
        "fraction_improved": frac,
        "pass": frac >= 0.9,
    }

    summary["pass"] = all(
        section["pass"] for section in summary.values() if isinstance(section, dict)
    )
    return (0 if summary["pass"] else 1), summary


# ---------------------------------------------------------------------------
# verify-expansion
# ---------------------------------------------------------------------------


class _ExpansionTask:
    """Per-replica rows for the expansion study, including the ancestor
    decomposition columns."""

    def __init__(self, config: ExperimentConfig):
        self.model_dict = config.model_dict
        self.n_list = config.n_list
        self.t_grid = config.t_grid
        self.seed = config.seed
        self.beta = config.beta
        self.particle_cap = config.particle_cap

    def __call__(self, replica: int):
        model = EnvironmentModel.from_dict(self.model_dict)
        horizon = self.n_list[-1]
        rep_seed = derive_seed(self.seed, replica)
        env = sample_environment(model, horizon, derive_seed(rep_seed, 1))
        ks = {n: split_generation(n, self.beta) for n in self.n_list}
        trajs = {}
        for k in sorted(set(ks.values())):
            trajs[k] = simulate(
                env,
                SimConfig(
                    n_max=horizon,
                    seed=derive_seed(rep_seed, 2),
                    particle_cap=self.particle_cap,
                    track_ancestors_at=k,
                ),
            )
        first = next(iter(trajs.values()))
        if first.capped:
            return [
                (replica, horizon, self.t_grid[0], math.nan)
                + (math.nan,) * 10
                + ("cap_exceeded",)
            ]
        series = compute_series(first)
        limits = estimate_limits(series)
        rows = []
        for n in self.n_list:
            for t in self.t_grid:
                lhs = normalized_lhs(first, n, t)
                rhs_vals = tuple(rhs(order, t, n, env, limits) for order in range(4))
                res = tuple(lhs - r for r in rhs_vals)
                if ks[n] < n and not first.extinct:
                    dec = ab_decompose(trajs[ks[n]], t, n, cdf_provider="edgeworth")
                    a_val, b_val = dec.a, dec.b
                    gap = abs(dec.identity_gap)
                    if gap > 1e-12 * (1.0 + abs(dec.lhs_check)):
                        raise BrwreError(
                            f"A+B identity violated: gap={gap} at replica {replica}"
                        )
                else:
                    a_val, b_val = math.nan, math.nan
                rows.append(
                    (replica, n, t, lhs)
                    + rhs_vals
                    + res
                    + (a_val, b_val, first.termination.status)
                )
        return rows


def _median_abs_table(rows, n_list, orders=range(4)):
    table = {}
    for order in orders:
        per_n = []
        for n in n_list:
            vals = [
                abs(r[8 + order])
                for r in rows
                if r[1] == n and r[14] == "completed" and math.isfinite(r[8 + order])
            ]
            per_n.append(float(np.median(vals)) if vals else math.nan)
        table[order] = per_n
    return table


def _fit_loglog(ns, medians) -> float:
    ns = np.asarray(ns, dtype=float)
    medians = np.asarray(medians, dtype=float)
    good = np.isfinite(medians) & (medians > 0)
    if good.sum() < 2:
        return math.nan
    return float(np.polyfit(np.log(ns[good]), np.log(medians[good]), 1)[0])


def run_verify_expansion(config: ExperimentConfig, workers: int) -> tuple[int, dict, list]:
    chunks = pool_map(_ExpansionTask(config), range(config.replicas), workers)
    rows = [row for chunk in chunks for row in chunk]
    summary: dict = {}

    usable = [r for r in rows if r[14] == "completed"]
    n_extinct = len({r[0] for r in rows if r[14] == "extinct"})
    n_capped = len({r[0] for r in rows if r[14] == "cap_exceeded"})

    median_abs = _median_abs_table(rows, config.n_list)
    slopes = {
        order: _fit_loglog(config.n_list, median_abs[order]) for order in range(4)
    }
    summary["residual"] = {
        "n_list": config.n_list,
        "t_grid": config.t_grid,
        "replicas": config.replicas,
        "excluded": {"extinct": n_extinct, "capped": n_capped},
        "median_abs": {str(k): v for k, v in median_abs.items()},
        "slopes": {str(k): v for k, v in slopes.items()},
    }
    ordering_pass = (
        math.isfinite(slopes[0])
        and math.isfinite(slopes[1])
        and slopes[1] <= slopes[0] - 0.3
    )
    summary["slope_ordering"] = {
        "slope0": slopes[0],
        "slope1": slopes[1],
        "pass": bool(ordering_pass),
    }

    # Batch-wise monotonicity of median |residual| in the order.
    check_n = config.monotone_check_n
    if check_n is None:
        check_n = 24 if 24 in config.n_list else config.n_list[len(config.n_list) // 2]
    batches = config.batches
    per_batch = max(1, config.replicas // batches)
    monotone = 0
    counted = 0
    for b in range(batches):
        lo, hi = b * per_batch, (b + 1) * per_batch if b < batches - 1 else config.replicas
        meds = []
        for order in range(3):
            vals = [
                abs(r[8 + order])
                for r in usable
                if r[1] == check_n and lo <= r[0] < hi
            ]
            meds.append(np.median(vals) if vals else math.nan)
        if all(math.isfinite(m) for m in meds):
            counted += 1
            if meds[0] >= meds[1] >= meds[2]:
                monotone += 1
    frac_monotone = monotone / counted if counted else math.nan
    summary["batch_monotonicity"] = {
        "n": check_n,
        "batches": counted,
        "fraction_monotone": frac_monotone,
        "pass": bool(counted and frac_monotone >= 0.8),
    }

    # A+B identity (already hard-asserted inside the tasks).
    ab_gaps = [
        abs(r[12] + r[13] - r[3]) / (1.0 + abs(r[3]))
        for r in usable
        if math.isfinite(r[12])
    ]
    max_gap = max(ab_gaps) if ab_gaps else math.nan
    summary["ab_identity"] = {
        "rows_checked": len(ab_gaps),
        "max_rel_gap": max_gap,
        "pass": bool(ab_gaps) and max_gap <= 1e-12,
    }

    summary["gaussian_reduction"] = _gaussian_reduction_check()
    summary["derivative_check"] = _derivative_check(config)

    summary["pass"] = all(
        section["pass"]
        for key, section in summary.items()
        if isinstance(section, dict) and "pass" in section
    )
    return (0 if summary["pass"] else 1), summary, rows


def _corollary_rhs(t, n, w, v1, v2, v3):
    """Order-3 right-hand side for unit-variance Gaussian steps:
    Phi(t) W - phi(t) V1/sqrt(n) - t phi(t) V2/(2n) - (t^2-1) phi(t) V3/(6 n^{3/2})."""
    phi = std_normal_pdf(t)
    rn = math.sqrt(n)
    return (
        std_normal_cdf(t) * w
        - phi * v1 / rn
        - t * phi * v2 / (2.0 * n)
        - (t * t - 1.0) * phi * v3 / (6.0 * n * rn)
    )


def _gaussian_reduction_check() -> dict:
    model = EnvironmentModel(
        [(1.0, EnvState(ExplicitPmf((0.0, 0.0, 1.0)), Gaussian(0.0, 1.0)))]
    )
    env = sample_environment(model, 32, seed=7)
    n = 25
    ts = np.asarray(DEFAULT_T_GRID)
    max_q = max(
        float(np.max(np.abs(series(ts))))
        for series in (q1_series(env, n), q2_series(env, n), q3_series(env, n))
    )

    class _Limits:
        w, v1, v2, v3 = 0.9, 0.1, -0.2, 0.3

    max_gap = max(
        abs(
            rhs(3, float(t), n, env, _Limits)
            - _corollary_rhs(float(t), n, _Limits.w, _Limits.v1, _Limits.v2, _Limits.v3)
        )
        for t in ts
    )
    return {
        "max_abs_q": max_q,
        "max_rhs_gap": max_gap,
        "pass": max_q <= 1e-15 and max_gap <= 1e-12,
    }


def _derivative_check(config: ExperimentConfig) -> dict:
    """First/second t-derivatives of the scaled corrections against
    central finite differences."""
    env = sample_environment(
        config.model, config.n_max, seed=derive_seed(config.seed, 300)
    )
    n = config.n_list[-1]
    ts = np.asarray(config.t_grid)
    h = 1e-5
    worst = 0.0
    for series in (q1_series(env, n), q2_series(env, n)):
        d1 = series.derivative()
        fd = (series(ts + h) - series(ts - h)) / (2.0 * h)
        worst = max(worst, float(np.max(np.abs(d1(ts) - fd))))
    q1 = q1_series(env, n)
    d2 = q1.derivative().derivative()
    fd2 = (q1(ts + h) - 2.0 * q1(ts) + q1(ts - h)) / (h * h)
    worst = max(worst, float(np.max(np.abs(d2(ts) - fd2))))
    return {"max_abs_err": worst, "pass": worst <= 1e-6}


def run_verify_expansion_files(
    config: ExperimentConfig, workers: int
) -> tuple[int, dict]:
    out = Path(config.output_dir)
    t0 = time.perf_counter()
    code, summary, rows = run_verify_expansion(config, workers)
    t_run = time.perf_counter() - t0
    n_records = write_csv(out / "expansion.csv", EXPANSION_HEADER, rows)
    write_json(out / "expansion_summary.json", summary)
    manifest = build_manifest(
        "verify-expansion",
        config,
        workers,
        {"run": t_run},
        {"expansion_rows": n_records},
    )
    write_json(out / "manifest.json", manifest)
    return code, summary


def run_verify_edgeworth_files(config: ExperimentConfig) -> tuple[int, dict]:
    out = Path(config.output_dir)
    t0 = time.perf_counter()
    code, summary = run_verify_edgeworth(config)
    t_run = time.perf_counter() - t0
    write_json(out / "edgeworth_summary.json", summary)
    manifest = build_manifest(
        "verify-edgeworth", config, 1, {"run": t_run}, {"sections": len(summary)}
    )
    write_json(out / "manifest.json", manifest)
    return code, summary


# ---------------------------------------------------------------------------
# Random models for property batteries
# ---------------------------------------------------------------------------


def random_model(seed: int, skewed: bool = False) -> EnvironmentModel:
    """A random, always-supercritical mixture model for property tests.

    ``skewed`` forces at least one asymmetric moving law so third-order
    cumulant sums stay away from zero.
    """
    gen = make_generator(seed)

    def offspring():
        kind = gen.integers(0, 3)
        if kind == 0:
            p1 = 0.35 + 0.3 * gen.random()
            p2 = 0.25 + 0.3 * gen.random()
            p0 = max(0.0, 1.0 - p1 - p2) * 0.4
            p3 = 1.0 - p0 - p1 - p2
            if p3 < 0:
                p2 += p3
                p3 = 0.0
            return ExplicitPmf((p0, p1, p2, p3))
        if kind == 1:
            return PoissonTruncated(rate=1.05 + 0.6 * gen.random(), cap=32)
        return GeometricTruncated(p=0.42 + 0.06 * gen.random(), cap=64)

    def moving(force_skew: bool):
        kind = gen.integers(0, 3) if force_skew else gen.integers(0, 4)
        if force_skew:
            kind = 2
        if kind == 0:
            return Gaussian(float(gen.uniform(-0.5, 0.5)), float(gen.uniform(0.5, 2.0)))
        if kind == 1:
            a = float(gen.uniform(-2.0, 0.5))
            return Uniform(a, a + float(gen.uniform(0.4, 2.5)))
        if kind == 2:
            return ShiftedExponential(
                rate=float(gen.uniform(0.7, 2.0)), shift=float(gen.uniform(-1.5, 0.0))
            )
        x1 = float(gen.uniform(-2.0, 1.0))
        return TwoPoint(x1, float(gen.uniform(0.2, 0.8)), x1 + float(gen.uniform(0.4, 2.0)))

    n_states = int(gen.integers(1, 4))
    weights = gen.random(n_states) + 0.2
    weights = weights / weights.sum()
    states = []
    for i in range(n_states):
        states.append(
            (
                float(weights[i]),
                EnvState(offspring(), moving(force_skew=skewed and i == 0)),
            )
        )
    return EnvironmentModel(states)


REFERENCE_MODEL_DICT = {
    "states": [
        {
            "probability": 0.5,
            "offspring": {"family": "explicit_pmf", "pmf": [0.0, 0.6, 0.4]},
            "moving": {"family": "uniform", "a": -1.1, "b": 0.9},
        },
        {
            "probability": 0.5,
            "offspring": {"family": "explicit_pmf", "pmf": [0.1, 0.5, 0.3, 0.1]},
            "moving": {"family": "shifted_exponential", "rate": 1.0, "shift": -0.9},
        },
    ]
}
"""Two-state reference model: uniform / shifted-exponential steps with
nonzero per-state drift, mean offspring 1.4 in both states."""


# ---------------------------------------------------------------------------
# selftest
# ---------------------------------------------------------------------------


def _central_moments_from_cumulants(g):
    g2, g3, g4, g5, g6 = g
    return (
        g2,
        g3,
        g4 + 3.0 * g2 * g2,
        g5 + 10.0 * g3 * g2,
        g6 + 15.0 * g4 * g2 + 10.0 * g3 * g3 + 15.0 * g2 * g2 * g2,
    )


def run_selftest(echo=print) -> int:
    """Reduced property battery; returns a process exit code."""
    failures = 0

    def check(name: str, ok: bool, detail: str = ""):
        nonlocal failures
        tag = "ok" if ok else "FAIL"
        echo(f"[{tag}] {name}" + (f": {detail}" if detail else ""))
        if not ok:
            failures += 1

    # Hermite evaluators against each other and the printed tables.
    grid = np.linspace(-6.0, 6.0, 121)
    worst = 0.0
    for m in range(13):
        he = hermite_explicit(m, grid)
        hr = hermite_recurrence(m, grid)
        worst = max(worst, float(np.max(np.abs(he - hr) / np.maximum(1.0, np.abs(he)))))
    tables = {
        2: [-1, 0, 1],
        3: [0, -3, 0, 1],
        4: [3, 0, -6, 0, 1],
        5: [0, 15, 0, -10, 0, 1],
        6: [-15, 0, 45, 0, -15, 0, 1],
        8: [105, 0, -420, 0, 210, 0, -28, 0, 1],
    }
    coeff_ok = all(hermite_coefficients(m) == c for m, c in tables.items())
    check("hermite evaluators agree", worst <= 1e-9, f"max rel diff {worst:.2e}")
    check("hermite coefficient tables", coeff_ok)

    # Normal CDF/pdf spot values.
    check(
        "normal cdf quantile",
        abs(std_normal_cdf(1.959963984540054) - 0.975) <= 1e-9
        and abs(std_normal_cdf(0.0) - 0.5) <= 1e-15,
    )

    # Cumulant round trip.
    gen = make_generator(1234)
    rt_ok = True
    for _ in range(50):
        m2 = float(gen.uniform(0.2, 3.0))
        m3 = float(gen.uniform(-1.0, 1.0))
        m4 = float(gen.uniform(2.5, 4.0)) * m2 * m2
        m5 = float(gen.uniform(-2.0, 2.0))
        m6 = float(gen.uniform(14.0, 17.0)) * m2**3
        moments = (m2, m3, m4, m5, m6)
        back = _central_moments_from_cumulants(cumulants_from_central_moments(moments))
        rt_ok &= all(
            abs(a - b) <= 1e-12 * max(1.0, abs(a)) for a, b in zip(moments, back)
        )
    check("cumulant/moment round trip", rt_ok)

    # Partition enumeration sizes.
    sizes = [len(partition_solutions(nu)) for nu in (1, 2, 3, 4)]
    check("partition counts", sizes == [1, 2, 3, 5], str(sizes))

    # Generic partition formula vs closed forms on random environments.
    worst_q = 0.0
    for i in range(20):
        model = random_model(derive_seed(99, i))
        env = sample_environment(model, 50, seed=derive_seed(7, i))
        for n in (10, 50):
            win = CumulantWindow(env, 0, n)
            for t in np.linspace(-2.0, 2.0, 5):
                closed = (
                    edgeworth_mod.q1_closed(env, n, float(t)),
                    edgeworth_mod.q2_closed(env, n, float(t)),
                    edgeworth_mod.q3_closed(env, n, float(t)),
                )
                for nu in (1, 2, 3):
                    generic = scaled_correction_series(win, nu)(float(t))
                    gap = abs(generic - closed[nu - 1]) / (1.0 + abs(closed[nu - 1]))
                    worst_q = max(worst_q, gap)
    check("generic vs closed corrections", worst_q <= 1e-10, f"max rel gap {worst_q:.2e}")

    # One-step martingale property on small fixed prefixes.
    model = EnvironmentModel.from_dict(REFERENCE_MODEL_DICT)
    mart_ok = True
    for i in range(3):
        env = sample_environment(model, 8, seed=derive_seed(11, i))
        traj = simulate(env, SimConfig(n_max=6, seed=derive_seed(12, i)))
        snap = traj.snapshot(6)
        if snap.count == 0:
            continue
        inc = one_step_increment_samples(env, snap, redraws=3000, seed=derive_seed(13, i))
        means = inc.mean(axis=0)
        ses = inc.std(axis=0, ddof=1) / math.sqrt(inc.shape[0])
        mart_ok &= bool(np.all(np.abs(means) <= 5.0 * np.maximum(ses, 1e-12)))
    check("one-step martingale property", mart_ok)

    # A+B identity on a few tracked replicas.
    ab_ok = True
    for i in range(5):
        env = sample_environment(model, 12, seed=derive_seed(21, i))
        traj = simulate(
            env, SimConfig(n_max=12, seed=derive_seed(22, i), track_ancestors_at=1)
        )
        if traj.extinct:
            continue
        for t in (-1.0, 0.0, 1.0):
            dec = ab_decompose(traj, t, 12, cdf_provider="edgeworth")
            ab_ok &= abs(dec.identity_gap) <= 1e-12 * (1.0 + abs(dec.lhs_check))
    check("ancestor decomposition identity", ab_ok)

    # Gaussian reduction of the order-3 right-hand side.
    red = _gaussian_reduction_check()
    check(
        "gaussian reduction",
        red["pass"],
        f"max |q| {red['max_abs_q']:.2e}, rhs gap {red['max_rhs_gap']:.2e}",
    )

    # Ensemble mean of W_n near one.
    w_vals = []
    for i in range(200):
        env = sample_environment(model, 6, seed=derive_seed(31, i))
        traj = simulate(env, SimConfig(n_max=6, seed=derive_seed(32, i)))
        w_vals.append(compute_series(traj).w[6])
    w_vals = np.asarray(w_vals)
    se = w_vals.std(ddof=1) / math.sqrt(len(w_vals))
    check(
        "mean of W_n near 1",
        abs(w_vals.mean() - 1.0) <= 5.0 * se,
        f"mean {w_vals.mean():.4f} +- {se:.4f}",
    )

    # Determinism of a tiny simulation.
    env = sample_environment(model, 8, seed=5)
    t1 = simulate(env, SimConfig(n_max=8, seed=6))
    t2 = simulate(env, SimConfig(n_max=8, seed=6))
    same = all(
        np.array_equal(a.positions, b.positions)
        for a, b in zip(t1.snapshots, t2.snapshots)
    )
    check("bitwise determinism", same)

    echo(f"selftest: {'PASS' if failures == 0 else f'{failures} FAILURES'}")
    return 0 if failures == 0 else 1
