"""Right-hand sides of the expansion theorems, residual studies, and the
ancestor decomposition of the normalized counting measure.

The order-kappa right-hand side at (n, t) combines the expansion of the
window CDF with the martingale limit proxies:

    kappa=0:  Phi(t) W
    kappa=1:  (Phi+q1) W - (1/s_n)(phi) V1
    kappa=2:  (Phi+q1+q2) W - (1/s_n)(phi+q1') V1 + (1/(2 s_n^2))(phi') V2
    kappa=3:  (Phi+q1+q2+q3) W - (1/s_n)(phi+q1'+q2') V1
              + (1/(2 s_n^2))(phi'+q1'') V2 - (1/(6 s_n^3))(phi'') V3

where q_nu(t) denotes the scaled correction Q_{nu,n}(t) n^{-nu/2} and
primes are analytic t-derivatives (exact through the Hermite shift
d/dt[H_m phi] = -H_{m+1} phi).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from math import fsum

import numpy as np

from .edgeworth import (
    PHI_SERIES,
    CumulantWindow,
    GridConvolutionOracle,
    HermitePhiSeries,
    edgeworth_cdf,
    oracle_cdf,
    q1_series,
    q2_series,
    q3_series,
)
from .environment import EnvironmentModel, RealizedEnvironment, sample_environment
from .errors import InsufficientDataError, InvalidModelError
from .martingales import LimitEstimates, compute_series, estimate_limits
from .rng import derive_seed
from .simulator import SimConfig, Trajectory, normalized_lhs, simulate
from .special import std_normal_cdf


def rhs(
    order: int,
    t: float,
    n: int,
    env: RealizedEnvironment,
    limits: LimitEstimates,
):
    """Expansion right-hand side of the stated order at threshold ``t``."""
    if order not in (0, 1, 2, 3):
        raise ValueError("order must be 0..3")
    for name in ("w", "v1", "v2", "v3")[: order + 1]:
        if getattr(limits, name, None) is None:
            raise InsufficientDataError(f"limit estimate {name} missing for order {order}")
    s = env.std(n)
    total = std_normal_cdf(t) * limits.w
    if order == 0:
        return total

    q1 = q1_series(env, n)
    total = total + q1(t) * limits.w
    v1_series: HermitePhiSeries = PHI_SERIES
    if order >= 2:
        q2 = q2_series(env, n)
        total = total + q2(t) * limits.w
        v1_series = v1_series + q1.derivative()
    if order >= 3:
        q3 = q3_series(env, n)
        total = total + q3(t) * limits.w
        v1_series = v1_series + q2.derivative()
    total = total + (-1.0 / s) * v1_series(t) * limits.v1

    if order >= 2:
        v2_series = PHI_SERIES.derivative()
        if order >= 3:
            v2_series = v2_series + q1.derivative().derivative()
        total = total + (1.0 / (2.0 * s * s)) * v2_series(t) * limits.v2
    if order >= 3:
        v3_series = PHI_SERIES.derivative().derivative()
        total = total + (-1.0 / (6.0 * s**3)) * v3_series(t) * limits.v3
    return total


# ---------------------------------------------------------------------------
# Residual suite
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ExpansionRow:
    """One (replica, n, t) evaluation of the simulated left-hand side
    against the order-0..3 right-hand sides."""

    replica: int
    n: int
    t: float
    lhs: float
    rhs: tuple[float, float, float, float]
    termination: str

    @property
    def residuals(self) -> tuple[float, float, float, float]:
        return tuple(self.lhs - r for r in self.rhs)


@dataclass
class ResidualStudy:
    rows: list[ExpansionRow]
    n_list: list[int]
    t_grid: list[float]
    replicas: int
    n_extinct: int
    n_capped: int
    median_abs: np.ndarray  # shape (4, len(n_list)); NaN when no usable rows
    slopes: np.ndarray  # shape (4,)

    def batch_median_abs(self, n: int, order: int, batches: int) -> np.ndarray:
        """Median |residual_order| at horizon ``n`` within each contiguous
        replica batch (extinct/capped replicas excluded)."""
        values = [[] for _ in range(batches)]
        per_batch = self.replicas // batches
        for row in self.rows:
            if row.n != n or row.termination != "completed":
                continue
            b = min(row.replica // per_batch, batches - 1)
            values[b].append(abs(row.residuals[order]))
        return np.array(
            [np.median(v) if v else math.nan for v in values]
        )


def _fit_slope(ns: np.ndarray, medians: np.ndarray) -> float:
    good = np.isfinite(medians) & (medians > 0.0)
    if good.sum() < 2:
        return math.nan
    return float(np.polyfit(np.log(ns[good]), np.log(medians[good]), 1)[0])


def replica_rows(
    model: EnvironmentModel,
    t_grid,
    n_list,
    seed: int,
    replica: int,
    particle_cap: int = 2_000_000,
) -> list[ExpansionRow]:
    """Rows for one replica: fresh environment + tree, limit proxies at
    the largest horizon, lhs/rhs at every (n, t).  A capped replica
    yields a single marker row and no values."""
    n_list = sorted(int(n) for n in n_list)
    t_grid = [float(t) for t in t_grid]
    horizon = n_list[-1]
    rep_seed = derive_seed(seed, replica)
    env = sample_environment(model, horizon, derive_seed(rep_seed, 1))
    traj = simulate(
        env,
        SimConfig(
            n_max=horizon, seed=derive_seed(rep_seed, 2), particle_cap=particle_cap
        ),
    )
    if traj.capped:
        nan4 = (math.nan,) * 4
        return [
            ExpansionRow(
                replica=replica,
                n=horizon,
                t=t_grid[0],
                lhs=math.nan,
                rhs=nan4,
                termination=traj.termination.status,
            )
        ]
    series = compute_series(traj)
    limits = estimate_limits(series)
    rows = []
    for n in n_list:
        for t in t_grid:
            lhs = normalized_lhs(traj, n, t)
            values = tuple(rhs(order, t, n, env, limits) for order in range(4))
            rows.append(
                ExpansionRow(
                    replica=replica,
                    n=n,
                    t=t,
                    lhs=lhs,
                    rhs=values,
                    termination=traj.termination.status,
                )
            )
    return rows


def residual_suite(
    model: EnvironmentModel,
    t_grid,
    n_list,
    replicas: int,
    seed: int,
    particle_cap: int = 2_000_000,
    map_fn=map,
) -> ResidualStudy:
    """Simulate ``replicas`` fresh (environment, tree) pairs and compare
    the normalized counting measure with the expansion right-hand sides.

    Limit proxies are taken per replica at the largest horizon.  Extinct
    replicas contribute all-zero rows; capped replicas contribute no
    values.  Both are excluded from medians and decay fits and counted
    separately.  ``map_fn`` may be a process-pool map; per-replica seeds
    are derived from the master seed by index, so results do not depend
    on scheduling.
    """
    n_list = sorted(int(n) for n in n_list)
    t_grid = [float(t) for t in t_grid]
    rows: list[ExpansionRow] = []
    n_extinct = 0
    n_capped = 0
    chunks = map_fn(
        _ReplicaTask(model, t_grid, n_list, seed, particle_cap), range(replicas)
    )
    for chunk in chunks:
        if chunk and chunk[0].termination == "cap_exceeded":
            n_capped += 1
            continue
        if chunk and chunk[0].termination == "extinct":
            n_extinct += 1
        rows.extend(chunk)

    median_abs = np.full((4, len(n_list)), math.nan)
    for j, n in enumerate(n_list):
        usable = [r for r in rows if r.n == n and r.termination == "completed"]
        for order in range(4):
            if usable:
                median_abs[order, j] = np.median(
                    [abs(r.residuals[order]) for r in usable]
                )
    ns = np.array(n_list, dtype=float)
    slopes = np.array([_fit_slope(ns, median_abs[order]) for order in range(4)])
    return ResidualStudy(
        rows=rows,
        n_list=n_list,
        t_grid=t_grid,
        replicas=replicas,
        n_extinct=n_extinct,
        n_capped=n_capped,
        median_abs=median_abs,
        slopes=slopes,
    )


class _ReplicaTask:
    """Picklable single-replica row builder for pool maps."""

    def __init__(self, model, t_grid, n_list, seed, particle_cap):
        self.model = model
        self.t_grid = t_grid
        self.n_list = n_list
        self.seed = seed
        self.particle_cap = particle_cap

    def __call__(self, replica: int) -> list[ExpansionRow]:
        return replica_rows(
            self.model,
            self.t_grid,
            self.n_list,
            self.seed,
            replica,
            particle_cap=self.particle_cap,
        )


# ---------------------------------------------------------------------------
# Ancestor decomposition
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ABDecomposition:
    """Split of the normalized counting measure at the tracked
    generation k: A collects the centered subtree fluctuations, B the
    conditional expectations.  A + B equals the left-hand side exactly,
    whatever CDF approximation produced the conditional terms."""

    k: int
    a: float
    b: float
    lhs_check: float

    @property
    def identity_gap(self) -> float:
        return self.a + self.b - self.lhs_check


def ab_decompose(
    traj: Trajectory,
    t: float,
    n: int,
    cdf_provider: str = "edgeworth",
    order: int = 5,
    oracle_method=None,
) -> ABDecomposition:
    """Decompose pi_n^{-1} Z_n(ell_n + s_n t) over the tracked ancestors.

    ``cdf_provider`` selects the conditional-CDF approximation:
    ``exact_gaussian`` (valid only when every window state is Gaussian),
    ``edgeworth`` (expansion of the stated order), or ``oracle``
    (grid-convolution oracle, optionally configured via
    ``oracle_method``).
    """
    k = traj.config.track_ancestors_at
    if k is None:
        raise InvalidModelError("trajectory was simulated without ancestor tracking")
    if not k < n:
        raise InvalidModelError(f"need tracked generation {k} < evaluation horizon {n}")
    env = traj.env
    snap_k = traj.snapshot(k)
    snap_n = traj.snapshot(n)
    if snap_n.ancestor_ids is None:
        raise InvalidModelError(f"generation {n} carries no ancestor tags")

    s_n = env.std(n)
    threshold = float(env.drift[n]) + s_n * t
    below = snap_n.positions <= threshold
    counts = np.bincount(snap_n.ancestor_ids[below], minlength=snap_k.count).astype(float)
    subtree_normalized = counts / env.pi_ratio(k, n)

    if snap_k.count:
        window = CumulantWindow(env, k, n)
        x_u = (threshold - snap_k.positions - window.mean) / window.scale
        if cdf_provider == "exact_gaussian":
            if any(law.family != "gaussian" for law in window.moving_laws()):
                raise InvalidModelError(
                    "exact_gaussian provider requires Gaussian moving laws on the window"
                )
            f_u = np.asarray(std_normal_cdf(x_u), dtype=float)
        elif cdf_provider == "edgeworth":
            f_u = np.asarray(edgeworth_cdf(window, order, x_u), dtype=float)
        elif cdf_provider == "oracle":
            method = oracle_method or GridConvolutionOracle()
            f_u = np.asarray(oracle_cdf(window, x_u, method).value, dtype=float)
        else:
            raise ValueError(f"unknown cdf provider {cdf_provider!r}")
    else:
        f_u = np.empty(0)

    pi_k = float(env.pi[k])
    a = fsum(subtree_normalized - f_u) / pi_k
    b = fsum(f_u) / pi_k
    lhs_check = normalized_lhs(traj, n, t)
    return ABDecomposition(k=k, a=a, b=b, lhs_check=lhs_check)
