"""Martingales along a trajectory, their truncations and limit proxies.

For generation n with centered positions x = S_u - ell_n:

    W_n  = pi_n^{-1} #particles
    N1_n = pi_n^{-1} sum x
    N2_n = pi_n^{-1} sum (x^2 - s_n^2)
    N3_n = pi_n^{-1} sum (x^3 - 3 x s_n^2 - s_n^(3))

All four are quenched martingales; W_n has mean one.  Power sums are
accumulated with Neumaier-compensated summation: cubes of ~1e6
positions would otherwise lose digits that the N3 convergence
diagnostics care about.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import InsufficientDataError
from .simulator import Trajectory

try:
    from numba import njit as _njit

    _HAVE_NUMBA = True
except ImportError:  # pragma: no cover
    _HAVE_NUMBA = False


def _power_sums_py(x):
    """(sum x, sum x^2, sum x^3) with Neumaier compensation."""
    s1 = 0.0
    c1 = 0.0
    s2 = 0.0
    c2 = 0.0
    s3 = 0.0
    c3 = 0.0
    for i in range(x.size):
        v = x[i]
        t = s1 + v
        if abs(s1) >= abs(v):
            c1 += (s1 - t) + v
        else:
            c1 += (v - t) + s1
        s1 = t
        v2 = v * v
        t = s2 + v2
        if abs(s2) >= abs(v2):
            c2 += (s2 - t) + v2
        else:
            c2 += (v2 - t) + s2
        s2 = t
        v3 = v2 * v
        t = s3 + v3
        if abs(s3) >= abs(v3):
            c3 += (s3 - t) + v3
        else:
            c3 += (v3 - t) + s3
        s3 = t
    return s1 + c1, s2 + c2, s3 + c3


if _HAVE_NUMBA:
    _power_sums = _njit(cache=True)(_power_sums_py)
else:  # pragma: no cover
    _power_sums = _power_sums_py


def martingale_values(
    count: int, sums: tuple[float, float, float], pi: float, s2: float, m3: float
) -> tuple[float, float, float, float]:
    """(W, N1, N2, N3) from a generation's centered power sums."""
    p1, p2, p3 = sums
    w = count / pi
    n1 = p1 / pi
    n2 = (p2 - count * s2) / pi
    n3 = (p3 - 3.0 * s2 * p1 - count * m3) / pi
    return w, n1, n2, n3


@dataclass
class MartingaleSeries:
    """Per-generation values for one trajectory; index = generation."""

    w: np.ndarray
    n1: np.ndarray
    n2: np.ndarray
    n3: np.ndarray
    capped: bool = False
    w_running_max: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        if self.w_running_max is None:
            self.w_running_max = np.maximum.accumulate(self.w)

    @property
    def last_generation(self) -> int:
        return len(self.w) - 1

    @property
    def w_star(self) -> float:
        return float(self.w_running_max[-1])

    def values(self, index: int) -> np.ndarray:
        """Series for martingale ``index`` (0 = W, 1..3 = N1..N3)."""
        return (self.w, self.n1, self.n2, self.n3)[index]


def compute_series(traj: Trajectory) -> MartingaleSeries:
    env = traj.env
    last = traj.last_generation
    w = np.empty(last + 1)
    n1 = np.empty(last + 1)
    n2 = np.empty(last + 1)
    n3 = np.empty(last + 1)
    for n in range(last + 1):
        snap = traj.snapshots[n]
        x = snap.positions - env.drift[n]
        sums = _power_sums(x)
        w[n], n1[n], n2[n], n3[n] = martingale_values(
            snap.count, sums, float(env.pi[n]), float(env.m2[n]), float(env.m3[n])
        )
    return MartingaleSeries(w=w, n1=n1, n2=n2, n3=n3, capped=traj.capped)


@dataclass(frozen=True)
class TruncatedValues:
    """Martingale sums restricted to particles within a window around
    the generation's drift."""

    k: int
    radius: float
    w: float
    n1: float
    n2: float
    n3: float


def compute_truncated(
    traj: Trajectory, k: int, radius: float | None = None
) -> TruncatedValues:
    """Same sums as :func:`compute_series` at generation ``k``, keeping
    only particles with |S_u - ell_k| <= radius (default radius: k)."""
    snap = traj.snapshot(k)
    env = traj.env
    if radius is None:
        radius = float(k)
    x = snap.positions - env.drift[k]
    kept = x[np.abs(x) <= radius]
    sums = _power_sums(kept)
    w, n1, n2, n3 = martingale_values(
        kept.size, sums, float(env.pi[k]), float(env.m2[k]), float(env.m3[k])
    )
    return TruncatedValues(k=k, radius=radius, w=w, n1=n1, n2=n2, n3=n3)


@dataclass(frozen=True)
class LimitEstimates:
    """Finite-horizon proxies for the almost-sure martingale limits.

    Values are simply the series at the last generation; the stderr
    proxy (max |increment| over the final quarter of generations) is a
    biased but honest indication of how settled each series is.
    """

    w: float
    v1: float
    v2: float
    v3: float
    estimated_at: int
    stderr_proxy: tuple[float, float, float, float]


def estimate_limits(series: MartingaleSeries, traj: Trajectory | None = None) -> LimitEstimates:
    last = series.last_generation
    if last < 8:
        raise InsufficientDataError(f"series reaches generation {last}, need >= 8")
    if series.capped:
        raise InsufficientDataError("capped trajectory: limit proxies would be biased")
    tail_start = max(1, last - max(1, last // 4))
    proxies = []
    for idx in range(4):
        vals = series.values(idx)
        increments = np.abs(np.diff(vals[tail_start - 1 :]))
        proxies.append(float(increments.max()) if increments.size else 0.0)
    return LimitEstimates(
        w=float(series.w[last]),
        v1=float(series.n1[last]),
        v2=float(series.n2[last]),
        v3=float(series.n3[last]),
        estimated_at=last,
        stderr_proxy=tuple(proxies),
    )


def one_step_increment_samples(
    env, snap, redraws: int, seed: int
) -> np.ndarray:
    """Monte Carlo samples of the one-step martingale increments.

    Holding the tree fixed through generation ``n = snap.generation``,
    redraw generation ``n+1`` independently ``redraws`` times and return
    the increments (W, N1, N2, N3)_{n+1} - (.)_n as a (redraws, 4)
    array.  Each increment has quenched mean zero, which is what the
    martingale-property checks assert statistically.

    This sampler is vectorized across redraws and does not follow the
    trajectory stream-order contract; it is statistical tooling, not
    trajectory reproduction.
    """
    from .rng import make_generator  # local import to avoid cycles at module load

    n = snap.generation
    state = env.state_at(n)
    parents = snap.positions
    n_parents = parents.size
    if n_parents == 0:
        return np.zeros((redraws, 4))
    gen = make_generator(seed)
    cdf = state.offspring.cdf_table()
    counts = np.searchsorted(cdf, gen.random((redraws, n_parents)), side="right")
    flat_counts = counts.ravel()
    total = int(flat_counts.sum())
    displacements = np.asarray(state.moving.quantile(gen.random(total)), dtype=float)
    parent_positions = np.repeat(np.tile(parents, redraws), flat_counts)
    child_positions = parent_positions + displacements
    redraw_id = np.repeat(
        np.arange(redraws * n_parents) // n_parents, flat_counts
    )

    pi_next = float(env.pi[n + 1])
    s2_next = float(env.m2[n + 1])
    m3_next = float(env.m3[n + 1])
    x = child_positions - env.drift[n + 1]
    cnt = counts.sum(axis=1).astype(float)
    p1 = np.bincount(redraw_id, weights=x, minlength=redraws)
    p2 = np.bincount(redraw_id, weights=x * x, minlength=redraws)
    p3 = np.bincount(redraw_id, weights=x * x * x, minlength=redraws)
    w_next = cnt / pi_next
    n1_next = p1 / pi_next
    n2_next = (p2 - cnt * s2_next) / pi_next
    n3_next = (p3 - 3.0 * s2_next * p1 - cnt * m3_next) / pi_next

    x0 = parents - env.drift[n]
    base = martingale_values(
        n_parents, _power_sums(x0), float(env.pi[n]), float(env.m2[n]), float(env.m3[n])
    )
    return np.column_stack(
        [w_next - base[0], n1_next - base[1], n2_next - base[2], n3_next - base[3]]
    )


@dataclass
class DecayReport:
    """Log-log decay fit of ensemble tail increments for one martingale."""

    martingale_index: int
    ns: np.ndarray
    medians: np.ndarray
    slope: float
    passed: bool


def convergence_diagnostic(ensemble: list[MartingaleSeries], index: int) -> DecayReport:
    """Median over replicas of |X_n - X_{n//2}| against n, with a fitted
    log-log slope; a converging martingale decays (slope < 0) while a
    non-convergent series such as a centered single-lineage walk grows.

    Requires >= 100 replicas reaching a common horizon >= 24.
    """
    if index not in (1, 2, 3):
        raise ValueError("index must be 1, 2 or 3")
    if len(ensemble) < 100:
        raise InsufficientDataError("need >= 100 replicas")
    horizon = min(s.last_generation for s in ensemble)
    if horizon < 24:
        raise InsufficientDataError("need a common horizon of >= 24 generations")
    ns = np.arange(max(4, horizon // 4), horizon + 1)
    values = np.stack([s.values(index)[: horizon + 1] for s in ensemble])
    diffs = np.abs(values[:, ns] - values[:, ns // 2])
    medians = np.median(diffs, axis=0)
    positive = medians > 0.0
    if positive.sum() < 3:
        return DecayReport(index, ns, medians, math.nan, False)
    slope = float(
        np.polyfit(np.log(ns[positive]), np.log(medians[positive]), 1)[0]
    )
    return DecayReport(index, ns, medians, slope, passed=slope < 0.0)
