"""Correction polynomials and CDF expansions for sums of independent steps.

Given a window of environment generations [k, n), the centered step sum

    S = sum_{j in [k,n)} (L_j - l_j),        B^2 = Var S = s_n^2 - s_k^2,

admits an expansion of its normalized CDF

    P(S / B <= x) ~ Phi(x) + sum_nu Q_nu(x) L^{-nu/2},

where each Q_nu is a combination of H_m(x) phi(x) terms whose
coefficients are polynomial in the scaled cumulant sums lambda_nu.  This
module computes the lambda coefficients, the generic partition-sum form
of Q_nu, the printed closed forms for nu = 1, 2, 3, and two independent
oracles (Monte Carlo and grid convolution) for the same window CDF.

Every correction is represented as a :class:`HermitePhiSeries`, a flat
list of (coefficient, degree) pairs; differentiation in x is exact via
d/dx [H_m(x) phi(x)] = -H_{m+1}(x) phi(x).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
from scipy.signal import fftconvolve

from .environment import RealizedEnvironment
from .errors import (
    DegenerateWindowError,
    InsufficientCoefficientsError,
    OracleBudgetError,
)
from .rng import make_generator
from .special import hermite_recurrence, std_normal_cdf, std_normal_pdf


# ---------------------------------------------------------------------------
# Hermite-phi term lists
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class HermitePhiSeries:
    """sum_i c_i H_{m_i}(x) phi(x), closed under differentiation."""

    terms: tuple[tuple[float, int], ...]

    def __call__(self, x):
        x = np.asarray(x, dtype=float)
        acc = np.zeros_like(x)
        for coef, degree in self.terms:
            acc = acc + coef * hermite_recurrence(degree, x)
        out = acc * std_normal_pdf(x)
        return out if out.ndim else float(out)

    def derivative(self) -> "HermitePhiSeries":
        return HermitePhiSeries(tuple((-c, m + 1) for c, m in self.terms))

    def __add__(self, other: "HermitePhiSeries") -> "HermitePhiSeries":
        return HermitePhiSeries(self.terms + other.terms)


ZERO_SERIES = HermitePhiSeries(())

# phi, phi', phi'' as series: phi = H_0 phi, phi' = -H_1 phi, phi'' = H_2 phi.
PHI_SERIES = HermitePhiSeries(((1.0, 0),))


# ---------------------------------------------------------------------------
# Windows and scaled cumulant coefficients
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CumulantWindow:
    """Step-cumulant aggregates over environment generations [start, stop)."""

    env: RealizedEnvironment
    start: int
    stop: int
    variance: float = field(init=False)  # B^2
    gamma_sums: tuple[float, float, float, float] = field(init=False)  # orders 3..6

    def __post_init__(self):
        if not 0 <= self.start < self.stop <= len(self.env):
            raise DegenerateWindowError(
                f"window [{self.start}, {self.stop}) is empty or out of range"
            )
        var = float(self.env.m2[self.stop] - self.env.m2[self.start])
        if not var > 0.0:
            raise DegenerateWindowError("window has zero step variance")
        object.__setattr__(self, "variance", var)
        object.__setattr__(
            self,
            "gamma_sums",
            tuple(
                self.env.cumulant_sum(nu, self.start, self.stop) for nu in range(3, 7)
            ),
        )

    @property
    def length(self) -> int:
        return self.stop - self.start

    @property
    def scale(self) -> float:
        """B = sqrt(s_stop^2 - s_start^2)."""
        return math.sqrt(self.variance)

    @property
    def mean(self) -> float:
        """Drift of the (uncentered) window sum."""
        return float(self.env.drift[self.stop] - self.env.drift[self.start])

    def moving_laws(self):
        return [self.env.state_at(j).moving for j in range(self.start, self.stop)]


def full_window(env: RealizedEnvironment, n: int) -> CumulantWindow:
    """The default [0, n) window used for theorem right-hand sides."""
    return CumulantWindow(env, 0, n)


@dataclass(frozen=True)
class EdgeworthCoefficients:
    """Scaled cumulant coefficients lambda_3..lambda_{order+2}."""

    order: int
    lambdas: tuple[float, ...]

    def lam(self, nu: int) -> float:
        if not 3 <= nu <= self.order + 2:
            raise InsufficientCoefficientsError(
                f"lambda_{nu} not available (have orders 3..{self.order + 2})"
            )
        return self.lambdas[nu - 3]


def lambda_coeffs(window: CumulantWindow, nu_max: int = 5) -> EdgeworthCoefficients:
    """lambda_nu = L^{(nu-2)/2} B^{-nu} sum_j gamma_{nu j} for nu = 3..nu_max."""
    if not 3 <= nu_max <= 6:
        raise InsufficientCoefficientsError("nu_max must be in 3..6")
    length = window.length
    b = window.scale
    lams = tuple(
        length ** ((nu - 2) / 2.0) * b ** (-nu) * window.gamma_sums[nu - 3]
        for nu in range(3, nu_max + 1)
    )
    return EdgeworthCoefficients(order=nu_max - 2, lambdas=lams)


# ---------------------------------------------------------------------------
# Generic partition-sum corrections
# ---------------------------------------------------------------------------


@lru_cache(maxsize=None)
def partition_solutions(nu: int) -> tuple[tuple[int, ...], ...]:
    """All (k_1..k_nu) >= 0 with k_1 + 2 k_2 + ... + nu k_nu = nu."""
    if nu < 1:
        raise ValueError("nu must be >= 1")
    solutions: list[tuple[int, ...]] = []

    def descend(part_size: int, remaining: int, acc: list[int]) -> None:
        if part_size > nu:
            if remaining == 0:
                solutions.append(tuple(acc))
            return
        for count in range(remaining // part_size + 1):
            descend(part_size + 1, remaining - count * part_size, acc + [count])

    descend(1, nu, [])
    return tuple(solutions)


def generic_correction_series(
    nu: int, coeffs: EdgeworthCoefficients
) -> HermitePhiSeries:
    """Q_nu as a Hermite-phi series from the partition-sum formula.

    Q_nu(x) = -phi(x) sum' H_{nu+2s-1}(x)
              prod_m (1/k_m!) (lambda_{m+2} / (m+2)!)^{k_m},

    the primed sum running over the nonnegative solutions of
    k_1 + 2 k_2 + ... + nu k_nu = nu, with s = k_1 + ... + k_nu.
    """
    if not 1 <= nu <= 4:
        raise InsufficientCoefficientsError("generic corrections support nu in 1..4")
    terms = []
    for solution in partition_solutions(nu):
        s = sum(solution)
        weight = 1.0
        for m, k_m in enumerate(solution, start=1):
            if k_m == 0:
                continue
            weight *= (coeffs.lam(m + 2) / math.factorial(m + 2)) ** k_m / math.factorial(k_m)
        terms.append((-weight, nu + 2 * s - 1))
    return HermitePhiSeries(tuple(terms))


def q_poly_generic(nu: int, coeffs: EdgeworthCoefficients, x):
    """Evaluate the generic Q_nu(x) (unscaled: multiply by L^{-nu/2} to
    obtain the expansion term)."""
    return generic_correction_series(nu, coeffs)(x)


# ---------------------------------------------------------------------------
# Closed forms for the first three corrections (full [0, n) window)
# ---------------------------------------------------------------------------


def _require_scale(env: RealizedEnvironment, n: int) -> float:
    if n < 1 or n > len(env):
        raise DegenerateWindowError(f"generation {n} outside environment")
    s = env.std(n)
    if not s > 0.0:
        raise DegenerateWindowError("zero cumulative step variance")
    return s


def q1_series(env: RealizedEnvironment, n: int) -> HermitePhiSeries:
    """Q_{1,n}/n^{1/2} = -(s_n^(3) / (6 s_n^3)) H_2 phi."""
    s = _require_scale(env, n)
    return HermitePhiSeries(((-float(env.m3[n]) / (6.0 * s**3), 2),))


def q2_series(env: RealizedEnvironment, n: int) -> HermitePhiSeries:
    """Q_{2,n}/n: H_5 term in the squared third-moment sum plus the H_3
    term weighted by the cumulative fourth cumulant."""
    s = _require_scale(env, n)
    m3 = float(env.m3[n])
    g4 = float(env.g4[n])
    return HermitePhiSeries(
        (
            (-(m3 * m3) / (72.0 * s**6), 5),
            (-g4 / (24.0 * s**4), 3),
        )
    )


def q3_series(env: RealizedEnvironment, n: int) -> HermitePhiSeries:
    """Q_{3,n}/n^{3/2}: H_8, H_4 and H_6 terms from the cubed third
    moment, the fifth cumulant and the mixed third-moment/fourth-cumulant
    sums."""
    s = _require_scale(env, n)
    m3 = float(env.m3[n])
    g4 = float(env.g4[n])
    g5 = float(env.g5[n])
    return HermitePhiSeries(
        (
            (-(m3**3) / (1296.0 * s**9), 8),
            (-g5 / (120.0 * s**5), 4),
            (-(m3 * g4) / (144.0 * s**7), 6),
        )
    )


def q1_closed(env: RealizedEnvironment, n: int, t):
    """Scaled first correction Q_{1,n}(t)/n^{1/2}."""
    return q1_series(env, n)(t)


def q2_closed(env: RealizedEnvironment, n: int, t):
    """Scaled second correction Q_{2,n}(t)/n."""
    return q2_series(env, n)(t)


def q3_closed(env: RealizedEnvironment, n: int, t):
    """Scaled third correction Q_{3,n}(t)/n^{3/2}."""
    return q3_series(env, n)(t)


# ---------------------------------------------------------------------------
# Window CDF expansion and oracles
# ---------------------------------------------------------------------------


def scaled_correction_series(window: CumulantWindow, nu: int) -> HermitePhiSeries:
    """Q_nu L^{-nu/2} for the window, as a single series.

    The explicit window-length powers inside lambda_nu cancel against
    L^{-nu/2}, so the result depends on the window only through B and
    the cumulant sums.
    """
    coeffs = lambda_coeffs(window, nu_max=min(nu + 2, 6))
    base = generic_correction_series(nu, coeffs)
    scale = window.length ** (-nu / 2.0)
    return HermitePhiSeries(tuple((c * scale, m) for c, m in base.terms))


def edgeworth_cdf(window: CumulantWindow, order: int, x):
    """Expansion main term of P(S/B <= x) with corrections nu = 1..order-2.

    The raw value is returned without clamping to [0, 1]; the expansion
    legitimately exits the unit interval in the tails.  Use
    :func:`clamp_unit` for display.
    """
    if not 3 <= order <= 5:
        raise InsufficientCoefficientsError("expansion order must be in 3..5")
    x = np.asarray(x, dtype=float)
    total = std_normal_cdf(x)
    for nu in range(1, order - 1):
        total = total + scaled_correction_series(window, nu)(x)
    return total if total.ndim else float(total)


def clamp_unit(value):
    """Display helper: clip an expansion value into [0, 1]."""
    return np.clip(value, 0.0, 1.0)


@dataclass(frozen=True)
class MonteCarloOracle:
    """Empirical-CDF oracle; ``n_samples`` i.i.d. window sums."""

    n_samples: int = 100_000
    seed: int = 0


@dataclass(frozen=True)
class GridConvolutionOracle:
    """Lattice-convolution oracle.

    ``cells`` lattice steps per unit of B (step h = B / cells); the
    lattice spans +-``half_width`` * B.  Per-step laws are discretized
    by exact cell masses, convolved, and the final lattice law is
    standardized by its own exact mean and standard deviation before the
    CDF is read off by linear interpolation at cell edges -- this
    removes the O(L h^2) variance inflation of naive lattice rounding.
    """

    cells: int = 400
    half_width: float = 12.0


@dataclass(frozen=True)
class OracleEstimate:
    value: np.ndarray | float
    uncertainty: np.ndarray | float


def oracle_cdf(window: CumulantWindow, x, method) -> OracleEstimate:
    """Independent estimate of P(S/B <= x) for the window sum."""
    if isinstance(method, MonteCarloOracle):
        return _oracle_monte_carlo(window, x, method)
    if isinstance(method, GridConvolutionOracle):
        return _oracle_grid(window, x, method)
    raise TypeError(f"unknown oracle method: {method!r}")


def _oracle_monte_carlo(window, x, method: MonteCarloOracle) -> OracleEstimate:
    if method.n_samples < 100_000:
        raise OracleBudgetError("monte_carlo oracle requires n_samples >= 1e5")
    gen = make_generator(method.seed)
    total = np.zeros(method.n_samples)
    for law in window.moving_laws():
        total += law.quantile(gen.random(method.n_samples)) - law.mean
    total.sort()
    x = np.asarray(x, dtype=float)
    counts = np.searchsorted(total, x * window.scale, side="right")
    value = counts / method.n_samples
    band = 3.0 * np.sqrt(np.maximum(value * (1.0 - value), 1e-12) / method.n_samples)
    if value.ndim == 0:
        return OracleEstimate(float(value), float(band))
    return OracleEstimate(value, band)


def _oracle_grid(window, x, method: GridConvolutionOracle) -> OracleEstimate:
    if method.cells < 200:
        raise OracleBudgetError("grid oracle requires >= 200 cells per unit of B")
    if method.half_width < 4.0:
        raise OracleBudgetError("grid oracle requires half_width >= 4")
    b = window.scale
    h = b / method.cells
    radius = int(math.ceil(method.half_width * b / h))
    if radius > 50_000_000:
        raise OracleBudgetError("grid oracle lattice too large")

    lost = 0.0
    pmf = None
    offset = 0  # lattice index of pmf[0]
    for law in window.moving_laws():
        step_pmf, step_offset, step_lost = _discretize_step(law, h, radius)
        lost += step_lost
        if pmf is None:
            pmf, offset = step_pmf, step_offset
        else:
            if pmf.size * step_pmf.size > 1_000_000:
                conv = fftconvolve(pmf, step_pmf)
                conv = np.maximum(conv, 0.0)
            else:
                conv = np.convolve(pmf, step_pmf)
            offset += step_offset
            pmf, offset, trimmed = _trim(conv, offset, radius)
            lost += trimmed

    total_mass = float(pmf.sum())
    if total_mass <= 0.0:
        raise OracleBudgetError("grid oracle lost all probability mass")
    pmf = pmf / total_mass
    centers = (offset + np.arange(pmf.size)) * h
    mean_hat = float(np.dot(pmf, centers))
    var_hat = float(np.dot(pmf, (centers - mean_hat) ** 2))
    sd_hat = math.sqrt(var_hat)

    x = np.asarray(x, dtype=float)
    # Evaluate the lattice CDF (piecewise linear with knots at cell right
    # edges, where single-step discretization is exact) at the point that
    # standardizes the lattice law by its own moments.
    eval_points = mean_hat + x * sd_hat
    knots = centers + 0.5 * h
    cdf = np.cumsum(pmf)
    value = np.interp(eval_points, knots, cdf, left=0.0, right=1.0)
    # Heuristic internal consistency estimate: trimmed mass plus an
    # interpolation-error bound of order (h / B)^2.
    uncertainty = lost + (h / sd_hat) ** 2 / 16.0
    if value.ndim == 0:
        return OracleEstimate(float(value), float(uncertainty))
    return OracleEstimate(value, np.full_like(value, uncertainty))


def _discretize_step(law, h: float, radius: int):
    """Cell masses of the centered law on the lattice {k h}.

    Cell k covers ((k - 1/2) h, (k + 1/2) h]; masses are exact CDF
    increments, so the induced lattice CDF is exact at cell edges.
    Support is clipped to +-radius cells (clipped mass reported).
    """
    lo, hi = law.centered_support(tail_mass=1e-16)
    k_lo = max(int(math.floor(lo / h - 0.5)), -radius)
    k_hi = min(int(math.ceil(hi / h + 0.5)), radius)
    edges = (np.arange(k_lo, k_hi + 2) - 0.5) * h
    cdf_vals = np.asarray(law.cdf(edges + law.mean), dtype=float)
    pmf = np.diff(cdf_vals)
    pmf = np.maximum(pmf, 0.0)
    lost = max(0.0, 1.0 - float(pmf.sum()))
    return pmf, k_lo, lost


def _trim(pmf: np.ndarray, offset: int, radius: int):
    """Restrict a lattice pmf to indices [-radius, radius]."""
    start = max(0, -radius - offset)
    stop = min(pmf.size, radius - offset + 1)
    if start >= stop:
        raise OracleBudgetError("grid oracle window does not cover the sum's support")
    trimmed = float(pmf[:start].sum() + pmf[stop:].sum())
    return pmf[start:stop], offset + start, trimmed
