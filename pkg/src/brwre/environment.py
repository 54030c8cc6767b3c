"""The i.i.d. random environment: per-state offspring and moving laws.

A model is a finite mixture of environment states.  Each state pairs an
offspring law (finite support) with a moving law (one of four families
with closed-form central moments up to order 6).  Keeping the mixture
finite makes every annealed constant -- E ln m_0, E sigma_0^(nu) -- an
exact finite sum, so the verification harness never stacks Monte Carlo
error on top of Monte Carlo error.

A :class:`RealizedEnvironment` is one sampled state sequence together
with all prefix aggregates the rest of the package consumes: cumulative
mean growth (log and linear), cumulative drift, and cumulative central
moments / cumulants of the centered step laws.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import special as _sps

from .errors import (
    DegenerateLawError,
    EmptyEnvironmentError,
    InvalidModelError,
)
from .rng import make_generator
from .special import std_normal_cdf

_PROB_TOL = 1e-12
MAX_OFFSPRING_CAP = 1024

# Smallest uniform fed to inverse CDFs; keeps ndtri finite when the
# generator hands back an exact 0.0.
_U_FLOOR = 2.0**-53

# Central moments of a unit-rate exponential about its mean
# (derangement numbers D_2..D_6).
_EXP_CENTRAL = (1.0, 2.0, 9.0, 44.0, 265.0)


# ---------------------------------------------------------------------------
# Moving laws
# ---------------------------------------------------------------------------


class MovingLaw:
    """Base class for per-state displacement laws.

    Subclasses provide the mean, exact central moments of order 2..6,
    the CDF, and the inverse CDF (every simulator draw consumes exactly
    one uniform through :meth:`quantile`).
    """

    family: str = ""
    is_lattice: bool = False

    @property
    def mean(self) -> float:
        raise NotImplementedError

    def central_moments(self) -> tuple[float, float, float, float, float]:
        """(sigma^(2), ..., sigma^(6)) about the mean."""
        raise NotImplementedError

    def cdf(self, x):
        raise NotImplementedError

    def quantile(self, u):
        raise NotImplementedError

    def centered_support(self, tail_mass: float = 1e-16) -> tuple[float, float]:
        """Interval carrying all but ``tail_mass`` of X - mean."""
        raise NotImplementedError

    def to_dict(self) -> dict:
        raise NotImplementedError

    def _validate(self) -> None:
        moments = self.central_moments()
        if not moments[0] > 0.0:
            raise DegenerateLawError(f"{self.family} law has zero variance")


@dataclass(frozen=True)
class Gaussian(MovingLaw):
    mu: float
    sigma: float
    family = "gaussian"

    def __post_init__(self):
        if not self.sigma > 0.0:
            raise DegenerateLawError("gaussian requires sigma > 0")

    @property
    def mean(self) -> float:
        return self.mu

    def central_moments(self):
        v = self.sigma * self.sigma
        # 3.0 * v * v must match the association used in
        # cumulants_from_central_moments so Gaussian cumulants cancel to
        # an exact 0.0.
        return (v, 0.0, 3.0 * v * v, 0.0, 15.0 * v * v * v)

    def cdf(self, x):
        return std_normal_cdf((np.asarray(x, dtype=float) - self.mu) / self.sigma)

    def quantile(self, u):
        u = np.clip(np.asarray(u, dtype=float), _U_FLOOR, 1.0 - _U_FLOOR)
        return self.mu + self.sigma * _sps.ndtri(u)

    def centered_support(self, tail_mass: float = 1e-16):
        r = self.sigma * math.sqrt(-2.0 * math.log(tail_mass / 2.0))
        return (-r, r)

    def to_dict(self):
        return {"family": "gaussian", "mu": self.mu, "sigma": self.sigma}


@dataclass(frozen=True)
class Uniform(MovingLaw):
    a: float
    b: float
    family = "uniform"

    def __post_init__(self):
        if not self.a < self.b:
            raise DegenerateLawError("uniform requires a < b")

    @property
    def mean(self) -> float:
        return 0.5 * (self.a + self.b)

    def central_moments(self):
        h = 0.5 * (self.b - self.a)
        h2 = h * h
        return (h2 / 3.0, 0.0, h2 * h2 / 5.0, 0.0, h2 * h2 * h2 / 7.0)

    def cdf(self, x):
        x = np.asarray(x, dtype=float)
        return np.clip((x - self.a) / (self.b - self.a), 0.0, 1.0)

    def quantile(self, u):
        return self.a + (self.b - self.a) * np.asarray(u, dtype=float)

    def centered_support(self, tail_mass: float = 1e-16):
        h = 0.5 * (self.b - self.a)
        return (-h, h)

    def to_dict(self):
        return {"family": "uniform", "a": self.a, "b": self.b}


@dataclass(frozen=True)
class ShiftedExponential(MovingLaw):
    rate: float
    shift: float
    family = "shifted_exponential"

    def __post_init__(self):
        if not self.rate > 0.0:
            raise DegenerateLawError("shifted_exponential requires rate > 0")

    @property
    def mean(self) -> float:
        return self.shift + 1.0 / self.rate

    def central_moments(self):
        r = self.rate
        return tuple(c / r**nu for nu, c in zip(range(2, 7), _EXP_CENTRAL))

    def cdf(self, x):
        x = np.asarray(x, dtype=float)
        return np.where(x >= self.shift, -np.expm1(-self.rate * (x - self.shift)), 0.0)

    def quantile(self, u):
        u = np.asarray(u, dtype=float)
        return self.shift - np.log1p(-u) / self.rate

    def centered_support(self, tail_mass: float = 1e-16):
        lo = -1.0 / self.rate
        hi = -math.log(tail_mass) / self.rate - 1.0 / self.rate
        return (lo, hi)

    def to_dict(self):
        return {"family": "shifted_exponential", "rate": self.rate, "shift": self.shift}


@dataclass(frozen=True)
class TwoPoint(MovingLaw):
    """P(X = x1) = p, P(X = x2) = 1 - p.  Lattice: violates Cramer's condition."""

    x1: float
    p: float
    x2: float
    family = "two_point"
    is_lattice = True

    def __post_init__(self):
        if not 0.0 < self.p < 1.0:
            raise DegenerateLawError("two_point requires p in (0, 1)")
        if self.x1 == self.x2:
            raise DegenerateLawError("two_point requires x1 != x2")

    @property
    def mean(self) -> float:
        return self.p * self.x1 + (1.0 - self.p) * self.x2

    def central_moments(self):
        m = self.mean
        d1, d2 = self.x1 - m, self.x2 - m
        return tuple(
            self.p * d1**nu + (1.0 - self.p) * d2**nu for nu in range(2, 7)
        )

    def cdf(self, x):
        x = np.asarray(x, dtype=float)
        (lo, wlo), (hi, _) = sorted(
            [(self.x1, self.p), (self.x2, 1.0 - self.p)]
        )
        return np.where(x < lo, 0.0, np.where(x < hi, wlo, 1.0))

    def quantile(self, u):
        u = np.asarray(u, dtype=float)
        return np.where(u < self.p, self.x1, self.x2)

    def centered_support(self, tail_mass: float = 1e-16):
        m = self.mean
        lo = min(self.x1, self.x2) - m
        hi = max(self.x1, self.x2) - m
        return (lo, hi)

    def to_dict(self):
        return {"family": "two_point", "x1": self.x1, "p": self.p, "x2": self.x2}


_MOVING_FAMILIES = {
    "gaussian": lambda d: Gaussian(float(d["mu"]), float(d["sigma"])),
    "uniform": lambda d: Uniform(float(d["a"]), float(d["b"])),
    "shifted_exponential": lambda d: ShiftedExponential(
        float(d["rate"]), float(d["shift"])
    ),
    "two_point": lambda d: TwoPoint(float(d["x1"]), float(d["p"]), float(d["x2"])),
}


def moving_law_from_dict(d: dict) -> MovingLaw:
    try:
        ctor = _MOVING_FAMILIES[d["family"]]
    except KeyError as exc:
        raise InvalidModelError(f"unknown moving-law family: {d.get('family')!r}") from exc
    return ctor(d)


# ---------------------------------------------------------------------------
# Offspring laws (finite support after truncation)
# ---------------------------------------------------------------------------


class OffspringLaw:
    """Finite-support reproduction law; ``pmf[k] = P(N = k)``."""

    family: str = ""

    @property
    def pmf(self) -> np.ndarray:
        raise NotImplementedError

    @property
    def mean(self) -> float:
        return float(np.dot(np.arange(len(self.pmf)), self.pmf))

    def cdf_table(self) -> np.ndarray:
        """Cumulative pmf with the last entry pinned to exactly 1.0."""
        cdf = np.cumsum(self.pmf)
        cdf[-1] = 1.0
        return cdf

    def to_dict(self) -> dict:
        raise NotImplementedError

    @staticmethod
    def _check_cap(cap: int) -> None:
        if not 0 < cap <= MAX_OFFSPRING_CAP:
            raise InvalidModelError(
                f"offspring support cap must be in 1..{MAX_OFFSPRING_CAP}, got {cap}"
            )


@dataclass(frozen=True)
class ExplicitPmf(OffspringLaw):
    probabilities: tuple[float, ...]
    family = "explicit_pmf"

    def __post_init__(self):
        p = np.asarray(self.probabilities, dtype=float)
        if p.ndim != 1 or p.size == 0:
            raise InvalidModelError("explicit_pmf needs a non-empty vector")
        if p.size - 1 > MAX_OFFSPRING_CAP:
            raise InvalidModelError(f"offspring support exceeds {MAX_OFFSPRING_CAP}")
        if np.any(p < 0.0):
            raise InvalidModelError("pmf entries must be non-negative")
        if abs(float(p.sum()) - 1.0) > _PROB_TOL:
            raise InvalidModelError(f"pmf sums to {p.sum()!r}, expected 1")

    @property
    def pmf(self) -> np.ndarray:
        return np.asarray(self.probabilities, dtype=float)

    def to_dict(self):
        return {"family": "explicit_pmf", "pmf": list(self.probabilities)}


@dataclass(frozen=True)
class PoissonTruncated(OffspringLaw):
    """Poisson(rate) conditioned on N <= cap (mass renormalized)."""

    rate: float
    cap: int = 64

    family = "poisson_truncated"

    def __post_init__(self):
        if not self.rate > 0.0:
            raise InvalidModelError("poisson_truncated requires rate > 0")
        self._check_cap(self.cap)

    @property
    def pmf(self) -> np.ndarray:
        k = np.arange(self.cap + 1)
        logp = k * math.log(self.rate) - self.rate - _sps.gammaln(k + 1)
        p = np.exp(logp)
        return p / p.sum()

    def to_dict(self):
        return {"family": "poisson_truncated", "rate": self.rate, "cap": self.cap}


@dataclass(frozen=True)
class GeometricTruncated(OffspringLaw):
    """P(N = k) proportional to p (1-p)^k on k = 0..cap."""

    p: float
    cap: int = 64

    family = "geometric"

    def __post_init__(self):
        if not 0.0 < self.p < 1.0:
            raise InvalidModelError("geometric requires p in (0, 1)")
        self._check_cap(self.cap)

    @property
    def pmf(self) -> np.ndarray:
        k = np.arange(self.cap + 1)
        p = self.p * (1.0 - self.p) ** k
        return p / p.sum()

    def to_dict(self):
        return {"family": "geometric", "p": self.p, "cap": self.cap}


_OFFSPRING_FAMILIES = {
    "explicit_pmf": lambda d: ExplicitPmf(tuple(float(x) for x in d["pmf"])),
    "poisson_truncated": lambda d: PoissonTruncated(float(d["rate"]), int(d.get("cap", 64))),
    "geometric": lambda d: GeometricTruncated(float(d["p"]), int(d.get("cap", 64))),
}


def offspring_law_from_dict(d: dict) -> OffspringLaw:
    try:
        ctor = _OFFSPRING_FAMILIES[d["family"]]
    except KeyError as exc:
        raise InvalidModelError(
            f"unknown offspring-law family: {d.get('family')!r}"
        ) from exc
    return ctor(d)


# ---------------------------------------------------------------------------
# States and the mixture model
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class EnvState:
    offspring: OffspringLaw
    moving: MovingLaw

    def to_dict(self):
        return {"offspring": self.offspring.to_dict(), "moving": self.moving.to_dict()}


@dataclass(frozen=True)
class StateMoments:
    """Exact per-state constants: offspring mean, step mean, central moments."""

    mean_offspring: float
    mean_step: float
    central: tuple[float, float, float, float, float]  # orders 2..6


def state_moments(state: EnvState) -> StateMoments:
    """Closed-form mean offspring, step mean and central step moments 2..6."""
    state.moving._validate()
    return StateMoments(
        mean_offspring=state.offspring.mean,
        mean_step=state.moving.mean,
        central=tuple(state.moving.central_moments()),
    )


def cumulants_from_central_moments(moments) -> tuple[float, float, float, float, float]:
    """Cumulants (gamma_2..gamma_6) of a centered variable from its
    central moments (sigma^(2)..sigma^(6)).

    Uses the standard relations
        gamma_2 = m2
        gamma_3 = m3
        gamma_4 = m4 - 3 m2^2
        gamma_5 = m5 - 10 m3 m2
        gamma_6 = m6 - 15 m4 m2 - 10 m3^2 + 30 m2^3
    """
    m2, m3, m4, m5, m6 = (float(m) for m in moments)
    if not m2 > 0.0:
        raise DegenerateLawError("central-moment vector has non-positive variance")
    g4 = m4 - 3.0 * m2 * m2
    g5 = m5 - 10.0 * m3 * m2
    g6 = m6 - 15.0 * m4 * m2 - 10.0 * m3 * m3 + 30.0 * m2 * m2 * m2
    return (m2, m3, g4, g5, g6)


@dataclass(frozen=True)
class WeightedState:
    probability: float
    state: EnvState


class EnvironmentModel:
    """Finite mixture of environment states with exact annealed constants."""

    def __init__(self, states: list[WeightedState] | list[tuple[float, EnvState]]):
        entries = []
        for item in states:
            if isinstance(item, WeightedState):
                entries.append(item)
            else:
                prob, state = item
                entries.append(WeightedState(float(prob), state))
        if not entries:
            raise InvalidModelError("model needs at least one state")
        probs = np.array([e.probability for e in entries], dtype=float)
        if np.any(probs <= 0.0) or np.any(probs > 1.0):
            raise InvalidModelError("state probabilities must lie in (0, 1]")
        if abs(float(probs.sum()) - 1.0) > _PROB_TOL:
            raise InvalidModelError(
                f"state probabilities sum to {probs.sum()!r}, expected 1"
            )
        self.entries: tuple[WeightedState, ...] = tuple(entries)
        self.probabilities = probs
        self._prob_cdf = np.cumsum(probs)
        self._prob_cdf[-1] = 1.0

        per_state = [state_moments(e.state) for e in entries]
        self.mean_offspring = np.array([sm.mean_offspring for sm in per_state])
        self.mean_step = np.array([sm.mean_step for sm in per_state])
        # central[j] holds sigma^(j+2) for every state
        self.central = np.array([sm.central for sm in per_state]).T
        self.cumulant = np.array(
            [cumulants_from_central_moments(sm.central) for sm in per_state]
        ).T

    @property
    def n_states(self) -> int:
        return len(self.entries)

    def state(self, index: int) -> EnvState:
        return self.entries[index].state

    def e_log_mean_offspring(self) -> float:
        """Sum_i p_i ln m_i; -inf when some state has mean offspring 0."""
        total = 0.0
        for prob, m in zip(self.probabilities, self.mean_offspring):
            if m <= 0.0:
                return -math.inf
            total += prob * math.log(m)
        return total

    def annealed_central_moment(self, nu: int) -> float:
        """E sigma_0^(nu) for nu in 2..6 (exact mixture sum)."""
        return float(np.dot(self.probabilities, self.central[nu - 2]))

    def lattice_state_indices(self) -> list[int]:
        return [
            i for i, e in enumerate(self.entries) if e.state.moving.is_lattice
        ]

    def to_dict(self) -> dict:
        return {
            "states": [
                {"probability": e.probability, **e.state.to_dict()}
                for e in self.entries
            ]
        }

    @classmethod
    def from_dict(cls, d: dict) -> "EnvironmentModel":
        try:
            raw_states = d["states"]
        except (KeyError, TypeError) as exc:
            raise InvalidModelError("model dict needs a 'states' list") from exc
        states = []
        for i, s in enumerate(raw_states):
            try:
                states.append(
                    WeightedState(
                        float(s["probability"]),
                        EnvState(
                            offspring=offspring_law_from_dict(s["offspring"]),
                            moving=moving_law_from_dict(s["moving"]),
                        ),
                    )
                )
            except KeyError as exc:
                raise InvalidModelError(f"states[{i}] is missing field {exc}") from exc
        return cls(states)


# ---------------------------------------------------------------------------
# Validation report
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Finding:
    level: str  # "pass" | "warn" | "fail"
    code: str
    message: str


@dataclass
class ValidationReport:
    findings: list[Finding] = field(default_factory=list)
    e_log_mean_offspring: float = math.nan
    annealed_moments: dict[int, float] = field(default_factory=dict)

    @property
    def ok(self) -> bool:
        return not any(f.level == "fail" for f in self.findings)

    @property
    def has_warnings(self) -> bool:
        return any(f.level == "warn" for f in self.findings)

    def add(self, level: str, code: str, message: str) -> None:
        self.findings.append(Finding(level, code, message))


def validate_model(model: EnvironmentModel) -> ValidationReport:
    """Semantic checks on a structurally valid model.

    Fails when the mixture is not supercritical (mean log growth <= 0);
    warns when any moving law is lattice, since the expansion theory
    needs a non-lattice characteristic function with positive
    probability.
    """
    report = ValidationReport()
    growth = model.e_log_mean_offspring()
    report.e_log_mean_offspring = growth
    if growth > 0.0:
        report.add("pass", "supercritical", f"mean log growth = {growth:.12g} > 0")
    else:
        report.add(
            "fail",
            "not_supercritical",
            f"mean log growth = {growth:.12g} <= 0: population does not grow",
        )
    lattice = model.lattice_state_indices()
    if lattice:
        if len(lattice) == len(model.entries):
            report.add(
                "warn",
                "all_lattice",
                "every moving law is lattice: the smoothness condition on the "
                "step characteristic functions fails with probability one",
            )
        else:
            report.add(
                "warn",
                "lattice_states",
                f"states {lattice} have lattice moving laws (atom distributions)",
            )
    else:
        report.add("pass", "non_lattice", "no lattice moving laws")
    for nu in range(2, 7):
        report.annealed_moments[nu] = model.annealed_central_moment(nu)
    moments_msg = ", ".join(
        f"E sigma^({nu}) = {report.annealed_moments[nu]:.12g}" for nu in range(2, 7)
    )
    report.add("pass", "annealed_moments", moments_msg)
    report.add(
        "pass",
        "offspring_moments",
        "offspring laws have finite support, so every offspring log-moment "
        "condition holds automatically",
    )
    return report


# ---------------------------------------------------------------------------
# Realized environments
# ---------------------------------------------------------------------------


class RealizedEnvironment:
    """A sampled i.i.d. state sequence plus its prefix aggregates.

    Arrays are indexed so that entry ``k`` aggregates generations
    ``0..k-1``; entry 0 is the empty prefix (pi = 1, everything else 0).

    Attributes
    ----------
    seq : int array, length n          -- state index per generation
    pi, log_pi : arrays, length n+1    -- cumulative mean population size
    drift : array, length n+1          -- cumulative step means (ell)
    m2..m6 : arrays, length n+1        -- cumulative central step moments
    g4, g5, g6 : arrays, length n+1    -- cumulative step cumulants of
                                          order 4..6 (order-3 cumulant
                                          equals m3)
    """

    def __init__(self, model: EnvironmentModel, seq: np.ndarray, seed: int | None = None):
        seq = np.asarray(seq, dtype=np.int64)
        if seq.size == 0:
            raise EmptyEnvironmentError("realized environment must have length >= 1")
        if np.any(seq < 0) or np.any(seq >= model.n_states):
            raise InvalidModelError("state index out of range in sequence")
        self.model = model
        self.seq = seq
        self.seed = seed

        def prefix(values: np.ndarray) -> np.ndarray:
            out = np.zeros(seq.size + 1)
            np.cumsum(values[seq], out=out[1:])
            return out

        with np.errstate(divide="ignore"):
            log_m = np.log(model.mean_offspring)
        self.log_pi = prefix(log_m)
        self.pi = np.exp(self.log_pi)
        self.drift = prefix(model.mean_step)
        self.m2 = prefix(model.central[0])
        self.m3 = prefix(model.central[1])
        self.m4 = prefix(model.central[2])
        self.m5 = prefix(model.central[3])
        self.m6 = prefix(model.central[4])
        self.g4 = prefix(model.cumulant[2])
        self.g5 = prefix(model.cumulant[3])
        self.g6 = prefix(model.cumulant[4])

    def __len__(self) -> int:
        return int(self.seq.size)

    def std(self, n: int) -> float:
        """s_n = sqrt of the cumulative step variance up to generation n."""
        return math.sqrt(self.m2[n])

    def state_at(self, k: int) -> EnvState:
        return self.model.state(int(self.seq[k]))

    def pi_ratio(self, k: int, n: int) -> float:
        """Mean population growth over generations k..n-1."""
        return math.exp(self.log_pi[n] - self.log_pi[k])

    def cumulant_sum(self, nu: int, k: int, n: int) -> float:
        """Sum of order-``nu`` step cumulants over generations [k, n)."""
        table = {3: self.m3, 4: self.g4, 5: self.g5, 6: self.g6}
        try:
            arr = table[nu]
        except KeyError as exc:
            raise DegenerateLawError(f"cumulant order {nu} not tracked") from exc
        return float(arr[n] - arr[k])


def sample_environment(model: EnvironmentModel, n: int, seed: int) -> RealizedEnvironment:
    """Draw n i.i.d. states from the mixture; deterministic in (model, n, seed).

    Consumes exactly ``n`` uniforms from the Philox stream keyed with
    ``seed``, mapping each through the mixture CDF.
    """
    if n < 1:
        raise EmptyEnvironmentError("environment length must be >= 1")
    gen = make_generator(seed)
    u = gen.random(n)
    seq = np.searchsorted(model._prob_cdf, u, side="right")
    return RealizedEnvironment(model, seq, seed=seed)
