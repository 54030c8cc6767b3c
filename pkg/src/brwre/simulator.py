"""Quenched branching random walk generator.

Given a realized environment, generation ``n+1`` is built from
generation ``n`` by giving every particle an offspring count from the
state's reproduction law and every child an independent displacement
from the state's moving law.

Random-stream contract (fixed so an independent implementation can
replicate trajectories byte for byte): a single Philox stream keyed with
the trajectory seed supplies uniforms in [0, 1); every draw consumes
exactly one uniform through the relevant law's inverse CDF; per
generation, particles are processed in stored order, each particle's
offspring-count uniform coming before its children's displacement
uniforms (children in birth order).  Unused buffered uniforms carry over
to the next generation, so consumption order is independent of how the
stream is fetched internally.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .environment import EnvState, RealizedEnvironment
from .errors import (
    EnvironmentTooShortError,
    GenerationUnavailableError,
    InvalidModelError,
)
from .rng import make_generator

try:
    from numba import njit as _njit

    _HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    _HAVE_NUMBA = False


def _offspring_scan_py(buf, start, cdf, counts):
    """Walk particles in stored order through the uniform buffer.

    Particle i reads its offspring-count uniform at the running position
    and skips the following ``count`` slots (its children's displacement
    uniforms).  Returns the end position, or -1 if the buffer is too
    short.
    """
    pos = start
    size = buf.size
    top = cdf.size - 1
    for i in range(counts.size):
        if pos >= size:
            return -1
        u = buf[pos]
        lo = 0
        hi = top
        while lo < hi:
            mid = (lo + hi) // 2
            if u < cdf[mid]:
                hi = mid
            else:
                lo = mid + 1
        counts[i] = lo
        pos += 1 + lo
    if pos > size:
        return -1
    return pos


if _HAVE_NUMBA:
    _offspring_scan = _njit(cache=True)(_offspring_scan_py)
else:  # pragma: no cover
    _offspring_scan = _offspring_scan_py


class UniformStream:
    """Buffered view of a Philox uniform stream with carry-over."""

    def __init__(self, generator: np.random.Generator):
        self._gen = generator
        self._buf = np.empty(0)
        self._pos = 0

    def available(self) -> int:
        return self._buf.size - self._pos

    def ensure(self, need: int) -> None:
        """Make at least ``need`` uniforms available past the cursor."""
        short = need - self.available()
        if short > 0:
            fetched = self._gen.random(max(short, 4096))
            self._buf = np.concatenate([self._buf[self._pos :], fetched])
            self._pos = 0

    def view(self) -> tuple[np.ndarray, int]:
        return self._buf, self._pos

    def advance(self, end: int) -> None:
        self._pos = end

    def take(self, k: int) -> np.ndarray:
        self.ensure(k)
        out = self._buf[self._pos : self._pos + k]
        self._pos += k
        return out


def branch_generation(
    positions: np.ndarray, state: EnvState, stream: UniformStream
) -> tuple[np.ndarray, np.ndarray]:
    """One reproduction step under ``state`` for the given parents.

    Returns (offspring counts per parent, child positions in birth
    order).  Child count may be zero (extinction).
    """
    n_parents = positions.size
    cdf = state.offspring.cdf_table()
    counts = np.empty(n_parents, dtype=np.int64)
    need = int(n_parents * (1.0 + 1.5 * state.offspring.mean)) + 64
    while True:
        stream.ensure(need)
        buf, start = stream.view()
        end = _offspring_scan(buf, start, cdf, counts)
        if end >= 0:
            break
        need = 2 * need + 64
    buf, start = stream.view()
    block = buf[start:end]
    # Offspring uniforms sit at start-of-particle offsets; everything
    # else in the block is a displacement uniform, already in
    # (parent order, birth order).
    parent_offsets = np.arange(n_parents) + np.concatenate(
        ([0], np.cumsum(counts[:-1]))
    )
    mask = np.ones(block.size, dtype=bool)
    mask[parent_offsets] = False
    child_u = block[mask]
    stream.advance(end)

    displacements = np.asarray(state.moving.quantile(child_u), dtype=float)
    parent_idx = np.repeat(np.arange(n_parents), counts)
    child_positions = positions[parent_idx] + displacements
    if child_positions.size != int(counts.sum()):
        raise AssertionError("branching bookkeeping mismatch")
    return counts, child_positions


@dataclass
class SimConfig:
    n_max: int
    seed: int
    particle_cap: int = 2_000_000
    track_ancestors_at: int | None = None

    def __post_init__(self):
        if not 1 <= self.n_max <= 64:
            raise InvalidModelError("n_max must be in 1..64")
        if self.particle_cap < 1:
            raise InvalidModelError("particle_cap must be >= 1")
        if self.track_ancestors_at is not None and not (
            0 <= self.track_ancestors_at <= self.n_max
        ):
            raise InvalidModelError("track_ancestors_at must be in 0..n_max")


@dataclass(eq=False)
class GenerationSnapshot:
    """Positions of one generation, optionally tagged with the index of
    each particle's ancestor in the tracked generation."""

    generation: int
    positions: np.ndarray
    ancestor_ids: np.ndarray | None = None

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=float)
        self._sorted: np.ndarray | None = None

    @property
    def count(self) -> int:
        return int(self.positions.size)

    def sorted_positions(self) -> np.ndarray:
        if self._sorted is None:
            self._sorted = np.sort(self.positions)
        return self._sorted


@dataclass(frozen=True)
class Termination:
    status: str  # "completed" | "extinct" | "cap_exceeded"
    generation: int | None = None


@dataclass(eq=False)
class Trajectory:
    env: RealizedEnvironment
    snapshots: list[GenerationSnapshot]
    termination: Termination
    config: SimConfig

    @property
    def last_generation(self) -> int:
        return len(self.snapshots) - 1

    @property
    def capped(self) -> bool:
        return self.termination.status == "cap_exceeded"

    @property
    def extinct(self) -> bool:
        return self.termination.status == "extinct"

    def snapshot(self, n: int) -> GenerationSnapshot:
        if n > self.last_generation:
            raise GenerationUnavailableError(
                f"generation {n} not simulated ({self.termination.status} at "
                f"{self.termination.generation})",
                termination=self.termination,
            )
        return self.snapshots[n]


def simulate(env: RealizedEnvironment, cfg: SimConfig) -> Trajectory:
    """Grow the tree generation by generation; deterministic in (env, cfg).

    The run stops early when a generation dies out (later generations
    are materialized as empty, so downstream statistics are plain zeros)
    or when the next generation would exceed the particle cap (recorded,
    never subsampled: subsampling would bias every martingale).
    """
    if len(env) < cfg.n_max:
        raise EnvironmentTooShortError(
            f"environment has {len(env)} generations, need {cfg.n_max}"
        )
    track = cfg.track_ancestors_at
    stream = UniformStream(make_generator(cfg.seed))

    positions = np.zeros(1)
    ancestors = np.zeros(1, dtype=np.int64) if track == 0 else None
    snapshots = [GenerationSnapshot(0, positions, ancestors)]
    termination = Termination("completed", None)

    for n in range(cfg.n_max):
        counts, child_positions = branch_generation(positions, env.state_at(n), stream)
        total = child_positions.size
        if total == 0:
            termination = Termination("extinct", n + 1)
            for m in range(n + 1, cfg.n_max + 1):
                empty_anc = (
                    np.empty(0, dtype=np.int64)
                    if track is not None and m >= track
                    else None
                )
                snapshots.append(GenerationSnapshot(m, np.empty(0), empty_anc))
            break
        if total > cfg.particle_cap:
            termination = Termination("cap_exceeded", n + 1)
            break
        parent_idx = np.repeat(np.arange(positions.size), counts)
        if track is not None:
            if n + 1 == track:
                ancestors = np.arange(total, dtype=np.int64)
            elif ancestors is not None:
                ancestors = ancestors[parent_idx]
        positions = child_positions
        snapshots.append(GenerationSnapshot(n + 1, positions, ancestors))

    return Trajectory(env=env, snapshots=snapshots, termination=termination, config=cfg)


def counting_measure(snap: GenerationSnapshot, threshold: float) -> int:
    """#{particles with position <= threshold} via one sort per snapshot."""
    return int(
        np.searchsorted(snap.sorted_positions(), threshold, side="right")
    )


def normalized_lhs(traj: Trajectory, n: int, t: float) -> float:
    """Population below the moving threshold, normalized by mean growth:
    pi_n^{-1} #{S_u <= ell_n + s_n t}."""
    snap = traj.snapshot(n)
    env = traj.env
    s = env.std(n)
    if not s > 0.0:
        raise InvalidModelError(f"zero cumulative step scale at generation {n}")
    threshold = float(env.drift[n]) + s * t
    return counting_measure(snap, threshold) / float(env.pi[n])
