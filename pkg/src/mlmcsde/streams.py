"""Reproducible random streams and generation of all stochastic path inputs.

Every random quantity consumed by a simulated path (Wiener increments, jump
times, jump marks, randomized evaluation points, initial values) is drawn from
a dedicated counter-based stream addressed by ``(master_seed, sample_index,
level, role)``.  Streams for distinct keys are statistically independent and
the mapping is deterministic, so results do not depend on scheduling or on
how samples are batched across workers.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import IntEnum
from typing import Callable, Optional

import numpy as np

__all__ = [
    "Role",
    "StreamKey",
    "StreamFactory",
    "NoiseRealization",
    "CoupledNoise",
    "NoiseBatch",
    "CoupledNoiseBatch",
    "derive_stream",
    "sample_wiener_increments",
    "sample_jumps",
    "sample_thetas",
    "coarsen_increments",
    "draw_noise_batch",
    "draw_coupled_noise_batch",
]

# MarkSampler draws `size` i.i.d. marks from nu(.)/lambda, shape (size, d').
MarkSampler = Callable[[np.random.Generator, int], np.ndarray]


class Role(IntEnum):
    """Independent stream roles within one sample."""

    WIENER = 0
    JUMPS = 1
    MARKS = 2
    THETA_FINE = 3
    THETA_COARSE = 4
    INITIAL = 5


_SAMPLE_BITS = 48
_LEVEL_BITS = 8
_MAX_SAMPLE = 1 << _SAMPLE_BITS
_MAX_LEVEL = 1 << _LEVEL_BITS
_MAX_SEED = 1 << 64


@dataclass(frozen=True)
class StreamKey:
    """Address of one random stream: sample index, level and role."""

    sample_index: int
    level: int
    role: Role

    def __post_init__(self) -> None:
        if not 0 <= self.sample_index < _MAX_SAMPLE:
            raise ValueError(f"sample_index out of range: {self.sample_index}")
        if not 0 <= self.level < _MAX_LEVEL:
            raise ValueError(f"level out of range: {self.level}")
        self.role in Role or (_ for _ in ()).throw(ValueError(f"bad role {self.role}"))


def _key_words(master_seed: int, key: StreamKey) -> tuple[int, int]:
    """Pack (seed, sample, level, role) into the two 64-bit Philox key words."""
    if not 0 <= master_seed < _MAX_SEED:
        raise ValueError(f"master_seed must be a 64-bit unsigned integer, got {master_seed}")
    hi = (int(key.role) << (_SAMPLE_BITS + _LEVEL_BITS)) | (key.level << _SAMPLE_BITS) | key.sample_index
    return master_seed, hi


def derive_stream(master_seed: int, key: StreamKey) -> np.random.Generator:
    """Return the generator for (master_seed, key).

    The mapping is injective: distinct keys select distinct Philox keys, which
    yields independent streams; the same pair always reproduces the identical
    stream.
    """
    lo, hi = _key_words(master_seed, key)
    return np.random.Generator(np.random.Philox(key=(hi << 64) | lo))


class StreamFactory:
    """Cheap repeated stream derivation for one master seed.

    Rekeys a single Philox bit generator in place instead of constructing a
    fresh one per stream; the resulting draw sequences are bit-identical to
    ``derive_stream``.  Not thread-safe: one factory per worker.
    """

    def __init__(self, master_seed: int) -> None:
        self.master_seed = int(master_seed)
        self._bitgen = np.random.Philox(key=0)
        self._gen = np.random.Generator(self._bitgen)
        self._template = self._bitgen.state

    def stream(self, key: StreamKey) -> np.random.Generator:
        lo, hi = _key_words(self.master_seed, key)
        st = self._template
        st["state"]["counter"][:] = 0
        st["state"]["key"][0] = lo
        st["state"]["key"][1] = hi
        st["buffer_pos"] = 4  # mark the output buffer as drained
        st["has_uint32"] = 0
        st["uinteger"] = 0
        self._bitgen.state = st
        return self._gen


def sample_wiener_increments(
    stream: np.random.Generator, n: int, M: int, T: float
) -> np.ndarray:
    """Draw the (n, M) matrix of increments W_k(t_{j+1}) - W_k(t_j).

    Entries are i.i.d. centered Gaussian with variance T/n on the uniform grid
    t_j = jT/n.
    """
    if n < 1 or M < 1:
        raise ValueError(f"need n >= 1 and M >= 1, got n={n}, M={M}")
    if not T > 0:
        raise ValueError(f"need T > 0, got {T}")
    return stream.standard_normal((n, M)) * math.sqrt(T / n)


def sample_jumps(
    stream: np.random.Generator,
    jump_intensity: float,
    T: float,
    mark_sampler: MarkSampler,
    mark_stream: Optional[np.random.Generator] = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Draw one compound-Poisson realization on (0, T].

    The number of jumps is Poisson(lambda*T); jump times are i.i.d. uniform on
    (0, T], sorted ascending; marks are i.i.d. draws from the normalized jump
    measure, paired with the sorted times.  Marks come from ``mark_stream``
    when given so that times and marks live on separate streams.
    """
    if jump_intensity < 0:
        raise ValueError(f"jump intensity must be >= 0, got {jump_intensity}")
    if not T > 0:
        raise ValueError(f"need T > 0, got {T}")
    count = int(stream.poisson(jump_intensity * T)) if jump_intensity > 0 else 0
    if count == 0:
        return np.empty(0), np.empty((0, 1))
    times = np.sort(T * (1.0 - stream.random(count)))  # maps [0,1) onto (0,T]
    marks = np.atleast_2d(np.asarray(mark_sampler(mark_stream if mark_stream is not None else stream, count)))
    if marks.shape[0] != count:
        marks = marks.reshape(count, -1)
    return times, marks


def sample_thetas(stream: np.random.Generator, n: int, T: float) -> np.ndarray:
    """Draw the randomized drift evaluation points, theta_j uniform on [t_j, t_{j+1}]."""
    if n < 1:
        raise ValueError(f"need n >= 1, got {n}")
    h = T / n
    return (np.arange(n) + stream.random(n)) * h


def coarsen_increments(fine: np.ndarray, ratio: int) -> np.ndarray:
    """Aggregate refinement-grid increments to a coarser grid by block sums.

    Row j of the output is the sum of fine rows j*ratio .. (j+1)*ratio - 1;
    the column count is preserved.  The reduction order is fixed by the
    reshape, so repeated aggregation is bitwise reproducible.
    """
    fine = np.asarray(fine)
    if fine.ndim != 2:
        raise ValueError("expected a 2-D increment matrix")
    if ratio < 1:
        raise ValueError(f"ratio must be >= 1, got {ratio}")
    rows = fine.shape[0]
    if rows % ratio:
        raise ValueError(f"row count {rows} not divisible by ratio {ratio}")
    if ratio == 1:
        return fine.copy()
    return fine.reshape(rows // ratio, ratio, fine.shape[1]).sum(axis=1)


@dataclass
class NoiseRealization:
    """All stochastic inputs of one single-grid path."""

    wiener: np.ndarray          # (n, M) increments
    jump_times: np.ndarray      # (J,) sorted, in (0, T]
    jump_marks: np.ndarray      # (J, d')
    thetas: Optional[np.ndarray]  # (n,) randomized drift points, None if unused

    def __post_init__(self) -> None:
        if self.jump_times.shape[0] != self.jump_marks.shape[0]:
            raise ValueError("jump_times and jump_marks lengths differ")
        if self.jump_times.size > 1 and not np.all(np.diff(self.jump_times) >= 0):
            raise ValueError("jump_times must be sorted ascending")

    @property
    def n(self) -> int:
        return self.wiener.shape[0]

    @property
    def M(self) -> int:
        return self.wiener.shape[1]


@dataclass
class CoupledNoise:
    """Shared stochastic inputs of one fine/coarse level pair.

    Wiener increments live on the refinement grid of density lcm(n_fine,
    n_coarse) with the fine level's column count; both levels aggregate them
    by exact block sums, and the coarse level additionally truncates columns.
    The randomized drift points are independent between the two levels.
    """

    wiener_refined: np.ndarray  # (lcm(n_f, n_c), M_fine)
    jump_times: np.ndarray
    jump_marks: np.ndarray
    theta_fine: Optional[np.ndarray]    # (n_fine,)
    theta_coarse: Optional[np.ndarray]  # (n_coarse,)
    n_fine: int
    n_coarse: int

    def fine_increments(self) -> np.ndarray:
        return coarsen_increments(self.wiener_refined, self.wiener_refined.shape[0] // self.n_fine)

    def coarse_increments(self, m_coarse: int) -> np.ndarray:
        agg = coarsen_increments(self.wiener_refined, self.wiener_refined.shape[0] // self.n_coarse)
        return agg[:, :m_coarse]


@dataclass
class NoiseBatch:
    """Stacked noise of samples [start, stop) at one level, single grid."""

    wiener: np.ndarray          # (B, n, M)
    thetas: Optional[np.ndarray]  # (B, n)
    jump_counts: np.ndarray     # (B,) int
    jump_times: np.ndarray      # (sum counts,) concatenated per sample
    jump_marks: np.ndarray      # (sum counts, d')
    offsets: np.ndarray         # (B+1,) prefix sums of jump_counts

    def realization(self, i: int) -> NoiseRealization:
        a, b = self.offsets[i], self.offsets[i + 1]
        return NoiseRealization(
            wiener=self.wiener[i],
            jump_times=self.jump_times[a:b],
            jump_marks=self.jump_marks[a:b],
            thetas=None if self.thetas is None else self.thetas[i],
        )


@dataclass
class CoupledNoiseBatch:
    """Stacked coupled noise of samples [start, stop) at one level pair."""

    wiener_refined: np.ndarray  # (B, n_ref, M_fine)
    theta_fine: Optional[np.ndarray]
    theta_coarse: Optional[np.ndarray]
    jump_counts: np.ndarray
    jump_times: np.ndarray
    jump_marks: np.ndarray
    offsets: np.ndarray
    n_fine: int
    n_coarse: int

    def realization(self, i: int) -> CoupledNoise:
        a, b = self.offsets[i], self.offsets[i + 1]
        return CoupledNoise(
            wiener_refined=self.wiener_refined[i],
            jump_times=self.jump_times[a:b],
            jump_marks=self.jump_marks[a:b],
            theta_fine=None if self.theta_fine is None else self.theta_fine[i],
            theta_coarse=None if self.theta_coarse is None else self.theta_coarse[i],
            n_fine=self.n_fine,
            n_coarse=self.n_coarse,
        )


def _collect_jumps(
    factory: StreamFactory,
    level: int,
    start: int,
    stop: int,
    jump_intensity: float,
    T: float,
    mark_sampler: MarkSampler,
    mark_dim: int,
) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    B = stop - start
    counts = np.zeros(B, dtype=np.int64)
    times_parts: list[np.ndarray] = []
    marks_parts: list[np.ndarray] = []
    for i in range(B):
        tms, mks = sample_jumps(
            factory.stream(StreamKey(start + i, level, Role.JUMPS)),
            jump_intensity,
            T,
            mark_sampler,
            # a separate stream keeps marks independent of the jump pattern
            mark_stream=None,
        ) if jump_intensity == 0 else _sample_jumps_two_streams(
            factory, start + i, level, jump_intensity, T, mark_sampler
        )
        counts[i] = tms.shape[0]
        if tms.shape[0]:
            times_parts.append(tms)
            marks_parts.append(mks)
    offsets = np.zeros(B + 1, dtype=np.int64)
    np.cumsum(counts, out=offsets[1:])
    if times_parts:
        times = np.concatenate(times_parts)
        marks = np.concatenate(marks_parts, axis=0)
    else:
        times = np.empty(0)
        marks = np.empty((0, mark_dim))
    return counts, times, marks, offsets


def _sample_jumps_two_streams(
    factory: StreamFactory,
    sample_index: int,
    level: int,
    jump_intensity: float,
    T: float,
    mark_sampler: MarkSampler,
) -> tuple[np.ndarray, np.ndarray]:
    jump_stream = factory.stream(StreamKey(sample_index, level, Role.JUMPS))
    count = int(jump_stream.poisson(jump_intensity * T))
    if count == 0:
        return np.empty(0), np.empty((0, 1))
    times = np.sort(T * (1.0 - jump_stream.random(count)))
    mark_stream = factory.stream(StreamKey(sample_index, level, Role.MARKS))
    marks = np.atleast_2d(np.asarray(mark_sampler(mark_stream, count)))
    if marks.shape[0] != count:
        marks = marks.reshape(count, -1)
    return times, marks


def draw_noise_batch(
    master_seed: int,
    level: int,
    start: int,
    stop: int,
    n: int,
    M: int,
    T: float,
    jump_intensity: float,
    mark_sampler: MarkSampler,
    mark_dim: int = 1,
    with_thetas: bool = True,
    factory: Optional[StreamFactory] = None,
) -> NoiseBatch:
    """Generate the stacked single-grid noise for samples [start, stop)."""
    factory = factory or StreamFactory(master_seed)
    B = stop - start
    wiener = np.empty((B, n, M))
    thetas = np.empty((B, n)) if with_thetas else None
    for i in range(B):
        idx = start + i
        wiener[i] = sample_wiener_increments(
            factory.stream(StreamKey(idx, level, Role.WIENER)), n, M, T
        )
        if with_thetas:
            thetas[i] = sample_thetas(
                factory.stream(StreamKey(idx, level, Role.THETA_FINE)), n, T
            )
    counts, times, marks, offsets = _collect_jumps(
        factory, level, start, stop, jump_intensity, T, mark_sampler, mark_dim
    )
    return NoiseBatch(wiener, thetas, counts, times, marks, offsets)


def draw_coupled_noise_batch(
    master_seed: int,
    level: int,
    start: int,
    stop: int,
    n_fine: int,
    n_coarse: int,
    M_fine: int,
    T: float,
    jump_intensity: float,
    mark_sampler: MarkSampler,
    mark_dim: int = 1,
    with_thetas: bool = True,
    factory: Optional[StreamFactory] = None,
) -> CoupledNoiseBatch:
    """Generate the stacked coupled noise for samples [start, stop).

    The Wiener increments are drawn once on the grid of density
    lcm(n_fine, n_coarse) and later aggregated to each level, so fine and
    coarse levels see exact block sums of the same realization.
    """
    if n_coarse > n_fine:
        raise ValueError("coarse grid must not be denser than the fine grid")
    factory = factory or StreamFactory(master_seed)
    n_ref = math.lcm(n_fine, n_coarse)
    B = stop - start
    wiener = np.empty((B, n_ref, M_fine))
    th_f = np.empty((B, n_fine)) if with_thetas else None
    th_c = np.empty((B, n_coarse)) if with_thetas else None
    for i in range(B):
        idx = start + i
        wiener[i] = sample_wiener_increments(
            factory.stream(StreamKey(idx, level, Role.WIENER)), n_ref, M_fine, T
        )
        if with_thetas:
            th_f[i] = sample_thetas(
                factory.stream(StreamKey(idx, level, Role.THETA_FINE)), n_fine, T
            )
            th_c[i] = sample_thetas(
                factory.stream(StreamKey(idx, level, Role.THETA_COARSE)), n_coarse, T
            )
    counts, times, marks, offsets = _collect_jumps(
        factory, level, start, stop, jump_intensity, T, mark_sampler, mark_dim
    )
    return CoupledNoiseBatch(
        wiener, th_f, th_c, counts, times, marks, offsets, n_fine, n_coarse
    )
