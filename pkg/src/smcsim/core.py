"""Deterministic two-thread SMT core with an L1i cache and SMC detection.

The model tracks exactly what the attacks need and nothing more:

* a 64-set, 8-way, true-LRU instruction cache holding (set, tag) lines;
* one "deepest level" tag per line for everything below L1i — there is no
  L2/LLC capacity model, only the level the next fetch would be served from;
* two per-thread cycle clocks plus performance counters;
* a latency oracle keyed by (probe kind, residency level, smc_fired) with
  optional Gaussian timing noise quantized to the profile's timer step.

Writing, flushing or prefetching an L1i-resident line raises an SMC machine
clear when the active profile says that kind does so on real hardware. Every
SMC event bumps the machine-clear counters, charges the issuing thread's
stall counter, and freezes the sibling thread for ``sibling_stall`` cycles.

A ``CoreState`` has a single owner; nothing here is safe for concurrent
mutation. Attacker and victim are interleaved by explicitly scheduling ops
against the two thread clocks.
"""

from __future__ import annotations

import random
from dataclasses import dataclass, field
from typing import NamedTuple

from .errors import UnsupportedStrategyError
from .profiles import _LEVELS, LatencyProfile, ProbeKind, ResidencyLevel

N_SETS = 64
N_WAYS = 8
LINE_SIZE = 64

_L1I = int(ResidencyLevel.L1I)
_L1D = int(ResidencyLevel.L1D)
_L2 = int(ResidencyLevel.L2)
_LLC = int(ResidencyLevel.LLC)
_DRAM = int(ResidencyLevel.DRAM)

_LOAD = int(ProbeKind.LOAD)
_FLUSH = int(ProbeKind.FLUSH)
_FLUSHOPT = int(ProbeKind.FLUSHOPT)
_STORE = int(ProbeKind.STORE)
_LOCKINC = int(ProbeKind.LOCKINC)
_PREFETCH = int(ProbeKind.PREFETCH)
_PREFETCHNTA = int(ProbeKind.PREFETCHNTA)
_EXECUTE = int(ProbeKind.EXECUTE)
_CLWB = int(ProbeKind.CLWB)

# Counter slots, kept as a plain list per thread for speed.
_C_MC, _C_MC_SMC, _C_STALL, _C_L1I_MISS, _C_LLC_MISS, _C_BR_MISP, _C_BR_RET = range(7)


def set_index(byte_address: int) -> int:
    """L1i set for a byte address: bits 6..11."""
    return (byte_address >> 6) & (N_SETS - 1)


class LineAddr(NamedTuple):
    """A cache line named by its set and tag."""

    set_index: int
    tag: int

    @classmethod
    def from_address(cls, byte_address: int) -> "LineAddr":
        return cls(set_index(byte_address), byte_address >> 12)


class TimingSample(NamedTuple):
    """One timed access as the measuring thread sees it."""

    kind: ProbeKind
    line: LineAddr
    cycles: int
    smc_fired: bool
    level: ResidencyLevel


class CounterSnapshot(NamedTuple):
    """Immutable copy of one thread's performance counters."""

    clock: int
    machine_clears_count: int
    machine_clears_smc: int
    stalls_total: int
    l1i_misses: int
    llc_misses: int
    branch_mispredicts: int
    branch_retired: int


@dataclass
class CoreState:
    """Mutable state of one physical core (two SMT threads)."""

    profile: LatencyProfile
    seed: int = 0
    sets: list[list[int]] = field(init=False, repr=False)
    deeper: dict[int, int] = field(init=False, repr=False)
    clocks: list[int] = field(init=False)
    counters: list[list[int]] = field(init=False, repr=False)
    rng: random.Random = field(init=False, repr=False)

    def __post_init__(self) -> None:
        self.sets = [[] for _ in range(N_SETS)]
        self.deeper = {}
        self.clocks = [0, 0]
        self.counters = [[0] * 7, [0] * 7]
        self.rng = random.Random(self.seed)

    def l1i_resident(self, line: LineAddr) -> bool:
        return line.tag in self.sets[line.set_index]

    def l1i_set_tags(self, index: int) -> tuple[int, ...]:
        """Tags currently cached in one set, least recently used first."""
        return tuple(self.sets[index])

    def residency(self, line: LineAddr) -> ResidencyLevel:
        if line.tag in self.sets[line.set_index]:
            return ResidencyLevel.L1I
        return _LEVELS[self.deeper.get(line.tag * N_SETS + line.set_index, _DRAM)]


def _timed(core: CoreState, base: int) -> int:
    """Apply the profile noise model and timer quantization to a base latency."""
    profile = core.profile
    g = profile.timer_granularity
    sigma = profile.noise_sigma
    if sigma > 0.0:
        value = base + core.rng.gauss(0.0, sigma)
        if value < 1.0:
            value = 1.0
    else:
        value = base
    if g == 1:
        return int(round(value))
    q = int(round(value / g)) * g
    return q if q >= g else g


def _smc_event(core: CoreState, thread: int) -> None:
    profile = core.profile
    counters = core.counters[thread]
    counters[_C_MC] += 1
    counters[_C_MC_SMC] += 1
    counters[_C_STALL] += profile.smc_stall_cycles
    sibling = 1 - thread
    core.clocks[sibling] += profile.sibling_stall
    core.counters[sibling][_C_STALL] += profile.sibling_stall


def execute_line(core: CoreState, thread: int, line: LineAddr) -> TimingSample:
    """Fetch and run one code line, filling it into L1i.

    The line is brought to the most-recently-used way of its set, evicting
    the LRU way on a full set. A fetch that missed L1i leaves the line's
    deeper copy in L2 (the fill path), and counts an L1i miss, plus an LLC
    miss when it had to come from DRAM.
    """
    tags = core.sets[line.set_index]
    tag = line.tag
    key = tag * N_SETS + line.set_index
    if tag in tags:
        level = _L1I
        tags.remove(tag)
        tags.append(tag)
    else:
        level = core.deeper.get(key, _DRAM)
        counters = core.counters[thread]
        counters[_C_L1I_MISS] += 1
        if level == _DRAM:
            counters[_C_LLC_MISS] += 1
        tags.append(tag)
        if len(tags) > N_WAYS:
            tags.pop(0)
        core.deeper[key] = _L2 if level > _L2 else level
    base = core.profile.base[(_EXECUTE * 5 + level) * 2]
    cycles = _timed(core, base)
    core.clocks[thread] += cycles
    return TimingSample(ProbeKind.EXECUTE, line, cycles, False, _LEVELS[level])


def fetch_line_speculative(core: CoreState, thread: int, line: LineAddr) -> None:
    """Cache movement of an instruction fetch issued down a wrong path.

    Moves the line into L1i exactly like execute_line (MRU insert, LRU
    eviction on a full set, L2 backfill) and counts the misses, but retires
    nothing: no clock advance and no timing sample. A later squash throws
    the work away; the residency change survives it.
    """
    tags = core.sets[line.set_index]
    tag = line.tag
    if tag in tags:
        tags.remove(tag)
        tags.append(tag)
        return
    key = tag * N_SETS + line.set_index
    level = core.deeper.get(key, _DRAM)
    counters = core.counters[thread]
    counters[_C_L1I_MISS] += 1
    if level == _DRAM:
        counters[_C_LLC_MISS] += 1
    tags.append(tag)
    if len(tags) > N_WAYS:
        tags.pop(0)
    core.deeper[key] = _L2 if level > _L2 else level


def branch_mispredict(core: CoreState, thread: int) -> None:
    """Record one squashed branch on the thread's counters."""
    core.counters[thread][_C_BR_MISP] += 1


def plant_line(core: CoreState, line: LineAddr, level: ResidencyLevel) -> None:
    """Place a line at a chosen residency level without timing anything.

    Experiment setup only: it rewrites cache state directly, displacing
    any L1i copy first. Planting at L1I inserts at MRU (evicting the LRU
    way of a full set) and leaves the backing copy in L2, matching the
    state an ordinary fetch would have produced.
    """
    tags = core.sets[line.set_index]
    tag = line.tag
    if tag in tags:
        tags.remove(tag)
    key = tag * N_SETS + line.set_index
    if level == ResidencyLevel.L1I:
        tags.append(tag)
        if len(tags) > N_WAYS:
            tags.pop(0)
        core.deeper[key] = _L2
    else:
        core.deeper[key] = int(level)


def probe_access(core: CoreState, thread: int, kind: ProbeKind,
                 line: LineAddr) -> TimingSample:
    """Touch ``line`` with ``kind`` and return the timed result.

    An SMC machine clear fires iff the profile marks the kind as
    SMC-triggering and the line is L1i-resident at the moment of the access.
    Cache side effects follow the instruction semantics: flush-family kinds
    invalidate, write-family kinds invalidate-then-refetch (the line stays
    resident), prefetch leaves residency alone.
    """
    profile = core.profile
    if not profile.supports(kind):
        raise UnsupportedStrategyError(
            f"profile {profile.name!r} does not implement {kind.name}")
    k = int(kind)
    if k == _EXECUTE:
        return execute_line(core, thread, line)

    tags = core.sets[line.set_index]
    tag = line.tag
    key = tag * N_SETS + line.set_index
    resident = tag in tags
    level = _L1I if resident else core.deeper.get(key, _DRAM)
    smc = resident and kind in profile.smc_kinds

    base = profile.base[(k * 5 + level) * 2 + (1 if smc else 0)]
    if smc:
        _smc_event(core, thread)

    # Cache side effects.
    if k == _FLUSH or k == _FLUSHOPT:
        if resident:
            tags.remove(tag)
        core.deeper[key] = _DRAM
    elif k == _CLWB:
        if smc:
            tags.remove(tag)
            core.deeper[key] = _DRAM
        # A clwb that finds no L1i copy writes back without invalidating.
    elif k == _STORE or k == _LOCKINC:
        if smc:
            # Invalidate-then-refetch: the line returns to L1i immediately,
            # so a write-based probe keeps the set primed.
            tags.remove(tag)
            tags.append(tag)
        core.deeper[key] = _L1D
        if level == _DRAM:
            core.counters[thread][_C_LLC_MISS] += 1
    elif k == _LOAD or k == _PREFETCH or k == _PREFETCHNTA:
        core.deeper[key] = _L1D
        if level == _DRAM:
            core.counters[thread][_C_LLC_MISS] += 1

    cycles = _timed(core, base)
    core.clocks[thread] += cycles
    return TimingSample(kind, line, cycles, smc, _LEVELS[level])


def advance(core: CoreState, thread: int, loop_iterations: int) -> int:
    """Run a dummy loop: the thread's clock moves, one branch retires per
    iteration, and the cache is untouched. Returns the cycles consumed."""
    cycles = loop_iterations * core.profile.cycles_per_loop_iteration
    core.clocks[thread] += cycles
    core.counters[thread][_C_BR_RET] += loop_iterations
    return cycles


def advance_cycles(core: CoreState, thread: int, cycles: int) -> None:
    """Raw clock padding with no counter traffic (scheduler glue)."""
    if cycles > 0:
        core.clocks[thread] += cycles


def snapshot_counters(core: CoreState, thread: int) -> CounterSnapshot:
    """Read-only copy of the thread's counters; never mutates state."""
    c = core.counters[thread]
    return CounterSnapshot(
        clock=core.clocks[thread],
        machine_clears_count=c[_C_MC],
        machine_clears_smc=c[_C_MC_SMC],
        stalls_total=c[_C_STALL],
        l1i_misses=c[_C_L1I_MISS],
        llc_misses=c[_C_LLC_MISS],
        branch_mispredicts=c[_C_BR_MISP],
        branch_retired=c[_C_BR_RET],
    )
