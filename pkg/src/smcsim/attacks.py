"""Prime+iProbe and Flush+iReload building blocks.

Both primitives watch for victim code fetches into L1i. Prime+iProbe fills
one cache set with eight attacker lines and re-touches them with an
SMC-triggering instruction: a line that still fires an SMC conflict was
untouched, a fast (non-conflicting) access means the victim evicted it.
Flush+iReload needs a shared code line; the attacker keeps it flushed and
sees an SMC conflict on its own probe only after the victim re-fetched the
line.

The Load kind is accepted as a probe strategy for baseline comparison with
classic data-side eviction probing; its timing direction is inverted (a slow
access means the line was evicted).
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import NamedTuple

from .core import (CoreState, LineAddr, N_WAYS, TimingSample, advance,
                   advance_cycles, execute_line, probe_access)
from .errors import (ConfigError, NoLeakStrategyError,
                     SharedPagePermissionError, UnsupportedStrategyError)
from .profiles import LatencyProfile, ProbeKind, ResidencyLevel

# Tag namespace for attacker-owned eviction lines; victims pick other tags.
ATTACKER_TAG_BASE = 0xA000


@dataclass(frozen=True)
class EvictionSet:
    """Eight attacker lines that together fill one L1i set."""

    set_index: int
    lines: tuple[LineAddr, ...]

    def __post_init__(self) -> None:
        if len(self.lines) != N_WAYS:
            raise ConfigError(f"eviction set needs {N_WAYS} lines")
        if len({ln.tag for ln in self.lines}) != N_WAYS:
            raise ConfigError("eviction set tags must be distinct")
        if any(ln.set_index != self.set_index for ln in self.lines):
            raise ConfigError("eviction set lines must share the set index")


def build_eviction_set(set_index: int, tag_base: int = ATTACKER_TAG_BASE) -> EvictionSet:
    if not 0 <= set_index < 64:
        raise ConfigError(f"set index out of range: {set_index}")
    lines = tuple(LineAddr(set_index, tag_base + way) for way in range(N_WAYS))
    return EvictionSet(set_index, lines)


@dataclass(frozen=True)
class AttackConfig:
    """Parameters of one monitoring loop.

    ``hit_threshold`` separates the SMC-conflict latency from the evicted
    (or, for Load, the cached) latency. ``prime_slot_cycles`` and
    ``probe_slot_cycles`` optionally pad each prime/probe step to a fixed
    budget, the way a constant-time measurement loop would behave; zero
    leaves steps unpadded.
    """

    strategy: ProbeKind
    target_set: int
    wait_iterations: int = 1000
    hit_threshold: float = 0.0
    samples: int = 1
    prime_slot_cycles: int = 0
    probe_slot_cycles: int = 0

    def with_threshold(self, threshold: float) -> "AttackConfig":
        return replace(self, hit_threshold=threshold)


class ProbeResult(NamedTuple):
    """Outcome of re-touching every line of a primed set once."""

    samples: tuple[TimingSample, ...]
    evicted_flags: tuple[bool, ...]
    evicted_detected: bool


class ActivitySample(NamedTuple):
    """One receiver observation: did the victim touch the watched set?"""

    index: int
    clock: int
    cycles: int
    activity: bool


def validate_strategy(profile: LatencyProfile, strategy: ProbeKind) -> None:
    """A probe strategy must raise SMC conflicts on this profile, except the
    Load baseline which works (poorly) from raw timing."""
    if not profile.supports(strategy):
        raise UnsupportedStrategyError(
            f"profile {profile.name!r} does not implement {strategy.name}")
    if strategy == ProbeKind.LOAD:
        return
    if not profile.triggers_smc(strategy):
        raise NoLeakStrategyError(
            f"{strategy.name} does not raise SMC conflicts on {profile.name}; "
            "pick an SMC-triggering kind or the Load baseline")


def default_hit_threshold(profile: LatencyProfile, strategy: ProbeKind,
                          far_level: ResidencyLevel = ResidencyLevel.L2) -> float:
    """Midpoint between the resident-line latency and the latency at the
    level an evicted or flushed line is served from."""
    far = profile.base_cycles(strategy, far_level, False)
    if strategy == ProbeKind.LOAD or not profile.triggers_smc(strategy):
        near = profile.base_cycles(strategy, ResidencyLevel.L1I, False)
    else:
        near = profile.base_cycles(strategy, ResidencyLevel.L1I, True)
    return (near + far) / 2.0


def indicates_resident(profile: LatencyProfile, strategy: ProbeKind,
                       cycles: int, threshold: float) -> bool:
    """Classify one timing: was the line L1i-resident when probed?

    SMC strategies read high on a resident line (the conflict is slow);
    the Load baseline and other non-SMC kinds read low (a hit is fast).
    """
    if profile.triggers_smc(strategy):
        return cycles >= threshold
    return cycles < threshold


def prime(core: CoreState, thread: int, ev: EvictionSet,
          slot_cycles: int = 0) -> None:
    """Execute all eight lines, leaving the set filled with attacker code."""
    for line in ev.lines:
        sample = execute_line(core, thread, line)
        if slot_cycles:
            advance_cycles(core, thread, slot_cycles - sample.cycles)


def probe(core: CoreState, thread: int, ev: EvictionSet,
          cfg: AttackConfig) -> ProbeResult:
    """Touch every line with the configured strategy and classify each."""
    profile = core.profile
    strategy = cfg.strategy
    threshold = cfg.hit_threshold
    slot = cfg.probe_slot_cycles
    samples = []
    flags = []
    for line in ev.lines:
        sample = probe_access(core, thread, strategy, line)
        if slot:
            advance_cycles(core, thread, slot - sample.cycles)
        samples.append(sample)
        flags.append(not indicates_resident(profile, strategy, sample.cycles, threshold))
    return ProbeResult(tuple(samples), tuple(flags), any(flags))


def prime_probe_sample(core: CoreState, thread: int, ev: EvictionSet,
                       cfg: AttackConfig) -> ProbeResult:
    """One prime -> wait -> probe round."""
    prime(core, thread, ev, cfg.prime_slot_cycles)
    advance(core, thread, cfg.wait_iterations)
    return probe(core, thread, ev, cfg)


def flush_ireload_probe(core: CoreState, thread: int, line: LineAddr,
                        cfg: AttackConfig) -> tuple[bool, TimingSample]:
    """Probe one shared code line and re-arm it for the next round.

    Returns (activity, sample) where activity means the victim fetched the
    line into L1i since the previous probe. Write-based strategies are
    rejected: shared code pages are mapped without write permission.
    """
    if cfg.strategy in (ProbeKind.STORE, ProbeKind.LOCKINC):
        raise SharedPagePermissionError(
            f"{cfg.strategy.name} cannot target a read-only shared code page")
    sample = probe_access(core, thread, cfg.strategy, line)
    activity = indicates_resident(core.profile, cfg.strategy, sample.cycles,
                                  cfg.hit_threshold)
    # Strategies that do not invalidate on their own (prefetch, load) leave
    # the line resident; reset it so the next round starts flushed.
    if core.l1i_resident(line):
        probe_access(core, thread, ProbeKind.FLUSH, line)
    return activity, sample
