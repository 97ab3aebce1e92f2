"""End-to-end key-recovery drivers: attacker and victim on one core.

The attacker's sample loop doubles as the SMT scheduler. Each round runs
prime -> wait, then victim steps execute until the victim's clock catches
up with the attacker's, then the probe fires — the same clock-keyed
interleave the covert channel uses, with an exponentiation victim in place
of the cooperating sender.

Timing arithmetic of the square-and-multiply attack: with constant-time
prime/probe slots the sample period is fixed, and every probe whose eight
accesses all conflict costs the victim eight sibling stalls. The victim op
costs are sized against that stall-reduced budget so a square spans exactly
two sample periods; the multiply gets one extra stall's worth of cycles
because the probe that detects its eviction fires only seven conflicts.
That makes multiplication activity land on a fixed sample grid: two
consecutive multiplies show a three-sample quiet gap, widening by two per
zero bit in between.
"""

from __future__ import annotations

from typing import Callable, Iterable, NamedTuple

from .attacks import (ActivitySample, AttackConfig, build_eviction_set,
                      default_hit_threshold, prime, probe, validate_strategy)
from .core import CoreState, advance
from .errors import ConfigError
from .profiles import LatencyProfile, ProbeKind, ResidencyLevel
from .recover import (DEFAULT_SRP_COSTS, DecodedKey, aggregate_traces,
                      decode_rsa_trace, decode_srp_trace, leakage_rate)
from .victims import (ExponentSecret, SrpParams, TraceEvent, VictimStep,
                      run_step, sliding_window_modpow, sliding_window_steps,
                      square_multiply_steps)

ATTACKER = 0
VICTIM = 1

# Square-and-multiply monitoring. The wait is tuned so one sample takes
# ~7000 cycles; the slots are ceilings on every prime/probe access latency
# (DRAM code fetch, conflict store/flush) so the period never varies.
RSA_WAIT_ITERATIONS = 700
RSA_PRIME_SLOT_CYCLES = 300
RSA_PROBE_SLOT_CYCLES = 500

# System-load noise level for the noisy recovery benchmarks. The profile's
# own sigma models timer jitter on an idle machine; key recovery under
# co-running load is benchmarked at this higher level, calibrated against
# the store-probe pipeline so a single trace leaks roughly two thirds of
# the key and ten aggregated traces pass seventy percent (measured on
# 256-bit exponents: single 66-69%, ten-trace 71-73%).
RSA_NOISE_SIGMA = 103.0

# Where between the evicted latency and the conflict latency the activity
# threshold sits. Well below the midpoint: a miss merely merges one gap
# (cheap to outvote across traces), while a false alarm on any of the
# eight probed lines fabricates a multiplication, so the attacker trades
# miss rate for a near-zero false-alarm rate.
RSA_THRESHOLD_FRACTION = 0.17

# Sliding-window monitoring runs unpadded and with no wait: the victim's
# per-sample cycle budget must stay well under half the 2000-cycle pattern
# spacing, or quantization would blur neighbouring window durations.
SRP_WAIT_ITERATIONS = 0


class VictimProgram:
    """Cooperative victim instruction stream, stepped by the scheduler.

    ``end_clock`` freezes the victim-thread clock when the last step
    retires; the attacker keeps sampling (and stalling the sibling) for a
    few tail rounds after that.
    """

    def __init__(self, steps: Iterable[VictimStep]) -> None:
        self._steps = iter(steps)
        self.events: list[TraceEvent] = []
        self.done = False
        self.end_clock = 0

    def run_one(self, core: CoreState, thread: int) -> bool:
        """Execute the next victim step; False once the program is done."""
        step = next(self._steps, None)
        if step is None:
            if not self.done:
                self.done = True
                self.end_clock = core.clocks[thread]
            return False
        self.events.append(run_step(core, thread, step))
        return True


def monitor_victim(core: CoreState, cfg: AttackConfig, victim: VictimProgram,
                   attacker_thread: int = ATTACKER,
                   victim_thread: int = VICTIM,
                   max_samples: int | None = None,
                   tail_samples: int = 8) -> list[ActivitySample]:
    """Prime+iProbe sampling loop with the victim interleaved.

    Runs until the victim program finishes (plus a short tail), or for
    exactly max_samples rounds when given.
    """
    validate_strategy(core.profile, cfg.strategy)
    ev = build_eviction_set(cfg.target_set)
    # Warm the set once, then start the victim at the monitor's clock. The
    # duration estimator relies on the victim-ahead-of-monitor slack being
    # the same at both ends of a gap; a victim that starts cold at clock
    # zero enters its first window without the one-square overshoot every
    # later window begins with, and that window alone reads short.
    prime(core, attacker_thread, ev, cfg.prime_slot_cycles)
    skew = core.clocks[attacker_thread] - core.clocks[victim_thread]
    if skew > 0:
        advance(core, victim_thread,
                skew // core.profile.cycles_per_loop_iteration)
    samples: list[ActivitySample] = []
    stop_at = max_samples
    index = 0
    while stop_at is None or index < stop_at:
        prime(core, attacker_thread, ev, cfg.prime_slot_cycles)
        advance(core, attacker_thread, cfg.wait_iterations)
        while (not victim.done
               and core.clocks[victim_thread] < core.clocks[attacker_thread]):
            if not victim.run_one(core, victim_thread):
                break
        result = probe(core, attacker_thread, ev, cfg)
        cycles = sum(s.cycles for s in result.samples)
        samples.append(ActivitySample(index, core.clocks[attacker_thread],
                                      cycles, result.evicted_detected))
        index += 1
        if victim.done and stop_at is None:
            stop_at = index + tail_samples
    return samples


# ---------------------------------------------------------------------------
# Square-and-multiply (RSA) recovery


class RsaAttackReport(NamedTuple):
    decoded: DecodedKey
    correct_percent: float
    per_trace_percent: tuple[float, ...]
    samples_per_trace: tuple[int, ...]


def rsa_attack_config(profile: LatencyProfile,
                      target_set: int,
                      strategy: ProbeKind = ProbeKind.FLUSH,
                      threshold_fraction: float = RSA_THRESHOLD_FRACTION,
                      ) -> AttackConfig:
    fast = profile.base_cycles(strategy, ResidencyLevel.L2, False)
    slow = profile.base_cycles(strategy, ResidencyLevel.L1I, True)
    threshold = fast + threshold_fraction * (slow - fast)
    return AttackConfig(strategy, target_set,
                        wait_iterations=RSA_WAIT_ITERATIONS,
                        hit_threshold=threshold,
                        prime_slot_cycles=RSA_PRIME_SLOT_CYCLES,
                        probe_slot_cycles=RSA_PROBE_SLOT_CYCLES)


def rsa_sample_period(profile: LatencyProfile, cfg: AttackConfig) -> int:
    """Attacker cycles per slotted prime->wait->probe round."""
    return (8 * cfg.prime_slot_cycles
            + cfg.wait_iterations * profile.cycles_per_loop_iteration
            + 8 * cfg.probe_slot_cycles)


def rsa_victim_costs(profile: LatencyProfile,
                     cfg: AttackConfig) -> tuple[int, int]:
    """Victim op costs that pin multiplications to the sample grid.

    Per sample the victim progresses period-minus-eight-stalls own cycles,
    so a square of twice that budget spans two samples exactly. The probe
    that detects a multiply fires only seven conflicts, handing the victim
    one stall back; the multiply cost absorbs it to keep the grid aligned.
    """
    budget = rsa_sample_period(profile, cfg) - 8 * profile.sibling_stall
    if budget <= 0:
        raise ConfigError("sample period shorter than the induced stalls")
    return 2 * budget, 2 * budget + profile.sibling_stall


def run_rsa_trace(profile: LatencyProfile, secret: ExponentSecret,
                  target_set: int = 21, seed: int = 0,
                  strategy: ProbeKind = ProbeKind.FLUSH,
                  ) -> tuple[DecodedKey, list[ActivitySample]]:
    """One interleaved decryption observation, decoded to a bit string."""
    core = CoreState(profile, seed)
    cfg = rsa_attack_config(profile, target_set, strategy)
    square_cost, multiply_cost = rsa_victim_costs(profile, cfg)
    victim = VictimProgram(square_multiply_steps(secret, target_set,
                                                 square_cost, multiply_cost))
    samples = monitor_victim(core, cfg, victim)
    decoded = decode_rsa_trace(samples, expected_length=secret.bit_length)
    return decoded, samples


def run_rsa_attack(profile: LatencyProfile, secret: ExponentSecret,
                   target_set: int = 21, n_traces: int = 1, seed: int = 0,
                   strategy: ProbeKind = ProbeKind.FLUSH) -> RsaAttackReport:
    """Full key-recovery run: n_traces observations, majority-aggregated."""
    if n_traces < 1:
        raise ConfigError("need at least one trace")
    decodes = []
    rates = []
    counts = []
    for i in range(n_traces):
        decoded, samples = run_rsa_trace(profile, secret, target_set,
                                         seed + i, strategy)
        decodes.append(decoded)
        rates.append(leakage_rate(decoded, secret))
        counts.append(len(samples))
    combined = (decodes[0] if n_traces == 1
                else aggregate_traces(decodes, secret.bit_length))
    return RsaAttackReport(combined, leakage_rate(combined, secret),
                           tuple(rates), tuple(counts))


def scan_set_activity(profile: LatencyProfile,
                      victim_factory: Callable[[], Iterable[VictimStep]],
                      n_samples: int = 100, seed: int = 0,
                      strategy: ProbeKind = ProbeKind.STORE,
                      ) -> list[list[ActivitySample]]:
    """Monitor each of the 64 L1i sets in turn against a fresh victim run.

    The per-set traces feed library fingerprinting and multiplication-set
    detection; reduce them with activity_vector for the 64-count form.
    """
    if n_samples < 1:
        raise ConfigError("n_samples must be positive")
    traces = []
    for set_index in range(64):
        core = CoreState(profile, seed + set_index)
        cfg = rsa_attack_config(profile, set_index, strategy)
        victim = VictimProgram(victim_factory())
        traces.append(monitor_victim(core, cfg, victim, max_samples=n_samples))
    return traces


# ---------------------------------------------------------------------------
# Sliding-window (SRP) recovery


class SrpAttackReport(NamedTuple):
    decoded: DecodedKey
    leakage_percent: float
    x_fraction: float
    server_key: int | None
    samples_collected: int


def srp_attack_config(profile: LatencyProfile, target_set: int,
                      strategy: ProbeKind = ProbeKind.STORE) -> AttackConfig:
    threshold = default_hit_threshold(profile, strategy, ResidencyLevel.L2)
    return AttackConfig(strategy, target_set,
                        wait_iterations=SRP_WAIT_ITERATIONS,
                        hit_threshold=threshold)


def srp_cycle_gaps(samples: list[ActivitySample],
                   profile: LatencyProfile) -> list[int]:
    """Victim cycles between consecutive loop-line fetches.

    The wall-clock distance between two activity probes includes the
    stalls the attacker injected meanwhile: eight per probe, less the one
    relieved at the detecting probe. Subtracting them recovers the
    victim's own cycle spend, i.e. the loop-iteration duration.
    """
    stall = profile.sibling_stall
    hits = [s for s in samples if s.activity]
    gaps = []
    for a, b in zip(hits, hits[1:]):
        wall = b.clock - a.clock
        rounds = b.index - a.index
        gaps.append(wall - 8 * stall * rounds + stall)
    return gaps


def run_srp_attack(profile: LatencyProfile, params: SrpParams,
                   loop_set: int = 21, window_max: int = 6, seed: int = 0,
                   costs: dict = DEFAULT_SRP_COSTS) -> SrpAttackReport:
    """Single-trace attack on the server session-key exponentiation."""
    core = CoreState(profile, seed)
    cfg = srp_attack_config(profile, loop_set)
    tmp = params.A * pow(params.v, params.u, params.N) % params.N
    server_key = sliding_window_modpow(tmp, params.b.value, params.N,
                                       window_max)
    victim = VictimProgram(sliding_window_steps(
        params.b, loop_set, window_max,
        costs["square"], costs["multiply"], costs["per_window_bit"]))
    samples = monitor_victim(core, cfg, victim)
    gaps = srp_cycle_gaps(samples, profile)
    decoded = decode_srp_trace(gaps, costs)
    return SrpAttackReport(
        decoded=decoded,
        leakage_percent=leakage_rate(decoded, params.b),
        x_fraction=1.0 - decoded.known_fraction,
        server_key=server_key,
        samples_collected=len(samples),
    )


def srp_costs_for_group(group_bits: int,
                        base: dict = DEFAULT_SRP_COSTS) -> dict[str, int]:
    """Iteration costs scaled to the group size.

    Larger moduli mean wider limbs per Montgomery operation; observed
    square gaps grow faster than linearly with the group size (about 10x
    from 1024 to 6144 bits), which a 1.3-power law reproduces.
    """
    if group_bits < 1:
        raise ConfigError("group_bits must be positive")
    scale = (group_bits / 1024.0) ** 1.3
    return {key: max(1, int(round(value * scale)))
            for key, value in base.items()}
