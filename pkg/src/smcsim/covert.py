"""Cross-thread covert channels over L1i SMC conflicts.

The sender encodes a '1' as a burst of code fetches into the watched cache
set and a '0' as a silent dummy-work interval. The receiver runs the chosen
monitoring primitive on its SMT sibling and decodes bits from the run
lengths of active/quiet samples. Transmissions are framed with one '1' on
each side so the decoder can anchor the payload without a shared clock.

Send and receive never share state except the simulated core: the sender is
a cooperative instruction stream, and the receiver interleaves it one
sample quantum at a time, the way two hardware threads would overlap.
"""

from __future__ import annotations

import math
import random
from dataclasses import dataclass, replace
from typing import Iterator, NamedTuple

from .attacks import (ActivitySample, AttackConfig, build_eviction_set,
                      default_hit_threshold, flush_ireload_probe, prime,
                      probe, validate_strategy)
from .core import CoreState, LineAddr, advance, execute_line
from .errors import (ConfigError, NoLeakStrategyError,
                     SharedPagePermissionError)
from .profiles import (LatencyProfile, ProbeKind, ResidencyLevel,
                       noise_override)

RECEIVER = 0
SENDER = 1

# Victim/sender code lines; distinct tag spaces from attacker eviction lines.
SENDER_TAG = 0x5E4D
SHARED_TAG = 0x7A8E

CHANNELS = ("prime_probe", "flush_reload")

# Write-based probes cannot run against a read-only shared code page.
_FR_EXCLUDED = frozenset({ProbeKind.STORE, ProbeKind.LOCKINC})


@dataclass(frozen=True)
class CovertConfig:
    """Timing parameters of one covert channel.

    ``dummy_iterations`` is the '0' symbol length in victim loop iterations
    and ``loads_per_one`` code fetches spread over the same span encode a
    '1'. ``zero_run_length``/``one_run_length`` are the decoder's expected
    samples per symbol; leave them None to have run_channel measure them
    with a zero-noise pilot transmission. The *_offset fields absorb the
    constant edge widening a burst or gap picks up at its boundaries.
    """

    channel: str
    strategy: ProbeKind
    target_set: int = 17
    wait_iterations: int = 1000
    dummy_iterations: int = 10000
    loads_per_one: int = 10
    load_gap_iterations: int | None = None
    run_threshold: int = 2
    hit_threshold: float | None = None
    zero_run_length: float | None = None
    one_run_length: float | None = None
    zero_run_offset: float = 0.0
    one_run_offset: float = 0.0

    def __post_init__(self) -> None:
        if self.channel not in CHANNELS:
            raise ConfigError(f"unknown channel {self.channel!r}")
        if self.dummy_iterations <= 0 or self.loads_per_one <= 0:
            raise ConfigError("symbol durations must be positive")
        if not 0 <= self.target_set < 64:
            raise ConfigError(f"set index out of range: {self.target_set}")

    @property
    def pace_iterations(self) -> int:
        if self.load_gap_iterations is not None:
            return self.load_gap_iterations
        return max(1, self.dummy_iterations // self.loads_per_one)


class ChannelReport(NamedTuple):
    bits_sent: int
    bits_decoded: int
    payload: str
    decoded: str
    errors: int
    error_rate_percent: float
    bit_rate_kbit_s: float
    samples_collected: int
    sender_cycles: int
    receiver_cycles: int
    zero_run_length: float
    one_run_length: float


def default_config(channel: str, strategy: ProbeKind, *,
                   target_set: int = 17) -> CovertConfig:
    """Per-strategy symbol timings.

    clwb needs triple-length symbols because its conflict/miss latency gap
    is the narrowest of the set. The flush variants get a longer dummy
    interval: their probe is the cheapest, so a '0' would otherwise span
    only ~2.5 samples and leave no rounding margin in the decoder.
    """
    if strategy == ProbeKind.CLWB:
        return CovertConfig(channel, strategy, target_set=target_set,
                            dummy_iterations=30000, loads_per_one=30)
    if channel == "prime_probe" and strategy in (ProbeKind.FLUSH,
                                                 ProbeKind.FLUSHOPT):
        return CovertConfig(channel, strategy, target_set=target_set,
                            dummy_iterations=16000)
    return CovertConfig(channel, strategy, target_set=target_set)


def applicable_pairs(profile: LatencyProfile) -> list[tuple[str, ProbeKind]]:
    """Every (channel, strategy) combination that can carry bits on this
    profile: SMC-triggering kinds for prime_probe, minus the write-based
    ones for flush_reload."""
    smc = [k for k in ProbeKind
           if profile.supports(k) and profile.triggers_smc(k)]
    pairs = [("prime_probe", k) for k in smc]
    pairs += [("flush_reload", k) for k in smc if k not in _FR_EXCLUDED]
    return pairs


def random_bits(n: int, seed: int = 0) -> str:
    rng = random.Random(seed)
    return "".join(rng.choice("01") for _ in range(n))


def sender_line(cfg: CovertConfig) -> LineAddr:
    tag = SHARED_TAG if cfg.channel == "flush_reload" else SENDER_TAG
    return LineAddr(cfg.target_set, tag)


def send_ops(cfg: CovertConfig, bits: str,
             line: LineAddr | None = None) -> Iterator[tuple[str, object]]:
    """Cooperative sender program for a payload (no framing).

    Yields ("exec", line) and ("adv", iterations) steps; a scheduler loop
    executes them on the sender thread one sample quantum at a time.
    """
    if line is None:
        line = sender_line(cfg)
    pace = cfg.pace_iterations
    for bit in bits:
        if bit == "1":
            for _ in range(cfg.loads_per_one):
                yield ("exec", line)
                if pace:
                    yield ("adv", pace)
        elif bit == "0":
            yield ("adv", cfg.dummy_iterations)
        else:
            raise ConfigError(f"payload must be binary, got {bit!r}")


class SenderProgram:
    """Sender instruction stream plus scheduling state.

    ``end_clock`` freezes the sender-thread clock the moment the program
    runs out of work; later receiver samples keep stalling the sibling, so
    reading the clock at the end of the sample loop would overcount.
    """

    def __init__(self, cfg: CovertConfig, bits: str,
                 line: LineAddr | None = None) -> None:
        self._ops = send_ops(cfg, bits, line)
        self.done = False
        self.end_clock = 0

    def run_one(self, core: CoreState, thread: int) -> bool:
        """Execute the next sender op; False once the program is done."""
        step = next(self._ops, None)
        if step is None:
            if not self.done:
                self.done = True
                self.end_clock = core.clocks[thread]
            return False
        op, arg = step
        if op == "exec":
            execute_line(core, thread, arg)
        else:
            advance(core, thread, arg)
        return True


def send_bits(core: CoreState, sender_thread: int, bits: str,
              cfg: CovertConfig, line: LineAddr | None = None) -> int:
    """Run the sender alone: each '1' is loads_per_one executions of the
    target line, each '0' one dummy_iterations advance. Returns the sender
    cycles consumed."""
    if not bits:
        raise ConfigError("bits must be non-empty")
    start = core.clocks[sender_thread]
    for op, arg in send_ops(cfg, bits, line):
        if op == "exec":
            execute_line(core, sender_thread, arg)
        else:
            advance(core, sender_thread, arg)
    return core.clocks[sender_thread] - start


def receive_stream(core: CoreState, receiver_thread: int, cfg: CovertConfig,
                   n_samples: int | None = None, *,
                   sender: SenderProgram | None = None,
                   sender_thread: int = SENDER) -> list[ActivitySample]:
    """Sample the channel: prime -> wait -> probe, n_samples times.

    With a SenderProgram attached the receiver loop doubles as the
    scheduler: between wait and probe it runs sender ops until the sender
    clock catches up, and n_samples may be None to keep sampling until the
    program finishes (plus a decoder-sized tail).
    """
    profile = core.profile
    validate_strategy(profile, cfg.strategy)
    if n_samples is None and sender is None:
        raise ConfigError("n_samples is required without a sender program")
    if n_samples is not None and n_samples <= 0:
        raise ConfigError("n_samples must be positive")
    threshold = cfg.hit_threshold
    if threshold is None:
        far = (ResidencyLevel.DRAM if cfg.channel == "flush_reload"
               else ResidencyLevel.L2)
        threshold = default_hit_threshold(profile, cfg.strategy, far)
    acfg = AttackConfig(cfg.strategy, cfg.target_set,
                        wait_iterations=cfg.wait_iterations,
                        hit_threshold=threshold)
    is_pp = cfg.channel == "prime_probe"
    ev = build_eviction_set(cfg.target_set) if is_pp else None
    watched = sender_line(cfg)

    zrl = cfg.zero_run_length or 12.0
    orl = cfg.one_run_length or 12.0
    tail_budget = int(math.ceil(zrl + orl)) + cfg.run_threshold + 4

    samples: list[ActivitySample] = []
    stop_at = n_samples
    index = 0
    while stop_at is None or index < stop_at:
        if is_pp:
            prime(core, receiver_thread, ev)
        advance(core, receiver_thread, cfg.wait_iterations)
        while (sender is not None and not sender.done
               and core.clocks[sender_thread] < core.clocks[receiver_thread]):
            if not sender.run_one(core, sender_thread):
                break
        if is_pp:
            result = probe(core, receiver_thread, ev, acfg)
            activity = result.evicted_detected
            cycles = sum(s.cycles for s in result.samples)
        else:
            activity, sample = flush_ireload_probe(core, receiver_thread,
                                                   watched, acfg)
            cycles = sample.cycles
        samples.append(ActivitySample(index, core.clocks[receiver_thread],
                                      cycles, activity))
        index += 1
        if sender is not None and sender.done and stop_at is None:
            stop_at = index + tail_budget
    if sender is not None and not sender.done:
        sender.end_clock = core.clocks[sender_thread]
    return samples


def _bursts(activity: list[bool], merge_gap: int,
            min_active: int) -> list[tuple[int, int]]:
    """Group active sample indices into bursts, bridging quiet holes of up
    to merge_gap samples, and drop bursts with fewer than min_active hits."""
    idxs = [i for i, a in enumerate(activity) if a]
    if not idxs:
        return []
    spans: list[tuple[int, int]] = []
    start = prev = idxs[0]
    for i in idxs[1:]:
        if i - prev - 1 <= merge_gap:
            prev = i
        else:
            spans.append((start, prev))
            start = prev = i
    spans.append((start, prev))
    return [(a, b) for a, b in spans
            if sum(activity[a:b + 1]) >= min_active]


def decode_bits(samples: list[ActivitySample], cfg: CovertConfig) -> str:
    """Run-length decode: each burst contributes round(span/one_run_length)
    '1's, each inter-burst gap round(gap/zero_run_length) '0's. Bursts with
    fewer active samples than run_threshold are discarded as noise."""
    zrl = cfg.zero_run_length
    orl = cfg.one_run_length
    if zrl is None or orl is None:
        raise ConfigError("run lengths not set; calibrate or pass them")
    activity = [s.activity for s in samples]
    merge_gap = max(1, int(round(zrl / 3.0)))
    spans = _bursts(activity, merge_gap, cfg.run_threshold)
    if not spans:
        return ""
    out: list[str] = []
    prev_end: int | None = None
    for start, end in spans:
        if prev_end is not None:
            gap = start - prev_end - 1
            zeros = int(round((gap - cfg.zero_run_offset) / zrl))
            out.append("0" * max(0, zeros))
        width = end - start + 1
        ones = int(round((width - cfg.one_run_offset) / orl))
        out.append("1" * max(1, ones))
        prev_end = end
    return "".join(out)


def strip_framing(decoded: str) -> str:
    """Remove the leading/trailing '1' frame (and stray outer zeros)."""
    trimmed = decoded.strip("0")
    if len(trimmed) >= 2 and trimmed[0] == "1" and trimmed[-1] == "1":
        return trimmed[1:-1]
    return trimmed[1:] if trimmed.startswith("1") else trimmed


def _pilot_features(samples: list[ActivitySample]) -> list[tuple[str, int]]:
    """Alternating (kind, length) segments of a zero-noise pilot, bridging
    single-sample holes inside bursts."""
    activity = [s.activity for s in samples]
    spans = _bursts(activity, merge_gap=1, min_active=1)
    segments: list[tuple[str, int]] = []
    prev_end: int | None = None
    for start, end in spans:
        if prev_end is not None:
            segments.append(("quiet", start - prev_end - 1))
        segments.append(("burst", end - start + 1))
        prev_end = end
    return segments


def _transmit(profile: LatencyProfile, cfg: CovertConfig, bits: str,
              seed: int) -> tuple[list[ActivitySample], int]:
    """Framed interleaved transmission; returns samples and sender cycles."""
    core = CoreState(profile, seed)
    sender = SenderProgram(cfg, "1" + bits + "1")
    samples = receive_stream(core, RECEIVER, cfg, sender=sender,
                             sender_thread=SENDER)
    return samples, sender.end_clock


def calibrate(profile: LatencyProfile, cfg: CovertConfig,
              seed: int = 0) -> CovertConfig:
    """Measure the decoder's run lengths with zero-noise pilot bursts.

    Pilots of one and nine identical symbols give per-symbol slopes by
    finite differences, independent of any timing model: each extra '0'
    lengthens the single quiet gap by one symbol, and the '1' payloads fuse
    with their frame bits into a single burst of span+2 ones. The slopes
    are fractional (symbol duration need not divide the sample period), so
    the long baseline keeps the per-symbol rounding error under half a
    sample; the intercepts become the constant edge offsets.
    """
    quiet = noise_override(profile, 0.0)
    base = replace(cfg, zero_run_length=None, one_run_length=None,
                   zero_run_offset=0.0, one_run_offset=0.0)
    span = 9  # long enough a baseline to resolve fractional run lengths

    def quiet_gap(bits: str) -> int:
        segs = _pilot_features(_transmit(quiet, base, bits, seed)[0])
        gaps = [n for kind, n in segs if kind == "quiet"]
        if len(gaps) != 1:
            raise ConfigError(
                f"pilot {bits!r} did not separate cleanly on "
                f"{cfg.channel}/{cfg.strategy.name}; adjust symbol durations")
        return gaps[0]

    def burst_span(bits: str) -> int:
        segs = _pilot_features(_transmit(quiet, base, bits, seed)[0])
        bursts = [n for kind, n in segs if kind == "burst"]
        if len(bursts) != 1:
            raise ConfigError(
                f"pilot {bits!r} did not separate cleanly on "
                f"{cfg.channel}/{cfg.strategy.name}; adjust symbol durations")
        return bursts[0]

    q1 = quiet_gap("0")
    qn = quiet_gap("0" * span)
    o3 = burst_span("1")            # fuses with the frame: 3 ones
    on = burst_span("1" * span)     # span + 2 ones
    zrl = max(1.0, (qn - q1) / (span - 1))
    orl = max(0.5, (on - o3) / (span - 1))
    return replace(cfg,
                   zero_run_length=zrl,
                   one_run_length=orl,
                   zero_run_offset=q1 - zrl,
                   one_run_offset=o3 - 3 * orl)


def run_channel(bits: str, cfg: CovertConfig, profile: LatencyProfile,
                seed: int = 2024) -> ChannelReport:
    """Transmit a payload end to end (framed with a '1' on each side,
    sender and receiver interleaved on one core) and score the decode."""
    from .recover import levenshtein

    if any(b not in "01" for b in bits):
        raise ConfigError("payload must be a binary string")
    validate_strategy(profile, cfg.strategy)
    if not profile.triggers_smc(cfg.strategy):
        raise NoLeakStrategyError(
            f"{cfg.strategy.name} does not trigger code-cache conflicts "
            f"on {profile.name}; no covert channel")
    if cfg.channel == "flush_reload" and cfg.strategy in _FR_EXCLUDED:
        raise SharedPagePermissionError(
            f"flush_reload cannot use {cfg.strategy.name}: shared code "
            f"pages are mapped read-only")
    if cfg.zero_run_length is None or cfg.one_run_length is None:
        cfg = calibrate(profile, cfg, seed=seed + 1)
    samples, sender_cycles = _transmit(profile, cfg, bits, seed)
    decoded = strip_framing(decode_bits(samples, cfg))
    errors = levenshtein(decoded, bits)
    denom = max(len(decoded), len(bits), 1)
    seconds = sender_cycles / profile.cycles_per_second
    rate = (len(bits) / seconds / 1000.0) if seconds > 0 else 0.0
    receiver_cycles = samples[-1].clock if samples else 0
    return ChannelReport(
        bits_sent=len(bits),
        bits_decoded=len(decoded),
        payload=bits,
        decoded=decoded,
        errors=errors,
        error_rate_percent=100.0 * errors / denom,
        bit_rate_kbit_s=rate,
        samples_collected=len(samples),
        sender_cycles=sender_cycles,
        receiver_cycles=receiver_cycles,
        zero_run_length=float(cfg.zero_run_length),
        one_run_length=float(cfg.one_run_length),
    )
