"""Instrumented exponentiation victims.

Two leaky modular-exponentiation routines run as the second hardware thread
of a simulated core: textbook left-to-right square-and-multiply (one
multiply per set bit) and the OpenSSL 1.1.1 sliding-window walk (window of
up to 6 bits accumulated around set bits). Their secret-dependent code
fetches are what the L1i monitoring primitives observe.

Arithmetic runs at small-integer scale. That is deliberate: the channel
leaks the square/multiply schedule, not limb values, so the control flow is
faithful while the numbers stay small enough to check against a naive
modpow oracle.
"""

from __future__ import annotations

import random
from dataclasses import dataclass
from typing import Iterable, Iterator, NamedTuple

from .core import CoreState, LineAddr, advance_cycles, execute_line
from .errors import ConfigError

SQUARE = "square"
MULTIPLY = "multiply"

# Victim code lines live in their own tag namespace so they never alias
# attacker eviction lines or covert-channel sender lines.
VICTIM_TAG = 0x1C0D

DEFAULT_SQUARE_COST = 2000
DEFAULT_MULTIPLY_COST = 6000
DEFAULT_PER_WINDOW_BIT_COST = 2000

GROUP_SIZES = (1024, 2048, 4096, 6144)


@dataclass(frozen=True)
class ExponentSecret:
    """Secret exponent, MSB-first bit string."""

    bits: str

    def __post_init__(self) -> None:
        if not self.bits or any(b not in "01" for b in self.bits):
            raise ConfigError("exponent bits must be a non-empty binary string")

    @property
    def bit_length(self) -> int:
        return len(self.bits)

    @property
    def value(self) -> int:
        return int(self.bits, 2)


class TraceEvent(NamedTuple):
    op: str
    clock: int
    window_value: int | None


@dataclass(frozen=True)
class ExponentiationTrace:
    events: tuple[TraceEvent, ...]
    ground_truth_bits: str
    result: int | None = None

    def ops(self) -> str:
        """Compact op string, 'S' per square and 'M' per multiply."""
        return "".join("M" if e.op == MULTIPLY else "S" for e in self.events)


@dataclass(frozen=True)
class SrpParams:
    """Server-side inputs of the SRP session key computation."""

    N: int
    g: int
    A: int
    v: int
    u: int
    b: ExponentSecret
    group_bits: int = 1024

    def __post_init__(self) -> None:
        if not (1 < self.A < self.N and 1 < self.v < self.N):
            raise ConfigError("A and v must be residues in (1, N)")
        if self.group_bits not in GROUP_SIZES:
            raise ConfigError(f"group_bits must be one of {GROUP_SIZES}")


def generate_exponent(bit_length: int, seed: int) -> ExponentSecret:
    if bit_length < 8:
        raise ConfigError("exponent must be at least 8 bits")
    rng = random.Random(seed)
    tail = "".join(rng.choice("01") for _ in range(bit_length - 1))
    return ExponentSecret("1" + tail)


def window_schedule(bits: str, window_max: int = 6,
                    ) -> list[tuple[str, int, int]]:
    """Sliding-window walk over MSB-first bits.

    Returns ("zero", 1, 0) for a lone skipped zero bit and
    ("window", span, wvalue) for each accumulated window, where span =
    wend + 1 bits are consumed and wvalue is the odd multiplier. The scan
    extends the window to the furthest set bit within window_max, exactly
    the OpenSSL BN_mod_exp_mont shift-and-or accumulation.
    """
    if not 1 <= window_max <= 6:
        raise ConfigError("window_max must be in [1, 6]")
    out: list[tuple[str, int, int]] = []
    i = 0
    n = len(bits)
    while i < n:
        if bits[i] == "0":
            out.append(("zero", 1, 0))
            i += 1
            continue
        wvalue = 1
        wend = 0
        for j in range(1, window_max):
            if i + j >= n:
                break
            if bits[i + j] == "1":
                wvalue = (wvalue << (j - wend)) | 1
                wend = j
        out.append(("window", wend + 1, wvalue))
        i += wend + 1
    return out


def sliding_window_modpow(base: int, exponent: int, modulus: int,
                          window_max: int = 6) -> int:
    """Pure arithmetic twin of the instrumented sliding-window victim."""
    if modulus <= 0:
        raise ConfigError("modulus must be positive")
    if exponent < 0:
        raise ConfigError("exponent must be non-negative")
    if exponent == 0:
        return 1 % modulus
    schedule = window_schedule(format(exponent, "b"), window_max)
    base %= modulus
    # precomputed odd-power table, built incrementally up to the largest
    # window value the schedule actually uses
    needed = sorted({wv for kind, _, wv in schedule if kind == "window"})
    table: dict[int, int] = {}
    if needed:
        base_sq = base * base % modulus
        power, value = 1, base
        for wv in needed:
            while power < wv:
                value = value * base_sq % modulus
                power += 2
            table[wv] = value
    acc = 1
    for kind, span, wvalue in schedule:
        if kind == "zero":
            acc = acc * acc % modulus
        else:
            for _ in range(span):
                acc = acc * acc % modulus
            acc = acc * table[wvalue] % modulus
    return acc


# ---------------------------------------------------------------------------
# Instrumented execution


class VictimStep(NamedTuple):
    """One constant-cost victim operation.

    The executor fetches the code lines, records the event, then pads the
    victim clock so the step costs exactly ``cost`` own-cycles regardless
    of cache state. Sibling-induced stalls land between steps and stretch
    wall time without touching the own-cycle budget.
    """

    op: str
    lines: tuple[LineAddr, ...]
    cost: int
    window_value: int | None


def run_step(core: CoreState, thread: int, step: VictimStep) -> TraceEvent:
    start = core.clocks[thread]
    for line in step.lines:
        execute_line(core, thread, line)
    spent = core.clocks[thread] - start
    if spent < step.cost:
        advance_cycles(core, thread, step.cost - spent)
    return TraceEvent(step.op, start, step.window_value)


def square_multiply_steps(secret: ExponentSecret, mul_set: int,
                          square_cost: int = DEFAULT_SQUARE_COST,
                          multiply_cost: int = DEFAULT_MULTIPLY_COST,
                          ) -> Iterator[VictimStep]:
    """Left-to-right binary exponentiation: square per bit, multiply on 1.

    The multiply executes a line in the monitored set; squares run from a
    different set so only multiplications disturb the attacker's lines.
    """
    mul_line = LineAddr(mul_set, VICTIM_TAG)
    square_line = LineAddr((mul_set + 11) % 64, VICTIM_TAG)
    for bit in secret.bits:
        yield VictimStep(SQUARE, (square_line,), square_cost, None)
        if bit == "1":
            yield VictimStep(MULTIPLY, (mul_line,), multiply_cost, None)


def sliding_window_steps(secret: ExponentSecret, loop_set: int,
                         window_max: int = 6,
                         square_cost: int = DEFAULT_SQUARE_COST,
                         multiply_cost: int = DEFAULT_MULTIPLY_COST,
                         per_window_bit_cost: int = DEFAULT_PER_WINDOW_BIT_COST,
                         ) -> Iterator[VictimStep]:
    """Sliding-window exponentiation with the loop-jump line instrumented.

    The loop-jump line (in the monitored set) is fetched once per outer
    loop iteration, i.e. once per lone zero bit and once per window, so the
    gap between consecutive fetches equals that iteration's total cost.
    Inside a window the first square carries the base square cost and each
    additional window bit adds per_window_bit_cost, matching the measured
    per-extra-bit increment.
    """
    loop_line = LineAddr(loop_set, VICTIM_TAG)
    square_line = LineAddr((loop_set + 9) % 64, VICTIM_TAG)
    mul_line = LineAddr((loop_set + 13) % 64, VICTIM_TAG)
    for kind, span, wvalue in window_schedule(secret.bits, window_max):
        if kind == "zero":
            yield VictimStep(SQUARE, (loop_line, square_line), square_cost, None)
            continue
        yield VictimStep(SQUARE, (loop_line, square_line), square_cost, None)
        for _ in range(span - 1):
            yield VictimStep(SQUARE, (square_line,), per_window_bit_cost, None)
        yield VictimStep(MULTIPLY, (mul_line,), multiply_cost, wvalue)


def _drive(core: CoreState, thread: int, steps: Iterable[VictimStep],
           secret: ExponentSecret, result: int | None) -> ExponentiationTrace:
    events = tuple(run_step(core, thread, step) for step in steps)
    return ExponentiationTrace(events, secret.bits, result)


def run_square_multiply(core: CoreState, victim_thread: int,
                        secret: ExponentSecret, mul_set: int,
                        base: int = 7, modulus: int = 65521,
                        square_cost: int = DEFAULT_SQUARE_COST,
                        multiply_cost: int = DEFAULT_MULTIPLY_COST,
                        ) -> ExponentiationTrace:
    """Run the square-and-multiply victim to completion on one thread."""
    acc = 1
    for bit in secret.bits:
        acc = acc * acc % modulus
        if bit == "1":
            acc = acc * base % modulus
    steps = square_multiply_steps(secret, mul_set, square_cost, multiply_cost)
    return _drive(core, victim_thread, steps, secret, acc)


def run_sliding_window(core: CoreState, victim_thread: int,
                       secret: ExponentSecret, window_max: int = 6,
                       loop_set: int = 21,
                       base: int = 7, modulus: int = 65521,
                       square_cost: int = DEFAULT_SQUARE_COST,
                       multiply_cost: int = DEFAULT_MULTIPLY_COST,
                       per_window_bit_cost: int = DEFAULT_PER_WINDOW_BIT_COST,
                       ) -> ExponentiationTrace:
    """Run the sliding-window victim to completion on one thread."""
    result = sliding_window_modpow(base, secret.value, modulus, window_max)
    steps = sliding_window_steps(secret, loop_set, window_max,
                                 square_cost, multiply_cost,
                                 per_window_bit_cost)
    return _drive(core, victim_thread, steps, secret, result)


def srp_server_key(core: CoreState, victim_thread: int, params: SrpParams,
                   **kwargs) -> tuple[int, ExponentiationTrace]:
    """Server side of the SRP session key: S = (A * v^u)^b mod N.

    The u-exponentiation is public-input arithmetic and runs
    uninstrumented; only the b-exponentiation leaks.
    """
    tmp = params.A * pow(params.v, params.u, params.N) % params.N
    trace = run_sliding_window(core, victim_thread, params.b,
                               base=tmp, modulus=params.N, **kwargs)
    return trace.result, trace


def random_srp_params(group_bits: int, seed: int) -> SrpParams:
    """A deterministic random server-side instance at a nominal group size.

    The modulus is the widest odd value of the group width; the protocol
    residues are drawn from the seed. Only the exponent's bit pattern
    drives the observable schedule, so this is enough variety for
    recovery experiments.
    """
    if group_bits not in GROUP_SIZES:
        raise ConfigError(f"group_bits must be one of {GROUP_SIZES}")
    rng = random.Random(seed)
    modulus = (1 << group_bits) - 159
    return SrpParams(N=modulus, g=7,
                     A=rng.randrange(2, modulus),
                     v=rng.randrange(2, modulus),
                     u=rng.getrandbits(32) | 1,
                     b=generate_exponent(group_bits, rng.getrandbits(30)),
                     group_bits=group_bits)
