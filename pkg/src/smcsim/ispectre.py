"""Spectre-v1 leakage through the instruction cache.

The gadget is a bounds check guarding an indirect call whose target is one
line of a 256-line oracle code page, indexed by the loaded byte. Mistraining
the check lets an out-of-bounds call run far enough down the wrong path to
fetch the oracle line for a secret byte into L1i; the squash keeps the
fetch's cache movement, and a per-line timing scan of the page names the
byte. Which probe kinds can read that residue back, and whether they do it
through an SMC machine clear or a raw latency difference, varies by part and
is shipped as a data table the simulator honors as-is.
"""

from __future__ import annotations

import enum
from collections import Counter
from dataclasses import dataclass, field
from functools import lru_cache
from importlib import resources
from typing import NamedTuple

from .core import (CoreState, LineAddr, TimingSample, advance,
                   branch_mispredict, execute_line, fetch_line_speculative,
                   probe_access)
from .errors import ConfigError, UnsupportedStrategyError
from .profiles import LatencyProfile, ProbeKind, ResidencyLevel

ATTACKER = 0
VICTIM = 1

# 256 consecutive lines starting here sweep all 64 sets four times over,
# on tags disjoint from the attacker eviction sets and the modular-exp
# victims' code lines.
ORACLE_PAGE_BASE = 0x4000000

DEFAULT_MISTRAIN_ROUNDS = 3


class SupportClass(enum.Enum):
    """How a probe kind behaves against L1i residency on a given part."""

    LEAKS_WITH_SMC = "L"
    LEAKS_WITHOUT_SMC = "W"
    NO_LEAK = "N"
    UNSUPPORTED = "U"


@dataclass(frozen=True)
class StrategySupport:
    """Per-microarchitecture applicability of every probe kind."""

    columns: tuple[str, ...]
    rows: dict[ProbeKind, tuple[SupportClass, ...]]

    def lookup(self, column: str, kind: ProbeKind) -> SupportClass:
        if column not in self.columns:
            raise ConfigError(f"unknown support column: {column!r}")
        if kind not in self.rows:
            raise ConfigError(f"no support row for {kind.name}")
        return self.rows[kind][self.columns.index(column)]

    def for_profile(self, profile: LatencyProfile) -> dict[ProbeKind, SupportClass]:
        return {kind: self.lookup(profile.support_column, kind)
                for kind in self.rows}


def load_support_table(path: str | None = None) -> StrategySupport:
    """Parse the applicability table (shipped copy when no path given)."""
    if path is None:
        text = resources.files("smcsim.data").joinpath(
            "applicability.table").read_text()
    else:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    columns: tuple[str, ...] | None = None
    rows: dict[ProbeKind, tuple[SupportClass, ...]] = {}
    for raw in text.splitlines():
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, _, value = line.partition("=")
        key = key.strip()
        fields = value.split()
        if key == "columns":
            columns = tuple(fields)
            continue
        kind = ProbeKind.parse(key)
        if columns is None:
            raise ConfigError("support table rows precede the columns line")
        if len(fields) != len(columns):
            raise ConfigError(f"support row {key!r} has {len(fields)} entries "
                              f"for {len(columns)} columns")
        try:
            rows[kind] = tuple(SupportClass(f) for f in fields)
        except ValueError as exc:
            raise ConfigError(f"bad support flag in row {key!r}") from exc
    if columns is None:
        raise ConfigError("support table has no columns line")
    missing = [k.name for k in ProbeKind if k not in rows]
    if missing:
        raise ConfigError(f"support table misses rows: {', '.join(missing)}")
    return StrategySupport(columns, rows)


@lru_cache(maxsize=1)
def default_support_table() -> StrategySupport:
    return load_support_table()


@dataclass
class PhtEntry:
    """2-bit saturating counter for the one victim branch site."""

    counter: int = 0

    def __post_init__(self) -> None:
        if not 0 <= self.counter <= 3:
            raise ConfigError("PHT counter is 2-bit")

    @property
    def predicts_taken(self) -> bool:
        return self.counter >= 2

    def record(self, taken: bool) -> None:
        if taken:
            self.counter = min(3, self.counter + 1)
        else:
            self.counter = max(0, self.counter - 1)


@dataclass
class SpectreVictim:
    """Bounds-checked gadget, its oracle page, and the branch state.

    In-bounds indices read ``notsecret``; indices past ``array_len`` address
    the secret placed directly after the array.
    """

    array_len: int
    notsecret: tuple[int, ...]
    secret: bytes
    oracle_page: tuple[LineAddr, ...]
    speculative_window: int = 1
    pht: PhtEntry = field(default_factory=PhtEntry)

    def __post_init__(self) -> None:
        if self.array_len < 1 or len(self.notsecret) != self.array_len:
            raise ConfigError("notsecret must hold exactly array_len bytes")
        if any(not 0 <= v <= 255 for v in self.notsecret):
            raise ConfigError("notsecret values are bytes")
        if len(self.oracle_page) != 256:
            raise ConfigError("oracle page needs one line per byte value")
        if len(set(self.oracle_page)) != 256:
            raise ConfigError("oracle lines must be distinct (set, tag) pairs")
        if self.speculative_window < 1:
            raise ConfigError("speculative window must cover the oracle call")


def make_victim(secret: bytes, array_len: int = 16,
                notsecret_value: int = 0,
                oracle_base: int = ORACLE_PAGE_BASE) -> SpectreVictim:
    """Victim with a contiguous oracle page and a constant in-bounds array."""
    if oracle_base % 64:
        raise ConfigError("oracle page must be line-aligned")
    page = tuple(LineAddr.from_address(oracle_base + v * 64)
                 for v in range(256))
    return SpectreVictim(array_len, (notsecret_value,) * array_len,
                         bytes(secret), page)


def mistrain(victim: SpectreVictim, core: CoreState, rounds: int) -> None:
    """Drive the bounds check taken until the predictor saturates."""
    if rounds < 1:
        raise ConfigError("mistraining needs at least one round")
    for _ in range(rounds):
        victim_call(victim, core, 0)


def victim_call(victim: SpectreVictim, core: CoreState, index: int) -> None:
    """One gadget invocation on the victim thread.

    The architectural path runs only in bounds. An out-of-bounds call under
    a taken prediction speculatively fetches the oracle line of the secret
    byte at that offset before the squash; only the cache movement and the
    mispredict count survive.
    """
    if index < 0:
        raise ConfigError("negative index")
    in_bounds = index < victim.array_len
    predicted_taken = victim.pht.predicts_taken
    if in_bounds:
        execute_line(core, VICTIM, victim.oracle_page[victim.notsecret[index]])
    elif predicted_taken:
        offset = index - victim.array_len
        if offset >= len(victim.secret):
            raise ConfigError("index reaches past the planted secret")
        if victim.speculative_window >= 1:
            fetch_line_speculative(core, VICTIM,
                                   victim.oracle_page[victim.secret[offset]])
    if predicted_taken != in_bounds:
        branch_mispredict(core, VICTIM)
    victim.pht.record(in_bounds)
    advance(core, VICTIM, 1)


def _scan_thresholds(profile: LatencyProfile, kind: ProbeKind,
                     cls: SupportClass) -> tuple[float, bool]:
    """Residency threshold for a scan sample, and whether hot means slow."""
    if cls is SupportClass.LEAKS_WITH_SMC:
        cold = profile.base_cycles(kind, ResidencyLevel.DRAM, False)
        hot = profile.base_cycles(kind, ResidencyLevel.L1I, True)
        return (cold + hot) / 2.0, True
    cold = profile.base_cycles(kind, ResidencyLevel.DRAM, False)
    hot = profile.base_cycles(kind, ResidencyLevel.L1I, False)
    return (cold + hot) / 2.0, False


def leak_byte(victim: SpectreVictim, core: CoreState, attacker_thread: int,
              strategy: ProbeKind, oob_index: int,
              support: StrategySupport | None = None,
              mistrain_rounds: int = DEFAULT_MISTRAIN_ROUNDS,
              ) -> tuple[int | None, tuple[TimingSample, ...]]:
    """One flush, mistrain, out-of-bounds call, and full oracle scan.

    Returns the recovered byte value (None when nothing shows a residency
    signature) plus the raw 256-sample scan. The mistraining calls leave
    their own oracle line resident, so that known line is discounted; when
    it is the only hot line after a speculated call, the secret byte
    collided with the training value and that value is the answer.
    """
    if support is None:
        support = default_support_table()
    cls = support.lookup(core.profile.support_column, strategy)
    if cls is SupportClass.UNSUPPORTED:
        raise UnsupportedStrategyError(
            f"{strategy.name} is not implemented on {core.profile.name}")
    if cls is SupportClass.NO_LEAK:
        return None, ()
    for line in victim.oracle_page:
        probe_access(core, attacker_thread, ProbeKind.FLUSH, line)
    if mistrain_rounds > 0:
        mistrain(victim, core, mistrain_rounds)
    speculated = victim.pht.predicts_taken
    victim_call(victim, core, oob_index)
    scan = tuple(probe_access(core, attacker_thread, strategy, line)
                 for line in victim.oracle_page)

    threshold, hot_is_slow = _scan_thresholds(core.profile, strategy, cls)
    if hot_is_slow:
        hot = [v for v, s in enumerate(scan) if s.cycles > threshold]
    else:
        hot = [v for v, s in enumerate(scan) if s.cycles < threshold]
    training = {victim.notsecret[0]} if mistrain_rounds > 0 else set()
    candidates = [v for v in hot if v not in training]
    if candidates:
        pick = max if hot_is_slow else min
        return pick(candidates, key=lambda v: scan[v].cycles), scan
    if speculated and hot:
        return min(hot), scan
    return None, scan


class SpectreLeakReport(NamedTuple):
    recovered: bytes
    leak_rate_bytes_s: float
    success_percent: float


def leak_secret(victim: SpectreVictim, core: CoreState, strategy: ProbeKind,
                iterations_per_byte: int = 1,
                support: StrategySupport | None = None,
                mistrain_rounds: int = DEFAULT_MISTRAIN_ROUNDS,
                ) -> SpectreLeakReport:
    """Recover the whole planted secret, majority-voting per byte.

    The rate is attacker cycles against the profile clock; a byte with no
    surviving votes is reported as 0x00 and scored wrong.
    """
    if not victim.secret:
        raise ConfigError("victim carries no secret")
    if iterations_per_byte < 1:
        raise ConfigError("need at least one iteration per byte")
    start = core.clocks[ATTACKER]
    out = []
    for offset in range(len(victim.secret)):
        votes: Counter[int] = Counter()
        for _ in range(iterations_per_byte):
            byte, _scan = leak_byte(victim, core, ATTACKER, strategy,
                                    victim.array_len + offset,
                                    support=support,
                                    mistrain_rounds=mistrain_rounds)
            if byte is not None:
                votes[byte] += 1
        if votes:
            best = max(votes.values())
            out.append(min(v for v, n in votes.items() if n == best))
        else:
            out.append(0)
    recovered = bytes(out)
    elapsed = core.clocks[ATTACKER] - start
    rate = (len(recovered) * core.profile.cycles_per_second / elapsed
            if elapsed else 0.0)
    matches = sum(a == b for a, b in zip(recovered, victim.secret))
    return SpectreLeakReport(recovered, rate,
                             100.0 * matches / len(victim.secret))
