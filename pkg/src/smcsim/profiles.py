"""Hardware timing profiles.

A profile bundles everything timing-related the simulator needs for one
microarchitecture: per-instruction base latencies keyed by where the target
line currently resides, which probe kinds raise a self-modifying-code (SMC)
machine clear when they touch an L1i-resident line, timer granularity, and
the fixed penalty the sibling SMT thread pays per SMC event.

Profiles are plain key/value text files shipped under ``smcsim/data``.
Unknown keys are rejected so that a typo in a config cannot silently fall
back to a default.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Iterable

from .errors import ConfigError, UnsupportedStrategyError


class ProbeKind(enum.IntEnum):
    """Instruction used to touch a monitored cache line."""

    LOAD = 0
    FLUSH = 1
    FLUSHOPT = 2
    STORE = 3
    LOCKINC = 4
    PREFETCH = 5
    PREFETCHNTA = 6
    EXECUTE = 7
    CLWB = 8

    @classmethod
    def parse(cls, text: str) -> "ProbeKind":
        try:
            return cls[text.strip().upper()]
        except KeyError:
            raise ConfigError(f"unknown probe kind: {text!r}") from None


class ResidencyLevel(enum.IntEnum):
    """Deepest point of the memory hierarchy a line is currently served from."""

    L1I = 0
    L1D = 1
    L2 = 2
    LLC = 3
    DRAM = 4


_LEVELS = (ResidencyLevel.L1I, ResidencyLevel.L1D, ResidencyLevel.L2,
           ResidencyLevel.LLC, ResidencyLevel.DRAM)

# Scalar keys a profile file may define, with parsers.
_SCALAR_KEYS = {
    "name": str,
    "timer_granularity": int,
    "noise_sigma": float,
    "sibling_stall": int,
    "smc_stall_cycles": int,
    "cycles_per_loop_iteration": int,
    "cycles_per_second": float,
    "separability_gap": int,
    "support_column": str,
}


@dataclass(frozen=True)
class LatencyProfile:
    """Timing model for one microarchitecture.

    ``base`` maps (kind, level, smc_fired) to a latency in cycles, flattened
    for cheap lookup. Entries with ``smc_fired=True`` exist only for kinds in
    ``smc_kinds`` (an SMC conflict requires L1i residency).
    """

    name: str
    timer_granularity: int
    noise_sigma: float
    sibling_stall: int
    smc_stall_cycles: int
    cycles_per_loop_iteration: int
    cycles_per_second: float
    separability_gap: int
    support_column: str
    smc_kinds: frozenset[ProbeKind]
    unsupported_kinds: frozenset[ProbeKind]
    base: tuple[int, ...] = field(repr=False)

    def triggers_smc(self, kind: ProbeKind) -> bool:
        return kind in self.smc_kinds

    def supports(self, kind: ProbeKind) -> bool:
        return kind not in self.unsupported_kinds

    def base_cycles(self, kind: ProbeKind, level: ResidencyLevel,
                    smc_fired: bool = False) -> int:
        """Deterministic latency component for one access."""
        if not self.supports(kind):
            raise UnsupportedStrategyError(
                f"profile {self.name!r} does not implement {kind.name}")
        if smc_fired and (level != ResidencyLevel.L1I or kind not in self.smc_kinds):
            raise ValueError("SMC latency only defined for SMC kinds at L1I")
        return self.base[(int(kind) * 5 + int(level)) * 2 + (1 if smc_fired else 0)]


def _parse_kv_lines(text: str, source: str) -> list[tuple[str, str]]:
    pairs = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
        key, value = line.split("=", 1)
        pairs.append((key.strip(), value.strip()))
    return pairs


def _parse_kinds(value: str) -> frozenset[ProbeKind]:
    names = value.replace(",", " ").split()
    return frozenset(ProbeKind.parse(n) for n in names)


def parse_profile(text: str, source: str = "<profile>") -> LatencyProfile:
    scalars: dict[str, object] = {}
    latency_rows: dict[ProbeKind, tuple[int, ...]] = {}
    smc_latency: dict[ProbeKind, int] = {}
    smc_kinds: frozenset[ProbeKind] = frozenset()
    unsupported: frozenset[ProbeKind] = frozenset()

    for key, value in _parse_kv_lines(text, source):
        if key in _SCALAR_KEYS:
            try:
                scalars[key] = _SCALAR_KEYS[key](value)
            except ValueError as exc:
                raise ConfigError(f"{source}: bad value for {key}: {value!r}") from exc
        elif key == "smc_kinds":
            smc_kinds = _parse_kinds(value)
        elif key == "unsupported_kinds":
            unsupported = _parse_kinds(value)
        elif key.startswith("latency_smc."):
            kind = ProbeKind.parse(key.split(".", 1)[1])
            smc_latency[kind] = int(value)
        elif key.startswith("latency."):
            kind = ProbeKind.parse(key.split(".", 1)[1])
            cols = value.split()
            if len(cols) != 5:
                raise ConfigError(
                    f"{source}: latency.{kind.name.lower()} needs 5 columns "
                    "(l1i l1d l2 llc dram)")
            latency_rows[kind] = tuple(int(c) for c in cols)
        else:
            raise ConfigError(f"{source}: unknown profile key: {key!r}")

    missing = [k for k in _SCALAR_KEYS if k not in scalars]
    if missing:
        raise ConfigError(f"{source}: missing keys: {', '.join(missing)}")

    for kind in ProbeKind:
        if kind in unsupported:
            continue
        if kind not in latency_rows:
            raise ConfigError(f"{source}: no latency row for {kind.name}")
    for kind in smc_kinds:
        if kind in unsupported:
            raise ConfigError(f"{source}: {kind.name} both SMC-triggering and unsupported")
        if kind not in smc_latency:
            raise ConfigError(f"{source}: no latency_smc row for SMC kind {kind.name}")
    for kind in smc_latency:
        if kind not in smc_kinds:
            raise ConfigError(f"{source}: latency_smc given for non-SMC kind {kind.name}")

    base = [0] * (len(ProbeKind) * 5 * 2)
    for kind in ProbeKind:
        row = latency_rows.get(kind, (0, 0, 0, 0, 0))
        for level in _LEVELS:
            idx = (int(kind) * 5 + int(level)) * 2
            base[idx] = row[int(level)]
        if kind in smc_latency:
            base[(int(kind) * 5 + int(ResidencyLevel.L1I)) * 2 + 1] = smc_latency[kind]

    if int(scalars["timer_granularity"]) < 1:
        raise ConfigError(f"{source}: timer_granularity must be >= 1")

    return LatencyProfile(
        name=str(scalars["name"]),
        timer_granularity=int(scalars["timer_granularity"]),
        noise_sigma=float(scalars["noise_sigma"]),
        sibling_stall=int(scalars["sibling_stall"]),
        smc_stall_cycles=int(scalars["smc_stall_cycles"]),
        cycles_per_loop_iteration=int(scalars["cycles_per_loop_iteration"]),
        cycles_per_second=float(scalars["cycles_per_second"]),
        separability_gap=int(scalars["separability_gap"]),
        support_column=str(scalars["support_column"]),
        smc_kinds=smc_kinds,
        unsupported_kinds=unsupported,
        base=tuple(base),
    )


def _data_text(filename: str) -> str:
    return resources.files("smcsim.data").joinpath(filename).read_text()


def list_profiles() -> list[str]:
    """Names of profiles shipped with the package."""
    out = []
    for entry in resources.files("smcsim.data").iterdir():
        if entry.name.endswith(".profile"):
            out.append(entry.name[: -len(".profile")])
    return sorted(out)


def load_profile(name_or_path: str) -> LatencyProfile:
    """Load a shipped profile by name, or any profile file by path."""
    path = Path(name_or_path)
    if path.suffix == ".profile" and path.exists():
        return parse_profile(path.read_text(), source=str(path))
    try:
        text = _data_text(f"{name_or_path}.profile")
    except FileNotFoundError:
        raise ConfigError(
            f"unknown profile {name_or_path!r}; shipped: {', '.join(list_profiles())}"
        ) from None
    return parse_profile(text, source=name_or_path)


def noise_override(profile: LatencyProfile, noise_sigma: float) -> LatencyProfile:
    """Copy of ``profile`` with a different noise level (calibration knob)."""
    if noise_sigma < 0:
        raise ConfigError("noise_sigma must be >= 0")
    return LatencyProfile(
        name=profile.name,
        timer_granularity=profile.timer_granularity,
        noise_sigma=noise_sigma,
        sibling_stall=profile.sibling_stall,
        smc_stall_cycles=profile.smc_stall_cycles,
        cycles_per_loop_iteration=profile.cycles_per_loop_iteration,
        cycles_per_second=profile.cycles_per_second,
        separability_gap=profile.separability_gap,
        support_column=profile.support_column,
        smc_kinds=profile.smc_kinds,
        unsupported_kinds=profile.unsupported_kinds,
        base=profile.base,
    )


def iter_kind_level_pairs() -> Iterable[tuple[ProbeKind, ResidencyLevel]]:
    for kind in ProbeKind:
        for level in _LEVELS:
            yield kind, level
