"""Deterministic simulator of SMC-conflict timing channels on an SMT core.

The package models a two-thread x86-like core whose L1i cache and
self-modifying-code detection machinery leak cross-thread information:
monitoring primitives (Prime+iProbe, Flush+iReload), covert channels,
key-recovery attacks against square-and-multiply and sliding-window
exponentiation, a Spectre-v1 variant that leaks through L1i, and a
performance-counter detection pipeline.
"""

from .core import (CoreState, CounterSnapshot, LineAddr, TimingSample,
                   advance, advance_cycles, branch_mispredict, execute_line,
                   fetch_line_speculative, plant_line, probe_access,
                   set_index, snapshot_counters)
from .errors import (ConfigError, NoLeakStrategyError,
                     SharedPagePermissionError, SimError,
                     UnsupportedStrategyError)
from .profiles import (LatencyProfile, ProbeKind, ResidencyLevel,
                       list_profiles, load_profile, noise_override,
                       parse_profile)

__version__ = "0.1.0"
