"""Trace analysis: turning activity streams back into key material.

Covers the post-processing stages of the key-recovery pipeline: a
from-scratch kNN classifier for library fingerprinting and multiplication-
set detection, run-length decoding of square-and-multiply traces, duration
classification of sliding-window traces into the seven observable patterns,
multi-trace aggregation, and leakage-rate scoring.
"""

from __future__ import annotations

import csv
import math
from collections import Counter
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .attacks import ActivitySample
from .errors import ConfigError
from .victims import ExponentSecret

# Samples between consecutive multiplication hits: a '11' pair shows the
# base gap, and every interleaved zero bit widens it by the per-zero step.
RSA_BASE_GAP = 3
RSA_ZERO_STEP = 2

DEFAULT_SRP_COSTS = {"square": 2000, "multiply": 6000, "per_window_bit": 2000}

# The seven distinguishable sliding-window shapes, shortest first.
SRP_PATTERNS = ("0", "1", "11", "1X1", "1XX1", "1XXX1", "1XXXX1")


@dataclass(frozen=True)
class ActivityVector:
    """Per-set activity totals: the 64-dimensional cache fingerprint."""

    counts: tuple[int, ...]

    def __post_init__(self) -> None:
        if len(self.counts) != 64:
            raise ConfigError("activity vector must have exactly 64 counts")
        if any(c < 0 for c in self.counts):
            raise ConfigError("activity counts are non-negative")


@dataclass(frozen=True)
class DecodedKey:
    """Recovered symbol string over {0, 1, X} plus coverage statistics."""

    symbols: str
    known_fraction: float
    correct_fraction: float | None = None

    def __post_init__(self) -> None:
        if not 0.0 <= self.known_fraction <= 1.0:
            raise ConfigError("known_fraction out of range")


def _decoded(symbols: str, correct: float | None = None) -> DecodedKey:
    known = sum(1 for s in symbols if s != "X")
    frac = known / len(symbols) if symbols else 0.0
    return DecodedKey(symbols, frac, correct)


# ---------------------------------------------------------------------------
# kNN (from scratch; the fingerprinting stages need nothing fancier)


@dataclass(frozen=True)
class KnnModel:
    points: tuple[tuple[float, ...], ...]
    labels: tuple[object, ...]
    k: int


def knn_train(dataset: Sequence[tuple[Sequence[float], object]],
              k: int = 3) -> KnnModel:
    if not dataset:
        raise ConfigError("empty training set")
    if k % 2 == 0 or k < 1:
        raise ConfigError("k must be odd and positive")
    if k > len(dataset):
        raise ConfigError("k exceeds the training set size")
    dim = len(dataset[0][0])
    if any(len(vec) != dim for vec, _ in dataset):
        raise ConfigError("inconsistent training dimensions")
    points = tuple(tuple(float(x) for x in vec) for vec, _ in dataset)
    labels = tuple(label for _, label in dataset)
    return KnnModel(points, labels, k)


def knn_classify(model: KnnModel, vector: Sequence[float]) -> object:
    if len(vector) != len(model.points[0]):
        raise ConfigError("query dimension mismatch")
    q = tuple(float(x) for x in vector)
    dists = []
    for idx, point in enumerate(model.points):
        d = math.sqrt(sum((a - b) ** 2 for a, b in zip(point, q)))
        dists.append((d, idx))
    dists.sort()
    votes = Counter(model.labels[idx] for _, idx in dists[:model.k])
    best = max(votes.values())
    tied = [label for label, n in votes.items() if n == best]
    # deterministic tie-break: smallest label in sort order
    return min(tied, key=lambda lab: (str(type(lab)), lab))


def fingerprint_library(model: KnnModel, vector: ActivityVector) -> object:
    return knn_classify(model, vector.counts)


def activity_vector(per_set_traces: Sequence[Sequence[ActivitySample]],
                    ) -> ActivityVector:
    """Reduce 64 per-set traces to their activity totals."""
    if len(per_set_traces) != 64:
        raise ConfigError("need one activity trace per cache set")
    return ActivityVector(tuple(sum(1 for s in trace if s.activity)
                                for trace in per_set_traces))


def detect_multiplication_set(per_set_traces: Sequence[Sequence[ActivitySample]],
                              model: KnnModel) -> int | None:
    """Find the cache set carrying the multiplication signal.

    Each set's trace is reduced to its activity count and binary-classified;
    among positives the highest count wins. Returns None when no set
    classifies positive.
    """
    if len(per_set_traces) != 64:
        raise ConfigError("need one activity trace per cache set")
    if len({len(t) for t in per_set_traces}) > 1:
        raise ConfigError("per-set traces must have equal length")
    positive = []
    for idx, trace in enumerate(per_set_traces):
        count = sum(1 for s in trace if s.activity)
        if knn_classify(model, (count,)):
            positive.append((count, idx))
    if not positive:
        return None
    return max(positive)[1]


# ---------------------------------------------------------------------------
# Edit distance and alignment


def _dp_row(prev: np.ndarray, arr_b: np.ndarray, ch: int, i: int,
            offsets: np.ndarray) -> np.ndarray:
    """One Levenshtein DP row, insertion chain folded into a running min.

    cur[j] = min over k <= j of (base[k] + j - k), where base combines the
    substitute/delete candidates and the row origin.
    """
    base = np.empty(len(arr_b) + 1, dtype=np.int32)
    base[0] = i
    np.minimum(prev[:-1] + (arr_b != ch), prev[1:] + 1, out=base[1:])
    return np.minimum.accumulate(base - offsets) + offsets


def levenshtein(a: str, b: str) -> int:
    """Plain edit distance (unit insert/delete/substitute)."""
    if a == b:
        return 0
    if not a or not b:
        return len(a) or len(b)
    arr_b = np.frombuffer(b.encode("latin-1"), dtype=np.uint8)
    offsets = np.arange(len(b) + 1, dtype=np.int32)
    prev = offsets.copy()
    for i, ch in enumerate(a.encode("latin-1"), start=1):
        prev = _dp_row(prev, arr_b, ch, i, offsets)
    return int(prev[-1])


def align(a: str, b: str) -> list[tuple[int | None, int | None]]:
    """Minimal edit-script alignment as (index_a, index_b) pairs.

    None marks a gap (insertion/deletion). Identical strings short-circuit
    to the identity pairing.
    """
    if a == b:
        return [(i, i) for i in range(len(a))]
    n, m = len(a), len(b)
    arr_b = np.frombuffer(b.encode("latin-1"), dtype=np.uint8)
    offsets = np.arange(m + 1, dtype=np.int32)
    dist = np.zeros((n + 1, m + 1), dtype=np.int32)
    dist[0, :] = offsets
    for i, ch in enumerate(a.encode("latin-1"), start=1):
        dist[i, :] = _dp_row(dist[i - 1, :], arr_b, ch, i, offsets)
    pairs: list[tuple[int | None, int | None]] = []
    i, j = n, m
    while i > 0 or j > 0:
        if i > 0 and j > 0 and dist[i, j] == dist[i - 1, j - 1] + (a[i - 1] != b[j - 1]):
            pairs.append((i - 1, j - 1))
            i, j = i - 1, j - 1
        elif i > 0 and dist[i, j] == dist[i - 1, j] + 1:
            pairs.append((i - 1, None))
            i -= 1
        else:
            pairs.append((None, j - 1))
            j -= 1
    pairs.reverse()
    return pairs


# ---------------------------------------------------------------------------
# RSA square-and-multiply decoding


def decode_rsa_trace(samples: Sequence[ActivitySample],
                     base_gap: int = RSA_BASE_GAP,
                     zero_step: int = RSA_ZERO_STEP,
                     expected_length: int | None = None) -> DecodedKey:
    """Decode one Prime+iProbe trace of a square-and-multiply victim.

    Every activity sample is one multiplication, hence one '1' bit; the
    quiet gap g between consecutive activities hides round((g - base_gap) /
    zero_step) '0' bits. Trailing zero bits never produce activity, so the
    known key length pads the tail when given.
    """
    hits = [s.index for s in samples if s.activity]
    if not hits:
        symbols = "0" * expected_length if expected_length else ""
        return _decoded(symbols)
    bits = ["1"]
    for prev, nxt in zip(hits, hits[1:]):
        gap = nxt - prev - 1
        zeros = int(round((gap - base_gap) / zero_step))
        bits.append("0" * max(0, zeros))
        bits.append("1")
    symbols = "".join(bits)
    if expected_length is not None and len(symbols) < expected_length:
        symbols += "0" * (expected_length - len(symbols))
    return _decoded(symbols)


def aggregate_traces(decoded: Sequence[DecodedKey],
                     ground_length: int) -> DecodedKey:
    """Combine noisy decodes by per-position majority vote.

    Every trace is aligned to the longest one with a minimal edit script;
    positions where no symbol wins a strict majority stay X. The longest
    decode makes the best voting frame here because misses outnumber
    spurious detections, so shorter traces are the more corrupted ones.
    """
    if not decoded:
        raise ConfigError("nothing to aggregate")
    reference = max((d.symbols for d in decoded), key=len)
    votes: list[Counter] = [Counter() for _ in reference]
    for d in decoded:
        for ref_idx, trace_idx in align(reference, d.symbols):
            if ref_idx is None or trace_idx is None:
                continue
            sym = d.symbols[trace_idx]
            if sym != "X":
                votes[ref_idx][sym] += 1
    out = []
    for counter in votes:
        if not counter:
            out.append("X")
            continue
        (top, n), *rest = counter.most_common(2)
        if rest and rest[0][1] == n:
            out.append("X")
        else:
            out.append(top)
    symbols = "".join(out)
    if len(symbols) < ground_length:
        symbols += "X" * (ground_length - len(symbols))
    else:
        symbols = symbols[:ground_length]
    return _decoded(symbols)


# ---------------------------------------------------------------------------
# SRP sliding-window decoding


def srp_pattern_durations(costs: dict = DEFAULT_SRP_COSTS) -> dict[str, int]:
    """Expected loop-iteration duration of each observable pattern.

    A lone zero is one square. A window spanning n bits costs the leading
    square plus the multiply plus one per-window-bit increment for each of
    the n-1 additional bits, matching the measured 2000-cycles-per-extra-
    window-bit ladder.
    """
    for key in ("square", "multiply", "per_window_bit"):
        if costs.get(key, 0) <= 0:
            raise ConfigError(f"cost {key!r} must be positive")
    sq, mul, pwb = costs["square"], costs["multiply"], costs["per_window_bit"]
    durations = {"0": sq}
    for pattern in SRP_PATTERNS[1:]:
        durations[pattern] = sq + mul + (len(pattern) - 1) * pwb
    return durations


def decode_srp_trace(gaps: Sequence[int],
                     costs: dict = DEFAULT_SRP_COSTS) -> DecodedKey:
    """Classify inter-iteration cycle gaps into the seven window patterns.

    Nearest expected duration wins; exact ties go to the shorter pattern.
    A gap more than 50% beyond the longest pattern is an outlier and emits
    a run of X placeholders sized by the square cost.
    """
    durations = srp_pattern_durations(costs)
    ordered = sorted(durations.items(), key=lambda kv: (kv[1], len(kv[0])))
    longest = ordered[-1][1]
    out = []
    for gap in gaps:
        if gap > longest * 1.5:
            out.append("X" * max(1, int(round(gap / costs["square"]))))
            continue
        best = min(ordered, key=lambda kv: (abs(gap - kv[1]), len(kv[0])))
        out.append(best[0])
    return _decoded("".join(out))


def leakage_rate(decoded: DecodedKey, truth: ExponentSecret) -> float:
    """Percent of determinable (non-X) symbols matching the true bits.

    Alignment by minimal edit script absorbs insertions/deletions so a
    single slip does not cascade into a block mismatch.
    """
    symbols = decoded.symbols
    if len(symbols) == len(truth.bits):
        # positional scoring bounds the aligned score from below and 100%
        # bounds it from above, so a clean positional match is exact and
        # skips the quadratic alignment
        known = sum(1 for s in symbols if s != "X")
        if known and all(s == "X" or s == t
                         for s, t in zip(symbols, truth.bits)):
            return 100.0
    pairs = align(decoded.symbols, truth.bits)
    known = 0
    correct = 0
    for di, ti in pairs:
        if di is None:
            continue
        sym = decoded.symbols[di]
        if sym == "X":
            continue
        known += 1
        if ti is not None and truth.bits[ti] == sym:
            correct += 1
    if known == 0:
        return 0.0
    return 100.0 * correct / known


# ---------------------------------------------------------------------------
# Trace CSV round-trip (the CLI's on-disk format)


def write_activity_csv(path, samples: Iterable[ActivitySample]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["sample_index", "clock", "cycles", "activity"])
        for s in samples:
            writer.writerow([s.index, s.clock, s.cycles, int(s.activity)])


def read_activity_csv(path) -> list[ActivitySample]:
    out = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            out.append(ActivitySample(int(row["sample_index"]),
                                      int(row["clock"]),
                                      int(row["cycles"]),
                                      bool(int(row["activity"]))))
    return out
