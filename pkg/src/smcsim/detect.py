"""Counter-based detection of SMC-conflict attacks.

Builds a synthetic workload corpus (quiet benign, JIT-heavy benign, and the
two attack shapes), slices each run into fixed-cycle counter windows, and
trains small per-counter classifiers to measure which counters actually
separate attacks from busy benign code. The JIT-like benign workload exists
to make the classic cache-miss counters ambiguous: its code sweeps miss as
hard as an attack round, while its legitimate write-to-own-code bursts are
the only benign source of SMC machine clears.
"""

from __future__ import annotations

import csv
import enum
import random
from dataclasses import dataclass
from typing import Iterable, NamedTuple, Sequence

from .attacks import (AttackConfig, build_eviction_set, default_hit_threshold,
                      flush_ireload_probe, prime, probe)
from .core import (CoreState, LineAddr, advance, advance_cycles, execute_line,
                   probe_access, snapshot_counters)
from .errors import ConfigError
from .profiles import LatencyProfile, ProbeKind, ResidencyLevel
from .recover import KnnModel, knn_classify, knn_train

# One "100 ms" collection window at the profile's 3 GHz clock constant.
WINDOW_CYCLES = 300_000_000

COUNTER_NAMES = ("machine_clears_count", "machine_clears_smc", "stalls_total",
                 "l1i_misses", "llc_misses", "branch_mispredicts",
                 "branch_retired")
CACHE_MISS_COUNTERS = ("l1i_misses", "llc_misses")

# Tag bases keeping workload code lines away from the attack structures.
_QUIET_TAG = 0x5000
_JIT_TAG = 0x6000

# Attack activity per window. Both bursts finish early in the window and
# idle to the boundary, like a trigger-driven attacker between handshakes.
PNP_ROUNDS_PER_WINDOW = 150
FR_ROUNDS_PER_WINDOW = 600


class WorkloadKind(enum.Enum):
    BENIGN_QUIET = "benign-quiet"
    BENIGN_JIT_LIKE = "benign-jit-like"
    ATTACK_PNP = "attack-pnp"
    ATTACK_FR = "attack-fr"


class WindowLabel(enum.Enum):
    BENIGN = "benign"
    PRIME_IPROBE = "prime-iprobe"
    FLUSH_IRELOAD = "flush-ireload"


_WORKLOAD_LABEL = {
    WorkloadKind.BENIGN_QUIET: WindowLabel.BENIGN,
    WorkloadKind.BENIGN_JIT_LIKE: WindowLabel.BENIGN,
    WorkloadKind.ATTACK_PNP: WindowLabel.PRIME_IPROBE,
    WorkloadKind.ATTACK_FR: WindowLabel.FLUSH_IRELOAD,
}


@dataclass(frozen=True)
class CounterWindow:
    """One window's counter deltas plus its ground-truth label."""

    values: dict[str, int]
    window_index: int
    label: WindowLabel

    def __post_init__(self) -> None:
        if tuple(self.values) != COUNTER_NAMES:
            raise ConfigError("window carries an unexpected counter set")
        if any(v < 0 for v in self.values.values()):
            raise ConfigError("counter deltas are non-negative")


def is_attack(window: CounterWindow) -> bool:
    return window.label is not WindowLabel.BENIGN


def _window_delta(before, after) -> dict[str, int]:
    return {name: getattr(after, name) - getattr(before, name)
            for name in COUNTER_NAMES}


def _quiet_activity(core: CoreState, rng: random.Random) -> None:
    # A small hot loop: the working set fits L1i, so steady windows barely
    # miss. Some branches retire to look like real computation.
    for i in range(24):
        execute_line(core, 0, LineAddr((i * 5) % 64, _QUIET_TAG + i // 8))
    advance(core, 0, rng.randint(40_000, 160_000))


def _jit_activity(core: CoreState, rng: random.Random) -> None:
    # Code working set far past L1i capacity: the sweep misses at the same
    # order of magnitude as an attack window's probe traffic.
    sweep = rng.randint(350, 1400)
    start = rng.randint(0, 1024)
    for i in range(sweep):
        n = start + i
        execute_line(core, 0, LineAddr(n % 64, _JIT_TAG + (n // 64) % 24))
    # Occasional legitimate self-modification: recompile a hot line, then
    # patch it in place. Each store to the resident line is one SMC clear.
    if rng.random() < 0.10:
        heavy = rng.random() < 0.12
        writes = rng.randint(280, 680) if heavy else rng.randint(12, 90)
        hot = LineAddr(rng.randrange(64), _JIT_TAG - 1)
        execute_line(core, 0, hot)
        for _ in range(writes):
            probe_access(core, 0, ProbeKind.STORE, hot)
    advance(core, 0, rng.randint(8_000, 120_000))


def _pnp_activity(core: CoreState, cfg: AttackConfig, ev) -> None:
    # Steady monitoring: every probe hits all 8 primed ways, so each round
    # contributes exactly 8 SMC machine clears.
    for _ in range(PNP_ROUNDS_PER_WINDOW):
        prime(core, 0, ev)
        advance(core, 0, cfg.wait_iterations)
        probe(core, 0, ev, cfg)


def _fr_activity(core: CoreState, cfg: AttackConfig, line: LineAddr) -> None:
    # Flush-then-reload on one shared line: the flush clears the previous
    # round's reload, one SMC per round after the first.
    for _ in range(FR_ROUNDS_PER_WINDOW):
        flush_ireload_probe(core, 0, line, cfg)
        execute_line(core, 0, line)
        advance(core, 0, 40)


def generate_workload(kind: WorkloadKind, core: CoreState,
                      duration_windows: int,
                      window_cycles: int = WINDOW_CYCLES,
                      ) -> list[CounterWindow]:
    """Drive one workload and slice its counters into labeled windows."""
    if duration_windows < 1:
        raise ConfigError("need at least one window")
    rng = random.Random(core.rng.random())
    label = _WORKLOAD_LABEL[kind]

    pnp_cfg = pnp_ev = fr_cfg = fr_line = None
    if kind is WorkloadKind.ATTACK_PNP:
        pnp_cfg = AttackConfig(
            ProbeKind.STORE, 21, wait_iterations=700,
            hit_threshold=default_hit_threshold(core.profile, ProbeKind.STORE,
                                                ResidencyLevel.L2))
        pnp_ev = build_eviction_set(pnp_cfg.target_set)
    elif kind is WorkloadKind.ATTACK_FR:
        fr_cfg = AttackConfig(
            ProbeKind.FLUSH, 21, wait_iterations=0,
            hit_threshold=default_hit_threshold(core.profile, ProbeKind.FLUSH,
                                                ResidencyLevel.L2))
        fr_line = LineAddr(fr_cfg.target_set, _JIT_TAG + 99)

    windows = []
    before = snapshot_counters(core, 0)
    start = core.clocks[0]
    for index in range(duration_windows):
        if kind is WorkloadKind.BENIGN_QUIET:
            _quiet_activity(core, rng)
        elif kind is WorkloadKind.BENIGN_JIT_LIKE:
            _jit_activity(core, rng)
        elif kind is WorkloadKind.ATTACK_PNP:
            _pnp_activity(core, pnp_cfg, pnp_ev)
        else:
            _fr_activity(core, fr_cfg, fr_line)
        boundary = start + (index + 1) * window_cycles
        advance_cycles(core, 0, boundary - core.clocks[0])
        after = snapshot_counters(core, 0)
        windows.append(CounterWindow(_window_delta(before, after), index, label))
        before = after
    return windows


def build_corpus(profile: LatencyProfile, seed: int = 0,
                 n_benign: int = 20, n_attack: int = 12,
                 windows_per_run: int = 20,
                 window_cycles: int = WINDOW_CYCLES,
                 jit_fraction: float = 0.35) -> list[CounterWindow]:
    """The shipped evaluation corpus: 20 benign and 12 attack executions.

    ``jit_fraction`` sets how much of the benign side is the JIT-heavy
    workload; zero gives the quiet-only corpus used as the easy baseline.
    """
    if n_benign < 2 or n_attack < 2:
        raise ConfigError("corpus needs both benign variety and attacks")
    if not 0.0 <= jit_fraction <= 1.0:
        raise ConfigError("jit_fraction must lie in [0, 1]")
    n_jit = round(n_benign * jit_fraction)
    runs = ([WorkloadKind.BENIGN_QUIET] * (n_benign - n_jit)
            + [WorkloadKind.BENIGN_JIT_LIKE] * n_jit
            + [WorkloadKind.ATTACK_PNP] * (n_attack - n_attack // 2)
            + [WorkloadKind.ATTACK_FR] * (n_attack // 2))
    corpus = []
    for i, kind in enumerate(runs):
        core = CoreState(profile, seed * 1009 + i)
        corpus.extend(generate_workload(kind, core, windows_per_run,
                                        window_cycles))
    return corpus


# ---------------------------------------------------------------------------
# Detector models


class ModelKind(enum.Enum):
    THRESHOLD = "threshold"
    STUMP = "stump"
    KNN = "knn"


@dataclass(frozen=True)
class DetectorModel:
    """Fitted detector: which counters it reads and how it cuts them."""

    kind: ModelKind
    counters: tuple[str, ...]
    threshold: float | None = None
    direction: str = "gt"
    knn: KnnModel | None = None

    def __post_init__(self) -> None:
        if not self.counters:
            raise ConfigError("detector needs at least one counter")
        if self.direction not in ("gt", "le"):
            raise ConfigError("direction is 'gt' or 'le'")


def predict(model: DetectorModel, window: CounterWindow) -> bool:
    """True when the window classifies as attack."""
    vec = [window.values[c] for c in model.counters]
    if model.kind is ModelKind.KNN:
        return bool(knn_classify(model.knn, vec))
    if model.direction == "gt":
        return vec[0] > model.threshold
    return vec[0] <= model.threshold


def _split_candidates(values: Sequence[int]) -> list[float]:
    uniq = sorted(set(values))
    mids = [(a + b) / 2.0 for a, b in zip(uniq, uniq[1:])]
    return [uniq[0] - 1.0] + mids + [uniq[-1] + 1.0]


def _fit_cut(train: Sequence[CounterWindow], counter: str,
             directions: tuple[str, ...]) -> tuple[int, float, str]:
    """Best (hits, threshold, direction) for a single-counter cut."""
    values = [w.values[counter] for w in train]
    truth = [is_attack(w) for w in train]
    best = (-1, 0.0, "gt")
    for direction in directions:
        for cand in _split_candidates(values):
            if direction == "gt":
                hits = sum((v > cand) == t for v, t in zip(values, truth))
            else:
                hits = sum((v <= cand) == t for v, t in zip(values, truth))
            if hits > best[0]:
                best = (hits, cand, direction)
    return best


def train_detector(windows: Sequence[CounterWindow],
                   counter_names: Sequence[str],
                   model_kind: ModelKind,
                   split: float = 0.8, seed: int = 0,
                   ) -> tuple[DetectorModel, list[CounterWindow]]:
    """Fit on a seeded stratified split; returns the model and the holdout."""
    if not 0.0 < split < 1.0:
        raise ConfigError("split must be a fraction between 0 and 1")
    names = tuple(counter_names)
    unknown = [n for n in names if n not in COUNTER_NAMES]
    if unknown:
        raise ConfigError(f"unknown counters: {', '.join(unknown)}")
    if len({is_attack(w) for w in windows}) < 2:
        raise ConfigError("training corpus holds a single class")

    rng = random.Random(seed)
    train: list[CounterWindow] = []
    holdout: list[CounterWindow] = []
    for label in WindowLabel:
        group = [w for w in windows if w.label is label]
        rng.shuffle(group)
        cut = max(1, round(len(group) * split)) if group else 0
        train.extend(group[:cut])
        holdout.extend(group[cut:])

    if model_kind is ModelKind.THRESHOLD:
        if len(names) != 1:
            raise ConfigError("threshold model reads exactly one counter")
        _, thr, _ = _fit_cut(train, names[0], ("gt",))
        model = DetectorModel(model_kind, names, threshold=thr)
    elif model_kind is ModelKind.STUMP:
        scored = []
        for idx, name in enumerate(names):
            hits, thr, direction = _fit_cut(train, name, ("gt", "le"))
            scored.append((-hits, idx, thr, direction, name))
        _, _, thr, direction, name = min(scored)
        model = DetectorModel(model_kind, (name,), threshold=thr,
                              direction=direction)
    elif model_kind is ModelKind.KNN:
        dataset = [([w.values[c] for c in names], is_attack(w))
                   for w in train]
        k = 3 if len(dataset) >= 3 else 1
        model = DetectorModel(model_kind, names, knn=knn_train(dataset, k=k))
    else:
        raise ConfigError(f"unknown model kind: {model_kind!r}")
    return model, holdout


class DetectionMetrics(NamedTuple):
    accuracy: float
    f1: float
    fpr: float
    tp: int
    fp: int
    fn: int
    tn: int


def confusion_metrics(tp: int, fp: int, fn: int, tn: int) -> DetectionMetrics:
    total = tp + fp + fn + tn
    if total == 0:
        raise ConfigError("empty evaluation")
    accuracy = (tp + tn) / total
    f1 = 2 * tp / (2 * tp + fp + fn) if (2 * tp + fp + fn) else 0.0
    fpr = fp / (fp + tn) if (fp + tn) else 0.0
    return DetectionMetrics(accuracy, f1, fpr, tp, fp, fn, tn)


def evaluate(model: DetectorModel,
             holdout: Sequence[CounterWindow]) -> DetectionMetrics:
    """Binary metrics on the holdout, attack as the positive class."""
    if not holdout:
        raise ConfigError("holdout is empty")
    tp = fp = fn = tn = 0
    for window in holdout:
        got = predict(model, window)
        want = is_attack(window)
        if got and want:
            tp += 1
        elif got:
            fp += 1
        elif want:
            fn += 1
        else:
            tn += 1
    return confusion_metrics(tp, fp, fn, tn)


def rank_counters(windows: Sequence[CounterWindow],
                  model_kind: ModelKind = ModelKind.THRESHOLD,
                  split: float = 0.8, seed: int = 0,
                  names: Sequence[str] = COUNTER_NAMES,
                  ) -> list[tuple[str, DetectionMetrics]]:
    """Per-counter detector scores, best F-score first."""
    rows = []
    for name in names:
        model, holdout = train_detector(windows, (name,), model_kind,
                                        split, seed)
        rows.append((name, evaluate(model, holdout)))
    rows.sort(key=lambda item: (-item[1].f1, names.index(item[0])))
    return rows


# ---------------------------------------------------------------------------
# CSV persistence


def write_corpus_csv(windows: Iterable[CounterWindow], path: str) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(("window_index", "label") + COUNTER_NAMES)
        for w in windows:
            writer.writerow([w.window_index, w.label.value]
                            + [w.values[c] for c in COUNTER_NAMES])


def read_corpus_csv(path: str) -> list[CounterWindow]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ["window_index", "label", *COUNTER_NAMES]:
            raise ConfigError("unrecognized corpus header")
        out = []
        for row in reader:
            values = dict(zip(COUNTER_NAMES, map(int, row[2:])))
            out.append(CounterWindow(values, int(row[0]), WindowLabel(row[1])))
        return out


def write_metrics_csv(rows: Iterable[tuple[str, str, DetectionMetrics]],
                      path: str) -> None:
    """One CSV row per (counter, model) evaluation."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(("counter", "model", "accuracy", "f1", "fpr",
                         "tp", "fp", "fn", "tn"))
        for counter, model_name, m in rows:
            writer.writerow((counter, model_name, f"{m.accuracy:.6f}",
                             f"{m.f1:.6f}", f"{m.fpr:.6f}",
                             m.tp, m.fp, m.fn, m.tn))
