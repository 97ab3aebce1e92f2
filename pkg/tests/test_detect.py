"""Counter-window corpus generation and attack detection metrics."""

import csv

import pytest

from smcsim.core import CoreState
from smcsim.detect import (CACHE_MISS_COUNTERS, COUNTER_NAMES,
                           FR_ROUNDS_PER_WINDOW, PNP_ROUNDS_PER_WINDOW,
                           CounterWindow, DetectorModel, ModelKind,
                           WindowLabel, WorkloadKind, build_corpus,
                           confusion_metrics, evaluate, generate_workload,
                           is_attack, predict, rank_counters, read_corpus_csv,
                           train_detector, write_corpus_csv,
                           write_metrics_csv)
from smcsim.errors import ConfigError
from smcsim.profiles import load_profile

INTEL = load_profile("intel-cascade-lake")


def mk_window(idx, label, **vals):
    values = {name: 0 for name in COUNTER_NAMES}
    values.update(vals)
    return CounterWindow(values, idx, label)


@pytest.fixture(scope="module")
def default_corpus():
    return build_corpus(INTEL, seed=0)


@pytest.fixture(scope="module")
def quiet_corpus():
    return build_corpus(INTEL, seed=1, n_benign=6, n_attack=4,
                        windows_per_run=6, jit_fraction=0.0)


# ---------------------------------------------------------------------------
# Windows and workloads


def test_counter_window_validation():
    with pytest.raises(ConfigError):
        CounterWindow({"machine_clears_smc": 1}, 0, WindowLabel.BENIGN)
    with pytest.raises(ConfigError):
        mk_window(0, WindowLabel.BENIGN, llc_misses=-1)


def test_is_attack_follows_label():
    assert not is_attack(mk_window(0, WindowLabel.BENIGN))
    assert is_attack(mk_window(0, WindowLabel.PRIME_IPROBE))
    assert is_attack(mk_window(0, WindowLabel.FLUSH_IRELOAD))


def test_quiet_workload_never_fires_smc():
    core = CoreState(INTEL, seed=42)
    windows = generate_workload(WorkloadKind.BENIGN_QUIET, core, 5)
    assert len(windows) == 5
    for w in windows:
        assert w.label is WindowLabel.BENIGN
        assert w.values["machine_clears_smc"] == 0
        assert w.values["branch_retired"] > 0


def test_pnp_workload_smc_rate_is_exact():
    # every probe round stores through all 8 primed ways of the target set
    core = CoreState(INTEL, seed=43)
    windows = generate_workload(WorkloadKind.ATTACK_PNP, core, 3)
    for w in windows:
        assert w.label is WindowLabel.PRIME_IPROBE
        assert w.values["machine_clears_smc"] == 8 * PNP_ROUNDS_PER_WINDOW
        assert w.values["machine_clears_count"] == w.values["machine_clears_smc"]


def test_fr_workload_smc_rate():
    # one clear per flush of the previous reload; the very first flush
    # finds nothing resident yet
    core = CoreState(INTEL, seed=44)
    windows = generate_workload(WorkloadKind.ATTACK_FR, core, 3)
    assert windows[0].values["machine_clears_smc"] == FR_ROUNDS_PER_WINDOW - 1
    for w in windows[1:]:
        assert w.values["machine_clears_smc"] == FR_ROUNDS_PER_WINDOW


def test_jit_workload_misses_on_attack_scale():
    core = CoreState(INTEL, seed=45)
    windows = generate_workload(WorkloadKind.BENIGN_JIT_LIKE, core, 6)
    misses = [w.values["l1i_misses"] for w in windows]
    assert min(misses) >= 100
    assert max(misses) >= 350
    assert all(w.label is WindowLabel.BENIGN for w in windows)


def test_generate_workload_validation():
    with pytest.raises(ConfigError):
        generate_workload(WorkloadKind.BENIGN_QUIET, CoreState(INTEL, 1), 0)


def test_build_corpus_validation():
    with pytest.raises(ConfigError):
        build_corpus(INTEL, n_benign=1)
    with pytest.raises(ConfigError):
        build_corpus(INTEL, jit_fraction=1.5)


# ---------------------------------------------------------------------------
# Metric arithmetic


def test_confusion_metrics_hand_case():
    m = confusion_metrics(tp=9, fp=1, fn=1, tn=9)
    assert m.accuracy == pytest.approx(0.9)
    assert m.f1 == pytest.approx(0.9)
    assert m.fpr == pytest.approx(0.1)


def test_confusion_metrics_degenerate_cases():
    m = confusion_metrics(tp=0, fp=0, fn=0, tn=5)
    assert m.f1 == 0.0 and m.fpr == 0.0 and m.accuracy == 1.0
    m = confusion_metrics(tp=4, fp=0, fn=0, tn=0)
    assert m.f1 == 1.0 and m.fpr == 0.0
    with pytest.raises(ConfigError):
        confusion_metrics(0, 0, 0, 0)


# ---------------------------------------------------------------------------
# Detector training


def test_train_detector_validation(quiet_corpus):
    with pytest.raises(ConfigError):
        train_detector(quiet_corpus, ("no_such_counter",),
                       ModelKind.THRESHOLD)
    with pytest.raises(ConfigError):
        train_detector(quiet_corpus, COUNTER_NAMES[:2], ModelKind.THRESHOLD)
    benign_only = [w for w in quiet_corpus if not is_attack(w)]
    with pytest.raises(ConfigError):
        train_detector(benign_only, ("machine_clears_smc",),
                       ModelKind.THRESHOLD)
    with pytest.raises(ConfigError):
        train_detector(quiet_corpus, ("machine_clears_smc",),
                       ModelKind.THRESHOLD, split=0.0)


def test_threshold_detector_is_perfect_on_quiet_corpus(quiet_corpus):
    model, holdout = train_detector(quiet_corpus, ("machine_clears_smc",),
                                    ModelKind.THRESHOLD)
    assert model.kind is ModelKind.THRESHOLD
    assert model.counters == ("machine_clears_smc",)
    assert 0 < model.threshold < FR_ROUNDS_PER_WINDOW - 1
    metrics = evaluate(model, holdout)
    assert metrics.f1 == 1.0
    assert metrics.fpr == 0.0


def test_stump_learns_inverted_cut():
    # attacks sit BELOW the benign values here, so only 'le' separates
    windows = (
        [mk_window(i, WindowLabel.BENIGN, llc_misses=10 + 2 * i)
         for i in range(5)]
        + [mk_window(i, WindowLabel.PRIME_IPROBE, llc_misses=i % 2)
           for i in range(5)]
    )
    model, holdout = train_detector(windows, ("llc_misses",), ModelKind.STUMP)
    assert model.direction == "le"
    assert evaluate(model, holdout).f1 == 1.0


def test_knn_detector_on_quiet_corpus(quiet_corpus):
    model, holdout = train_detector(
        quiet_corpus, ("machine_clears_smc", "llc_misses"), ModelKind.KNN)
    assert model.kind is ModelKind.KNN
    assert evaluate(model, holdout).f1 == 1.0


def test_predict_directions():
    gt = DetectorModel(ModelKind.THRESHOLD, ("llc_misses",), threshold=5.0)
    le = DetectorModel(ModelKind.STUMP, ("llc_misses",), threshold=5.0,
                       direction="le")
    hot = mk_window(0, WindowLabel.BENIGN, llc_misses=9)
    cold = mk_window(0, WindowLabel.BENIGN, llc_misses=2)
    assert predict(gt, hot) and not predict(gt, cold)
    assert predict(le, cold) and not predict(le, hot)


def test_detector_model_validation():
    with pytest.raises(ConfigError):
        DetectorModel(ModelKind.THRESHOLD, ())
    with pytest.raises(ConfigError):
        DetectorModel(ModelKind.THRESHOLD, ("llc_misses",), direction="lt")


def test_evaluate_rejects_empty_holdout(quiet_corpus):
    model, _ = train_detector(quiet_corpus, ("machine_clears_smc",),
                              ModelKind.THRESHOLD)
    with pytest.raises(ConfigError):
        evaluate(model, [])


# ---------------------------------------------------------------------------
# Corpus-level results


def test_smc_counter_stays_strong_with_jit_benign(default_corpus):
    model, holdout = train_detector(default_corpus, ("machine_clears_smc",),
                                    ModelKind.THRESHOLD)
    assert evaluate(model, holdout).f1 >= 0.95


def test_smc_counter_outranks_cache_miss_counters(default_corpus):
    ranking = dict(rank_counters(default_corpus))
    smc_f1 = ranking["machine_clears_smc"].f1
    for name in CACHE_MISS_COUNTERS:
        assert smc_f1 > ranking[name].f1, name


def test_rank_counters_sorted_by_f1(default_corpus):
    rows = rank_counters(default_corpus)
    assert [name for name, _ in rows][0] in ("machine_clears_count",
                                             "machine_clears_smc")
    scores = [m.f1 for _, m in rows]
    assert scores == sorted(scores, reverse=True)
    assert {name for name, _ in rows} == set(COUNTER_NAMES)


# ---------------------------------------------------------------------------
# CSV persistence


def test_corpus_csv_round_trip(tmp_path, quiet_corpus):
    path = tmp_path / "corpus.csv"
    write_corpus_csv(quiet_corpus, str(path))
    back = read_corpus_csv(str(path))
    assert back == quiet_corpus


def test_corpus_csv_rejects_foreign_header(tmp_path):
    path = tmp_path / "bad.csv"
    path.write_text("time,label\n1,benign\n")
    with pytest.raises(ConfigError):
        read_corpus_csv(str(path))


def test_metrics_csv_format(tmp_path):
    path = tmp_path / "metrics.csv"
    m = confusion_metrics(tp=9, fp=1, fn=1, tn=9)
    write_metrics_csv([("machine_clears_smc", "threshold", m)], str(path))
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["counter", "model", "accuracy", "f1", "fpr",
                       "tp", "fp", "fn", "tn"]
    assert rows[1] == ["machine_clears_smc", "threshold", "0.900000",
                       "0.900000", "0.100000", "9", "1", "1", "9"]
