"""Command-line runner: config resolution, exit codes, CSV artifacts."""

import csv

import pytest

from smcsim.cli import build_parser, main, read_config_file, resolve_config
from smcsim.errors import ConfigError
from smcsim.profiles import ProbeKind
from smcsim.recover import levenshtein


def resolve(argv):
    return resolve_config(build_parser().parse_args(argv))


def parse_tokens(line):
    return dict(token.split("=", 1) for token in line.split())


def summaries(capsys):
    return [parse_tokens(line) for line in
            capsys.readouterr().out.strip().splitlines()]


# ---------------------------------------------------------------------------
# Configuration resolution


def test_defaults_resolve():
    cfg = resolve(["rsa"])
    assert cfg.command == "rsa"
    assert cfg.profile == "intel-cascade-lake"
    assert cfg.seed == 0
    assert str(cfg.out) == "."
    assert cfg.params["bits"] == 256
    assert cfg.params["keys"] == 10
    assert cfg.params["strategy"] is ProbeKind.STORE
    assert cfg.params["noise_sigma"] is None


def test_flag_beats_file_beats_default(tmp_path):
    conf = tmp_path / "run.conf"
    conf.write_text("bits = 128   # payload\nseed = 9\nnoise-sigma = 2.5\n")
    cfg = resolve(["rsa", "--config", str(conf), "--bits", "64"])
    assert cfg.params["bits"] == 64      # flag wins
    assert cfg.seed == 9                 # file beats default
    assert cfg.params["noise_sigma"] == 2.5
    assert cfg.params["keys"] == 10      # untouched default


def test_config_file_rejects_unknown_key(tmp_path):
    conf = tmp_path / "run.conf"
    conf.write_text("bots = 5\n")
    with pytest.raises(ConfigError, match="bots"):
        resolve(["rsa", "--config", str(conf)])


def test_config_file_rejects_bare_line(tmp_path):
    conf = tmp_path / "run.conf"
    conf.write_text("just words\n")
    with pytest.raises(ConfigError, match="key = value"):
        read_config_file(str(conf))


def test_bad_value_names_the_field():
    with pytest.raises(ConfigError, match="bits"):
        resolve(["rsa", "--bits", "many"])


def test_kind_list_parses():
    cfg = resolve(["histogram", "--kinds", "flush,store"])
    assert cfg.params["kinds"] == (ProbeKind.FLUSH, ProbeKind.STORE)
    assert resolve(["histogram"]).params["kinds"] == "all"


def test_bool_values_from_file(tmp_path):
    conf = tmp_path / "run.conf"
    conf.write_text("scaled-costs = yes\n")
    cfg = resolve(["srp", "--config", str(conf)])
    assert cfg.params["scaled_costs"] is True
    with pytest.raises(ConfigError, match="scaled_costs"):
        resolve(["srp", "--scaled-costs", "maybe"])


def test_missing_subcommand_is_config_error():
    with pytest.raises(ConfigError):
        resolve([])


# ---------------------------------------------------------------------------
# Exit codes


def test_exit_zero_on_success(tmp_path, capsys):
    assert main(["srp", "--keys", "1", "--group", "1024",
                 "--out", str(tmp_path)]) == 0
    assert (tmp_path / "srp.csv").exists()


def test_exit_one_on_config_errors(tmp_path, capsys):
    assert main([]) == 1
    assert main(["covert", "--bits", "notanint"]) == 1
    conf = tmp_path / "c.conf"
    conf.write_text("unheard_of = 1\n")
    assert main(["rsa", "--config", str(conf)]) == 1


def test_exit_two_on_unknown_profile(capsys):
    assert main(["histogram", "--profile", "i486"]) == 2
    assert "profile error" in capsys.readouterr().err


def test_exit_two_on_unsupported_strategy(tmp_path, capsys):
    rc = main(["ispectre", "--profile", "intel-broadwell",
               "--strategy", "clwb", "--secret-len", "1",
               "--out", str(tmp_path)])
    assert rc == 2


def test_exit_two_on_no_leak_strategy(tmp_path, capsys):
    rc = main(["covert", "--strategy", "execute", "--bits", "16",
               "--out", str(tmp_path)])
    assert rc == 2


# ---------------------------------------------------------------------------
# Histogram artifacts


def test_histogram_zero_noise_anchors(tmp_path, capsys):
    rc = main(["histogram", "--kinds", "flush,load,lockinc", "--samples", "4",
               "--noise-sigma", "0", "--out", str(tmp_path)])
    assert rc == 0
    lines = summaries(capsys)
    cells = {t["cell"]: t for t in lines if "cell" in t}
    assert len(cells) == 15
    for cell in cells.values():
        assert float(cell["variance"]) == 0.0
    assert float(cells["flush/L1I"]["mean"]) == 350.0
    assert float(cells["lockinc/L1I"]["mean"]) == 425.0
    assert float(cells["load/DRAM"]["mean"]) == 250.0

    with open(tmp_path / "histogram.csv", newline="") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 3 * 5 * 4
    for row in rows:
        if row["kind"] == "flush" and row["level"] == "L1I":
            assert row["cycles"] == "350" and row["smc_fired"] == "1"
        if row["kind"] == "load" and row["level"] == "DRAM":
            assert row["cycles"] == "250" and row["smc_fired"] == "0"
        if row["kind"] == "load" and row["level"] == "L1D":
            assert row["cycles"] == "10" and row["smc_fired"] == "0"


def test_runs_reproduce_byte_identical_from_config_file(tmp_path, capsys):
    conf = tmp_path / "run.conf"
    conf.write_text("kinds = store,flush\nsamples = 5\nseed = 3\n")
    out_a = tmp_path / "a"
    out_b = tmp_path / "b"
    assert main(["histogram", "--config", str(conf),
                 "--out", str(out_a)]) == 0
    assert main(["histogram", "--kinds", "store,flush", "--samples", "5",
                 "--seed", "3", "--out", str(out_b)]) == 0
    a = (out_a / "histogram.csv").read_bytes()
    b = (out_b / "histogram.csv").read_bytes()
    assert a == b


# ---------------------------------------------------------------------------
# Per-command artifacts


def test_covert_csv_recomputes_summary(tmp_path, capsys):
    rc = main(["covert", "--bits", "60", "--channel", "flush_reload",
               "--strategy", "flush", "--noise-sigma", "0",
               "--out", str(tmp_path)])
    assert rc == 0
    summary = summaries(capsys)[-1]
    with open(tmp_path / "covert.csv", newline="") as fh:
        rows = list(csv.DictReader(fh))
    sent = "".join(r["sent_bit"] for r in rows)
    decoded = "".join(r["decoded_bit"] for r in rows)
    assert len(sent) == 60 == int(summary["bits_sent"])
    assert levenshtein(decoded, sent) == int(summary["errors"])
    assert int(summary["errors"]) == 0


def test_rsa_csv_matches_summary(tmp_path, capsys):
    rc = main(["rsa", "--keys", "2", "--bits", "48", "--noise-sigma", "0",
               "--out", str(tmp_path)])
    assert rc == 0
    summary = summaries(capsys)[-1]
    with open(tmp_path / "rsa.csv", newline="") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 2
    assert summary["strategy"] == "store"
    assert int(summary["exact_keys"]) == sum(int(r["exact"]) for r in rows)
    assert int(summary["exact_keys"]) == 2


def test_ispectre_summary_reports_support_class(tmp_path, capsys):
    rc = main(["ispectre", "--secret-len", "3", "--noise-sigma", "0",
               "--out", str(tmp_path)])
    assert rc == 0
    summary = summaries(capsys)[-1]
    assert summary["support"] == "L"
    assert float(summary["success_percent"]) == 100.0
    with open(tmp_path / "ispectre.csv", newline="") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 3
    assert all(r["correct"] == "1" for r in rows)


def test_detect_writes_corpus_and_metrics(tmp_path, capsys):
    rc = main(["detect", "--n-benign", "4", "--n-attack", "2",
               "--windows", "4", "--jit-fraction", "0",
               "--out", str(tmp_path)])
    assert rc == 0
    summary = summaries(capsys)[-1]
    assert float(summary["smc_counter_f1"]) == 1.0
    with open(tmp_path / "metrics.csv", newline="") as fh:
        metric_rows = list(csv.DictReader(fh))
    assert len(metric_rows) == 7
    with open(tmp_path / "corpus.csv", newline="") as fh:
        corpus_rows = list(csv.DictReader(fh))
    assert len(corpus_rows) == 6 * 4
