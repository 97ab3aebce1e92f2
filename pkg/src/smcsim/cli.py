"""Experiment runner: one subcommand per case study, CSV artifacts out.

Every run is seeded and fully deterministic: the same flags (or the same
config file) produce byte-identical CSVs. Summaries go to stdout as
``name=value`` tokens; everything in a summary can be recomputed from the
per-sample CSV next to it. Exit codes: 0 success, 1 config error,
2 unsupported strategy or profile.
"""

from __future__ import annotations

import argparse
import csv
import random
import statistics
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, NamedTuple

from . import detect as det
from . import experiments as ex
from .core import CoreState, LineAddr, plant_line, probe_access
from .covert import CHANNELS, default_config, random_bits, run_channel
from .errors import (ConfigError, NoLeakStrategyError,
                     SharedPagePermissionError, UnsupportedStrategyError)
from .ispectre import default_support_table, leak_secret, make_victim
from .profiles import (LatencyProfile, ProbeKind, ResidencyLevel,
                       load_profile, noise_override)
from .recover import DEFAULT_SRP_COSTS
from .victims import (GROUP_SIZES, generate_exponent, random_srp_params)

DEFAULT_PROFILE = "intel-cascade-lake"


# ---------------------------------------------------------------------------
# Parameter schema shared by command-line flags and config files


class _Param(NamedTuple):
    convert: Callable[[str], object]
    default: object
    help: str


def _int(raw: str) -> int:
    return int(raw, 10)


def _float(raw: str) -> float:
    return float(raw)


def _bool(raw: str) -> bool:
    low = raw.strip().lower()
    if low in ("true", "yes", "1", "on"):
        return True
    if low in ("false", "no", "0", "off"):
        return False
    raise ValueError(f"not a boolean: {raw!r}")


def _choice(*options: str) -> Callable[[str], str]:
    def conv(raw: str) -> str:
        if raw not in options:
            raise ValueError(f"must be one of {', '.join(options)}")
        return raw
    return conv


def _kind_list(raw: str) -> tuple[ProbeKind, ...] | str:
    if raw.strip().lower() == "all":
        return "all"
    return tuple(ProbeKind.parse(part) for part in raw.split(","))


_COMMON: dict[str, _Param] = {
    "noise_sigma": _Param(_float, None,
                          "override the profile's timing noise stddev "
                          "(0 disables noise; default keeps the profile's)"),
}

_SCHEMAS: dict[str, dict[str, _Param]] = {
    "histogram": {
        "kinds": _Param(_kind_list, "all",
                        "comma list of probe kinds, or 'all' supported"),
        "samples": _Param(_int, 10_000, "timings per (kind, level) cell"),
    },
    "covert": {
        "channel": _Param(_choice(*CHANNELS), "prime_probe", "channel kind"),
        "strategy": _Param(ProbeKind.parse, "store", "probe strategy"),
        "bits": _Param(_int, 10_000, "payload length in bits"),
    },
    "rsa": {
        "bits": _Param(_int, 256, "exponent length"),
        "keys": _Param(_int, 10, "number of random exponents"),
        "traces": _Param(_int, 1, "traces aggregated per key"),
        "strategy": _Param(ProbeKind.parse, "store", "probe strategy"),
    },
    "srp": {
        "group": _Param(_int, 1024,
                        f"nominal group size, one of {GROUP_SIZES}"),
        "keys": _Param(_int, 10, "number of random server exponents"),
        "scaled_costs": _Param(_bool, False,
                               "scale loop costs to the group size instead "
                               "of the fixed defaults"),
    },
    "ispectre": {
        "strategy": _Param(ProbeKind.parse, "flush", "probe strategy"),
        "secret_len": _Param(_int, 64, "secret length in bytes"),
        "iterations": _Param(_int, 1, "leak attempts per byte (majority)"),
    },
    "detect": {
        "n_benign": _Param(_int, 20, "benign executions in the corpus"),
        "n_attack": _Param(_int, 12, "attack executions in the corpus"),
        "windows": _Param(_int, 20, "counter windows per execution"),
        "jit_fraction": _Param(_float, 0.35,
                               "fraction of benign runs that are JIT-heavy"),
        "model": _Param(_choice("threshold", "stump", "knn"), "threshold",
                        "detector model kind"),
    },
}


@dataclass(frozen=True)
class ExperimentConfig:
    """One resolved run: profile, seed, output dir, command parameters."""

    command: str
    profile: str
    seed: int
    out: Path
    params: dict[str, object]


class _Parser(argparse.ArgumentParser):
    # argparse exits with status 2 on bad usage; route through the shared
    # config-error path instead so usage mistakes exit 1.
    def error(self, message: str) -> None:  # type: ignore[override]
        raise ConfigError(message)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="smcsim",
                     description="Deterministic instruction-cache "
                                 "side-channel experiments")
    sub = parser.add_subparsers(dest="command", metavar="command")
    for name, schema in _SCHEMAS.items():
        p = sub.add_parser(name, description=f"run the {name} experiment")
        p.add_argument("--profile", default=None,
                       help=f"latency profile name or .profile path "
                            f"(default {DEFAULT_PROFILE})")
        p.add_argument("--seed", default=None,
                       help="experiment seed (default 0)")
        p.add_argument("--config", default=None,
                       help="key = value file; flags given on the command "
                            "line take precedence")
        p.add_argument("--out", default=None,
                       help="output directory for CSV artifacts (default .)")
        for key, param in {**schema, **_COMMON}.items():
            p.add_argument(f"--{key.replace('_', '-')}", dest=key,
                           default=None, metavar="V", help=param.help)
    return parser


def read_config_file(path: str) -> dict[str, str]:
    """Parse ``key = value`` lines; '#' starts a comment."""
    out: dict[str, str] = {}
    text = Path(path).read_text(encoding="utf-8")
    for lineno, line in enumerate(text.splitlines(), 1):
        body = line.split("#", 1)[0].strip()
        if not body:
            continue
        if "=" not in body:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
        key, value = body.split("=", 1)
        out[key.strip().replace("-", "_")] = value.strip()
    return out


def _coerce(key: str, param: _Param, raw: object) -> object:
    if not isinstance(raw, str):
        return raw
    try:
        return param.convert(raw)
    except (ValueError, ConfigError) as exc:
        raise ConfigError(f"{key}: {exc}") from None


def resolve_config(args: argparse.Namespace) -> ExperimentConfig:
    """Merge flags over the config file over defaults; reject unknown keys."""
    if not args.command:
        raise ConfigError("a subcommand is required "
                          f"(one of: {', '.join(_SCHEMAS)})")
    schema = {**_SCHEMAS[args.command], **_COMMON}
    file_cfg = read_config_file(args.config) if args.config else {}
    known = set(schema) | {"profile", "seed", "out"}
    unknown = sorted(set(file_cfg) - known)
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")

    def pick(key: str, fallback: object) -> object:
        flag = getattr(args, key, None)
        if flag is not None:
            return flag
        if key in file_cfg:
            return file_cfg[key]
        return fallback

    params = {key: _coerce(key, param, pick(key, param.default))
              for key, param in schema.items()}
    seed = _coerce("seed", _Param(_int, 0, ""), pick("seed", 0))
    return ExperimentConfig(command=args.command,
                            profile=str(pick("profile", DEFAULT_PROFILE)),
                            seed=seed,
                            out=Path(str(pick("out", "."))),
                            params=params)


def _open_csv(cfg: ExperimentConfig, name: str):
    cfg.out.mkdir(parents=True, exist_ok=True)
    return open(cfg.out / name, "w", newline="", encoding="utf-8")


def _emit(**fields: object) -> None:
    print(" ".join(f"{k}={v}" for k, v in fields.items()))


def _fmt(x: float) -> str:
    return f"{x:.6f}"


# ---------------------------------------------------------------------------
# Subcommands


def cmd_histogram(cfg: ExperimentConfig, profile: LatencyProfile) -> None:
    kinds = cfg.params["kinds"]
    if kinds == "all":
        kinds = tuple(k for k in ProbeKind if profile.supports(k))
    samples = cfg.params["samples"]
    if samples < 1:
        raise ConfigError("samples must be positive")
    line = LineAddr(11, 0xBEEF)
    with _open_csv(cfg, "histogram.csv") as fh:
        writer = csv.writer(fh)
        writer.writerow(("kind", "level", "sample_index", "cycles",
                         "smc_fired"))
        for k_i, kind in enumerate(kinds):
            for level in ResidencyLevel:
                core = CoreState(profile, cfg.seed * 331 + k_i * 5
                                 + int(level))
                cell = []
                for i in range(samples):
                    plant_line(core, line, level)
                    sample = probe_access(core, 0, kind, line)
                    cell.append(sample.cycles)
                    writer.writerow((kind.name.lower(), level.name, i,
                                     sample.cycles, int(sample.smc_fired)))
                _emit(cell=f"{kind.name.lower()}/{level.name}",
                      mean=_fmt(statistics.fmean(cell)),
                      variance=_fmt(statistics.pvariance(cell)))
    _emit(command="histogram", profile=profile.name, seed=cfg.seed,
          rows=len(kinds) * 5 * samples)


def cmd_covert(cfg: ExperimentConfig, profile: LatencyProfile) -> None:
    payload = random_bits(cfg.params["bits"], cfg.seed)
    channel_cfg = default_config(cfg.params["channel"],
                                 cfg.params["strategy"])
    report = run_channel(payload, channel_cfg, profile, seed=cfg.seed)
    with _open_csv(cfg, "covert.csv") as fh:
        writer = csv.writer(fh)
        writer.writerow(("position", "sent_bit", "decoded_bit"))
        for i in range(max(len(payload), len(report.decoded))):
            writer.writerow((i,
                             payload[i] if i < len(payload) else "",
                             report.decoded[i] if i < len(report.decoded)
                             else ""))
    _emit(command="covert", profile=profile.name, seed=cfg.seed,
          channel=cfg.params["channel"],
          strategy=cfg.params["strategy"].name.lower(),
          bits_sent=report.bits_sent, errors=report.errors,
          error_rate_percent=_fmt(report.error_rate_percent),
          bit_rate_kbit_s=_fmt(report.bit_rate_kbit_s),
          samples=report.samples_collected)


def cmd_rsa(cfg: ExperimentConfig, profile: LatencyProfile) -> None:
    keys = cfg.params["keys"]
    traces = cfg.params["traces"]
    if keys < 1 or traces < 1:
        raise ConfigError("keys and traces must be positive")
    rates = []
    exact = 0
    with _open_csv(cfg, "rsa.csv") as fh:
        writer = csv.writer(fh)
        writer.writerow(("key_index", "bit_length", "traces",
                         "correct_percent", "exact"))
        for i in range(keys):
            secret = generate_exponent(cfg.params["bits"],
                                       cfg.seed * 7919 + i)
            report = ex.run_rsa_attack(profile, secret, n_traces=traces,
                                       seed=cfg.seed + i * traces,
                                       strategy=cfg.params["strategy"])
            rates.append(report.correct_percent)
            exact += report.correct_percent == 100.0
            writer.writerow((i, secret.bit_length, traces,
                             _fmt(report.correct_percent),
                             int(report.correct_percent == 100.0)))
    _emit(command="rsa", profile=profile.name, seed=cfg.seed,
          strategy=cfg.params["strategy"].name.lower(), keys=keys,
          traces=traces, mean_correct_percent=_fmt(statistics.fmean(rates)),
          exact_keys=exact)


def cmd_srp(cfg: ExperimentConfig, profile: LatencyProfile) -> None:
    group = cfg.params["group"]
    keys = cfg.params["keys"]
    if keys < 1:
        raise ConfigError("keys must be positive")
    costs = (ex.srp_costs_for_group(group) if cfg.params["scaled_costs"]
             else DEFAULT_SRP_COSTS)
    leaks = []
    xs = []
    with _open_csv(cfg, "srp.csv") as fh:
        writer = csv.writer(fh)
        writer.writerow(("key_index", "group_bits", "leakage_percent",
                         "x_fraction", "samples"))
        for i in range(keys):
            params = random_srp_params(group, cfg.seed * 104_729 + i)
            report = ex.run_srp_attack(profile, params, seed=cfg.seed + i,
                                       costs=costs)
            leaks.append(report.leakage_percent)
            xs.append(report.x_fraction)
            writer.writerow((i, group, _fmt(report.leakage_percent),
                             _fmt(report.x_fraction),
                             report.samples_collected))
    _emit(command="srp", profile=profile.name, seed=cfg.seed, group=group,
          keys=keys, mean_leakage_percent=_fmt(statistics.fmean(leaks)),
          mean_x_fraction=_fmt(statistics.fmean(xs)))


def cmd_ispectre(cfg: ExperimentConfig, profile: LatencyProfile) -> None:
    if cfg.params["secret_len"] < 1:
        raise ConfigError("secret_len must be positive")
    strategy = cfg.params["strategy"]
    rng = random.Random(cfg.seed)
    secret = bytes(rng.randrange(256) for _ in range(cfg.params["secret_len"]))
    victim = make_victim(secret)
    core = CoreState(profile, cfg.seed)
    report = leak_secret(victim, core, strategy,
                         iterations_per_byte=cfg.params["iterations"])
    with _open_csv(cfg, "ispectre.csv") as fh:
        writer = csv.writer(fh)
        writer.writerow(("offset", "expected", "leaked", "correct"))
        for i, (want, got) in enumerate(zip(secret, report.recovered)):
            writer.writerow((i, want, got, int(want == got)))
    support = default_support_table().for_profile(profile)[strategy]
    _emit(command="ispectre", profile=profile.name, seed=cfg.seed,
          strategy=strategy.name.lower(), support=support.value,
          secret_len=len(secret),
          success_percent=_fmt(report.success_percent),
          leak_rate_bytes_s=_fmt(report.leak_rate_bytes_s))


def cmd_detect(cfg: ExperimentConfig, profile: LatencyProfile) -> None:
    corpus = det.build_corpus(profile, seed=cfg.seed,
                              n_benign=cfg.params["n_benign"],
                              n_attack=cfg.params["n_attack"],
                              windows_per_run=cfg.params["windows"],
                              jit_fraction=cfg.params["jit_fraction"])
    cfg.out.mkdir(parents=True, exist_ok=True)
    det.write_corpus_csv(corpus, str(cfg.out / "corpus.csv"))
    model_kind = det.ModelKind(cfg.params["model"])
    ranked = det.rank_counters(corpus, model_kind)
    det.write_metrics_csv([(name, model_kind.value, m) for name, m in ranked],
                          str(cfg.out / "metrics.csv"))
    model, holdout = det.train_detector(corpus, ("machine_clears_smc",),
                                        model_kind, seed=cfg.seed)
    metrics = det.evaluate(model, holdout)
    _emit(command="detect", profile=profile.name, seed=cfg.seed,
          model=model_kind.value, windows=len(corpus),
          top_counter=ranked[0][0], top_f1=_fmt(ranked[0][1].f1),
          smc_counter_f1=_fmt(metrics.f1), smc_counter_fpr=_fmt(metrics.fpr))


_COMMANDS = {
    "histogram": cmd_histogram,
    "covert": cmd_covert,
    "rsa": cmd_rsa,
    "srp": cmd_srp,
    "ispectre": cmd_ispectre,
    "detect": cmd_detect,
}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        cfg = resolve_config(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    try:
        profile = load_profile(cfg.profile)
    except ConfigError as exc:
        print(f"profile error: {exc}", file=sys.stderr)
        return 2
    sigma = cfg.params.get("noise_sigma")
    if sigma is not None:
        profile = noise_override(profile, sigma)
    try:
        _COMMANDS[cfg.command](cfg, profile)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except (UnsupportedStrategyError, NoLeakStrategyError,
            SharedPagePermissionError) as exc:
        print(f"unsupported: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
