"""Command-line entry point: ``lsamarl {train,evaluate,ablate-n,ablate-features,report}``.

Exit status is 0 on success, 2 on a usage error and 1 on a runtime failure.
An optional ``--config`` file supplies defaults; explicit flags win::

    [experiment]
    scenario = 4
    algo = mappo_lsa
    seeds = 0 1 2
    epochs = 200

    [hyperparams]
    lr = 0.0003

    [reward]
    w_crash = 2.0

Sections other than ``experiment`` and ``hyperparams`` override scenario
config keys, using the same names as the scenario config file.
"""

from __future__ import annotations

import argparse
import configparser
import dataclasses
import json
import logging
import sys
from pathlib import Path

from . import experiment as X
from .mappo import Hyperparams
from .sim import FEATURE_MASKS, SCENARIO_TABLE, ScenarioConfig
from .sim.config import _parse_value

log = logging.getLogger("lsamarl")


class CliUsageError(Exception):
    pass


def _seed_list(raw: str) -> list:
    try:
        return [int(s) for s in raw.replace(",", " ").split()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"seeds must be integers, got {raw!r}") from None


def _common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", type=Path, help="sectioned key=value file with defaults")
    parser.add_argument("--scenario", type=int, choices=sorted(SCENARIO_TABLE))
    parser.add_argument("--algo", choices=list(X.ALGORITHMS))
    parser.add_argument("--encoder", choices=X.ENCODERS, help="override the algorithm's encoder")
    parser.add_argument("--n-obs", type=int, help="max observed vehicles N (default from scenario)")
    parser.add_argument("--mask", choices=FEATURE_MASKS)
    parser.add_argument("--seeds", type=_seed_list, help="e.g. '0 1 2' or '0,1,2'")
    parser.add_argument("--epochs", type=int)
    parser.add_argument("--out", type=Path)
    parser.add_argument("--eval-episodes", type=int)
    parser.add_argument("--checkpoint-every", type=int, help="extra snapshot every k epochs (0 = final only)")
    parser.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="lsamarl", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train one spec over its seeds")
    _common(p)

    p = sub.add_parser("evaluate", help="greedy evaluation of trained runs")
    _common(p)
    p.add_argument("runs", nargs="*", type=Path, help="seed directories (default: those of the experiment flags)")

    p = sub.add_parser("ablate-n", help="sweep the number of observed vehicles")
    _common(p)
    p.add_argument("--values", type=_seed_list, default=[2, 4, 6], help="N values (default '2 4 6')")

    p = sub.add_parser("ablate-features", help="sweep observation feature masks")
    _common(p)
    p.add_argument("--masks", nargs="+", default=list(FEATURE_MASKS))

    p = sub.add_parser("report", help="merge run curves into a tidy CSV and a summary table")
    p.add_argument("runs", nargs="+", type=Path)
    p.add_argument("--csv", type=Path, default=Path("report.csv"))
    p.add_argument("--no-smooth", action="store_true", help="omit the moving-average column")
    p.add_argument("-v", "--verbose", action="store_true")
    return parser


def _read_config_file(path: Path) -> tuple:
    parser = configparser.ConfigParser()
    if not parser.read(path):
        raise CliUsageError(f"cannot read config file {path}")
    flags, hp, cfg = {}, {}, {}
    hp_defaults = {f.name: f.default for f in dataclasses.fields(Hyperparams)}
    cfg_defaults = {f.name: getattr(ScenarioConfig(), f.name) for f in dataclasses.fields(ScenarioConfig)}
    for section in parser.sections():
        for key, raw in parser.items(section):
            if section == "experiment":
                flags[key.replace("-", "_")] = raw.strip()
            elif section == "hyperparams":
                if key not in hp_defaults:
                    raise CliUsageError(f"unknown hyperparameter {key!r} in {path}")
                default = hp_defaults[key]
                if key == "hidden":
                    hp[key] = tuple(int(v) for v in raw.replace(",", " ").split())
                else:
                    hp[key] = _parse_value(raw, default) if default is not None else int(raw)
            else:
                if key not in cfg_defaults or key == "scenario":
                    raise CliUsageError(f"unknown scenario key [{section}] {key} in {path}")
                cfg[key] = _parse_value(raw, cfg_defaults[key])
    return flags, hp, cfg


def _spec_from_args(args) -> X.ExperimentSpec:
    flags, hp, cfg = ({}, {}, {}) if args.config is None else _read_config_file(args.config)
    converters = {"scenario": int, "n_obs": int, "epochs": int, "eval_episodes": int, "checkpoint_every": int,
                  "seeds": _seed_list, "out": Path}
    values = {}
    for name in ("scenario", "algo", "encoder", "n_obs", "mask", "seeds", "epochs", "out", "eval_episodes",
                 "checkpoint_every"):
        cli_value = getattr(args, name)
        if name in flags:
            try:
                values[name] = converters.get(name, str)(flags.pop(name))
            except (ValueError, argparse.ArgumentTypeError) as exc:
                raise CliUsageError(f"bad [experiment] {name}: {exc}") from None
        if cli_value is not None:
            values[name] = cli_value
    flags.pop("config", None)
    if flags:
        raise CliUsageError(f"unknown [experiment] keys: {sorted(flags)}")
    return X.ExperimentSpec(**values, hp_overrides=hp, cfg_overrides=cfg)


def _print_report(reports) -> None:
    for rep in reports:
        s = rep.summary()
        print(f"{s['spec_id']}: final reward {s['final_reward_mean']:.4f} +/- {s['final_reward_std']:.4f}, "
              f"crash rate {s['crash_rate_mean']:.3f}, greedy reward {s['eval_reward_mean']:.4f}")


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "report":
            print(X.report(args.runs, args.csv, smooth=not args.no_smooth))
            return 0
        spec = _spec_from_args(args)
        if args.command == "train":
            _print_report([X.run(spec)])
        elif args.command == "evaluate":
            runs = args.runs or [spec.run_dir(s) for s in spec.seeds]
            for run_dir in runs:
                print(json.dumps({"run": str(run_dir), **X.evaluate_run(run_dir, spec.eval_episodes)}))
        elif args.command == "ablate-n":
            _print_report(X.ablate_n(spec, args.values))
        elif args.command == "ablate-features":
            _print_report(X.ablate_features(spec, args.masks))
    except (X.UsageError, CliUsageError) as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # runtime failure: report and exit 1
        log.debug("run failed", exc_info=True)
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
