"""Command-line entry point: ``reverbfl {partition,train,grid,plot,theory-verify}``."""

from __future__ import annotations

import argparse
import dataclasses
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import experiment as E
from . import federation as F
from . import plot
from . import theory as T
from .data import dump_partition

OUT_ENV = "REVERBFL_OUT"
EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME, EXIT_BOUND = 0, 1, 2, 3

log = logging.getLogger("reverbfl")

THEORY_KEYS = {f"theory.{f.name}": f for f in dataclasses.fields(T.TheoryParams)}
VERIFY_DEFAULTS = {"verify.rounds": "50", "verify.trials": "1000", "verify.dim": "10",
                   "verify.injected_bias": ""}


def _key_help():
    lines = ["experiment config keys (key = value, one per line):"]
    lines += [f"  {k:28s} {h}" for k, (_, h) in E.SCHEMA.items()]
    lines += ["grid keys (grid subcommand, comma-separated lists):",
              "  grid.variants                e.g. FedAvg,Retrain-All",
              "  grid.attacks                 e.g. none,pgd",
              "  grid.partitions              iid and/or dirichlet:<alpha>",
              "  grid.seeds                   e.g. 0,1,2",
              "theory-verify keys:"]
    lines += [f"  {k:28s} default {f.default}" for k, f in THEORY_KEYS.items()]
    lines += ["  theory.r may be a comma-separated list of reserve step counts"]
    lines += [f"  {k:28s} default {v or '(theory.bias)'}" for k, v in VERIFY_DEFAULTS.items()]
    lines += [f"output root: --out, else ${OUT_ENV}, else ./runs",
              "exit codes: 0 ok, 1 config error, 2 runtime error, 3 theory bound violated"]
    return "\n".join(lines)


def _overrides(args):
    out = {}
    for item in args.set or []:
        if "=" not in item:
            raise E.ConfigError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        out[k.strip()] = v.strip()
    if args.seed is not None:
        out["experiment.seed"] = str(args.seed)
    return out


def _out_root(args):
    if args.out:
        return Path(args.out)
    return Path(os.environ.get(OUT_ENV, "runs"))


def _load(args):
    return E.load_config(args.config, args.profile, _overrides(args))


def cmd_partition(args):
    cfg = _load(args)
    env = E.build_environment(cfg)
    adversaries = F.designate_adversaries(cfg.fed.num_clients, cfg.fed.adversarial_fraction, cfg.seed)
    shards = [dataclasses.replace(s, adversarial=s.client_id in adversaries) for s in env.shards]
    out = _out_root(args) if args.out else _out_root(args) / f"partition__seed{cfg.seed}"
    dump_partition(shards, env.reserve, out, env.partition_spec,
                   extra={"config": dict(sorted(cfg.values.items())),
                          "test_ids": env.test.ids.tolist()})
    print(out / "manifest.json")
    return EXIT_OK


def cmd_train(args):
    cfg = _load(args)
    out = _out_root(args) if args.out else (
        _out_root(args) / f"{cfg.variant}__{cfg.attack_label}__seed{cfg.seed}")
    path = E.run_experiment(cfg, out, log=log.info)
    print(path)
    return EXIT_OK


def cmd_grid(args):
    raw = E.read_config(args.config) if args.config else {}
    profile = args.profile or raw.pop("profile", None) or "desk"
    raw.pop("profile", None)
    paths, ran = E.run_grid(raw, _out_root(args), profile, _overrides(args), log=log.info)
    log.info("%d cells, %d run, %d already complete", len(paths), len(ran), len(paths) - len(ran))
    for p in paths:
        print(p)
    return EXIT_OK


def cmd_plot(args):
    files = []
    for item in args.metrics:
        p = Path(item)
        files.extend(sorted(p.rglob("metrics.csv")) if p.is_dir() else [p])
    out = Path(args.out) if args.out else Path(os.environ.get(OUT_ENV, "runs")) / "accuracy.svg"
    try:
        print(plot.emit_plot(files, out))
    except (ValueError, OSError) as exc:
        raise E.ConfigError(str(exc)) from exc
    return EXIT_OK


def load_theory(path, overrides=None):
    """``(TheoryParams, r list, rounds, trials, dim, injected bias or None)`` from a key=value file."""
    raw = E.read_config(path) if path else {}
    raw.update(overrides or {})
    kwargs, r_values = {}, [0, 1, 3]
    verify = dict(VERIFY_DEFAULTS)
    for key, value in raw.items():
        if key == "theory.r":
            try:
                r_values = [int(v) for v in value.split(",") if v.strip()]
            except ValueError as exc:
                raise E.ConfigError(f"theory.r: {exc}") from exc
        elif key in THEORY_KEYS:
            ftype = int if isinstance(THEORY_KEYS[key].default, int) else float
            try:
                kwargs[THEORY_KEYS[key].name] = ftype(value)
            except ValueError as exc:
                raise E.ConfigError(f"{key}: {exc}") from exc
        elif key in VERIFY_DEFAULTS:
            verify[key] = value
        elif key != "experiment.seed":
            raise E.ConfigError(f"{key}: unknown theory key")
    try:
        params = T.TheoryParams(**kwargs)
        T.beta_moments(params.rho, params.num_clients, params.m)
        rounds, trials, dim = (int(verify[k]) for k in ("verify.rounds", "verify.trials", "verify.dim"))
        injected = float(verify["verify.injected_bias"]) if verify["verify.injected_bias"] else None
    except ValueError as exc:
        raise E.ConfigError(f"theory: {exc}") from exc
    return params, r_values, rounds, trials, dim, injected


def cmd_theory(args):
    overrides = {k: v for k, v in _overrides(args).items() if k != "experiment.seed"}
    params, r_values, rounds, trials, dim, injected = load_theory(args.config, overrides)
    seed = args.seed or 0
    out = _out_root(args) if args.out else _out_root(args) / "theory"
    out.mkdir(parents=True, exist_ok=True)
    ok = True
    reports = [("exact", T.verify_exact(params, rounds, dim, seed))]
    for r in r_values:
        p = dataclasses.replace(params, r=r)
        # an injected bias larger than theory.bias makes the declared C' too small
        actual = p if injected is None else dataclasses.replace(p, bias=injected)
        fed = T.QuadraticFederation.build(actual, dim, seed)
        reports.append((f"r{r}", T.verify_contraction(fed, p, rounds, trials, np.random.default_rng(seed),
                                                      check=injected is None)))
    summary = []
    for name, rep in reports:
        (out / f"contraction_{name}.txt").write_text(rep.to_text())
        (out / f"contraction_{name}.csv").write_text(rep.to_csv())
        ok &= rep.passed
        summary.append(f"{name}: q={rep.q:.6g} C'={rep.c_prime:.6g} "
                       f"{'PASS' if rep.passed else 'FAIL'} ({int(rep.passed_rounds.sum())}/{rounds} rounds)")
    (out / "summary.txt").write_text("\n".join(summary) + "\n")
    print("\n".join(summary))
    return EXIT_OK if ok else EXIT_BOUND


def build_parser():
    parser = argparse.ArgumentParser(
        prog="reverbfl", description="Federated audio classification with reserve-set retraining.",
        epilog=_key_help(), formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config_help):
        p.add_argument("--config", help=config_help)
        p.add_argument("--seed", type=int, help="override the master seed")
        p.add_argument("--out", help=f"output directory (default: ${OUT_ENV} or ./runs)")
        p.add_argument("--profile", choices=sorted(E.PROFILES), default=None,
                       help="default values (desk unless the config names one)")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")
        p.epilog = _key_help()
        p.formatter_class = argparse.RawDescriptionHelpFormatter

    for name, fn, text in (("partition", cmd_partition, "write client shards and the reserve set"),
                           ("train", cmd_train, "run one experiment"),
                           ("grid", cmd_grid, "run (or resume) a grid of experiments")):
        p = sub.add_parser(name, help=text)
        common(p, "key=value config file")
        p.set_defaults(func=fn)

    p = sub.add_parser("plot", help="accuracy-vs-round SVG from metrics files")
    p.add_argument("metrics", nargs="*", help="metrics.csv files or directories to search")
    p.add_argument("--out", help="output .svg path")
    p.set_defaults(func=cmd_plot)

    p = sub.add_parser("theory-verify", help="Monte Carlo check of the contraction bound")
    common(p, "key=value file with theory.* and verify.* keys")
    p.set_defaults(func=cmd_theory)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except E.ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # noqa: BLE001 - report and map to the runtime exit code
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        if args.verbose:
            raise
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
