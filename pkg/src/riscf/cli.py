"""Command-line interface.

    riscf run <config.json> [--seeds 0,1,2] [--engine asym] [--out DIR]
                            [--jobs N] [--mc-trials N]
    riscf presets list
    riscf presets emit <name> <path>

Any experiment config key can also be overridden through the environment
with the RISCF_ prefix, e.g. RISCF_ENGINE=mc or RISCF_SYSTEM__L=4 (double
underscore descends into nested keys, values are parsed as JSON when
possible).
"""
from __future__ import annotations

import argparse
import json
import os
import sys

from .config import ConfigError
from .experiments import ExperimentConfig, presets, run

ENV_PREFIX = "RISCF_"


def _parse_env_value(raw: str):
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw


def _canonical_key(token: str) -> str:
    """Map a case-insensitive env token onto the exact config field name."""
    from .config import SystemConfig
    from .experiments import ExperimentConfig
    known = (list(ExperimentConfig.__dataclass_fields__)
             + list(SystemConfig.__dataclass_fields__) + ["param", "values"])
    for name in known:
        if name.lower() == token.lower():
            return name
    return token.lower()


def apply_env_overrides(d: dict, env=None) -> dict:
    env = os.environ if env is None else env
    for key, raw in sorted(env.items()):
        if not key.startswith(ENV_PREFIX):
            continue
        path = [_canonical_key(t) for t in key[len(ENV_PREFIX):].split("__")]
        node = d
        for part in path[:-1]:
            node = node.setdefault(part, {})
        node[path[-1]] = _parse_env_value(raw)
    return d


def _load_config(path: str, args) -> ExperimentConfig:
    with open(path) as fh:
        d = json.load(fh)
    apply_env_overrides(d)
    if args.seeds:
        d["seeds"] = [int(s) for s in args.seeds.split(",")]
    if args.engine:
        d["engine"] = args.engine
    if args.out:
        d["out_dir"] = args.out
    if args.mc_trials:
        d["mc_trials"] = args.mc_trials
    return ExperimentConfig.from_dict(d)


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="riscf",
                                     description="RIS-assisted cell-free uplink experiments")
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="execute an experiment configuration")
    p_run.add_argument("config", help="path to a JSON experiment config")
    p_run.add_argument("--seeds", default="", help="comma-separated seed list override")
    p_run.add_argument("--engine", default="", choices=["", "mc", "asym", "both"])
    p_run.add_argument("--out", default="", help="output directory override")
    p_run.add_argument("--jobs", type=int, default=1, help="parallel worker count")
    p_run.add_argument("--mc-trials", type=int, default=0, dest="mc_trials")

    p_pre = sub.add_parser("presets", help="list or emit named presets")
    pre_sub = p_pre.add_subparsers(dest="presets_command", required=True)
    pre_sub.add_parser("list", help="print available preset names")
    p_emit = pre_sub.add_parser("emit", help="write a preset config to a file")
    p_emit.add_argument("name")
    p_emit.add_argument("path")

    args = parser.parse_args(argv)
    try:
        if args.command == "run":
            cfg = _load_config(args.config, args)
            rows = run(cfg, jobs=args.jobs)
            failed = [r for r in rows if r.error]
            print(f"{len(rows)} cells -> {os.path.join(cfg.out_dir, 'results.csv')}"
                  + (f" ({len(failed)} failed)" if failed else ""))
            for r in failed:
                print(f"  FAILED {r.scheme} seed={r.seed} value={r.sweep_value}: {r.error}",
                      file=sys.stderr)
            return 0
        if args.command == "presets":
            table = presets()
            if args.presets_command == "list":
                for name, cfg in table.items():
                    print(f"{name}: engine={cfg.engine}, sweep={cfg.sweep}, "
                          f"seeds={len(cfg.seeds)}")
                return 0
            if args.name not in table:
                print(f"unknown preset {args.name!r}; available: "
                      f"{', '.join(table)}", file=sys.stderr)
                return 2
            with open(args.path, "w") as fh:
                fh.write(table[args.name].to_json() + "\n")
            print(f"wrote {args.name} to {args.path}")
            return 0
    except ConfigError as err:
        print(f"configuration error: {err}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
