"""Experiment runner: sweeps, seed management, result serialization.

A run is a grid of (sweep value, seed, scheme) cells. Every cell draws
its scenario from (system config, seed) alone and its Monte-Carlo stream
from a hash of (seed, sweep index), so schemes compared in one cell see
identical channel statistics and draws, and repeated runs are
byte-identical. Failing cells are recorded with an error tag and never
abort the sweep. Timing lives in the run report, not in the CSV.
"""
from __future__ import annotations

import csv
import json
import os
import platform
import sys
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import bench
from .asym_ao import AsymAoOptions, algorithm1
from .config import ConfigError, SystemConfig
from .detection import achievable_rate_mc, identity_state
from .scenario import make_scenario
from .wmmse_mc import McAoOptions, ao_loop

SCHEMA_VERSION = 1

CSV_COLUMNS = ["sweep_param", "sweep_value", "seed", "scheme",
               "weighted_sum_rate", "rates", "trace_sum_rate",
               "fp_residual_max", "error"]

KNOWN_SCHEMES = ("mc", "asym", "fcp", "lsfd_mmse", "lsfd_mr", "identity")

# sweep alias: one knob for all three Rician factors
KAPPA_ALIAS = "kappa"


@dataclass
class ExperimentConfig:
    system: dict = field(default_factory=dict)
    engine: str = "asym"                  # mc | asym | both
    baselines: list = field(default_factory=list)
    sweep: dict | None = None             # {"param": name, "values": [...]}
    seeds: list = field(default_factory=lambda: [0])
    out_dir: str = "results"
    mc_trials: int = 0                    # 0 -> system config default
    eval_trials: int = 10000              # MC rate evaluation budget
    fcp_trials: int = 300
    psm_steps: int = 0                    # 0 -> engine default
    ao_iters: int = 0                     # 0 -> system config default
    name: str = "run"
    meta: dict = field(default_factory=dict)
    schema_version: int = SCHEMA_VERSION

    def validate(self) -> "ExperimentConfig":
        if self.schema_version != SCHEMA_VERSION:
            raise ConfigError(f"schema_version: expected {SCHEMA_VERSION}, "
                              f"got {self.schema_version}")
        if self.engine not in ("mc", "asym", "both"):
            raise ConfigError(f"engine: must be mc|asym|both, got {self.engine!r}")
        for b in self.baselines:
            if b not in ("fcp", "lsfd_mmse", "lsfd_mr", "identity"):
                raise ConfigError(f"baselines: unknown scheme {b!r}")
        if not self.seeds:
            raise ConfigError("seeds: at least one seed required")
        base = self.base_system()
        for v in self.sweep_values():
            self.system_at(v) if v is not None else base
        return self

    def base_system(self) -> SystemConfig:
        try:
            return SystemConfig.from_dict(self.system)
        except (TypeError, ConfigError) as err:
            raise ConfigError(f"system: {err}") from err

    def sweep_values(self):
        return self.sweep["values"] if self.sweep else [None]

    def sweep_param(self):
        return self.sweep["param"] if self.sweep else ""

    def system_at(self, value) -> SystemConfig:
        d = dict(self.system)
        if value is not None:
            param = self.sweep_param()
            if param == KAPPA_ALIAS:
                d["kappa_au"] = d["kappa_ar"] = d["kappa_ru"] = value
            elif param == "L_k":
                d["L_k"] = value
            else:
                if param not in SystemConfig.__dataclass_fields__:
                    raise ConfigError(f"sweep.param: unknown parameter {param!r}")
                ref = SystemConfig.__dataclass_fields__[param].default
                if isinstance(ref, (int, float)) and not isinstance(value, (int, float)):
                    raise ConfigError(f"sweep value {value!r} does not type-check "
                                      f"against parameter {param!r}")
                d[param] = value
        if self.mc_trials:
            d["mc_trials"] = self.mc_trials
        if self.ao_iters:
            d["ao_iters"] = self.ao_iters
        try:
            return SystemConfig.from_dict(d)
        except ConfigError as err:
            raise ConfigError(f"system (at sweep value {value!r}): {err}") from err

    def schemes(self):
        out = []
        if self.engine in ("mc", "both"):
            out.append("mc")
        if self.engine in ("asym", "both"):
            out.append("asym")
        out.extend(self.baselines)
        return out

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        known = set(cls.__dataclass_fields__)
        bad = set(d) - known
        if bad:
            raise ConfigError(f"unknown experiment config fields: {sorted(bad)}")
        return cls(**d).validate()

    @classmethod
    def load(cls, path: str) -> "ExperimentConfig":
        with open(path) as fh:
            try:
                d = json.load(fh)
            except json.JSONDecodeError as err:
                raise ConfigError(f"{path}: invalid JSON ({err})") from err
        return cls.from_dict(d)


@dataclass
class ResultRow:
    sweep_param: str
    sweep_value: object
    seed: int
    scheme: str
    weighted_sum_rate: float = np.nan
    rates: tuple = ()
    trace_sum_rate: tuple = ()
    fp_residual_max: float = np.nan
    error: str = ""
    wall_time_s: float = 0.0


def _fmt(x) -> str:
    if isinstance(x, float):
        return "" if np.isnan(x) else f"{x:.17g}"
    return str(x)


def _cell_rng(seed: int, sweep_idx: int):
    return np.random.default_rng(np.random.SeedSequence(entropy=(seed, sweep_idx, 0xC5)))


def run_cell(cfg: ExperimentConfig, sweep_idx: int, value, seed: int,
             scheme: str) -> ResultRow:
    """One (sweep value, seed, scheme) cell; exceptions become error rows."""
    row = ResultRow(sweep_param=cfg.sweep_param(), sweep_value=value,
                    seed=seed, scheme=scheme)
    t0 = time.perf_counter()
    try:
        sys_cfg = cfg.system_at(value).replace(seed=seed)
        csi = make_scenario(sys_cfg)
        mu = sys_cfg.mu_arr
        rng = _cell_rng(seed, sweep_idx)
        if scheme == "mc":
            opts = McAoOptions(eval_trials=cfg.eval_trials)
            if cfg.psm_steps:
                opts.psm_steps = cfg.psm_steps
            state, trace = ao_loop(csi, opts=opts)
            rates = achievable_rate_mc(csi, state, cfg.eval_trials, rng)
            row.rates = tuple(rates)
            row.trace_sum_rate = tuple(trace.sum_rate)
            row.weighted_sum_rate = float(mu @ rates)
        elif scheme == "asym":
            opts = AsymAoOptions()
            if cfg.psm_steps:
                opts.psm_steps = cfg.psm_steps
            state, trace = algorithm1(csi, opts=opts)
            rates = achievable_rate_mc(csi, state, cfg.eval_trials, rng)
            row.rates = tuple(rates)
            row.trace_sum_rate = tuple(trace.sum_rate)
            row.weighted_sum_rate = float(mu @ rates)
            row.fp_residual_max = max(d["fp_residual"] for d in trace.diagnostics)
        elif scheme == "identity":
            rates = achievable_rate_mc(csi, identity_state(sys_cfg),
                                       cfg.eval_trials, rng)
            row.rates = tuple(rates)
            row.weighted_sum_rate = float(mu @ rates)
        elif scheme in ("lsfd_mmse", "lsfd_mr"):
            res = bench.lsfd(csi, scheme.split("_")[1], cfg.eval_trials, rng)
            row.rates = tuple(res.rates)
            row.weighted_sum_rate = res.weighted_sum_rate
        elif scheme == "fcp":
            res = bench.fcp_wmmse(csi, cfg.fcp_trials, rng)
            row.rates = tuple(res.rates)
            row.weighted_sum_rate = res.weighted_sum_rate
        else:
            raise ConfigError(f"unknown scheme {scheme!r}")
    except Exception as err:   # noqa: BLE001 - crash isolation by design
        row.error = f"{type(err).__name__}: {err}"
    row.wall_time_s = time.perf_counter() - t0
    return row


def _cells(cfg: ExperimentConfig):
    for sweep_idx, value in enumerate(cfg.sweep_values()):
        for seed in cfg.seeds:
            for scheme in cfg.schemes():
                yield sweep_idx, value, seed, scheme


def _run_cell_star(args):
    return run_cell(*args)


def run(cfg: ExperimentConfig, jobs: int = 1):
    """Execute the sweep; returns rows in canonical order and writes
    results.csv + run.json into cfg.out_dir."""
    cfg.validate()
    tasks = [(cfg, si, v, seed, scheme) for si, v, seed, scheme in _cells(cfg)]
    if jobs > 1 and len(tasks) > 1:
        import multiprocessing as mp
        with mp.Pool(processes=jobs) as pool:
            rows = pool.map(_run_cell_star, tasks)
    else:
        rows = [run_cell(*t) for t in tasks]
    # tasks are generated in canonical (sweep, seed, scheme) order and both
    # execution paths preserve it, so the output ordering is deterministic
    write_results(cfg, rows)
    return rows


def write_results(cfg: ExperimentConfig, rows):
    os.makedirs(cfg.out_dir, exist_ok=True)
    csv_path = os.path.join(cfg.out_dir, "results.csv")
    with open(csv_path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(CSV_COLUMNS)
        for r in rows:
            writer.writerow([
                r.sweep_param, _fmt(r.sweep_value), r.seed, r.scheme,
                _fmt(r.weighted_sum_rate),
                ";".join(f"{x:.17g}" for x in r.rates),
                ";".join(f"{x:.17g}" for x in r.trace_sum_rate),
                _fmt(r.fp_residual_max), r.error,
            ])
    report = {
        "config": json.loads(cfg.to_json()),
        "environment": {
            "python": sys.version.split()[0],
            "numpy": np.__version__,
            "platform": platform.platform(),
        },
        "cells": [{
            "sweep_value": r.sweep_value, "seed": r.seed, "scheme": r.scheme,
            "wall_time_s": r.wall_time_s, "error": r.error} for r in rows],
    }
    with open(os.path.join(cfg.out_dir, "run.json"), "w") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
    return csv_path


# ---------------------------------------------------------------------------
# presets: desk-scaled variants of the paper-figure families
# ---------------------------------------------------------------------------

_PAPER_SETUP = {
    "p_dbm": 23.0, "sigma2_dbm": -94.0,
    "alpha_au": 3.8, "alpha_ar": 2.0, "alpha_ru": 2.2,
    "kappa_au": 3.0, "kappa_ar": 10.0, "kappa_ru": 10.0,
}


def presets() -> dict:
    """Named experiment configurations mirroring the figure families,
    scaled to desk size; original dimensions are kept in meta."""
    base = dict(_PAPER_SETUP)
    out = {}
    out["fig2_accuracy"] = ExperimentConfig(
        system={**base, "N": 2, "K": 2, "R": 8, "T": 2, "L_k": [16, 16],
                "L": 2, "mc_trials": 2000, "ao_iters": 6},
        engine="both", sweep={"param": "L", "values": [2, 4]},
        seeds=[0, 1, 2, 3, 4], eval_trials=10000, psm_steps=5,
        name="fig2_accuracy",
        meta={"original": "L in 1..8, N=2, K=2, R=8, T in {2,4}, L_k in {16,32}"})
    out["fig3_convergence"] = ExperimentConfig(
        system={**base, "L": 2, "K": 1, "R": 4, "T": 2, "L_k": [8],
                "N": 4, "mc_trials": 2000, "ao_iters": 15},
        engine="asym", sweep={"param": "N", "values": [4, 8, 12]},
        seeds=[0, 1, 2, 3, 4], eval_trials=8000,
        name="fig3_convergence",
        meta={"original": "L=4, K=2, R=8, T=4, L_k=32, N in {4,8,12}"})
    out["fig4_ntx"] = ExperimentConfig(
        system={**base, "L": 2, "N": 2, "K": 1, "R": 4, "L_k": [8],
                "T": 2, "mc_trials": 2000, "ao_iters": 8},
        engine="asym", baselines=["fcp", "lsfd_mmse", "lsfd_mr", "identity"],
        sweep={"param": "T", "values": [1, 2]},
        seeds=list(range(10)), eval_trials=8000,
        name="fig4_ntx",
        meta={"original": "N=4, L=8, K=4, R=8, L_k=32, T in {1,2,3,4}"})
    out["fig5_rician"] = ExperimentConfig(
        system={**base, "L": 2, "N": 2, "K": 1, "R": 4, "T": 2, "L_k": [8],
                "mc_trials": 2000, "ao_iters": 8},
        engine="asym", baselines=["identity"],
        sweep={"param": "kappa", "values": [0, 10]},
        seeds=[0, 1, 2, 3, 4], eval_trials=8000,
        name="fig5_rician",
        meta={"original": "N=4, L=4, K=2, R=4, T=2, L_k=32, kappa in {0,10}"})
    out["fig6_cdf"] = ExperimentConfig(
        system={**base, "L": 2, "N": 2, "K": 1, "R": 4, "T": 2, "L_k": [8],
                "mc_trials": 2000, "ao_iters": 8},
        engine="asym", baselines=["fcp", "lsfd_mmse", "lsfd_mr"],
        seeds=list(range(20)), eval_trials=6000,
        name="fig6_cdf",
        meta={"original": "N=4, L=4, R=4, T=2, K=2, L_k=32; full CDF study"})
    return out
