"""Experiment runner CLI: run, verify, sweep, gen-data.

Configs are strict JSON (unknown keys are errors); metrics stream out as one
self-describing JSON record per line so any plotting tool can consume them.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import os
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .data import TabularSchema, gen_synthetic, load_tabular, save_tabular
from .errors import ConfigError, FedpiaError
from .fedsim import (
    DataConfig,
    ExperimentConfig,
    ModelConfig,
    run_experiment,
    spike_score,
)
from .pia import FusionConfig
from .verify import run_all

__all__ = [
    "parse_config",
    "config_hash",
    "cmd_run",
    "cmd_verify",
    "cmd_sweep",
    "cmd_gen_data",
    "main",
]


def _coerce(name: str, value, target_type):
    if target_type is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"config key {name!r} expects a boolean, got {value!r}")
        return value
    if target_type is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"config key {name!r} expects an integer, got {value!r}")
        return value
    if target_type is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"config key {name!r} expects a number, got {value!r}")
        return float(value)
    if target_type is str:
        if not isinstance(value, str):
            raise ConfigError(f"config key {name!r} expects a string, got {value!r}")
        return value
    return value


_SECTIONS = {"fusion": FusionConfig, "model": ModelConfig, "data": DataConfig}
_LIST_FIELDS = {"methods", "seeds", "class_masks", "feature_transform_seeds"}


def _build_section(cls, raw: dict, prefix: str):
    known = {f.name: f.type for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, value in raw.items():
        if key not in known:
            raise ConfigError(f"unknown config key {prefix}{key!r}")
        if key in _LIST_FIELDS:
            if value is not None and not isinstance(value, list):
                raise ConfigError(f"config key {prefix}{key!r} expects a list")
            if key in ("methods",):
                kwargs[key] = tuple(_coerce(key, v, str) for v in value)
            elif key in ("seeds",):
                kwargs[key] = tuple(_coerce(key, v, int) for v in value)
            else:
                kwargs[key] = value
            continue
        hint = known[key]
        base = {"int": int, "float": float, "str": str, "bool": bool}.get(
            str(hint).replace("<class '", "").replace("'>", ""), None
        )
        kwargs[key] = _coerce(f"{prefix}{key}", value, base) if base else value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid {prefix or 'config'} section: {exc}") from exc


def parse_config(path) -> ExperimentConfig:
    """Load a strict JSON config; unspecified fields take protocol defaults."""
    with open(path, "r") as f:
        try:
            raw = json.load(f)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: not valid JSON ({exc})") from exc
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: config root must be an object")

    top_fields = {f.name for f in dataclasses.fields(ExperimentConfig)}
    kwargs = {}
    for key, value in raw.items():
        if key not in top_fields:
            raise ConfigError(f"unknown config key {key!r}")
        if key in _SECTIONS:
            if not isinstance(value, dict):
                raise ConfigError(f"config key {key!r} expects an object")
            kwargs[key] = _build_section(_SECTIONS[key], value, f"{key}.")
        else:
            kwargs[key] = value
    flat = {k: v for k, v in kwargs.items() if k not in _SECTIONS}
    sections = {k: v for k, v in kwargs.items() if k in _SECTIONS}
    cfg_flat = _build_section(ExperimentConfig, flat, "")
    return replace(cfg_flat, **sections) if sections else cfg_flat


def config_hash(cfg: ExperimentConfig) -> str:
    """Hash of the fully-populated config, independent of key order."""
    payload = json.dumps(dataclasses.asdict(cfg), sort_keys=True, default=list)
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()


def _summary_record(method: str, seed: int, metrics, cfg_hash: str) -> dict:
    last = metrics[-1]
    rec = {
        "type": "summary",
        "method": method,
        "seed": seed,
        "rounds": len(metrics),
        "final_accuracy": last.mean_accuracy,
        "final_macro_f1": last.mean_macro_f1,
        "final_loss": last.mean_loss_end,
        "config_hash": cfg_hash,
    }
    if len(metrics) >= 2:
        rec["spike_score"] = spike_score(metrics)
    return rec


def _execute_runs(cfg: ExperimentConfig, out_dir: Path) -> dict:
    """Run every (method, seed) pair, streaming metrics; returns the manifest."""
    started = time.strftime("%Y-%m-%dT%H:%M:%S%z")
    out_dir.mkdir(parents=True, exist_ok=True)
    metrics_path = out_dir / "metrics.jsonl"
    cfg_hash = config_hash(cfg)
    summaries = []
    with open(metrics_path, "w") as f:
        for method in cfg.methods:
            for seed in cfg.seeds:
                metrics, _ = run_experiment(cfg, method, seed)
                for m in metrics:
                    f.write(json.dumps(m.to_record(method, seed), sort_keys=True))
                    f.write("\n")
                summary = _summary_record(method, seed, metrics, cfg_hash)
                summaries.append(summary)
                f.write(json.dumps(summary, sort_keys=True))
                f.write("\n")
        f.flush()
        os.fsync(f.fileno())
    manifest = {
        "config_hash": cfg_hash,
        "methods": list(cfg.methods),
        "seeds": list(cfg.seeds),
        "started": started,
        "finished": time.strftime("%Y-%m-%dT%H:%M:%S%z"),
        "artifacts": [metrics_path.name],
        "version": __version__,
        "summaries": summaries,
    }
    return manifest


def _write_manifest(out_dir: Path, manifest: dict) -> None:
    # Written last and atomically: a manifest implies a complete run.
    tmp = out_dir / "manifest.json.tmp"
    with open(tmp, "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
        f.write("\n")
        f.flush()
        os.fsync(f.fileno())
    tmp.rename(out_dir / "manifest.json")


def cmd_run(config_path, out_dir, seed: int | None = None) -> int:
    try:
        cfg = parse_config(config_path)
        if seed is not None:
            cfg = replace(cfg, seeds=(seed,))
        out = Path(out_dir)
        manifest = _execute_runs(cfg, out)
        _write_manifest(out, manifest)
    except (FedpiaError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    print(f"wrote {out / 'metrics.jsonl'}")
    return 0


def cmd_verify(inject: str | None = None) -> int:
    results = run_all(inject=inject)
    for r in results:
        if r.ok:
            print(f"ok       {r.name}")
        else:
            print(f"FAIL     {r.name}")
            if r.detail:
                print(r.detail, file=sys.stderr)
    return 0 if all(r.ok for r in results) else 1


_SWEEP_PARAMS = {
    "gamma": ("fusion", "gamma", float),
    "lambda_merge": ("fusion", "lambda_merge", float),
    "concentration": ("data", "concentration", float),
    "client_cost_mode": ("fusion", "client_cost_mode", str),
    "server_pia_on": (None, "server_pia_on", bool),
    "client_pia_on": (None, "client_pia_on", bool),
    "dataset_fraction": (None, "dataset_fraction", float),
}


def _parse_sweep_value(param: str, text: str):
    _, _, typ = _SWEEP_PARAMS[param]
    if typ is bool:
        low = text.strip().lower()
        if low in ("true", "1"):
            return True
        if low in ("false", "0"):
            return False
        raise ConfigError(f"sweep value {text!r} is not a boolean")
    if typ is float:
        try:
            return float(text)
        except ValueError:
            raise ConfigError(f"sweep value {text!r} is not a number") from None
    return text.strip()


def _apply_sweep(cfg: ExperimentConfig, param: str, value) -> ExperimentConfig:
    section, name, _ = _SWEEP_PARAMS[param]
    if section is None:
        return replace(cfg, **{name: value})
    sub = replace(getattr(cfg, section), **{name: value})
    return replace(cfg, **{section: sub})


def cmd_sweep(config_path, param: str, values: list[str], out_dir) -> int:
    try:
        if param not in _SWEEP_PARAMS:
            raise ConfigError(
                f"unknown sweep param {param!r} (choose from {sorted(_SWEEP_PARAMS)})"
            )
        base = parse_config(config_path)
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        rows = []
        for text in values:
            value = _parse_sweep_value(param, text)
            cfg = _apply_sweep(base, param, value)
            sub = out / f"{param}={text.strip()}"
            manifest = _execute_runs(cfg, sub)
            _write_manifest(sub, manifest)
            for s in manifest["summaries"]:
                rows.append({"param": param, "value": value, **s})
        with open(out / "sweep_summary.jsonl", "w") as f:
            for row in rows:
                f.write(json.dumps(row, sort_keys=True))
                f.write("\n")
            f.flush()
            os.fsync(f.fileno())
        _print_sweep_table(param, rows)
    except (FedpiaError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


def _print_sweep_table(param: str, rows: list[dict]) -> None:
    print(f"{param:>18} {'method':>18} {'seed':>5} {'acc':>8} {'f1':>8} {'spike':>9}")
    for r in rows:
        spike = r.get("spike_score")
        print(
            f"{r['value']!s:>18} {r['method']:>18} {r['seed']:>5} "
            f"{r['final_accuracy']:>8.4f} {r['final_macro_f1']:>8.4f} "
            f"{spike if spike is None else format(spike, '9.4f')}"
        )


_GEN_KEYS = {"seed": int, "n_samples": int, "features": int, "num_classes": int,
             "kind": str, "margin": float}


def cmd_gen_data(spec_path, out_path) -> int:
    try:
        with open(spec_path) as f:
            raw = json.load(f)
        if not isinstance(raw, dict):
            raise ConfigError("gen-data spec must be a JSON object")
        for key in raw:
            if key not in _GEN_KEYS:
                raise ConfigError(f"unknown gen-data key {key!r}")
        spec = {
            "seed": raw.get("seed", 0),
            "n_samples": raw.get("n_samples", 1000),
            "features": raw.get("features", 12),
            "num_classes": raw.get("num_classes", 8),
            "kind": raw.get("kind", "single"),
            "margin": raw.get("margin", 2.0),
        }
        ds = gen_synthetic(
            spec["seed"], spec["n_samples"], spec["features"],
            spec["num_classes"], spec["kind"], spec["margin"],
        )
        save_tabular(out_path, ds)
    except (FedpiaError, OSError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    print(f"wrote {out_path}")
    return 0


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="fedpia",
        description="Deterministic federated adapter-fusion lab",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="run the configured experiments")
    p_run.add_argument("--config", required=True)
    p_run.add_argument("--out", required=True)
    p_run.add_argument("--seed", type=int, default=None)

    p_verify = sub.add_parser("verify", help="run the self-verification oracles")
    p_verify.add_argument("--inject", default=None, help=argparse.SUPPRESS)

    p_sweep = sub.add_parser("sweep", help="run one experiment per parameter value")
    p_sweep.add_argument("--config", required=True)
    p_sweep.add_argument("--param", required=True)
    p_sweep.add_argument("--values", required=True, help="comma-separated values")
    p_sweep.add_argument("--out", required=True)

    p_gen = sub.add_parser("gen-data", help="write a synthetic dataset to CSV")
    p_gen.add_argument("--spec", required=True)
    p_gen.add_argument("--out", required=True)

    args = parser.parse_args(argv)
    if args.command == "run":
        return cmd_run(args.config, args.out, args.seed)
    if args.command == "verify":
        return cmd_verify(inject=args.inject)
    if args.command == "sweep":
        return cmd_sweep(args.config, args.param, args.values.split(","), args.out)
    if args.command == "gen-data":
        return cmd_gen_data(args.spec, args.out)
    parser.error(f"unknown command {args.command!r}")
    return 2


if __name__ == "__main__":
    raise SystemExit(main())
