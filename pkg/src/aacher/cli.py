"""Command line entry point.

    aacher train --env aubo_reach --adcp A10C10 --runs 20 --seed 17 --out results/
    aacher eval --checkpoint results/run_000.ckpt --episodes 100
    aacher aggregate --dir results/

A ``--config`` file holds ``key = value`` lines named after TrainConfig
fields (plus ``runs``, ``out``, ``run_name``); ``env.<option> = value``
lines go to the environment. Flags override the file.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from . import checkpoint
from .metrics import (aggregate, read_metrics_csv, run_csvs, write_aggregate_csv,
                      write_metrics_csv)
from .networks import parse_adcp
from .rng import Rng
from .trainer import TrainConfig, evaluate, train

log = logging.getLogger("aacher")


@dataclass
class RunConfig:
    train: TrainConfig = field(default_factory=TrainConfig)
    run_name: str = ""
    out_dir: Path = Path("results")
    n_runs: int = 20
    base_seed: int = 0

    def __post_init__(self):
        if self.n_runs < 1:
            raise ValueError("runs must be >= 1")
        self.out_dir = Path(self.out_dir)
        if not self.run_name:
            self.run_name = f"{self.train.env}_{self.train.adcp}"

    def seed(self, i: int) -> int:
        return self.base_seed + i


def _parse_value(text: str):
    text = text.strip()
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def read_config_file(path) -> dict:
    """Flat ``key = value`` file; ``#`` starts a comment."""
    values = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{lineno}: expected 'key = value'")
        key, value = line.split("=", 1)
        values[key.strip()] = _parse_value(value)
    return values


_RUN_KEYS = {"runs": "n_runs", "out": "out_dir", "out_dir": "out_dir", "run_name": "run_name",
             "n_runs": "n_runs", "base_seed": "base_seed"}


def build_run_config(values: dict) -> RunConfig:
    train_fields = set(TrainConfig.field_names())
    train_kw: dict = {}
    env_options: dict = {}
    run_kw: dict = {}
    for key, value in values.items():
        if key.startswith("env."):
            env_options[key[4:]] = value
        elif key == "seed":
            run_kw["base_seed"] = int(value)
        elif key in _RUN_KEYS:
            run_kw[_RUN_KEYS[key]] = value
        elif key in train_fields:
            if key == "hidden" and isinstance(value, str):
                value = tuple(int(v) for v in value.split(","))
            elif key == "hidden" and isinstance(value, int):
                value = (value,)
            train_kw[key] = value
        else:
            raise ValueError(f"unknown config key {key!r}")
    if env_options:
        train_kw["env_options"] = {**train_kw.get("env_options", {}), **env_options}
    if "adcp" in train_kw:
        train_kw["adcp"] = parse_adcp(str(train_kw["adcp"]))
    return RunConfig(train=TrainConfig(**train_kw), **run_kw)


def _run_one(config: TrainConfig, out_dir: Path, index: int) -> tuple[int, str | None]:
    stem = out_dir / f"run_{index:03d}"
    try:
        result = train(config)
    except Exception as exc:  # recorded per run; the sweep carries on
        reason = f"{type(exc).__name__}: {exc}"
        stem.with_suffix(".error").write_text(reason + "\n")
        return index, reason
    write_metrics_csv(result.metrics, stem.with_suffix(".csv"))
    checkpoint.save(stem.with_suffix(".ckpt"), result.checkpoint)
    return index, None


def max_jobs(requested: int | None) -> int:
    cap = os.environ.get("AACHER_THREADS")
    jobs = requested or 1
    if cap:
        jobs = min(jobs, max(1, int(cap)))
    return max(1, jobs)


def run_sweep(config: RunConfig, jobs: int = 1) -> dict[int, str]:
    """Train ``n_runs`` seeds (``base_seed + i``), write per-run CSVs/checkpoints and the aggregate.

    Returns failures as ``{run index: reason}``.
    """
    out = config.out_dir
    out.mkdir(parents=True, exist_ok=True)
    for stale in list(out.glob("run_*.csv")) + list(out.glob("run_*.error")) + list(out.glob("run_*.ckpt")):
        stale.unlink()
    manifest = {"run_name": config.run_name, "n_runs": config.n_runs, "base_seed": config.base_seed,
                "train": checkpoint._config_to_json(config.train)}
    (out / "sweep.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")

    tasks = [(replace(config.train, seed=config.seed(i)), out, i) for i in range(config.n_runs)]
    jobs = max_jobs(jobs)
    if jobs == 1:
        results = [_run_one(*t) for t in tasks]
    else:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_run_one, *zip(*tasks)))
    failures = {i: reason for i, reason in results if reason is not None}
    for i, reason in sorted(failures.items()):
        log.warning("run %d failed: %s", i, reason)
    if len(failures) < config.n_runs:
        aggregate_dir(out)
    return failures


def aggregate_dir(directory) -> Path:
    paths = run_csvs(directory)
    if not paths:
        raise FileNotFoundError(f"no run_*.csv files in {directory}")
    target = Path(directory) / "aggregate.csv"
    write_aggregate_csv(aggregate([read_metrics_csv(p) for p in paths]), target)
    return target


def _parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="aacher", description=__doc__.split("\n\n")[0])
    ap.add_argument("--log-level", default="INFO")
    sub = ap.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train one or more seeded runs")
    t.add_argument("--config", help="key = value config file")
    t.add_argument("--env")
    t.add_argument("--adcp", help="ensemble shape, e.g. A10C10")
    t.add_argument("--seed", type=int, help="base seed; run i uses seed + i")
    t.add_argument("--runs", type=int)
    t.add_argument("--epochs", type=int)
    t.add_argument("--hidden", help="comma-separated hidden widths, e.g. 64,64,64")
    t.add_argument("--out")
    t.add_argument("--jobs", type=int, default=1, help="parallel runs (capped by AACHER_THREADS)")

    e = sub.add_parser("eval", help="evaluate a saved checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--episodes", type=int, default=100)
    e.add_argument("--seed", type=int, default=0)

    a = sub.add_parser("aggregate", help="summarize run CSVs into aggregate.csv")
    a.add_argument("--dir", required=True)
    return ap


def _cmd_train(args) -> None:
    values = read_config_file(args.config) if args.config else {}
    for key in ("env", "adcp", "seed", "runs", "epochs", "hidden", "out"):
        v = getattr(args, key)
        if v is not None:
            values[key] = v
    config = build_run_config(values)
    failures = run_sweep(config, args.jobs)
    if failures:
        raise RuntimeError(f"{len(failures)} of {config.n_runs} runs failed (see *.error in {config.out_dir})")
    print(config.out_dir / "aggregate.csv")


def _cmd_eval(args) -> None:
    snap = checkpoint.load(args.checkpoint)
    env = snap.config.make_env()
    m = evaluate(snap.ensemble, snap.normalizer, env, args.episodes, Rng(args.seed).stream("eval"), snap.epoch)
    print("epoch,success_rate,mean_reward,mean_q")
    print(f"{m.epoch},{m.success_rate!r},{m.mean_reward!r},{m.mean_q!r}")


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=args.log_level.upper(), format="%(asctime)s %(levelname)s %(message)s")
    try:
        if args.command == "train":
            _cmd_train(args)
        elif args.command == "eval":
            _cmd_eval(args)
        else:
            print(aggregate_dir(args.dir))
    except Exception as exc:
        print(f"aacher: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
