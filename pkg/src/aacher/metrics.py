"""Per-run and aggregate metrics CSVs.

Floats are written with ``repr`` so a read-back reproduces them exactly.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .trainer import EpochMetrics

RUN_HEADER = ("epoch", "success_rate", "mean_reward", "mean_q")
AGGREGATE_HEADER = ("epoch", "sr_mean", "sr_min", "sr_max", "rw_mean", "rw_min", "rw_max",
                    "q_mean", "q_min", "q_max")


@dataclass
class AggregateRow:
    epoch: int
    sr_mean: float
    sr_min: float
    sr_max: float
    rw_mean: float
    rw_min: float
    rw_max: float
    q_mean: float
    q_min: float
    q_max: float


def _write(path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([str(v) if isinstance(v, int) else repr(float(v)) for v in row])


def write_metrics_csv(rows: Sequence[EpochMetrics], path) -> None:
    if not rows:
        raise ValueError("no metrics rows to write")
    _write(path, RUN_HEADER, ((r.epoch, r.success_rate, r.mean_reward, r.mean_q) for r in rows))


def _read(path, header):
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        got = tuple(next(reader, ()))
        if got != header:
            raise ValueError(f"{path}: header {got} is not {header}")
        return [(int(rec[0]), *map(float, rec[1:])) for rec in reader]


def read_metrics_csv(path) -> list[EpochMetrics]:
    return [EpochMetrics(*rec) for rec in _read(path, RUN_HEADER)]


def aggregate(runs: Sequence[Sequence[EpochMetrics]]) -> list[AggregateRow]:
    """Mean/min/max across runs, epoch by epoch (only epochs every run reached)."""
    if not runs:
        raise ValueError("nothing to aggregate")
    n_epochs = min(len(r) for r in runs)
    rows = []
    for i in range(n_epochs):
        epochs = {r[i].epoch for r in runs}
        if len(epochs) != 1:
            raise ValueError(f"runs disagree on epoch numbering at row {i}: {sorted(epochs)}")
        cols = []
        for attr in ("success_rate", "mean_reward", "mean_q"):
            v = np.array([getattr(r[i], attr) for r in runs])
            cols += [float(np.mean(v)), float(v.min()), float(v.max())]
        rows.append(AggregateRow(epochs.pop(), *cols))
    return rows


def write_aggregate_csv(rows: Sequence[AggregateRow], path) -> None:
    if not rows:
        raise ValueError("no aggregate rows to write")
    _write(path, AGGREGATE_HEADER, ([getattr(r, f) for f in AGGREGATE_HEADER] for r in rows))


def read_aggregate_csv(path) -> list[AggregateRow]:
    return [AggregateRow(*rec) for rec in _read(path, AGGREGATE_HEADER)]


def run_csvs(directory) -> list[Path]:
    return sorted(Path(directory).glob("run_*.csv"))
