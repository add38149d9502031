"""Versioned binary checkpoints.

Layout::

    b"AACHERCK"               8-byte magic
    version                   uint32, little endian
    header length             uint64, little endian
    header                    UTF-8 JSON: metadata plus (name, shape) of every array
    payload                   float64 little endian, arrays concatenated row-major

Every array listed in the header must be fully present; a short file is
reported as truncation, never returned as a partial ensemble.
"""
from __future__ import annotations

import json
import struct
from dataclasses import asdict
from pathlib import Path

import numpy as np

from .networks import AdcpSpec, Ensemble
from .numcore import AdamState, MlpParams
from .trainer import Normalizer, RunningStats, Snapshot, TrainConfig

MAGIC = b"AACHERCK"
VERSION = 1
_PREFIX = struct.Struct("<8sIQ")


class CheckpointError(ValueError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointTruncatedError(CheckpointError):
    pass


class CheckpointShapeError(CheckpointError):
    pass


def _net_arrays(prefix: str, params: MlpParams):
    for layer, name, arr in params.named_tensors():
        yield f"{prefix}.{layer}.{name}", arr


def _config_to_json(config: TrainConfig) -> dict:
    out = asdict(config)
    out["adcp"] = str(config.adcp)
    out["hidden"] = list(config.hidden)
    return out


def save(path, snap: Snapshot) -> None:
    ens, norm = snap.ensemble, snap.normalizer
    arrays: list[tuple[str, np.ndarray]] = []
    for prefix, params in (("actors", ens.actors), ("critics", ens.critics),
                           ("target_actors", ens.target_actors), ("target_critics", ens.target_critics),
                           ("adam_actors.m", ens.actor_adam.m), ("adam_actors.v", ens.actor_adam.v),
                           ("adam_critics.m", ens.critic_adam.m), ("adam_critics.v", ens.critic_adam.v)):
        arrays.extend(_net_arrays(prefix, params))
    for which, stats in (("state", norm.state), ("goal", norm.goal)):
        arrays.append((f"norm.{which}.sum", stats.sum))
        arrays.append((f"norm.{which}.sumsq", stats.sumsq))

    header = {
        "adcp": [ens.adcp.d, ens.adcp.p],
        "max_action": ens.max_action,
        "actor_sizes": list(ens.actors.layer_sizes),
        "critic_sizes": list(ens.critics.layer_sizes),
        "ln_eps": ens.actors.ln_eps,
        "adam_t": [ens.actor_adam.t, ens.critic_adam.t],
        "normalizer": {"clip_range": norm.clip_range,
                       "state": {"size": norm.state.size, "count": norm.state.count, "eps": norm.state.eps},
                       "goal": {"size": norm.goal.size, "count": norm.goal.count, "eps": norm.goal.eps}},
        "epoch": snap.epoch,
        "config": _config_to_json(snap.config),
        "arrays": [{"name": n, "shape": list(a.shape)} for n, a in arrays],
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    payload = b"".join(np.ascontiguousarray(a, dtype="<f8").tobytes() for _, a in arrays)
    Path(path).write_bytes(_PREFIX.pack(MAGIC, VERSION, len(blob)) + blob + payload)


def _expected_shapes(header: dict) -> dict[str, tuple]:
    d, p = header["adcp"]
    shapes = {}
    for prefix, sizes, m in (("actors", header["actor_sizes"], d), ("critics", header["critic_sizes"], p)):
        n_layers = len(sizes) - 1
        for role in (prefix, f"target_{prefix}", f"adam_{prefix}.m", f"adam_{prefix}.v"):
            for i in range(n_layers):
                shapes[f"{role}.{i}.weight"] = (m, sizes[i], sizes[i + 1])
                shapes[f"{role}.{i}.bias"] = (m, sizes[i + 1])
                if i < n_layers - 1:
                    shapes[f"{role}.{i}.ln_gain"] = (m, sizes[i + 1])
                    shapes[f"{role}.{i}.ln_bias"] = (m, sizes[i + 1])
    for which in ("state", "goal"):
        size = header["normalizer"][which]["size"]
        shapes[f"norm.{which}.sum"] = (size,)
        shapes[f"norm.{which}.sumsq"] = (size,)
    return shapes


def _params_from(arrays: dict, prefix: str, sizes, activation: str, ln_eps: float) -> MlpParams:
    n_layers = len(sizes) - 1
    return MlpParams(
        tuple(sizes),
        [arrays[f"{prefix}.{i}.weight"] for i in range(n_layers)],
        [arrays[f"{prefix}.{i}.bias"] for i in range(n_layers)],
        [arrays[f"{prefix}.{i}.ln_gain"] for i in range(n_layers - 1)],
        [arrays[f"{prefix}.{i}.ln_bias"] for i in range(n_layers - 1)],
        activation, ln_eps)


def load(path) -> Snapshot:
    raw = Path(path).read_bytes()
    if len(raw) < _PREFIX.size:
        raise CheckpointTruncatedError(f"{path}: file ends inside the fixed prefix")
    magic, version, header_len = _PREFIX.unpack_from(raw)
    if magic != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    if version != VERSION:
        raise CheckpointVersionError(f"{path}: checkpoint version {version}, this build reads {VERSION}")
    start = _PREFIX.size
    if len(raw) < start + header_len:
        raise CheckpointTruncatedError(f"{path}: file ends inside the header")
    try:
        header = json.loads(raw[start:start + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: unreadable header ({exc})") from None

    expected = _expected_shapes(header)
    listed = {a["name"]: tuple(a["shape"]) for a in header["arrays"]}
    if listed != expected:
        bad = sorted(n for n in expected.keys() | listed.keys() if expected.get(n) != listed.get(n))
        raise CheckpointShapeError(f"{path}: arrays disagree with declared layer sizes: {', '.join(bad[:5])}")

    total = sum(int(np.prod(s)) for s in listed.values()) * 8
    offset = start + header_len
    if len(raw) - offset < total:
        raise CheckpointTruncatedError(f"{path}: payload has {len(raw) - offset} bytes, expected {total}")
    if len(raw) - offset > total:
        raise CheckpointError(f"{path}: {len(raw) - offset - total} unexpected trailing bytes")
    arrays = {}
    for entry in header["arrays"]:
        shape = tuple(entry["shape"])
        n = int(np.prod(shape))
        arrays[entry["name"]] = np.frombuffer(raw, dtype="<f8", count=n, offset=offset).reshape(shape).astype(np.float64)
        offset += n * 8

    ln_eps = header["ln_eps"]
    asz, csz = header["actor_sizes"], header["critic_sizes"]
    net = lambda prefix, sizes, act: _params_from(arrays, prefix, sizes, act, ln_eps)  # noqa: E731
    actor_adam = AdamState(net("adam_actors.m", asz, "tanh"), net("adam_actors.v", asz, "tanh"), header["adam_t"][0])
    critic_adam = AdamState(net("adam_critics.m", csz, "linear"), net("adam_critics.v", csz, "linear"),
                            header["adam_t"][1])
    ens = Ensemble(AdcpSpec(*header["adcp"]), net("actors", asz, "tanh"), net("critics", csz, "linear"),
                   net("target_actors", asz, "tanh"), net("target_critics", csz, "linear"),
                   actor_adam, critic_adam, header["max_action"])

    nh = header["normalizer"]
    norm = Normalizer(nh["state"]["size"], nh["goal"]["size"], nh["clip_range"])
    for which in ("state", "goal"):
        stats = RunningStats(nh[which]["size"], nh[which]["eps"])
        stats.count = nh[which]["count"]
        stats.sum = arrays[f"norm.{which}.sum"]
        stats.sumsq = arrays[f"norm.{which}.sumsq"]
        setattr(norm, which, stats)
    return Snapshot(TrainConfig(**header["config"]), ens, norm, header["epoch"])
