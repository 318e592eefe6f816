"""Versioned binary checkpoints.

Layout (all integers little-endian)::

    offset 0   8 bytes   magic b"QPVMCKPT"
    offset 8   uint32    format version (currently 1)
    offset 12  uint64    header length H in bytes
    offset 20  H bytes   UTF-8 JSON header
    then       float64[] theta, then Adam m and v when header "has_moments"

Each array holds ``header["num_params"]`` little-endian IEEE-754 doubles.
The header carries the run-config snapshot, the model config, the partition
table, the parameter seed, optimizer kind/learning rate/step, the number of
completed epochs and the RNG state. Batch order is derived from
``(seed, epoch)``, so ``rng_state`` records exactly that pair.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from qpvm.model import ModelConfig, ParameterStore
from qpvm.training import OptimizerState

MAGIC = b"QPVMCKPT"
FORMAT_VERSION = 1
_PREFIX = struct.Struct("<8sIQ")


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    run_config: dict
    model_config: ModelConfig
    store: ParameterStore
    optimizer: OptimizerState
    epoch: int
    rng_state: dict


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    opt = ckpt.optimizer
    has_moments = opt.m is not None
    header = {
        "format_version": FORMAT_VERSION,
        "run_config": ckpt.run_config,
        "model_config": ckpt.model_config.to_dict(),
        "num_params": int(ckpt.store.theta.size),
        "partitions": {k: list(v) for k, v in ckpt.store.partitions.items()},
        "seed": ckpt.store.seed,
        "optimizer": {
            "kind": opt.kind,
            "learning_rate": opt.learning_rate,
            "t": opt.t,
            "has_moments": has_moments,
        },
        "epoch": ckpt.epoch,
        "rng_state": ckpt.rng_state,
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    arrays = [ckpt.store.theta]
    if has_moments:
        arrays += [opt.m, opt.v]
    payload = b"".join(np.asarray(a, dtype="<f8").tobytes() for a in arrays)
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(_PREFIX.pack(MAGIC, FORMAT_VERSION, len(blob)) + blob + payload)
    tmp.replace(path)


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint not found: {path}")
    raw = path.read_bytes()
    if len(raw) < _PREFIX.size:
        raise CheckpointError(f"{path}: truncated checkpoint")
    magic, version, hlen = _PREFIX.unpack_from(raw)
    if magic != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    start = _PREFIX.size
    header = json.loads(raw[start : start + hlen].decode("utf-8"))
    n = header["num_params"]
    opt_h = header["optimizer"]
    n_arrays = 3 if opt_h["has_moments"] else 1
    body = raw[start + hlen :]
    if len(body) != 8 * n * n_arrays:
        raise CheckpointError(f"{path}: payload size {len(body)} does not match header")
    arrays = np.frombuffer(body, dtype="<f8").astype(np.float64).reshape(n_arrays, n)
    partitions = {k: tuple(v) for k, v in header["partitions"].items()}
    store = ParameterStore(arrays[0].copy(), partitions, header["seed"])
    m = arrays[1].copy() if n_arrays == 3 else None
    v = arrays[2].copy() if n_arrays == 3 else None
    opt = OptimizerState(opt_h["kind"], opt_h["learning_rate"], opt_h["t"], m, v)
    return Checkpoint(
        run_config=header["run_config"],
        model_config=ModelConfig.from_dict(header["model_config"]),
        store=store,
        optimizer=opt,
        epoch=header["epoch"],
        rng_state=header["rng_state"],
    )
