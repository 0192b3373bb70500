"""Binary checkpoint format.

Layout: magic "EVLP", u32 little-endian format version, u64 little-endian
JSON header length, the JSON header (kind, parameter names and shapes,
config snapshot, seed), then the parameter arrays concatenated as
little-endian float64 in header order. Round trips are bitwise exact.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass

import numpy as np

from ..errors import CheckpointError
from ..models import EnergyFunction, FlowSampler, VaeModel

MAGIC = b"EVLP"
VERSION = 1


@dataclass
class Checkpoint:
    kind: str
    params: dict  # name -> float64 array
    config: dict
    seed: int


def save_checkpoint(path, kind: str, named_params, config: dict, seed: int):
    entries = [(name, np.ascontiguousarray(arr, dtype="<f8")) for name, arr in named_params]
    header = {
        "kind": kind,
        "params": [{"name": n, "shape": list(a.shape)} for n, a in entries],
        "config": config,
        "seed": int(seed),
    }
    blob = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", VERSION))
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for _, a in entries:
            fh.write(a.tobytes())


def load_checkpoint(path) -> Checkpoint:
    try:
        with open(path, "rb") as fh:
            raw = fh.read()
    except OSError as e:
        raise CheckpointError(f"cannot read checkpoint {path}: {e}") from e
    if len(raw) < 16 or raw[:4] != MAGIC:
        raise CheckpointError(f"{path}: bad magic (expected {MAGIC!r})")
    (version,) = struct.unpack("<I", raw[4:8])
    if version != VERSION:
        raise CheckpointError(f"{path}: format version {version}, expected {VERSION}")
    (header_len,) = struct.unpack("<Q", raw[8:16])
    if len(raw) < 16 + header_len:
        raise CheckpointError(f"{path}: truncated header")
    header = json.loads(raw[16 : 16 + header_len])
    params = {}
    offset = 16 + header_len
    for entry in header["params"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        end = offset + 8 * count
        if len(raw) < end:
            raise CheckpointError(f"{path}: truncated payload at parameter {entry['name']}")
        params[entry["name"]] = np.frombuffer(raw[offset:end], dtype="<f8").reshape(shape).copy()
        offset = end
    return Checkpoint(
        kind=header["kind"], params=params, config=header["config"], seed=header["seed"]
    )


def _restore_params(model, ckpt: Checkpoint, path):
    named = dict(model.named_parameters())
    if set(named) != set(ckpt.params):
        raise CheckpointError(
            f"{path}: parameter names mismatch (missing {sorted(set(named) - set(ckpt.params))})"
        )
    for name, tensor in named.items():
        arr = ckpt.params[name]
        if arr.shape != tensor.data.shape:
            raise CheckpointError(
                f"{path}: parameter {name} shape {arr.shape} vs model {tensor.data.shape}"
            )
        tensor.data = arr


def save_vae(path, model: VaeModel, seed: int, train_config: dict | None = None):
    named = [(n, p.data) for n, p in model.named_parameters()]
    save_checkpoint(
        path, "vae", named, {"arch": model.arch(), "train": train_config or {}}, seed
    )


def load_vae(path) -> VaeModel:
    ckpt = load_checkpoint(path)
    if ckpt.kind != "vae":
        raise CheckpointError(f"{path}: kind {ckpt.kind!r}, expected 'vae'")
    arch = ckpt.config["arch"]
    model = VaeModel(
        arch["data_dim"], arch["nz"], hidden=tuple(arch["hidden"]), obs_model=arch["obs_model"]
    )
    _restore_params(model, ckpt, path)
    return model


def save_energy(path, model: EnergyFunction, seed: int, train_config: dict | None = None):
    named = [(n, p.data) for n, p in model.named_parameters()]
    save_checkpoint(
        path, "energy", named, {"arch": model.arch(), "train": train_config or {}}, seed
    )


def load_energy(path) -> EnergyFunction:
    ckpt = load_checkpoint(path)
    if ckpt.kind != "energy":
        raise CheckpointError(f"{path}: kind {ckpt.kind!r}, expected 'energy'")
    arch = ckpt.config["arch"]
    model = EnergyFunction(arch["nz"], arch["nd"])
    _restore_params(model, ckpt, path)
    return model


def save_flow(path, model: FlowSampler, seed: int, train_config: dict | None = None):
    named = [(n, p.data) for n, p in model.named_parameters()]
    save_checkpoint(
        path, "flow", named, {"arch": model.arch(), "train": train_config or {}}, seed
    )


def load_flow(path) -> FlowSampler:
    ckpt = load_checkpoint(path)
    if ckpt.kind != "flow":
        raise CheckpointError(f"{path}: kind {ckpt.kind!r}, expected 'flow'")
    arch = ckpt.config["arch"]
    model = FlowSampler(arch["nz"], arch["nh"], arch["n_layers"])
    _restore_params(model, ckpt, path)
    model.norm_initialized = True
    return model
