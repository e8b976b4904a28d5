"""Checkpoints, saved reducers, manifests and config files.

Checkpoints and reducers share one container layout (little-endian)::

    magic (4 bytes) | header_len u32 | header (UTF-8 JSON) | tensor payloads

The JSON header lists every tensor as ``{"name", "dtype", "shape", "offset"}``
with offsets relative to the start of the payload.  Keys are sorted and
nothing time-dependent is written, so the same state always produces the
same bytes.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict
from pathlib import Path
from typing import Dict, Tuple

import numpy as np

from .ensemble import ConfigError, EnsembleModel, SubheadSpec, TrunkConfig
from .inpattern import INPattern
from .reduce import AutoEncoder, PcaModel, RandomProjector, _ae_layers
from .synthdata import DatasetManifest, ImageRecord

CHECKPOINT_MAGIC = b"D2CK"
REDUCER_MAGIC = b"D2RD"


class CheckpointError(ValueError):
    """Raised when a checkpoint or reducer file is malformed or does not fit the model."""


# ---------------------------------------------------------------------------
# generic container
# ---------------------------------------------------------------------------

def pack(magic: bytes, header: dict, tensors: Dict[str, np.ndarray]) -> bytes:
    table, chunks, offset = [], [], 0
    for name in sorted(tensors):
        arr = np.asarray(tensors[name])
        dt = arr.dtype.newbyteorder("<")
        raw = np.ascontiguousarray(arr, dtype=dt).tobytes()
        table.append({"name": name, "dtype": dt.str, "shape": list(arr.shape), "offset": offset})
        chunks.append(raw)
        offset += len(raw)
    head = json.dumps({**header, "tensors": table}, sort_keys=True).encode()
    return magic + struct.pack("<I", len(head)) + head + b"".join(chunks)


def unpack(raw: bytes, magic: bytes) -> Tuple[dict, Dict[str, np.ndarray]]:
    if raw[:4] != magic:
        raise CheckpointError(f"bad magic {raw[:4]!r}, expected {magic!r}")
    (n,) = struct.unpack_from("<I", raw, 4)
    try:
        header = json.loads(raw[8:8 + n].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"unreadable header: {exc}") from None
    base = 8 + n
    tensors = {}
    for entry in header.pop("tensors"):
        dt = np.dtype(entry["dtype"])
        count = int(np.prod(entry["shape"], dtype=np.int64))
        start = base + entry["offset"]
        if start + count * dt.itemsize > len(raw):
            raise CheckpointError(f"tensor {entry['name']} runs past the end of the file")
        arr = np.frombuffer(raw, dt, count, start).reshape(entry["shape"])
        tensors[entry["name"]] = arr.astype(dt.newbyteorder("="))
    return header, tensors


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def model_state(model: EnsembleModel) -> Dict[str, np.ndarray]:
    return {name: t.data for name, t in model.named_tensors()}


def checkpoint_bytes(model: EnsembleModel, config_digest: str = "", epoch: int = 0,
                     extra: dict = None) -> bytes:
    header = {"architecture": model.architecture(), "seed": model.seed,
              "config_digest": config_digest, "epoch": epoch, "extra": extra or {}}
    return pack(CHECKPOINT_MAGIC, header, model_state(model))


def save_checkpoint(path, model: EnsembleModel, config_digest: str = "", epoch: int = 0,
                    extra: dict = None) -> None:
    Path(path).write_bytes(checkpoint_bytes(model, config_digest, epoch, extra))


def model_from_architecture(arch: dict, seed: int = 0) -> EnsembleModel:
    patterns = [INPattern.from_string(p) for p in arch["patterns"]]
    specs = [SubheadSpec(d, p) for d, p in zip(arch["clone_depths"], patterns)]
    return EnsembleModel(TrunkConfig(**arch["trunk"]), specs, arch["num_classes"], seed)


def load_state(model: EnsembleModel, state: Dict[str, np.ndarray]) -> None:
    own = dict(model.named_tensors())
    missing, unexpected = sorted(set(own) - set(state)), sorted(set(state) - set(own))
    if missing or unexpected:
        raise CheckpointError(f"state mismatch: missing {missing[:5]}, unexpected {unexpected[:5]}")
    for name, t in own.items():
        if t.data.shape != state[name].shape:
            raise CheckpointError(f"{name}: checkpoint shape {state[name].shape} != model {t.data.shape}")
        t.data = state[name].astype(t.data.dtype, copy=True)


def load_checkpoint(path, expect_architecture: dict = None) -> Tuple[EnsembleModel, dict]:
    """Rebuild the model recorded in a checkpoint; returns ``(model, header)``."""
    header, state = unpack(Path(path).read_bytes(), CHECKPOINT_MAGIC)
    arch = header["architecture"]
    if expect_architecture is not None and expect_architecture != arch:
        raise CheckpointError("checkpoint architecture does not match the expected model")
    model = model_from_architecture(arch, header.get("seed", 0))
    load_state(model, state)
    return model, header


# ---------------------------------------------------------------------------
# reducers
# ---------------------------------------------------------------------------

def save_reducer(path, reducer) -> None:
    Path(path).write_bytes(pack(REDUCER_MAGIC, reducer.header(), reducer.state()))


def load_reducer(path):
    header, state = unpack(Path(path).read_bytes(), REDUCER_MAGIC)
    kind = header.get("kind")
    if kind == "rp":
        return RandomProjector(header["D"], header["d"], header["seed"], state["U"], header["scale"])
    if kind == "pca":
        return PcaModel(state["mean"], state["components"], state["eigenvalues"], header["total_variance"])
    if kind == "ae":
        enc, dec = _ae_layers(header["D"], header["d"], header["hidden"], np.random.default_rng(0))
        ae = AutoEncoder(header["D"], header["d"], header["hidden"], header["loss"], state["mean"],
                         header["scale"], enc, dec, list(header["history"]))
        for prefix, mod in (("encoder.", enc), ("decoder.", dec)):
            for name, t in mod.named_tensors():
                t.data = state[prefix + name].astype(t.data.dtype, copy=True)
        return ae
    raise CheckpointError(f"unknown reducer kind {kind!r}")


# ---------------------------------------------------------------------------
# manifests and configs
# ---------------------------------------------------------------------------

def save_manifest(path, manifest: DatasetManifest) -> None:
    """JSON lines: a header line, then one line per image record."""
    lines = [json.dumps({"seed": manifest.seed, "version": manifest.version, "config": manifest.config},
                        sort_keys=True)]
    lines += [json.dumps(asdict(r), sort_keys=True) for r in manifest.records]
    Path(path).write_text("\n".join(lines) + "\n")


def load_manifest(path) -> DatasetManifest:
    lines = Path(path).read_text().splitlines()
    if not lines:
        raise ConfigError(f"{path} is empty")
    head = json.loads(lines[0])
    records = [ImageRecord(**json.loads(line)) for line in lines[1:] if line.strip()]
    return DatasetManifest(records, head["seed"], head["config"], head["version"])


def load_json(path) -> dict:
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be an object")
    return data


def write_json(path, data) -> None:
    Path(path).write_text(json.dumps(data, indent=2, sort_keys=True, default=_jsonable) + "\n")


def _jsonable(obj):
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    raise TypeError(f"not JSON serialisable: {type(obj).__name__}")
