"""Versioned model checkpoints.

Layout: ``MAGIC`` | u32 version | u64 header length | JSON header (sorted
keys, UTF-8) | float32 little-endian payload of every array in header order.
"""
from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path
from typing import Optional, Tuple, Union

import numpy as np

from .errors import DataError
from .model import BehaviorTest, BsenConfig, BsenNet, CenterBank, build_model

MAGIC = b"BSENCKPT"
VERSION = 1
_PREFIX = struct.Struct("<IQ")


class CheckpointError(DataError):
    pass


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def config_hash(config: Union[BsenConfig, dict]) -> str:
    d = config.to_dict() if isinstance(config, BsenConfig) else config
    return hashlib.sha256(canonical_json(d).encode()).hexdigest()[:16]


def save_checkpoint(model: BsenNet, path: Union[str, Path], centers: Optional[CenterBank] = None,
                    behavior_test: Optional[BehaviorTest] = None, epoch: int = 0,
                    extra: Optional[dict] = None) -> str:
    """Write ``model`` (params, batchnorm buffers, optional centers); returns the payload sha256."""
    arrays = dict(model.state_arrays())
    if centers is not None:
        arrays["centers"] = centers.centers
    payload = b"".join(np.ascontiguousarray(a, dtype="<f4").tobytes() for a in arrays.values())
    digest = hashlib.sha256(payload).hexdigest()
    header = {
        "format": "bsen-checkpoint",
        "version": VERSION,
        "config": model.config.to_dict(),
        "config_hash": config_hash(model.config),
        "seed": model.config.seed,
        "epoch": int(epoch),
        "behavior_test": BehaviorTest(behavior_test).value if behavior_test is not None else "none",
        "arrays": [{"name": k, "shape": list(a.shape)} for k, a in arrays.items()],
        "center_counts": None if centers is None else [int(c) for c in centers.counts],
        "payload_sha256": digest,
        "extra": extra or {},
    }
    hb = canonical_json(header).encode("utf-8")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(MAGIC + _PREFIX.pack(VERSION, len(hb)) + hb + payload)
    return digest


def read_header(path: Union[str, Path]) -> Tuple[dict, bytes]:
    raw = Path(path).read_bytes()
    if not raw.startswith(MAGIC) or len(raw) < len(MAGIC) + _PREFIX.size:
        raise CheckpointError(f"{path}: not a checkpoint file")
    version, hlen = _PREFIX.unpack_from(raw, len(MAGIC))
    if version != VERSION:
        raise CheckpointError(f"{path}: checkpoint version {version}, this build reads {VERSION}")
    start = len(MAGIC) + _PREFIX.size
    if len(raw) < start + hlen:
        raise CheckpointError(f"{path}: truncated header")
    try:
        header = json.loads(raw[start:start + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt header ({exc})") from None
    return header, raw[start + hlen:]


def load_checkpoint(path: Union[str, Path]):
    """Returns ``(model, centers or None, header)``."""
    header, payload = read_header(path)
    expected = sum(4 * int(np.prod(a["shape"], dtype=np.int64)) for a in header["arrays"])
    if len(payload) != expected:
        raise CheckpointError(f"{path}: payload is {len(payload)} bytes, header declares {expected} (truncated?)")
    if hashlib.sha256(payload).hexdigest() != header["payload_sha256"]:
        raise CheckpointError(f"{path}: payload checksum mismatch")
    cfg = header["config"]
    cfg = {**cfg, "input_dims": tuple(cfg["input_dims"]), "channels": tuple(cfg["channels"])}
    model = build_model(BsenConfig.from_dict(cfg))
    state = model.state_arrays()
    offset = 0
    centers = None
    for entry in header["arrays"]:
        shape = tuple(entry["shape"])
        n = int(np.prod(shape, dtype=np.int64))
        arr = np.frombuffer(payload, dtype="<f4", count=n, offset=offset).reshape(shape)
        offset += 4 * n
        if entry["name"] == "centers":
            centers = CenterBank(arr.copy(), np.array(header["center_counts"], dtype=np.int64))
            continue
        if entry["name"] not in state or state[entry["name"]].shape != shape:
            raise CheckpointError(f"{path}: unexpected array {entry['name']} {shape}")
        state[entry["name"]][...] = arr
    return model, centers, header
