"""Versioned binary checkpoints.

Layout::

    b"PSMC" | u32 version (=1) | u64 manifest length | UTF-8 JSON manifest | payload

The manifest holds ``tensors`` (name, dtype "f32"/"f64", shape, offset,
byte_len; offsets relative to payload start), ``backbone_sha256`` and
``kind`` ("full" or "peft"), plus the model/PEFT configs needed to rebuild
the model and a free-form ``meta`` dict. Payload is little-endian raw data.
A ``peft`` checkpoint carries only the PEFT tensors and must be loaded
against a backbone whose content hash matches.
"""

import json
import os
import struct

import numpy as np

from smoothcert.peft import PeftConfig, PeftState, expected_shapes
from smoothcert.tensor import Tensor
from smoothcert.vit import VitConfig, VitModel

MAGIC = b"PSMC"
VERSION = 1
_DTYPES = {"f32": np.dtype("<f4"), "f64": np.dtype("<f8")}
_TAGS = {np.dtype(np.float32): "f32", np.dtype(np.float64): "f64"}


class CheckpointError(ValueError):
    pass


def _entries(arrays, prefix=""):
    for name in sorted(arrays):
        yield prefix + name, arrays[name]


def save_checkpoint(model, path, kind="full"):
    """Write ``model``; ``kind="peft"`` stores only the attached PEFT tensors."""
    if kind not in ("full", "peft"):
        raise CheckpointError(f"unknown checkpoint kind {kind!r}")
    tensors = []
    if kind == "full":
        tensors += list(_entries(model.backbone_arrays(), "backbone/"))
    if model.peft is not None:
        tensors += list(_entries(model.peft.arrays(), "peft/"))
    elif kind == "peft":
        raise CheckpointError("model has no PEFT state to save")
    if kind == "peft" and model.peft.method == "full":
        raise CheckpointError("method 'full' changes the backbone; save kind='full'")

    manifest_tensors, chunks, offset = [], [], 0
    for name, arr in tensors:
        arr = np.ascontiguousarray(arr)
        tag = _TAGS.get(arr.dtype)
        if tag is None:
            raise CheckpointError(f"{name}: unsupported dtype {arr.dtype}")
        raw = arr.astype(_DTYPES[tag], copy=False).tobytes()
        manifest_tensors.append({"name": name, "dtype": tag, "shape": list(arr.shape),
                                 "offset": offset, "byte_len": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    manifest = {
        "kind": kind,
        "backbone_sha256": model.backbone_hash(),
        "tensors": manifest_tensors,
        "vit_config": model.config.to_dict(),
        "peft_config": None if model.peft is None else model.peft.config.to_dict(),
        "peft_merged": bool(model.peft is not None and model.peft.merged),
        "trainable": bool(model.trainable),
        "meta": model.meta,
    }
    blob = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode("utf-8")
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<IQ", VERSION, len(blob)))
        fh.write(blob)
        for raw in chunks:
            fh.write(raw)
    os.replace(tmp, path)


def read_checkpoint(path):
    """Parse and validate a checkpoint file; returns ``(manifest, arrays)``."""
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < 16 or data[:4] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    version, mlen = struct.unpack("<IQ", data[4:16])
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported format version {version}")
    if 16 + mlen > len(data):
        raise CheckpointError(f"{path}: truncated manifest")
    try:
        manifest = json.loads(data[16:16 + mlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt manifest ({exc})") from None
    payload = memoryview(data)[16 + mlen:]
    arrays, end = {}, 0
    for entry in manifest.get("tensors", []):
        dtype = _DTYPES.get(entry["dtype"])
        if dtype is None:
            raise CheckpointError(f"{entry['name']}: unknown dtype {entry['dtype']!r}")
        shape = tuple(entry["shape"])
        start, n = entry["offset"], entry["byte_len"]
        if n != int(np.prod(shape, dtype=np.int64)) * dtype.itemsize:
            raise CheckpointError(f"{entry['name']}: byte_len {n} does not match shape {shape}")
        if start < 0 or start + n > len(payload):
            raise CheckpointError(f"{entry['name']}: payload truncated")
        arrays[entry["name"]] = np.frombuffer(payload[start:start + n], dtype=dtype).reshape(shape).copy()
        end = max(end, start + n)
    if end != len(payload):
        raise CheckpointError(f"{path}: payload has {len(payload) - end} unexpected trailing bytes")
    if manifest.get("kind") not in ("full", "peft"):
        raise CheckpointError(f"{path}: unknown kind {manifest.get('kind')!r}")
    return manifest, arrays


def _native(a):
    return a.astype(a.dtype.newbyteorder("="), copy=False)


def _peft_state(manifest, arrays, vit_config):
    if manifest["peft_config"] is None:
        return None
    config = PeftConfig.from_dict(manifest["peft_config"])
    params = {k[len("peft/"):]: v for k, v in arrays.items() if k.startswith("peft/")}
    expected = expected_shapes(config, vit_config)
    if {k: tuple(v.shape) for k, v in params.items()} != expected:
        raise CheckpointError("manifest/payload mismatch: PEFT tensors do not match the PEFT config")
    tensors = {k: Tensor(_native(v), requires_grad=True) for k, v in params.items()}
    return PeftState(config, tensors, merged=manifest.get("peft_merged", False))


def load_checkpoint(path, backbone=None):
    """Rebuild a model. PEFT-only checkpoints need the matching ``backbone``."""
    manifest, arrays = read_checkpoint(path)
    vit_config = VitConfig(**manifest["vit_config"])
    if manifest["kind"] == "peft":
        if backbone is None:
            raise CheckpointError("PEFT-only checkpoint needs a backbone model to attach to")
        if backbone.backbone_hash() != manifest["backbone_sha256"]:
            raise CheckpointError("backbone hash mismatch: checkpoint was trained on a different backbone")
        if backbone.config != vit_config:
            raise CheckpointError("backbone config differs from checkpoint config")
        state = _peft_state(manifest, arrays, vit_config)
        return VitModel(vit_config, backbone.backbone_arrays(), peft=state, meta=manifest.get("meta"))
    back = {k[len("backbone/"):]: _native(v) for k, v in arrays.items() if k.startswith("backbone/")}
    try:
        model = VitModel(vit_config, back, peft=_peft_state(manifest, arrays, vit_config),
                         trainable=manifest.get("trainable", False), meta=manifest.get("meta"))
    except ValueError as exc:
        raise CheckpointError(f"manifest/payload mismatch: {exc}") from None
    if model.backbone_hash() != manifest["backbone_sha256"]:
        raise CheckpointError("backbone hash mismatch: payload corrupted")
    return model
