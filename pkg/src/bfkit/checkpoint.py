"""Weight checkpoint format.

Layout: magic bytes ``BFWT1``, a little-endian u64 manifest length, a JSON
manifest describing each tensor (name, shape, dtype, byte offset into the
payload) plus free-form metadata, then the raw little-endian payloads.
Round trips are bit exact.
"""

from __future__ import annotations

import dataclasses
import json
import struct

import numpy as np

from .autodiff import Tensor
from .model import ModelConfig, ModelState

MAGIC_WEIGHTS = b"BFWT1"

_DTYPES = {"<f8": "<f8", "<f4": "<f4"}


class CheckpointError(ValueError):
    pass


def _dtype_tag(dtype):
    tag = np.dtype(dtype).newbyteorder("<").str
    if tag not in _DTYPES:
        raise CheckpointError(f"unsupported checkpoint dtype {dtype}")
    return tag


def save_weights(path, arrays, meta=None):
    """`arrays` maps name -> ndarray; `meta` is any JSON-serializable dict."""
    manifest = {"tensors": [], "meta": meta or {}}
    payloads = []
    offset = 0
    for name in sorted(arrays):
        # np.asarray, not ascontiguousarray: the latter turns 0-d into 1-d
        arr = np.asarray(arrays[name])
        tag = _dtype_tag(arr.dtype)
        blob = arr.astype(tag, copy=False).tobytes()
        manifest["tensors"].append({"name": name, "shape": list(arr.shape),
                                    "dtype": tag, "offset": offset})
        payloads.append(blob)
        offset += len(blob)
    blob = json.dumps(manifest).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC_WEIGHTS)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for p in payloads:
            fh.write(p)


def load_weights(path):
    """Returns (arrays dict, meta dict)."""
    with open(path, "rb") as fh:
        if fh.read(len(MAGIC_WEIGHTS)) != MAGIC_WEIGHTS:
            raise CheckpointError(f"bad magic bytes in {path!r}")
        (mlen,) = struct.unpack("<Q", fh.read(8))
        manifest = json.loads(fh.read(mlen).decode("utf-8"))
        payload = fh.read()
    arrays = {}
    for entry in manifest["tensors"]:
        dtype = np.dtype(entry["dtype"])
        shape = tuple(entry["shape"])
        count = int(np.prod(shape, dtype=np.int64)) if shape else 1
        start = entry["offset"]
        end = start + count * dtype.itemsize
        if end > len(payload):
            raise CheckpointError(
                f"truncated payload for tensor '{entry['name']}' in {path!r}")
        arrays[entry["name"]] = np.frombuffer(
            payload[start:end], dtype=dtype).reshape(shape).copy()
    return arrays, manifest.get("meta", {})


def save_model(path, model, extra_meta=None):
    meta = {"model_config": dataclasses.asdict(model.config)}
    if extra_meta:
        meta.update(extra_meta)
    save_weights(path, model.param_arrays(), meta)


def load_model(path):
    arrays, meta = load_weights(path)
    if "model_config" not in meta:
        raise CheckpointError(f"{path!r} carries no model configuration")
    config = ModelConfig(**meta["model_config"])
    params = {k: Tensor(v, requires_grad=True) for k, v in arrays.items()}
    return ModelState(config, params)
