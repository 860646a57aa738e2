"""Single-file checkpoint container.

Layout::

    b"APARTCKPT1"                 10-byte magic
    uint64 little-endian          header length in bytes
    UTF-8 JSON header             byte order, config hash, RNG state, block table
    raw block bytes               little-endian float32/float64, C order

Each block-table entry is ``{"name", "shape", "dtype", "offset", "nbytes"}``
with ``offset`` relative to the start of the block section.
"""
from __future__ import annotations

import json
import struct
from typing import Dict, Iterable, Optional, Tuple

import numpy as np

MAGIC = b"APARTCKPT1"
_DTYPES = {"f4": np.dtype("<f4"), "f8": np.dtype("<f8")}


class CheckpointError(ValueError):
    pass


def save_checkpoint(path: str, blocks: Iterable[Tuple[str, np.ndarray]], config_hash: str,
                    rng_state: Optional[dict] = None, meta: Optional[dict] = None) -> None:
    table, payload, offset = [], [], 0
    seen = set()
    for name, arr in blocks:
        if name in seen:
            raise CheckpointError(f"duplicate block name {name!r}")
        seen.add(name)
        arr = np.asarray(arr)
        code = "f4" if arr.dtype == np.float32 else "f8"
        raw = np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes()
        table.append({"name": name, "shape": list(arr.shape), "dtype": code,
                      "offset": offset, "nbytes": len(raw)})
        payload.append(raw)
        offset += len(raw)
    header = {"format": 1, "byte_order": "little", "config_hash": config_hash,
              "rng_state": rng_state, "meta": meta or {}, "blocks": table}
    head = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(head)))
        fh.write(head)
        for raw in payload:
            fh.write(raw)


def load_checkpoint(path: str) -> Tuple[dict, Dict[str, np.ndarray]]:
    with open(path, "rb") as fh:
        data = fh.read()
    if not data.startswith(MAGIC):
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    pos = len(MAGIC)
    if len(data) < pos + 8:
        raise CheckpointError(f"{path}: truncated header length")
    (hlen,) = struct.unpack_from("<Q", data, pos)
    pos += 8
    try:
        header = json.loads(data[pos:pos + hlen].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt header: {exc}") from None
    if header.get("byte_order") != "little":
        raise CheckpointError(f"{path}: unsupported byte order {header.get('byte_order')!r}")
    base = pos + hlen
    arrays = {}
    for entry in header["blocks"]:
        start = base + entry["offset"]
        end = start + entry["nbytes"]
        if end > len(data):
            raise CheckpointError(f"{path}: block {entry['name']!r} runs past end of file")
        arr = np.frombuffer(data[start:end], dtype=_DTYPES[entry["dtype"]])
        arrays[entry["name"]] = arr.reshape(entry["shape"]).copy()
    return header, arrays


def model_blocks(estimator):
    state = estimator.state_
    blocks = [(f"backbone.{name}", p.data) for name, p in state.backbone.named_parameters()]
    blocks += [(name, p.data) for name, p in state.named_parameters()]
    return blocks


def save_model(estimator, path: str, config_hash: str) -> None:
    """Checkpoint a fitted :class:`~apart.estimator.APARTClassifier`."""
    state = estimator.state_
    meta = {"params": estimator.get_params(),
            "task_classes": [c.tolist() for c in state.main_heads.task_classes],
            "frequency": {str(k): v for k, v in sorted(state.frequency.items())},
            "tasks_trained": state.tasks_trained,
            "head_rng_state": state.head_rng.bit_generator.state,
            "backbone_checksum": state.backbone.checksum()}
    save_checkpoint(path, model_blocks(estimator), config_hash,
                    rng_state=estimator.batch_rng_.bit_generator.state, meta=meta)


def load_model(path: str):
    """Rebuild an estimator from :func:`save_model` output."""
    from .estimator import APARTClassifier
    from .diffcore import precision
    from .trainer import extend_for_task

    header, arrays = load_checkpoint(path)
    meta = header["meta"]
    est = APARTClassifier(**meta["params"])
    est._initialize()
    state = est.state_
    with precision(est.precision):
        for classes in meta["task_classes"]:
            extend_for_task(state, classes)
    targets = dict(model_blocks(est))
    named = {f"backbone.{n}": p for n, p in state.backbone.named_parameters()}
    named.update(dict(state.named_parameters()))
    if set(named) != set(arrays):
        missing = sorted(set(named) ^ set(arrays))
        raise CheckpointError(f"{path}: block names do not match the model: {missing[:5]}")
    for name, p in named.items():
        if targets[name].shape != arrays[name].shape:
            raise CheckpointError(f"{path}: block {name!r} has shape {arrays[name].shape}, "
                                  f"model expects {targets[name].shape}")
        p.data[...] = arrays[name]
    state.frequency = {int(k): int(v) for k, v in meta["frequency"].items()}
    state.tasks_trained = meta["tasks_trained"]
    est.classes_ = state.classes.copy()
    state.head_rng.bit_generator.state = meta["head_rng_state"]
    if header.get("rng_state"):
        est.batch_rng_.bit_generator.state = header["rng_state"]
    return est
