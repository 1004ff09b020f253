"""Binary checkpoint container.

Layout: 8-byte magic ``PMLAB\\0\\0\\1``, a little-endian u64 manifest length,
the UTF-8 JSON manifest, then the float64 little-endian parameter blob.
The manifest carries ``format_version``, ``kind``, ``config``, a parameter
table of ``{name, shape, offset}`` (byte offsets into the blob) and free-form
``metadata``.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Any

import numpy as np

MAGIC = b"PMLAB\x00\x00\x01"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


def write_container(path, kind: str, config: dict, params: dict[str, np.ndarray], metadata: dict[str, Any]) -> None:
    table = []
    offset = 0
    for name, arr in params.items():
        table.append({"name": name, "shape": list(arr.shape), "offset": offset})
        offset += arr.size * 8
    manifest = {
        "format_version": FORMAT_VERSION,
        "kind": kind,
        "config": config,
        "params": table,
        "blob_bytes": offset,
        "metadata": metadata,
    }
    head = json.dumps(manifest, separators=(",", ":")).encode("utf-8")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(head)))
        fh.write(head)
        for arr in params.values():
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def _validate_table(table: list[dict], blob_bytes: int) -> None:
    spans = []
    for entry in table:
        size = int(np.prod(entry["shape"], dtype=np.int64)) * 8
        spans.append((int(entry["offset"]), int(entry["offset"]) + size, entry["name"]))
    spans.sort()
    end = 0
    for start, stop, name in spans:
        if start < end:
            raise CheckpointError(f"manifest overlap at parameter {name!r}")
        end = stop
    total = sum(stop - start for start, stop, _ in spans)
    if total != blob_bytes:
        raise CheckpointError(f"manifest describes {total} bytes but declares {blob_bytes}")


def read_container(path, expect_kind: str | None = None) -> tuple[dict, dict[str, np.ndarray]]:
    data = Path(path).read_bytes()
    if len(data) < 16 or data[:8] != MAGIC:
        raise CheckpointError(f"{path}: bad magic header")
    (n,) = struct.unpack("<Q", data[8:16])
    if 16 + n > len(data):
        raise CheckpointError(f"{path}: truncated manifest")
    try:
        manifest = json.loads(data[16 : 16 + n].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: unreadable manifest ({exc})") from None
    if manifest.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported format version {manifest.get('format_version')}")
    if expect_kind is not None and manifest.get("kind") != expect_kind:
        raise CheckpointError(f"{path}: expected kind {expect_kind!r}, found {manifest.get('kind')!r}")
    _validate_table(manifest["params"], manifest["blob_bytes"])
    blob = data[16 + n :]
    if len(blob) != manifest["blob_bytes"]:
        raise CheckpointError(f"{path}: blob is {len(blob)} bytes, manifest says {manifest['blob_bytes']}")
    params = {}
    for entry in manifest["params"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape, dtype=np.int64))
        arr = np.frombuffer(blob, dtype="<f8", count=count, offset=entry["offset"])
        params[entry["name"]] = arr.astype(np.float64).reshape(shape)
    return manifest, params


def save_checkpoint(model, path, metadata: dict[str, Any] | None = None) -> None:
    from dataclasses import asdict

    write_container(path, "model", asdict(model.config), model.params, metadata or {})


def load_checkpoint(path):
    from .model import ModelConfig, ToyTransformer, param_shapes

    manifest, params = read_container(path, expect_kind="model")
    config = ModelConfig(**manifest["config"])
    config.validate()
    expected = param_shapes(config)
    if set(expected) != set(params):
        raise CheckpointError(f"{path}: parameter names do not match config")
    for name, shape in expected.items():
        if params[name].shape != shape:
            raise CheckpointError(f"{path}: {name} has shape {params[name].shape}, expected {shape}")
    ordered = {name: params[name] for name in expected}
    return ToyTransformer(config, ordered)


def checkpoint_metadata(path) -> dict:
    manifest, _ = read_container(path)
    return manifest["metadata"]
