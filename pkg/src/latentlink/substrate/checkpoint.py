"""Checkpoint files: a text manifest next to a flat little-endian binary blob.

Manifest lines look like::

    name=rssm.gru.w_input shape=1056x900 offset=0 dtype=<f8 version=3

``offset`` is the byte offset into the blob. Both files are written to a
temporary name and renamed into place, blob first.
"""

from __future__ import annotations

import os
from collections import OrderedDict
from pathlib import Path

import numpy as np

FORMAT = "latentlink-checkpoint 1"


class CheckpointMismatch(ValueError):
    pass


def _atomic_write(path: Path, payload: bytes) -> None:
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(payload)
        fh.flush()
        os.fsync(fh.fileno())
    os.replace(tmp, path)


def paths(stem) -> tuple[Path, Path]:
    stem = Path(stem)
    return stem.with_suffix(".manifest"), stem.with_suffix(".bin")


def save(stem, arrays: "OrderedDict[str, np.ndarray] | dict", version: int = 0) -> tuple[Path, Path]:
    manifest_path, blob_path = paths(stem)
    manifest_path.parent.mkdir(parents=True, exist_ok=True)
    lines = [FORMAT]
    chunks = []
    offset = 0
    for name, arr in arrays.items():
        if any(c.isspace() for c in name) or "=" in name:
            raise ValueError(f"invalid array name {name!r}")
        arr = np.asarray(arr)
        le = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        raw = np.ascontiguousarray(le).tobytes()
        shape = "x".join(str(d) for d in arr.shape) or "scalar"
        lines.append(f"name={name} shape={shape} offset={offset} dtype={le.dtype.str} version={version}")
        chunks.append(raw)
        offset += len(raw)
    _atomic_write(blob_path, b"".join(chunks))
    _atomic_write(manifest_path, ("\n".join(lines) + "\n").encode("utf-8"))
    return manifest_path, blob_path


def read_manifest(stem) -> list[dict]:
    manifest_path, _ = paths(stem)
    text = manifest_path.read_text(encoding="utf-8").splitlines()
    if not text or text[0] != FORMAT:
        raise CheckpointMismatch(f"{manifest_path}: not a checkpoint manifest")
    entries = []
    for line in text[1:]:
        if not line.strip():
            continue
        fields = dict(kv.split("=", 1) for kv in line.split())
        shape = () if fields["shape"] == "scalar" else tuple(int(d) for d in fields["shape"].split("x"))
        entries.append({"name": fields["name"], "shape": shape, "offset": int(fields["offset"]),
                        "dtype": np.dtype(fields["dtype"]), "version": int(fields["version"])})
    return entries


def load(stem, expected_shapes: dict | None = None) -> "OrderedDict[str, np.ndarray]":
    """Read a checkpoint; with ``expected_shapes`` reject any name or shape disagreement."""
    entries = read_manifest(stem)
    _, blob_path = paths(stem)
    blob = blob_path.read_bytes()
    if expected_shapes is not None:
        names = [e["name"] for e in entries]
        if set(names) != set(expected_shapes):
            missing = sorted(set(expected_shapes) - set(names))[:5]
            extra = sorted(set(names) - set(expected_shapes))[:5]
            raise CheckpointMismatch(f"checkpoint names disagree: missing={missing} extra={extra}")
        for e in entries:
            if tuple(expected_shapes[e["name"]]) != e["shape"]:
                raise CheckpointMismatch(
                    f"{e['name']}: manifest shape {e['shape']} != configured {tuple(expected_shapes[e['name']])}")
    out = OrderedDict()
    for e in entries:
        count = int(np.prod(e["shape"])) if e["shape"] else 1
        arr = np.frombuffer(blob, dtype=e["dtype"], count=count, offset=e["offset"])
        out[e["name"]] = arr.reshape(e["shape"]).astype(e["dtype"].newbyteorder("="))
    return out


def save_module(stem, module, version: int | None = None):
    return save(stem, module.state(), module.params.version if version is None else version)


def load_module(stem, module) -> None:
    state = module.state()
    values = load(stem, {k: v.shape for k, v in state.items()})
    module.load_state(values)
