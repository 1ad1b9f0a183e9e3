"""Checkpoint container.

Layout (all integers little-endian)::

    b"RSRP"                 magic
    u32                     format version (1)
    u64                     metadata length L
    L bytes                 metadata, UTF-8 JSON
    u32                     tensor count T
    T times:
        u16 + bytes         name length, UTF-8 name
        u8                  dtype tag (1 float32, 2 float64, 3 int64, 4 uint8)
        u8                  rank R
        R x u64             dims
        bytes               little-endian row-major payload

The metadata carries ``kind`` (base / reparam / converted) and the node list
needed to rebuild the graph; node tensors are named ``node/<index>/<name>``.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
from pathlib import Path

import numpy as np

from .graph import ModelGraph
from .layers import NODE_TYPES, BatchNorm2d, Compactor, Conv2d

MAGIC = b"RSRP"
VERSION = 1
DTYPE_TAGS = {np.dtype("<f4"): 1, np.dtype("<f8"): 2, np.dtype("<i8"): 3, np.dtype("u1"): 4}
TAG_DTYPES = {v: k for k, v in DTYPE_TAGS.items()}


class CheckpointError(ValueError):
    pass


def graph_meta(model: ModelGraph) -> dict:
    return {
        "kind": model.kind,
        "name": model.name,
        "input_shape": list(model.input_shape),
        "num_classes": model.num_classes,
        "nodes": [{"type": n.kind, "inputs": list(n.inputs), "attrs": n.attrs()} for n in model.nodes],
    }


def graph_tensors(model: ModelGraph) -> dict[str, np.ndarray]:
    out = {}
    for i, n in enumerate(model.nodes):
        for store in (n.params, n.buffers):
            for k, v in store.items():
                out[f"node/{i}/{k}"] = v
    return out


def build_graph(meta: dict, tensors: dict[str, np.ndarray]) -> ModelGraph:
    nodes = []
    for i, spec in enumerate(meta["nodes"]):
        t = {k.split("/", 2)[2]: v.copy() for k, v in tensors.items() if k.startswith(f"node/{i}/")}
        kind, inputs, attrs = spec["type"], tuple(spec["inputs"]), spec["attrs"]
        if kind not in NODE_TYPES:
            raise CheckpointError(f"unknown node type {kind!r}")
        if kind == "conv":
            node = Conv2d(t["kernel"], t.get("bias"), attrs["stride"], attrs["padding"], inputs, attrs["target"])
        elif kind == "compactor":
            node = Compactor(t["kernel"], t["mask"], attrs["owner"], inputs)
        elif kind == "bn":
            node = BatchNorm2d(t["gamma"], t["beta"], t["running_mean"], t["running_var"], attrs["eps"], attrs["momentum"], inputs)
        else:
            node = NODE_TYPES[kind](inputs)
        nodes.append(node)
    return ModelGraph(nodes, meta["input_shape"], meta["num_classes"], kind=meta["kind"], name=meta["name"])


def dumps(meta: dict, tensors: dict[str, np.ndarray]) -> bytes:
    blob = json.dumps(meta, sort_keys=True).encode("utf-8")
    parts = [MAGIC, struct.pack("<IQ", VERSION, len(blob)), blob, struct.pack("<I", len(tensors))]
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        dt = arr.dtype.newbyteorder("<") if arr.dtype.byteorder == ">" else arr.dtype
        if dt not in DTYPE_TAGS:
            raise CheckpointError(f"tensor {name!r}: unsupported dtype {arr.dtype}")
        raw = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw)) + raw)
        parts.append(struct.pack("<BB", DTYPE_TAGS[dt], arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype=dt).tobytes())
    return b"".join(parts)


def loads(data: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    view = memoryview(data)
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(view):
            raise CheckpointError(f"truncated checkpoint at byte {pos} (need {n} more)")
        chunk = view[pos : pos + n]
        pos += n
        return chunk

    if bytes(take(4)) != MAGIC:
        raise CheckpointError("not a checkpoint (bad magic)")
    version, mlen = struct.unpack("<IQ", take(12))
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    meta = json.loads(bytes(take(mlen)).decode("utf-8"))
    (count,) = struct.unpack("<I", take(4))
    tensors = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<H", take(2))
        name = bytes(take(nlen)).decode("utf-8")
        tag, ndim = struct.unpack("<BB", take(2))
        if tag not in TAG_DTYPES:
            raise CheckpointError(f"tensor {name!r}: unknown dtype tag {tag}")
        dims = struct.unpack(f"<{ndim}Q", take(8 * ndim))
        dt = TAG_DTYPES[tag]
        size = int(np.prod(dims, dtype=np.int64)) * dt.itemsize
        tensors[name] = np.frombuffer(take(size), dtype=dt).reshape(dims).copy()
    if pos != len(view):
        raise CheckpointError(f"{len(view) - pos} trailing bytes after tensor table")
    return meta, tensors


def atomic_write(path, data: bytes | str):
    path = Path(path)
    mode = "wb" if isinstance(data, bytes) else "w"
    fd, tmp = tempfile.mkstemp(dir=path.parent or ".", prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, mode) as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save(path, model: ModelGraph, meta: dict | None = None, tensors: dict | None = None):
    """Write ``model`` plus extra metadata/tensors (e.g. optimizer state)."""
    full = dict(meta or {})
    full["graph"] = graph_meta(model)
    full["kind"] = model.kind
    all_tensors = graph_tensors(model)
    for k, v in (tensors or {}).items():
        if k.startswith("node/"):
            raise CheckpointError(f"extra tensor name {k!r} collides with node tensors")
        all_tensors[k] = v
    atomic_write(path, dumps(full, all_tensors))


def load(path) -> tuple[ModelGraph, dict, dict[str, np.ndarray]]:
    """Returns (model, metadata, non-node tensors)."""
    meta, tensors = loads(Path(path).read_bytes())
    model = build_graph(meta["graph"], tensors)
    extra = {k: v for k, v in tensors.items() if not k.startswith("node/")}
    return model, meta, extra
