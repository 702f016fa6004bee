"""Adapter library containers: low-rank per-(task, layer) factor storage.

Single-file format (`.alib`): magic ``ALIB``, little-endian u16 version,
u32 JSON index length, the JSON index, then one raw little-endian float32
payload holding every factor back to back.  The index records tasks, the
layer schema, per-tensor shapes/offsets, per-delta scaling, a CRC32 of
the payload, and free-form metadata.

A directory of ``task_<id>/layer_<id>.bin`` files (each a one-entry
container in the same format) is accepted on load for interoperability
with external export scripts.

Factors live on disk as float32 and are widened to float64 in memory.
"""

from __future__ import annotations

import json
import os
import re
import struct
import zlib
from dataclasses import dataclass, field

import numpy as np

from .errors import ChecksumError, ContainerFormatError, SchemaError

_MAGIC = b"ALIB"
_VERSION = 1
_DTYPE = "<f4"


@dataclass(frozen=True)
class AdapterDelta:
    """One layer's low-rank update Δ = s·A·Bᵀ (A: d_in×r, B: d_out×r)."""

    layer_id: str
    a: np.ndarray
    b: np.ndarray
    scaling_s: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "a", np.asarray(self.a, dtype=np.float64))
        object.__setattr__(self, "b", np.asarray(self.b, dtype=np.float64))
        if self.a.ndim != 2 or self.b.ndim != 2:
            raise ValueError("factors a and b must be matrices")
        if self.a.shape[1] != self.b.shape[1]:
            raise ValueError(
                f"factor ranks differ: a has {self.a.shape[1]} columns, "
                f"b has {self.b.shape[1]}"
            )
        if self.a.shape[1] < 1:
            raise ValueError("factor rank must be ≥ 1")
        if not (np.all(np.isfinite(self.a)) and np.all(np.isfinite(self.b))):
            raise ValueError(f"delta {self.layer_id!r}: non-finite factor entries")
        if not self.scaling_s >= 1.0:
            raise ValueError(f"scaling_s must be ≥ 1, got {self.scaling_s}")

    @property
    def d_in(self) -> int:
        return self.a.shape[0]

    @property
    def d_out(self) -> int:
        return self.b.shape[0]

    @property
    def rank(self) -> int:
        return self.a.shape[1]

    def materialize(self) -> np.ndarray:
        return self.scaling_s * (self.a @ self.b.T)


def materialize_delta(d: AdapterDelta) -> np.ndarray:
    """Dense d_in×d_out delta: scaling_s · A · Bᵀ."""
    return d.materialize()


@dataclass(frozen=True)
class AdapterLibrary:
    """Per-(task, layer) deltas under a shared layer schema."""

    tasks: tuple
    layers: tuple
    deltas: dict  # (task_id, layer_id) -> AdapterDelta
    meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "tasks", tuple(str(t) for t in self.tasks))
        object.__setattr__(self, "layers", tuple(str(l) for l in self.layers))
        self.validate()

    def validate(self) -> None:
        """Schema check: complete grid, consistent dense shape per layer."""
        missing = [
            (task, layer)
            for task in self.tasks
            for layer in self.layers
            if (task, layer) not in self.deltas
        ]
        if missing:
            raise SchemaError(f"missing (task, layer) deltas: {missing}")
        for layer in self.layers:
            shapes = {
                task: (self.deltas[(task, layer)].d_in, self.deltas[(task, layer)].d_out)
                for task in self.tasks
            }
            if len(set(shapes.values())) > 1:
                raise SchemaError(f"layer {layer!r} has inconsistent shapes: {shapes}")

    def layer_shape(self, layer_id) -> tuple:
        d = self.deltas[(self.tasks[0], str(layer_id))]
        return d.d_in, d.d_out


def _index_and_payload(tasks, layers, deltas, meta):
    entries = []
    chunks = []
    offset = 0
    for task in tasks:
        for layer in layers:
            d = deltas[(task, layer)]
            rec = {"task": task, "layer": layer, "s": repr(float(d.scaling_s))}
            for name in ("a", "b"):
                arr = np.ascontiguousarray(getattr(d, name), dtype=_DTYPE)
                rec[name] = {"shape": list(arr.shape), "offset": offset}
                chunks.append(arr.tobytes())
                offset += arr.nbytes
            entries.append(rec)
    payload = b"".join(chunks)
    index = {
        "tasks": list(tasks),
        "layers": list(layers),
        "dtype": _DTYPE,
        "entries": entries,
        "payload_bytes": len(payload),
        "payload_crc32": zlib.crc32(payload),
        "meta": meta,
    }
    return index, payload


def _write_container(index, payload, path):
    blob = json.dumps(index, sort_keys=True).encode("utf-8")
    tmp = str(path) + ".tmp"
    with open(tmp, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<H", _VERSION))
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        fh.write(payload)
    os.replace(tmp, path)


def save_library(lib: AdapterLibrary, path) -> None:
    lib.validate()
    index, payload = _index_and_payload(lib.tasks, lib.layers, lib.deltas, lib.meta)
    _write_container(index, payload, path)


def _read_container(path):
    with open(path, "rb") as fh:
        head = fh.read(6)
        if len(head) < 6 or head[:4] != _MAGIC:
            raise ContainerFormatError(f"{path}: bad magic, not an adapter container")
        (version,) = struct.unpack("<H", head[4:6])
        if version != _VERSION:
            raise ContainerFormatError(f"{path}: unsupported version {version}")
        raw_len = fh.read(4)
        if len(raw_len) < 4:
            raise ContainerFormatError(f"{path}: truncated header")
        (index_len,) = struct.unpack("<I", raw_len)
        blob = fh.read(index_len)
        if len(blob) < index_len:
            raise ContainerFormatError(f"{path}: truncated index")
        try:
            index = json.loads(blob)
        except json.JSONDecodeError as exc:
            raise ContainerFormatError(f"{path}: bad index json: {exc}") from None
        payload = fh.read()
    if len(payload) != index.get("payload_bytes"):
        raise ChecksumError(
            f"{path}: payload is {len(payload)} bytes, "
            f"index says {index.get('payload_bytes')}"
        )
    if zlib.crc32(payload) != index.get("payload_crc32"):
        raise ChecksumError(f"{path}: payload checksum mismatch")
    return index, payload


def _entry_array(payload, spec, dtype, path):
    shape = tuple(int(x) for x in spec["shape"])
    count = int(np.prod(shape))
    offset = int(spec["offset"])
    if offset + count * dtype.itemsize > len(payload):
        raise ContainerFormatError(f"{path}: tensor at offset {offset} overruns payload")
    arr = np.frombuffer(payload, dtype=dtype, count=count, offset=offset)
    return arr.reshape(shape).astype(np.float64)


def _library_from_container(index, payload, path) -> AdapterLibrary:
    dtype = np.dtype(index.get("dtype", _DTYPE))
    deltas = {}
    for rec in index["entries"]:
        task, layer = str(rec["task"]), str(rec["layer"])
        if (task, layer) in deltas:
            raise ContainerFormatError(f"{path}: duplicate entry ({task}, {layer})")
        deltas[(task, layer)] = AdapterDelta(
            layer_id=layer,
            a=_entry_array(payload, rec["a"], dtype, path),
            b=_entry_array(payload, rec["b"], dtype, path),
            scaling_s=float(rec["s"]),
        )
    return AdapterLibrary(
        tasks=tuple(index["tasks"]),
        layers=tuple(index["layers"]),
        deltas=deltas,
        meta=dict(index.get("meta", {})),
    )


def _natural_key(s: str):
    return [int(p) if p.isdigit() else p for p in re.split(r"(\d+)", s)]


def _load_directory(path) -> AdapterLibrary:
    task_dirs = sorted(
        (d for d in os.listdir(path) if d.startswith("task_")), key=_natural_key
    )
    if not task_dirs:
        raise ContainerFormatError(f"{path}: no task_<id> subdirectories")
    deltas = {}
    layer_sets = []
    tasks = []
    for dname in task_dirs:
        task = dname[len("task_") :]
        tasks.append(task)
        tdir = os.path.join(path, dname)
        layers = []
        for fname in sorted(os.listdir(tdir), key=_natural_key):
            match = re.fullmatch(r"layer_(.+)\.bin", fname)
            if not match:
                continue
            index, payload = _read_container(os.path.join(tdir, fname))
            sub = _library_from_container(index, payload, os.path.join(tdir, fname))
            if len(sub.tasks) != 1 or len(sub.layers) != 1:
                raise ContainerFormatError(
                    f"{tdir}/{fname}: per-file containers must hold exactly one delta"
                )
            layer = match.group(1)
            deltas[(task, layer)] = sub.deltas[(sub.tasks[0], sub.layers[0])]
            layers.append(layer)
        layer_sets.append(layers)
    schema = layer_sets[0]
    for task, layers in zip(tasks, layer_sets):
        if layers != schema:
            raise SchemaError(
                f"task {task!r} layers {layers} do not match schema {schema}"
            )
    return AdapterLibrary(tasks=tuple(tasks), layers=tuple(schema), deltas=deltas)


def load_library(path) -> AdapterLibrary:
    """Load a `.alib` container or a task_<id>/layer_<id>.bin directory."""
    if os.path.isdir(path):
        return _load_directory(path)
    index, payload = _read_container(path)
    return _library_from_container(index, payload, path)


def export_merged(merged: dict, path, meta: dict | None = None) -> None:
    """Write per-layer merged deltas as a single-task library.

    Dense matrices are stored exactly (modulo the float32 element width)
    as A = Δ with B = I, so load_library round-trips them.
    """
    layers = tuple(str(l) for l in merged)
    deltas = {}
    for layer in layers:
        m = np.asarray(merged[layer], dtype=np.float64)
        if m.ndim != 2:
            raise ValueError(f"merged delta for layer {layer!r} is not a matrix")
        deltas[("merged", layer)] = AdapterDelta(
            layer_id=layer, a=m, b=np.eye(m.shape[1]), scaling_s=1.0
        )
    lib = AdapterLibrary(
        tasks=("merged",), layers=layers, deltas=deltas, meta=dict(meta or {})
    )
    save_library(lib, path)
