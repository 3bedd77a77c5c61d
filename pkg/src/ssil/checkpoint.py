"""Checkpoint container for a classifier and, optionally, its exemplar memory.

Layout (all integers little-endian)::

    offset 0   8 bytes   magic b"SSILCKPT"
    offset 8   uint32    format version (currently 1)
    offset 12  uint64    header length H in bytes
    offset 20  H bytes   UTF-8 JSON header, keys sorted, no whitespace
    offset 20+H          payload: the arrays listed in header["arrays"], in
                         order, each as raw row-major little-endian float64

The header holds ``layer_dims``, ``classes_per_task``, ``num_tasks``, the
model ``seed``, the initializer RNG state (numpy PCG64 state dict), the score
correction if one is set, the memory capacity (or null), free-form ``meta``
and ``arrays``: a list of ``{"name", "shape"}`` entries. Parameter arrays are
named as in ``IncrementalClassifier.parameter_names``; memory buckets are
named ``memory.class<c>``. The same inputs always produce identical bytes.
"""
from __future__ import annotations

import json
import struct

import numpy as np

from .errors import InvalidArgument
from .memory import ExemplarMemory
from .model import IncrementalClassifier

MAGIC = b"SSILCKPT"
VERSION = 1


def dumps(model: IncrementalClassifier, memory: ExemplarMemory | None = None,
          meta: dict | None = None) -> bytes:
    arrays = list(zip(model.parameter_names(), model.parameters()))
    if memory is not None:
        arrays += list(memory.state_arrays().items())
    corr = None
    if model.correction is not None:
        a, b, r = model.correction
        corr = [float(a), float(b), r.start, r.stop]
    header = {
        "layer_dims": model.layer_dims,
        "classes_per_task": model.classes_per_task,
        "num_tasks": model.num_tasks,
        "seed": model.seed,
        "rng_state": model.rng.bit_generator.state,
        "correction": corr,
        "memory_capacity": None if memory is None else memory.capacity,
        "meta": meta or {},
        "arrays": [{"name": n, "shape": list(a.shape)} for n, a in arrays],
    }
    hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    payload = b"".join(np.ascontiguousarray(a, dtype="<f8").tobytes() for _, a in arrays)
    return MAGIC + struct.pack("<IQ", VERSION, len(hbytes)) + hbytes + payload


def loads(blob: bytes):
    """Inverse of :func:`dumps`; returns ``(model, memory_or_None, meta)``."""
    if blob[:8] != MAGIC:
        raise InvalidArgument("not a checkpoint file (bad magic)")
    version, hlen = struct.unpack_from("<IQ", blob, 8)
    if version != VERSION:
        raise InvalidArgument(f"unsupported checkpoint version {version}")
    header = json.loads(blob[20:20 + hlen].decode("utf-8"))
    off = 20 + hlen
    arrays = {}
    for spec in header["arrays"]:
        n = int(np.prod(spec["shape"], dtype=np.int64))
        arr = np.frombuffer(blob, dtype="<f8", count=n, offset=off).astype(np.float64)
        arrays[spec["name"]] = arr.reshape(spec["shape"])
        off += 8 * n
    if off != len(blob):
        raise InvalidArgument("checkpoint payload size does not match its header")

    model = IncrementalClassifier(header["layer_dims"], header["classes_per_task"], header["seed"])
    for _ in range(header["num_tasks"]):
        model.expand_head()
    for name, p in zip(model.parameter_names(), model.parameters()):
        p[...] = arrays[name]
    model.rng.bit_generator.state = header["rng_state"]
    if header["correction"] is not None:
        a, b, lo, hi = header["correction"]
        model.correction = (a, b, range(lo, hi))
    memory = None
    if header["memory_capacity"] is not None:
        mem_arrays = {k: v for k, v in arrays.items() if k.startswith("memory.")}
        memory = ExemplarMemory.from_arrays(header["memory_capacity"], mem_arrays)
    return model, memory, header["meta"]


def save_checkpoint(path, model, memory=None, meta=None) -> None:
    with open(path, "wb") as fh:
        fh.write(dumps(model, memory, meta))


def load_checkpoint(path):
    with open(path, "rb") as fh:
        return loads(fh.read())
