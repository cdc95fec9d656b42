"""Named parameter storage, initialisation and the binary checkpoint format.

Checkpoint layout (all integers little-endian)::

    8 bytes   magic  b"MCNETCK1"
    uint32    length of the metadata block in bytes
    bytes     metadata, UTF-8 JSON with sorted keys
    uint32    number of entries
    per entry, in store order:
        uint16    name length, then the UTF-8 name
        uint8     ndim, then ndim x uint32 dimensions
        float64   prod(dims) values, little-endian, C order
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from ..errors import ContractError, ParseError

MAGIC = b"MCNETCK1"


class ParameterStore:
    """Mapping ``name -> float64 array`` with a same-shaped gradient buffer per entry.

    Unknown names raise ``KeyError``; entries are only created through ``add``.
    """

    def __init__(self):
        self._values: dict[str, np.ndarray] = {}
        self._grads: dict[str, np.ndarray] = {}

    def add(self, name, value):
        if name in self._values:
            raise ContractError(f"parameter {name!r} already exists")
        value = np.array(value, dtype=np.float64)
        self._values[name] = value
        self._grads[name] = np.zeros_like(value)
        return value

    def __getitem__(self, name):
        try:
            return self._values[name]
        except KeyError:
            raise KeyError(f"unknown parameter {name!r}") from None

    def __setitem__(self, name, value):
        old = self[name]
        value = np.asarray(value, dtype=np.float64)
        if value.shape != old.shape:
            raise ContractError(f"shape mismatch for {name!r}: {value.shape} != {old.shape}")
        self._values[name] = value

    def __contains__(self, name):
        return name in self._values

    def __iter__(self):
        return iter(self._values)

    def __len__(self):
        return len(self._values)

    def names(self, prefix=""):
        if not prefix:
            return list(self._values)
        return [n for n in self._values if n == prefix or n.startswith(prefix + ".")]

    def grad(self, name):
        self[name]
        return self._grads[name]

    def accumulate_grad(self, name, g):
        buf = self.grad(name)
        g = np.asarray(g, dtype=np.float64)
        if g.shape != buf.shape:
            g = g.reshape(buf.shape)
        self._grads[name] = buf + g

    def zero_grad(self, names=None):
        for name in (self._values if names is None else names):
            self._grads[name] = np.zeros_like(self._values[name])

    def size(self):
        return sum(v.size for v in self._values.values())

    def copy(self):
        out = ParameterStore()
        for name, v in self._values.items():
            out._values[name] = v.copy()
            out._grads[name] = self._grads[name].copy()
        return out

    def load_values(self, other):
        """Copy values (not gradients) from ``other``, which must have the same entries."""
        for name in self._values:
            self[name] = other[name].copy()

    def equal(self, other):
        return (list(self) == list(other)
                and all(np.array_equal(self[n], other[n]) for n in self))


def xavier_uniform(rng, fan_in, fan_out):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


def add_linear(store, prefix, fan_in, fan_out, rng, bias=True):
    store.add(f"{prefix}.w", xavier_uniform(rng, fan_in, fan_out))
    if bias:
        store.add(f"{prefix}.b", np.zeros(fan_out))


def save_checkpoint(path, store, metadata=None):
    chunks = [MAGIC]
    meta = json.dumps(metadata or {}, sort_keys=True).encode("utf-8")
    chunks.append(struct.pack("<I", len(meta)))
    chunks.append(meta)
    chunks.append(struct.pack("<I", len(store)))
    for name in store:
        value = store[name]
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(raw)))
        chunks.append(raw)
        chunks.append(struct.pack("<B", value.ndim))
        chunks.append(struct.pack(f"<{value.ndim}I", *value.shape))
        chunks.append(np.ascontiguousarray(value, dtype="<f8").tobytes())
    Path(path).write_bytes(b"".join(chunks))


def load_checkpoint(path):
    """Return ``(store, metadata)`` from a file written by ``save_checkpoint``."""
    buf = Path(path).read_bytes()
    if buf[:8] != MAGIC:
        raise ParseError(f"{path}: not a checkpoint (bad magic)")
    pos = 8

    def take(fmt):
        nonlocal pos
        size = struct.calcsize(fmt)
        if pos + size > len(buf):
            raise ParseError(f"{path}: truncated checkpoint")
        out = struct.unpack_from(fmt, buf, pos)
        pos += size
        return out

    (meta_len,) = take("<I")
    metadata = json.loads(buf[pos:pos + meta_len].decode("utf-8"))
    pos += meta_len
    (count,) = take("<I")
    store = ParameterStore()
    for _ in range(count):
        (name_len,) = take("<H")
        name = buf[pos:pos + name_len].decode("utf-8")
        pos += name_len
        (ndim,) = take("<B")
        shape = take(f"<{ndim}I") if ndim else ()
        n = int(np.prod(shape)) if shape else 1
        if pos + 8 * n > len(buf):
            raise ParseError(f"{path}: truncated data for {name!r}")
        value = np.frombuffer(buf, dtype="<f8", count=n, offset=pos).reshape(shape)
        pos += 8 * n
        store.add(name, value.astype(np.float64))
    return store, metadata
