"""Named parameter store and the on-disk tensor checkpoint format.

Checkpoint layout: an 8-byte little-endian header length, a UTF-8 JSON
header mapping each name to ``{shape, dtype, byte_offset}``, then the
little-endian IEEE-754 payload. Offsets are relative to the payload start.
"""
from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

from .autograd import Tensor, get_default_dtype

_DTYPES = {"f32": np.dtype("<f4"), "f64": np.dtype("<f8"), "i64": np.dtype("<i8")}
_NAMES = {v: k for k, v in _DTYPES.items()}


class ParamStore:
    """Dotted name -> Tensor, each entry either trainable or frozen."""

    def __init__(self):
        self._entries: dict[str, Tensor] = {}
        self._trainable: set[str] = set()

    def add(self, name: str, value, trainable: bool = True) -> Tensor:
        if name in self._entries:
            raise KeyError(f"duplicate parameter {name!r}")
        t = Tensor(np.asarray(value, dtype=get_default_dtype()), requires_grad=trainable, name=name)
        self._entries[name] = t
        if trainable:
            self._trainable.add(name)
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._entries[name]

    def __contains__(self, name: str) -> bool:
        return name in self._entries

    def __len__(self):
        return len(self._entries)

    @property
    def names(self) -> list[str]:
        return sorted(self._entries)

    @property
    def trainable_names(self) -> set[str]:
        return set(self._trainable)

    @property
    def frozen_names(self) -> set[str]:
        return set(self._entries) - self._trainable

    def set_trainable(self, names, flag: bool):
        for n in names:
            t = self._entries[n]
            t.requires_grad = flag
            if flag:
                self._trainable.add(n)
            else:
                self._trainable.discard(n)
                t.grad = None

    def freeze_prefix(self, prefix: str):
        self.set_trainable([n for n in self._entries if n.startswith(prefix)], False)

    def trainable(self) -> list[tuple[str, Tensor]]:
        return [(n, self._entries[n]) for n in sorted(self._trainable)]

    def zero_grad(self):
        for t in self._entries.values():
            t.grad = None

    def count(self, trainable: bool | None = True, prefix: str = "") -> int:
        names = self._entries if trainable is None else (self._trainable if trainable else self.frozen_names)
        return int(sum(self._entries[n].data.size for n in names if n.startswith(prefix)))

    def checksum(self, names=None) -> str:
        h = hashlib.sha256()
        for n in sorted(self._entries if names is None else names):
            h.update(n.encode())
            h.update(np.ascontiguousarray(self._entries[n].data).tobytes())
        return h.hexdigest()

    def state(self) -> dict[str, np.ndarray]:
        return {n: self._entries[n].data for n in sorted(self._entries)}

    def load_state(self, arrays: dict[str, np.ndarray], strict: bool = True):
        missing = set(self._entries) - set(arrays)
        extra = set(arrays) - set(self._entries)
        if strict and (missing or extra):
            raise KeyError(f"state mismatch: missing={sorted(missing)[:5]} unexpected={sorted(extra)[:5]}")
        for n, a in arrays.items():
            if n not in self._entries:
                continue
            t = self._entries[n]
            if t.data.shape != a.shape:
                raise ValueError(f"{n}: shape {a.shape} != {t.data.shape}")
            t.data = np.array(a, dtype=t.data.dtype)

    def astype(self, dtype):
        for t in self._entries.values():
            t.data = t.data.astype(dtype)
            t.grad = None


def save_tensors(path, arrays: dict[str, np.ndarray]):
    header = {}
    blobs = []
    offset = 0
    for name in sorted(arrays):
        a = np.asarray(arrays[name])
        if a.dtype.kind == "f":
            a = a.astype("<f8" if a.dtype.itemsize == 8 else "<f4", copy=False)
        elif a.dtype.kind in "iu":
            a = a.astype("<i8", copy=False)
        else:
            raise TypeError(f"{name}: unsupported dtype {a.dtype}")
        raw = np.ascontiguousarray(a).tobytes()
        header[name] = {"shape": list(a.shape), "dtype": _NAMES[a.dtype], "byte_offset": offset}
        blobs.append(raw)
        offset += len(raw)
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as f:
        f.write(struct.pack("<Q", len(head)))
        f.write(head)
        for raw in blobs:
            f.write(raw)
    tmp.replace(path)


def load_tensors(path) -> dict[str, np.ndarray]:
    raw = Path(path).read_bytes()
    (n,) = struct.unpack("<Q", raw[:8])
    header = json.loads(raw[8:8 + n])
    base = 8 + n
    out = {}
    for name, meta in header.items():
        dt = _DTYPES[meta["dtype"]]
        count = int(np.prod(meta["shape"], dtype=np.int64))
        start = base + meta["byte_offset"]
        out[name] = np.frombuffer(raw, dtype=dt, count=count, offset=start).reshape(meta["shape"]).copy()
    return out
