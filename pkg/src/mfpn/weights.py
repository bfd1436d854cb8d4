"""Named parameter storage and the binary weight-file format.

File layout (all integers little-endian)::

    b"MFPW"                 magic
    u32                     format version (1)
    u32                     entry count
    per entry:
        u32 + bytes         name length, UTF-8 name
        u32                 rank
        u64 * rank          dims
        f64 * prod(dims)    values, row-major
"""

from __future__ import annotations

import io
import struct
from pathlib import Path
from typing import Iterator, Mapping

import numpy as np

from .tensor import Parameter

MAGIC = b"MFPW"
FORMAT_VERSION = 1


class WeightFileError(ValueError):
    pass


class WeightStore:
    """Ordered mapping from unique names to :class:`Parameter` objects."""

    def __init__(self):
        self._params: dict[str, Parameter] = {}

    def add(self, name: str, data, trainable: bool = True) -> Parameter:
        if name in self._params:
            raise KeyError(f"duplicate parameter name {name!r}")
        p = Parameter(name, data, trainable)
        self._params[name] = p
        return p

    def __getitem__(self, name: str) -> Parameter:
        try:
            return self._params[name]
        except KeyError:
            raise KeyError(f"missing weight {name!r}") from None

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self) -> Iterator[str]:
        return iter(self._params)

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> list[str]:
        return list(self._params)

    def parameters(self, prefix: str = "") -> list[Parameter]:
        return [p for n, p in self._params.items() if n.startswith(prefix)]

    def trainable(self) -> list[Parameter]:
        return [p for p in self._params.values() if p.trainable]

    def zero_grad(self) -> None:
        for p in self._params.values():
            p.zero_grad()

    def count(self, prefix: str = "") -> int:
        return sum(p.data.size for p in self.parameters(prefix))

    def arrays(self) -> dict[str, np.ndarray]:
        return {n: p.data for n, p in self._params.items()}

    def copy(self) -> "WeightStore":
        out = WeightStore()
        for n, p in self._params.items():
            out.add(n, p.data.copy(), p.trainable)
        return out

    @classmethod
    def from_arrays(cls, arrays: Mapping[str, np.ndarray]) -> "WeightStore":
        store = cls()
        for n, a in arrays.items():
            store.add(n, a)
        return store


def encode_tensors(arrays: Mapping[str, np.ndarray]) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<II", FORMAT_VERSION, len(arrays)))
    for name, arr in arrays.items():
        raw = name.encode("utf-8")
        arr = np.asarray(arr, dtype="<f8")
        buf.write(struct.pack("<I", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<I", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        buf.write(np.ascontiguousarray(arr).tobytes())
    return buf.getvalue()


def decode_tensors(blob: bytes) -> dict[str, np.ndarray]:
    view = memoryview(blob)
    pos = 0

    def take(n: int) -> memoryview:
        nonlocal pos
        if pos + n > len(view):
            raise WeightFileError(f"truncated weight file at byte {pos}")
        chunk = view[pos:pos + n]
        pos += n
        return chunk

    if bytes(take(4)) != MAGIC:
        raise WeightFileError("bad magic; not an MFPW weight file")
    version, count = struct.unpack("<II", take(8))
    if version != FORMAT_VERSION:
        raise WeightFileError(f"unsupported format version {version}")
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<I", take(4))
        name = bytes(take(nlen)).decode("utf-8")
        (rank,) = struct.unpack("<I", take(4))
        dims = struct.unpack(f"<{rank}Q", take(8 * rank))
        size = int(np.prod(dims, dtype=np.int64)) if rank else 1
        values = np.frombuffer(take(8 * size), dtype="<f8").astype(np.float64)
        if name in out:
            raise WeightFileError(f"duplicate entry {name!r}")
        out[name] = values.reshape(dims)
    if pos != len(view):
        raise WeightFileError(f"{len(view) - pos} trailing bytes after last entry")
    return out


def save_tensors(path, arrays: Mapping[str, np.ndarray]) -> None:
    Path(path).write_bytes(encode_tensors(arrays))


def load_tensors(path) -> dict[str, np.ndarray]:
    return decode_tensors(Path(path).read_bytes())


def save_weights(path, store: WeightStore) -> None:
    save_tensors(path, store.arrays())


def load_weights(path) -> WeightStore:
    return WeightStore.from_arrays(load_tensors(path))
