"""Deterministic dense-array layer.

Tensors are plain C-contiguous ``numpy.float32`` arrays. The reductions
(matmul, row softmax, row l2 norm) go through a kernel backend chosen at
import time: the compiled ``_kernels`` extension when it is importable,
otherwise the numpy fallback in ``_kernels_py``. Both accumulate in float64
in a fixed sequential order and produce identical bits.

Set ``QKVGUIDE_BACKEND=python`` to force the fallback.
"""

from __future__ import annotations

import hashlib
import io
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import BinaryIO, Iterable, Sequence

import numpy as np

from . import _kernels_py
from .errors import InputError, NumericalError, ShapeError

__all__ = [
    "BACKEND",
    "SeededRng",
    "add",
    "as_tensor",
    "available_backends",
    "concat",
    "dump_tensor",
    "load_tensor",
    "matmul",
    "mul",
    "read_tensor",
    "reshape",
    "row_l2_normalize",
    "scale",
    "seeded_normal",
    "set_backend",
    "softmax_rows",
    "transpose",
    "write_tensor",
]


def _load_backend(name: str | None):
    if name == "python":
        return _kernels_py
    try:
        from . import _kernels  # type: ignore[attr-defined]
    except ImportError:
        if name == "cython":
            raise
        return _kernels_py
    return _kernels


_backend = _load_backend(os.environ.get("QKVGUIDE_BACKEND"))
BACKEND: str = _backend.NAME


def set_backend(name: str) -> str:
    """Switch kernel backend (``"cython"`` or ``"python"``); returns the previous name."""
    global _backend, BACKEND
    previous = BACKEND
    _backend = _load_backend(name)
    BACKEND = _backend.NAME
    return previous


def available_backends() -> list[str]:
    names = ["python"]
    try:
        from . import _kernels  # type: ignore[attr-defined]  # noqa: F401

        names.insert(0, "cython")
    except ImportError:
        pass
    return names


def as_tensor(x) -> np.ndarray:
    arr = np.asarray(x, dtype=np.float32)
    if arr.ndim == 0:
        raise ShapeError("tensors must have rank >= 1")
    arr = np.ascontiguousarray(arr)
    if 0 in arr.shape:
        raise ShapeError(f"zero-sized dimension in shape {arr.shape}")
    return arr


def _finite(x: np.ndarray, op: str) -> np.ndarray:
    if not np.isfinite(x).all():
        raise NumericalError(f"{op} produced non-finite values")
    return x


def _require_2d(x: np.ndarray, op: str) -> None:
    if x.ndim != 2:
        raise ShapeError(f"{op} expects a rank-2 tensor, got shape {x.shape}")


def matmul(a, b) -> np.ndarray:
    """``a @ b`` with float64 accumulation in fixed left-to-right order."""
    a = as_tensor(a)
    b = as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    return _finite(_backend.matmul(a, b), "matmul")


def softmax_rows(x) -> np.ndarray:
    """Numerically stable softmax over the last axis of a matrix."""
    x = as_tensor(x)
    _require_2d(x, "softmax_rows")
    _finite(x, "softmax_rows input")
    return _finite(_backend.softmax_rows(x), "softmax_rows")


def row_l2_normalize(x) -> np.ndarray:
    """Divide each row by its euclidean norm; all-zero rows stay zero."""
    x = as_tensor(x)
    _require_2d(x, "row_l2_normalize")
    return _finite(_backend.row_l2_normalize(x), "row_l2_normalize")


def add(a, b) -> np.ndarray:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape and b.shape != a.shape[-b.ndim:]:
        raise ShapeError(f"add shape mismatch: {a.shape} + {b.shape}")
    return _finite(a + b, "add")


def mul(a, b) -> np.ndarray:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"mul shape mismatch: {a.shape} * {b.shape}")
    return _finite(a * b, "mul")


def scale(a, s: float) -> np.ndarray:
    return _finite(as_tensor(a) * np.float32(s), "scale")


def transpose(a) -> np.ndarray:
    a = as_tensor(a)
    _require_2d(a, "transpose")
    return np.ascontiguousarray(a.T)


def reshape(a, shape: Sequence[int]) -> np.ndarray:
    a = as_tensor(a)
    shape = tuple(int(s) for s in shape)
    if any(s <= 0 for s in shape) or int(np.prod(shape)) != a.size:
        raise ShapeError(f"cannot reshape {a.shape} to {shape}")
    return np.ascontiguousarray(a.reshape(shape))


def concat(tensors: Iterable, axis: int = 0) -> np.ndarray:
    parts = [as_tensor(t) for t in tensors]
    if not parts:
        raise ShapeError("concat of an empty list")
    try:
        return np.ascontiguousarray(np.concatenate(parts, axis=axis))
    except ValueError as exc:
        raise ShapeError(f"concat shape mismatch: {[p.shape for p in parts]}") from exc


# --- random numbers -------------------------------------------------------

_TWO_PI = 2.0 * np.pi


def _key_from(seed: int, names: Sequence[str]) -> int:
    h = hashlib.blake2b(digest_size=16)
    h.update(struct.pack("<Q", seed & 0xFFFFFFFFFFFFFFFF))
    for name in names:
        h.update(b"\x00" + name.encode("utf-8"))
    return int.from_bytes(h.digest(), "little")


@dataclass
class SeededRng:
    """Counter-based normal generator (Philox-4x64 keyed by seed and stream names).

    Draw ``i`` of a stream is a pure function of ``(seed, stream, i)``, so
    generators for different weight tensors never interfere.
    """

    seed: int
    stream: tuple[str, ...] = ()
    counter: int = 0
    _key: int = field(init=False, repr=False)

    def __post_init__(self) -> None:
        if not 0 <= self.seed < 2**64:
            raise InputError(f"seed must be an unsigned 64-bit integer, got {self.seed}")
        self._key = _key_from(self.seed, self.stream)

    def child(self, *names: str) -> "SeededRng":
        return SeededRng(self.seed, self.stream + tuple(names))

    def uniform_raw(self, count: int, start: int) -> np.ndarray:
        bitgen = np.random.Philox(key=self._key)
        # Philox emits 4 words per counter increment
        block, offset = divmod(start, 4)
        bitgen.advance(block)
        raw = bitgen.random_raw(count + offset)
        return raw[offset:]

    def normal(self, shape: Sequence[int]) -> np.ndarray:
        shape = tuple(int(s) for s in shape)
        if not shape or any(s <= 0 for s in shape):
            raise ShapeError(f"seeded_normal needs a non-empty shape without zero dims, got {shape}")
        n = int(np.prod(shape))
        raw = self.uniform_raw(2 * n, 2 * self.counter)
        self.counter += n
        # 53-bit uniforms; u1 in (0, 1] keeps the log finite
        top = (raw >> np.uint64(11)).astype(np.float64) * (1.0 / 9007199254740992.0)
        u1 = 1.0 - top[0::2]
        u2 = top[1::2]
        z = np.sqrt(-2.0 * np.log(u1)) * np.cos(_TWO_PI * u2)
        return z.astype(np.float32).reshape(shape)


def seeded_normal(shape: Sequence[int], rng: SeededRng) -> np.ndarray:
    return rng.normal(shape)


# --- binary serialization -------------------------------------------------

MAGIC = b"QKVT"


def dump_tensor(x, fh: BinaryIO) -> None:
    """Write ``x`` as ``QKVT | u32 rank | u32 dims[rank] | f32 LE payload``."""
    x = as_tensor(x)
    fh.write(MAGIC)
    fh.write(struct.pack(f"<I{x.ndim}I", x.ndim, *x.shape))
    fh.write(x.astype("<f4", copy=False).tobytes(order="C"))


def load_tensor(fh: BinaryIO) -> np.ndarray:
    magic = fh.read(4)
    if magic != MAGIC:
        raise InputError(f"bad tensor magic {magic!r}")
    (rank,) = struct.unpack("<I", fh.read(4))
    dims = struct.unpack(f"<{rank}I", fh.read(4 * rank))
    count = int(np.prod(dims)) if dims else 0
    payload = fh.read(4 * count)
    if len(payload) != 4 * count:
        raise InputError("truncated tensor payload")
    return np.frombuffer(payload, dtype="<f4").astype(np.float32).reshape(dims)


def write_tensor(x, path: str | Path) -> None:
    buf = io.BytesIO()
    dump_tensor(x, buf)
    Path(path).write_bytes(buf.getvalue())


def read_tensor(path: str | Path) -> np.ndarray:
    with open(path, "rb") as fh:
        return load_tensor(fh)
