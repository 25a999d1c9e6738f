"""Reading and writing checkpoints in the safetensors layout.

File layout: an 8-byte little-endian header length ``N``, ``N`` bytes of
UTF-8 JSON mapping tensor name to ``{"dtype", "shape", "data_offsets"}``
(plus an optional ``"__metadata__"`` string map), then the raw little-endian
data region. Offsets are relative to the end of the header.

Loaded checkpoints are backed by a read-only memory map, so tensors are only
paged in when touched; :class:`CheckpointWriter` writes one tensor at a time.
Together they keep peak memory near the size of the largest tensor.
"""

from __future__ import annotations

import json
import math
import os
import struct
import tempfile
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Iterator, Mapping

import numpy as np

from .dtypes import (
    DTYPE_SIZES,
    STORAGE_DTYPES,
    UnsupportedDtypeError,
    canonical_dtype,
    from_float64,
    to_float64,
)

__all__ = [
    "Checkpoint",
    "CheckpointFormatError",
    "CheckpointWriter",
    "CompatReport",
    "IncompatibleCheckpointsError",
    "NonFiniteValueError",
    "Tensor",
    "TensorMeta",
    "UnsupportedDtypeError",
    "inspect",
    "load_checkpoint",
    "read_header",
    "save_checkpoint",
    "validate_compat",
]

METADATA_KEY = "__metadata__"
_MAX_HEADER = 100 * 1024 * 1024


class CheckpointFormatError(ValueError):
    """The file does not follow the checkpoint layout."""

    def __init__(self, message: str, tensor: str | None = None):
        self.tensor = tensor
        if tensor is not None:
            message = f"tensor {tensor!r}: {message}"
        super().__init__(message)


class NonFiniteValueError(ValueError):
    def __init__(self, tensor: str, index: int, value: float, what: str = "input"):
        self.tensor = tensor
        self.index = index
        super().__init__(
            f"non-finite {what} value {value!r} in tensor {tensor!r} at flat index {index}"
        )


class IncompatibleCheckpointsError(ValueError):
    def __init__(self, report: "CompatReport", label: str = ""):
        self.report = report
        prefix = f"{label}: " if label else ""
        super().__init__(prefix + report.describe())


@dataclass(frozen=True)
class TensorMeta:
    name: str
    dtype: str
    shape: tuple[int, ...]
    byte_offset_begin: int
    byte_offset_end: int

    @property
    def numel(self) -> int:
        return math.prod(self.shape)

    @property
    def nbytes(self) -> int:
        return self.byte_offset_end - self.byte_offset_begin


class Tensor:
    """A tensor in its storage dtype. bfloat16 data is held as uint16 words."""

    __slots__ = ("dtype", "shape", "data")

    def __init__(self, dtype: str, shape: Iterable[int], data: np.ndarray):
        dtype = canonical_dtype(dtype)
        shape = tuple(int(s) for s in shape)
        storage = STORAGE_DTYPES[dtype]
        data = np.asarray(data)
        if data.dtype != storage:
            raise TypeError(f"{dtype} tensor needs {storage} storage, got {data.dtype}")
        if data.size != math.prod(shape):
            raise ValueError(f"data has {data.size} elements, shape {shape} needs {math.prod(shape)}")
        self.dtype = dtype
        self.shape = shape
        self.data = data.reshape(shape)

    @classmethod
    def from_values(cls, values, dtype: str = "F32", shape=None) -> "Tensor":
        """Build a tensor by rounding real values into ``dtype``."""
        dtype = canonical_dtype(dtype)
        values = np.asarray(values, dtype=np.float64)
        shape = values.shape if shape is None else tuple(shape)
        return cls(dtype, shape, from_float64(values, dtype).reshape(shape))

    @property
    def numel(self) -> int:
        return math.prod(self.shape)

    @property
    def nbytes(self) -> int:
        return self.numel * DTYPE_SIZES[self.dtype]

    def values(self) -> np.ndarray:
        """Exact float64 copy of the stored values, flattened row-major."""
        return to_float64(self.data, self.dtype).reshape(-1)

    def tobytes(self) -> bytes:
        return np.ascontiguousarray(self.data).tobytes()

    def cast(self, dtype: str, name: str = "?") -> "Tensor":
        dtype = canonical_dtype(dtype)
        if dtype == self.dtype:
            return self
        out = from_float64(self.values(), dtype)
        _check_finite_output(out, dtype, name)
        return Tensor(dtype, self.shape, out.reshape(self.shape))

    def __eq__(self, other) -> bool:
        if not isinstance(other, Tensor):
            return NotImplemented
        return (
            self.dtype == other.dtype
            and self.shape == other.shape
            and self.tobytes() == other.tobytes()
        )

    def __repr__(self) -> str:
        return f"Tensor(dtype={self.dtype}, shape={list(self.shape)})"


class Checkpoint:
    """Immutable map of tensor name to :class:`Tensor`, iterated in sorted name order."""

    def __init__(
        self,
        tensors: Mapping[str, Tensor],
        metadata: Mapping[str, str] | None = None,
        path: str | os.PathLike | None = None,
    ):
        for name in tensors:
            if not isinstance(name, str) or not name:
                raise ValueError(f"tensor names must be non-empty strings, got {name!r}")
            if name == METADATA_KEY:
                raise ValueError(f"{METADATA_KEY!r} is reserved")
        self._tensors = {name: tensors[name] for name in sorted(tensors)}
        self.metadata = {str(k): str(v) for k, v in (metadata or {}).items()}
        self.path = Path(path) if path is not None else None

    @classmethod
    def from_arrays(cls, arrays: Mapping[str, object], dtype: str = "F32", metadata=None):
        """Convenience constructor rounding plain arrays into ``dtype``."""
        return cls({k: Tensor.from_values(v, dtype) for k, v in arrays.items()}, metadata)

    def __getitem__(self, name: str) -> Tensor:
        return self._tensors[name]

    def __contains__(self, name) -> bool:
        return name in self._tensors

    def __iter__(self) -> Iterator[str]:
        return iter(self._tensors)

    def __len__(self) -> int:
        return len(self._tensors)

    def names(self) -> list[str]:
        return list(self._tensors)

    def items(self):
        return self._tensors.items()

    @property
    def model_id(self) -> str | None:
        return self.metadata.get("model_id")

    @property
    def param_count(self) -> int:
        return sum(t.numel for t in self._tensors.values())

    def layout(self) -> list[TensorMeta]:
        """Canonical byte layout: sorted names, contiguous offsets from 0."""
        metas, offset = [], 0
        for name, t in self._tensors.items():
            metas.append(TensorMeta(name, t.dtype, t.shape, offset, offset + t.nbytes))
            offset += t.nbytes
        return metas

    def __eq__(self, other) -> bool:
        if not isinstance(other, Checkpoint):
            return NotImplemented
        return (
            self.metadata == other.metadata
            and list(self._tensors) == list(other._tensors)
            and all(self._tensors[k] == other._tensors[k] for k in self._tensors)
        )

    def __repr__(self) -> str:
        return f"Checkpoint({len(self)} tensors, {self.param_count} params)"


@dataclass(frozen=True)
class CompatReport:
    missing_in_a: list[str]
    missing_in_b: list[str]
    shape_mismatches: list[tuple[str, list[int], list[int]]]
    dtype_mismatches: list[tuple[str, str, str]]

    @property
    def ok(self) -> bool:
        return not (
            self.missing_in_a or self.missing_in_b or self.shape_mismatches or self.dtype_mismatches
        )

    def describe(self) -> str:
        if self.ok:
            return "compatible"
        parts = []
        if self.missing_in_a:
            parts.append(f"missing in a: {', '.join(self.missing_in_a)}")
        if self.missing_in_b:
            parts.append(f"missing in b: {', '.join(self.missing_in_b)}")
        for name, sa, sb in self.shape_mismatches:
            parts.append(f"shape mismatch for {name!r}: {sa} vs {sb}")
        for name, da, db in self.dtype_mismatches:
            parts.append(f"dtype mismatch for {name!r}: {da} vs {db}")
        return "; ".join(parts)

    def to_dict(self) -> dict:
        return {
            "missing_in_a": self.missing_in_a,
            "missing_in_b": self.missing_in_b,
            "shape_mismatches": [list(m) for m in self.shape_mismatches],
            "dtype_mismatches": [list(m) for m in self.dtype_mismatches],
        }


def validate_compat(a: Checkpoint, b: Checkpoint, check_dtype: bool = True) -> CompatReport:
    """List every structural difference between two checkpoints.

    Dtype differences are reported but merges tolerate them (values are
    widened to float64 before any arithmetic); pass ``check_dtype=False`` to
    leave them out.
    """
    names_a, names_b = set(a.names()), set(b.names())
    shapes, dtypes = [], []
    for name in sorted(names_a & names_b):
        ta, tb = a[name], b[name]
        if ta.shape != tb.shape:
            shapes.append((name, list(ta.shape), list(tb.shape)))
        if check_dtype and ta.dtype != tb.dtype:
            dtypes.append((name, ta.dtype, tb.dtype))
    return CompatReport(
        missing_in_a=sorted(names_b - names_a),
        missing_in_b=sorted(names_a - names_b),
        shape_mismatches=shapes,
        dtype_mismatches=dtypes,
    )


# --------------------------------------------------------------------------
# reading


def _parse_entry(name: str, entry) -> TensorMeta:
    if not isinstance(entry, dict):
        raise CheckpointFormatError("header entry is not an object", name)
    missing = {"dtype", "shape", "data_offsets"} - entry.keys()
    if missing:
        raise CheckpointFormatError(f"header entry lacks {sorted(missing)}", name)
    dtype = entry["dtype"]
    if dtype not in STORAGE_DTYPES:
        raise CheckpointFormatError(f"unsupported dtype {dtype!r}", name)
    shape = entry["shape"]
    if not isinstance(shape, list) or not all(
        isinstance(s, int) and not isinstance(s, bool) and s >= 0 for s in shape
    ):
        raise CheckpointFormatError(f"invalid shape {shape!r}", name)
    offsets = entry["data_offsets"]
    if (
        not isinstance(offsets, list)
        or len(offsets) != 2
        or not all(isinstance(o, int) and not isinstance(o, bool) and o >= 0 for o in offsets)
        or offsets[0] > offsets[1]
    ):
        raise CheckpointFormatError(f"invalid data_offsets {offsets!r}", name)
    meta = TensorMeta(name, dtype, tuple(shape), offsets[0], offsets[1])
    if meta.numel * DTYPE_SIZES[dtype] != meta.nbytes:
        raise CheckpointFormatError(
            f"data_offsets span {meta.nbytes} bytes but shape {shape} of {dtype} "
            f"needs {meta.numel * DTYPE_SIZES[dtype]}",
            name,
        )
    return meta


def read_header(path: str | os.PathLike) -> tuple[list[TensorMeta], dict[str, str], int]:
    """Parse and validate a checkpoint header.

    Returns ``(metas sorted by name, metadata, data_start)``. The data region
    length is checked against the file size.
    """
    path = Path(path)
    file_size = path.stat().st_size
    with open(path, "rb") as fh:
        prefix = fh.read(8)
        if len(prefix) < 8:
            raise CheckpointFormatError("file shorter than the 8-byte header length")
        (n,) = struct.unpack("<Q", prefix)
        if n > _MAX_HEADER or 8 + n > file_size:
            raise CheckpointFormatError(f"header length {n} exceeds file size {file_size}")
        raw = fh.read(n)
    try:
        header = json.loads(raw.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointFormatError(f"header is not valid UTF-8 JSON: {exc}") from None
    if not isinstance(header, dict):
        raise CheckpointFormatError("header is not a JSON object")

    metadata = header.pop(METADATA_KEY, None) or {}
    if not isinstance(metadata, dict) or not all(
        isinstance(k, str) and isinstance(v, str) for k, v in metadata.items()
    ):
        raise CheckpointFormatError(f"{METADATA_KEY} must map strings to strings")

    metas = []
    for name, entry in header.items():
        if not name:
            raise CheckpointFormatError("empty tensor name")
        metas.append(_parse_entry(name, entry))

    data_start = 8 + n
    data_len = file_size - data_start
    expected = 0
    for meta in sorted(metas, key=lambda m: (m.byte_offset_begin, m.byte_offset_end)):
        if meta.byte_offset_begin < expected:
            raise CheckpointFormatError(
                f"data_offsets {[meta.byte_offset_begin, meta.byte_offset_end]} overlap "
                f"a preceding tensor ending at {expected}",
                meta.name,
            )
        if meta.byte_offset_begin > expected:
            raise CheckpointFormatError(
                f"gap in data region before offset {meta.byte_offset_begin}", meta.name
            )
        if meta.byte_offset_end > data_len:
            raise CheckpointFormatError(
                f"data region truncated: tensor ends at {meta.byte_offset_end}, "
                f"only {data_len} bytes present",
                meta.name,
            )
        expected = meta.byte_offset_end
    if expected != data_len:
        raise CheckpointFormatError(
            f"data region has {data_len - expected} trailing bytes past the last tensor"
        )
    metas.sort(key=lambda m: m.name)
    return metas, metadata, data_start


def load_checkpoint(path: str | os.PathLike) -> Checkpoint:
    """Open a checkpoint file. Tensor data stays on disk until accessed."""
    metas, metadata, data_start = read_header(path)
    region = None
    total = sum(m.nbytes for m in metas)
    if total:
        region = np.memmap(path, dtype=np.uint8, mode="r", offset=data_start, shape=(total,))
    tensors = {}
    for meta in metas:
        storage = STORAGE_DTYPES[meta.dtype]
        if meta.nbytes:
            buf = region[meta.byte_offset_begin : meta.byte_offset_end].view(storage)
        else:
            buf = np.empty(0, dtype=storage)
        tensors[meta.name] = Tensor(meta.dtype, meta.shape, buf)
    return Checkpoint(tensors, metadata, path=path)


def inspect(path: str | os.PathLike) -> dict:
    metas, metadata, _ = read_header(path)
    return {
        "path": str(path),
        "tensor_count": len(metas),
        "param_count": sum(m.numel for m in metas),
        "metadata": metadata,
        "tensors": [
            {"name": m.name, "dtype": m.dtype, "shape": list(m.shape), "bytes": m.nbytes}
            for m in metas
        ],
    }


# --------------------------------------------------------------------------
# writing


def _check_finite_output(arr: np.ndarray, dtype: str, name: str) -> None:
    values = to_float64(arr, dtype).reshape(-1)
    bad = ~np.isfinite(values)
    if bad.any():
        idx = int(np.flatnonzero(bad)[0])
        raise NonFiniteValueError(name, idx, float(values[idx]), what=f"{dtype} output")


def encode_header(layout: list[TensorMeta], metadata: Mapping[str, str] | None) -> bytes:
    header: dict = {}
    if metadata:
        header[METADATA_KEY] = {k: metadata[k] for k in sorted(metadata)}
    for meta in sorted(layout, key=lambda m: m.name):
        header[meta.name] = {
            "dtype": meta.dtype,
            "shape": list(meta.shape),
            "data_offsets": [meta.byte_offset_begin, meta.byte_offset_end],
        }
    raw = json.dumps(header, separators=(",", ":"), ensure_ascii=False).encode("utf-8")
    raw += b" " * (-len(raw) % 8)
    return struct.pack("<Q", len(raw)) + raw


class CheckpointWriter:
    """Write a checkpoint one tensor at a time, in sorted name order.

    The header is fixed up front from ``specs`` (name, dtype, shape); the file
    appears at ``path`` only after :meth:`close` succeeds.
    """

    def __init__(self, path, specs: Iterable[tuple[str, str, tuple[int, ...]]], metadata=None):
        self.path = Path(path)
        layout, offset = [], 0
        for name, dtype, shape in sorted(specs, key=lambda s: s[0]):
            dtype = canonical_dtype(dtype)
            nbytes = math.prod(shape) * DTYPE_SIZES[dtype]
            layout.append(TensorMeta(name, dtype, tuple(shape), offset, offset + nbytes))
            offset += nbytes
        self._pending = list(layout)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        fd, self._tmp = tempfile.mkstemp(prefix=f".{self.path.name}.", dir=self.path.parent)
        self._fh = os.fdopen(fd, "wb")
        self._fh.write(encode_header(layout, metadata))

    def write(self, name: str, tensor: Tensor) -> None:
        if not self._pending:
            raise ValueError(f"unexpected tensor {name!r}: all tensors already written")
        meta = self._pending[0]
        if name != meta.name:
            raise ValueError(f"expected tensor {meta.name!r} next, got {name!r}")
        if tensor.dtype != meta.dtype or tensor.shape != meta.shape:
            raise ValueError(
                f"tensor {name!r} is {tensor.dtype}{list(tensor.shape)}, "
                f"header declares {meta.dtype}{list(meta.shape)}"
            )
        self._fh.write(tensor.tobytes())
        self._pending.pop(0)

    def close(self) -> None:
        if self._pending:
            self.abort()
            raise ValueError(f"tensor {self._pending[0].name!r} was never written")
        self._fh.close()
        os.replace(self._tmp, self.path)

    def abort(self) -> None:
        if not self._fh.closed:
            self._fh.close()
        if os.path.exists(self._tmp):
            os.unlink(self._tmp)

    def __enter__(self):
        return self

    def __exit__(self, exc_type, exc, tb):
        if exc_type is None:
            self.close()
        else:
            self.abort()
        return False


def save_checkpoint(ckpt: Checkpoint, path, dtype_policy: str = "preserve") -> None:
    """Write ``ckpt`` in canonical layout.

    ``dtype_policy`` is ``"preserve"`` or a target dtype (``F32``/``F16``/
    ``BF16`` or aliases such as ``bf16``); casting rounds to nearest even.
    """
    target = None if dtype_policy == "preserve" else canonical_dtype(dtype_policy)
    specs = [(name, target or t.dtype, t.shape) for name, t in ckpt.items()]
    with CheckpointWriter(path, specs, ckpt.metadata) as writer:
        for name, t in ckpt.items():
            writer.write(name, t if target is None else t.cast(target, name))
