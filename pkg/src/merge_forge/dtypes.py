"""Storage dtypes and round-to-nearest-even conversions.

bfloat16 has no native numpy dtype, so it is stored as raw ``uint16`` words
and converted with bit manipulation.
"""

from __future__ import annotations

import numpy as np

STORAGE_DTYPES: dict[str, np.dtype] = {
    "F32": np.dtype("<f4"),
    "F16": np.dtype("<f2"),
    "BF16": np.dtype("<u2"),
}

DTYPE_SIZES = {name: dt.itemsize for name, dt in STORAGE_DTYPES.items()}

_ALIASES = {
    "f32": "F32", "float32": "F32", "fp32": "F32",
    "f16": "F16", "float16": "F16", "fp16": "F16", "half": "F16",
    "bf16": "BF16", "bfloat16": "BF16",
}


class UnsupportedDtypeError(ValueError):
    pass


def canonical_dtype(name: str) -> str:
    """Map a user-facing dtype spelling (``f16``, ``bfloat16``...) to its header tag."""
    if name in STORAGE_DTYPES:
        return name
    tag = _ALIASES.get(name.lower())
    if tag is None:
        raise UnsupportedDtypeError(
            f"unsupported dtype {name!r}; expected one of F32, F16, BF16"
        )
    return tag


def to_float64(data: np.ndarray, dtype: str) -> np.ndarray:
    """Widen stored values to float64. Exact for every supported dtype."""
    if dtype == "BF16":
        words = np.asarray(data, dtype=np.uint16).astype(np.uint32) << 16
        return words.view(np.float32).astype(np.float64)
    return np.asarray(data).astype(np.float64)


def _f64_to_f32_round_to_odd(x: np.ndarray) -> np.ndarray:
    # Round-to-odd into float32 keeps a sticky bit, so a second
    # round-to-nearest-even step into bfloat16 is free of double rounding.
    f = x.astype(np.float32)
    back = f.astype(np.float64)
    with np.errstate(invalid="ignore"):
        away = np.abs(back) > np.abs(x)
    f = np.where(away, np.nextafter(f, np.float32(0)), f)
    bits = f.view(np.uint32)
    inexact = f.astype(np.float64) != x
    return np.where(inexact, bits | np.uint32(1), bits).astype(np.uint32)


def _f32_bits_to_bf16(bits: np.ndarray) -> np.ndarray:
    bits = bits.astype(np.uint32)
    rounding = np.uint32(0x7FFF) + ((bits >> np.uint32(16)) & np.uint32(1))
    return ((bits + rounding) >> np.uint32(16)).astype(np.uint16)


def from_float64(values: np.ndarray, dtype: str) -> np.ndarray:
    """Round float64 values to ``dtype`` (nearest, ties to even).

    Returns an array of the storage dtype. Values that are finite in float64
    but overflow the target come back as infinities; callers decide whether
    that is an error.
    """
    values = np.asarray(values, dtype=np.float64)
    if dtype == "F32":
        with np.errstate(over="ignore"):
            return values.astype("<f4")
    if dtype == "F16":
        with np.errstate(over="ignore"):
            return values.astype("<f2")
    if dtype == "BF16":
        with np.errstate(over="ignore"):
            return _f32_bits_to_bf16(_f64_to_f32_round_to_odd(values)).astype("<u2")
    raise UnsupportedDtypeError(f"unsupported dtype {dtype!r}")


def bf16_from_float32(values: np.ndarray) -> np.ndarray:
    """Round float32 values to bfloat16 words (nearest, ties to even)."""
    return _f32_bits_to_bf16(np.asarray(values, dtype=np.float32).view(np.uint32))
