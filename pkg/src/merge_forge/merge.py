"""Task vectors and the three merge methods: Task Arithmetic, TIES and DARE-TIES.

All arithmetic happens on float64 copies of the stored values; results are
rounded once, to nearest even, into the output dtype. The ``*_flat``
kernels work on one flattened tensor and are shared by the in-memory API
below and the streaming executor in :mod:`merge_forge.recipe`.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from decimal import ROUND_HALF_UP, Decimal
from typing import Mapping, Sequence

import numpy as np

from . import prng
from .checkpoint import (
    Checkpoint,
    IncompatibleCheckpointsError,
    NonFiniteValueError,
    Tensor,
    _check_finite_output,
    validate_compat,
)
from .dtypes import canonical_dtype, from_float64

__all__ = [
    "TaskVector",
    "checkpoint_id",
    "compute_task_vector",
    "drop_and_rescale",
    "elect_signs",
    "merge_dare_ties",
    "merge_task_arithmetic",
    "merge_ties",
    "prune_topd",
    "retained_count",
]


class MergeError(ValueError):
    pass


@dataclass(frozen=True)
class TaskVector:
    """Per-tensor deltas of ``model_id`` against ``base_id``.

    ``deltas`` holds float64 arrays shaped like the base tensors.
    """

    base_id: str
    model_id: str
    deltas: Mapping[str, np.ndarray] = field(repr=False)

    def names(self) -> list[str]:
        return sorted(self.deltas)

    def replace(self, deltas: Mapping[str, np.ndarray]) -> "TaskVector":
        return TaskVector(self.base_id, self.model_id, deltas)

    def nonzero_count(self) -> int:
        return sum(int(np.count_nonzero(v)) for v in self.deltas.values())


def checkpoint_id(ckpt: Checkpoint, default: str = "model") -> str:
    """Identifier of a checkpoint: its ``model_id`` metadata, else its file stem."""
    if ckpt.model_id:
        return ckpt.model_id
    if ckpt.path is not None:
        return ckpt.path.name.split(".")[0]
    return default


def check_density(d: float, what: str = "density") -> float:
    d = float(d)
    if not (0.0 < d <= 1.0):
        raise MergeError(f"{what} must lie in (0, 1], got {d!r}")
    return d


def finite_values(tensor: Tensor, name: str) -> np.ndarray:
    values = tensor.values()
    bad = ~np.isfinite(values)
    if bad.any():
        idx = int(np.flatnonzero(bad)[0])
        raise NonFiniteValueError(name, idx, float(values[idx]))
    return values


def retained_count(d: float, n: int) -> int:
    """``round_half_up(d * n)`` clamped to ``[0, n]``, using the decimal value of ``d``."""
    k = (Decimal(repr(float(d))) * n).quantize(Decimal(1), rounding=ROUND_HALF_UP)
    return max(0, min(n, int(k)))


# --------------------------------------------------------------------------
# per-tensor kernels on flat float64 arrays


def topd_flat(v: np.ndarray, d: float) -> np.ndarray:
    """Keep the ``retained_count(d, n)`` largest magnitudes; ties go to the lower index."""
    n = v.size
    k = retained_count(d, n)
    if k >= n:
        return v.copy()
    out = np.zeros_like(v)
    if k == 0:
        return out
    mag = np.abs(v)
    threshold = np.partition(mag, n - k)[n - k]
    keep = mag > threshold
    short = k - int(np.count_nonzero(keep))
    keep[np.flatnonzero(mag == threshold)[:short]] = True
    out[keep] = v[keep]
    return out


def signs_flat(pruned: Sequence[np.ndarray]) -> np.ndarray:
    total = pruned[0].copy()
    for v in pruned[1:]:
        total += v
    return np.sign(total).astype(np.int8)


def disjoint_mean_flat(pruned: Sequence[np.ndarray]) -> np.ndarray:
    """Mean of the sign-aligned entries per element; 0 where none align."""
    elected = signs_flat(pruned)
    total = np.zeros_like(pruned[0])
    count = np.zeros(pruned[0].shape, dtype=np.int64)
    for v in pruned:
        aligned = (np.sign(v) == elected) & (elected != 0)
        total += np.where(aligned, v, 0.0)
        count += aligned
    return np.divide(total, count, out=np.zeros_like(total), where=count > 0)


def ties_flat(base: np.ndarray, deltas: Sequence[np.ndarray], d: float, lam: float) -> np.ndarray:
    pruned = [topd_flat(v, d) for v in deltas]
    return base + lam * disjoint_mean_flat(pruned)


def ta_flat(base: np.ndarray, deltas: Sequence[np.ndarray], lambdas: Sequence[float]) -> np.ndarray:
    # left-to-right sum of scaled deltas, then added to the base
    total = float(lambdas[0]) * deltas[0]
    for lam, v in zip(lambdas[1:], deltas[1:]):
        total = total + float(lam) * v
    return base + total


def dare_flat(v: np.ndarray, d: float, model_id: str, name: str, seed: int) -> np.ndarray:
    if d == 1.0:
        return v.copy()
    keep = prng.keep_mask(model_id, name, seed, v.size, d)
    return np.where(keep, v / d, 0.0)


def dare_ties_flat(base, deltas, model_ids, name, d, lam, seed, inner_density):
    rescaled = [dare_flat(v, d, mid, name, seed) for v, mid in zip(deltas, model_ids)]
    return ties_flat(base, rescaled, inner_density, lam)


def to_output(values: np.ndarray, dtype: str, shape, name: str) -> Tensor:
    out = from_float64(values, dtype)
    _check_finite_output(out, dtype, name)
    return Tensor(dtype, shape, out.reshape(shape))


# --------------------------------------------------------------------------
# in-memory API


def _require_compat(base: Checkpoint, other: Checkpoint, label: str) -> None:
    report = validate_compat(base, other, check_dtype=False)
    if not report.ok:
        raise IncompatibleCheckpointsError(report, label)


def compute_task_vector(
    base: Checkpoint, model: Checkpoint, base_id: str | None = None, model_id: str | None = None
) -> TaskVector:
    """Elementwise ``model - base`` after widening both to float64."""
    _require_compat(base, model, "base vs model")
    deltas = {}
    for name in base:
        b = finite_values(base[name], name)
        m = finite_values(model[name], name)
        deltas[name] = (m - b).reshape(base[name].shape)
    return TaskVector(
        base_id or checkpoint_id(base, "base"), model_id or checkpoint_id(model), deltas
    )


def _check_vectors(base: Checkpoint, tvs: Sequence[TaskVector]) -> str:
    if not tvs:
        raise MergeError("at least one task vector is required")
    base_id = tvs[0].base_id
    for tv in tvs:
        if tv.base_id != base_id:
            raise MergeError(
                f"task vectors disagree on base: {tv.model_id!r} is relative to "
                f"{tv.base_id!r}, expected {base_id!r}"
            )
        if tv.names() != base.names():
            raise MergeError(f"task vector {tv.model_id!r} does not cover the base tensors")
        for name in base:
            if tuple(tv.deltas[name].shape) != base[name].shape:
                raise MergeError(
                    f"task vector {tv.model_id!r} tensor {name!r} has shape "
                    f"{list(tv.deltas[name].shape)}, base has {list(base[name].shape)}"
                )
    return base_id


def _assemble(base: Checkpoint, dtype_policy: str, merged_values, metadata=None) -> Checkpoint:
    out = {}
    for name, t in base.items():
        dtype = t.dtype if dtype_policy == "preserve" else canonical_dtype(dtype_policy)
        out[name] = to_output(merged_values(name, t), dtype, t.shape, name)
    return Checkpoint(out, metadata)


def merge_task_arithmetic(
    base: Checkpoint,
    tvs: Sequence[TaskVector],
    lambdas: Sequence[float],
    dtype_policy: str = "preserve",
) -> Checkpoint:
    """``base + sum_t lambda_t * tau_t``."""
    _check_vectors(base, tvs)
    if len(tvs) != len(lambdas):
        raise MergeError(f"{len(tvs)} task vectors but {len(lambdas)} coefficients")
    lambdas = [float(x) for x in lambdas]
    if not all(np.isfinite(lambdas)):
        raise MergeError(f"coefficients must be finite, got {lambdas}")
    return _assemble(
        base,
        dtype_policy,
        lambda name, t: ta_flat(
            finite_values(t, name), [tv.deltas[name].reshape(-1) for tv in tvs], lambdas
        ),
    )


def prune_topd(tv: TaskVector, d: float) -> TaskVector:
    d = check_density(d)
    return tv.replace(
        {name: topd_flat(v.reshape(-1), d).reshape(v.shape) for name, v in tv.deltas.items()}
    )


def elect_signs(pruned: Sequence[TaskVector]) -> dict[str, np.ndarray]:
    """Per-element sign of the summed deltas, as int8 in {-1, 0, 1}."""
    if not pruned:
        raise MergeError("at least one task vector is required")
    names = pruned[0].names()
    for tv in pruned[1:]:
        if tv.names() != names or any(
            tv.deltas[n].shape != pruned[0].deltas[n].shape for n in names
        ):
            raise MergeError(f"task vector {tv.model_id!r} has different tensors or shapes")
    return {
        name: signs_flat([tv.deltas[name].reshape(-1) for tv in pruned]).reshape(
            pruned[0].deltas[name].shape
        )
        for name in names
    }


def merge_ties(
    base: Checkpoint,
    tvs: Sequence[TaskVector],
    d: float,
    lam: float = 1.0,
    dtype_policy: str = "preserve",
) -> Checkpoint:
    """Trim to top-``d`` magnitudes, elect signs, average the aligned deltas."""
    d = check_density(d)
    _check_vectors(base, tvs)
    lam = float(lam)
    return _assemble(
        base,
        dtype_policy,
        lambda name, t: ties_flat(
            finite_values(t, name), [tv.deltas[name].reshape(-1) for tv in tvs], d, lam
        ),
    )


def drop_and_rescale(tv: TaskVector, d: float, global_seed: int) -> TaskVector:
    """Zero each element with probability ``1 - d`` and divide survivors by ``d``."""
    d = check_density(d)
    return tv.replace(
        {
            name: dare_flat(v.reshape(-1), d, tv.model_id, name, global_seed).reshape(v.shape)
            for name, v in tv.deltas.items()
        }
    )


def merge_dare_ties(
    base: Checkpoint,
    tvs: Sequence[TaskVector],
    d: float,
    lam: float = 1.0,
    global_seed: int = 0,
    ties_inner_density: float = 1.0,
    dtype_policy: str = "preserve",
) -> Checkpoint:
    d = check_density(d)
    inner = check_density(ties_inner_density, "ties_inner_density")
    rescaled = [drop_and_rescale(tv, d, global_seed) for tv in tvs]
    return merge_ties(base, rescaled, inner, lam, dtype_policy)
