"""Merge recipes and the streaming executor that materializes them on disk."""

from __future__ import annotations

import json
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass
from pathlib import Path

from .checkpoint import (
    CheckpointWriter,
    IncompatibleCheckpointsError,
    load_checkpoint,
    validate_compat,
)
from .dtypes import canonical_dtype
from .merge import (
    MergeError,
    check_density,
    checkpoint_id,
    dare_ties_flat,
    finite_values,
    ta_flat,
    ties_flat,
    to_output,
)

METHODS = ("TA", "TIES", "DARE-TIES")
_METHOD_ALIASES = {
    "ta": "TA", "task-arithmetic": "TA", "task_arithmetic": "TA",
    "ties": "TIES", "ti": "TIES",
    "dare-ties": "DARE-TIES", "dare_ties": "DARE-TIES", "da": "DARE-TIES",
}
THREADS_ENV = "MERGE_FORGE_THREADS"


def canonical_method(name: str) -> str:
    if name in METHODS:
        return name
    try:
        return _METHOD_ALIASES[name.lower()]
    except KeyError:
        raise MergeError(f"unknown merge method {name!r}; expected ta, ties or dare-ties") from None


def canonical_policy(policy: str) -> str:
    return "preserve" if policy == "preserve" else canonical_dtype(policy)


def resolve_threads(threads: int | None = None) -> int:
    if threads is None:
        env = os.environ.get(THREADS_ENV)
        threads = int(env) if env else (os.cpu_count() or 1)
    if threads < 1:
        raise ValueError(f"thread count must be >= 1, got {threads}")
    return threads


@dataclass(frozen=True)
class MergeInput:
    path: str
    weight: float = 1.0
    model_id: str | None = None


@dataclass(frozen=True)
class MergeRecipe:
    """What to merge and how.

    ``lam`` scales the merged delta for every method; for Task Arithmetic the
    coefficient of input ``t`` is ``lam * weight_t``. Weights are ignored by
    TIES and DARE-TIES. ``density`` is required for those two.
    """

    method: str
    base: str
    inputs: tuple[MergeInput, ...]
    density: float | None = None
    lam: float = 1.0
    seed: int = 0
    ties_inner_density: float = 1.0
    dtype: str = "preserve"

    def __post_init__(self):
        object.__setattr__(self, "method", canonical_method(self.method))
        object.__setattr__(self, "dtype", canonical_policy(self.dtype))
        object.__setattr__(self, "inputs", tuple(
            i if isinstance(i, MergeInput) else MergeInput(**i) for i in self.inputs
        ))
        if not self.inputs:
            raise MergeError("a recipe needs at least one input model")
        for i in self.inputs:
            if not math.isfinite(i.weight):
                raise MergeError(f"weight for {i.path!r} is not finite")
        if not math.isfinite(self.lam):
            raise MergeError("lambda must be finite")
        if self.method in ("TIES", "DARE-TIES"):
            if self.density is None:
                raise MergeError(f"{self.method} requires a density")
            check_density(self.density)
            check_density(self.ties_inner_density, "ties_inner_density")
        if not (0 <= int(self.seed) < 2**64):
            raise MergeError(f"seed must be an unsigned 64-bit integer, got {self.seed}")

    def coefficients(self) -> list[float]:
        return [self.lam * i.weight for i in self.inputs]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["inputs"] = [asdict(i) for i in self.inputs]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "MergeRecipe":
        d = dict(d)
        d["inputs"] = tuple(MergeInput(**i) for i in d["inputs"])
        return cls(**d)


def _tensor_kernel(recipe: MergeRecipe, model_ids):
    coeffs = recipe.coefficients()

    def merged(name, base_t, model_ts):
        b = finite_values(base_t, name)
        deltas = [finite_values(m, name) - b for m in model_ts]
        if recipe.method == "TA":
            values = ta_flat(b, deltas, coeffs)
        elif recipe.method == "TIES":
            values = ties_flat(b, deltas, recipe.density, recipe.lam)
        else:
            values = dare_ties_flat(
                b, deltas, model_ids, name, recipe.density, recipe.lam,
                int(recipe.seed), recipe.ties_inner_density,
            )
        dtype = base_t.dtype if recipe.dtype == "preserve" else recipe.dtype
        return to_output(values, dtype, base_t.shape, name)

    return merged


def execute_recipe(
    recipe: MergeRecipe,
    out_path,
    threads: int | None = None,
    model_id: str | None = None,
    resolve=None,
) -> dict:
    """Merge tensor by tensor into ``out_path`` and return a JSON-able summary.

    Tensors are computed in windows of ``threads`` by a thread pool and
    written in canonical order, so the output bytes do not depend on the
    thread count. ``resolve`` maps recipe paths to files; the recipe stored
    in the output metadata keeps the paths as written.
    """
    threads = resolve_threads(threads)
    resolve = resolve or Path
    base = load_checkpoint(resolve(recipe.base))
    models = [load_checkpoint(resolve(i.path)) for i in recipe.inputs]
    ids = [i.model_id or checkpoint_id(m) for i, m in zip(recipe.inputs, models)]
    for inp, m in zip(recipe.inputs, models):
        report = validate_compat(base, m, check_dtype=False)
        if not report.ok:
            raise IncompatibleCheckpointsError(report, f"{recipe.base} vs {inp.path}")

    out_path = Path(out_path)
    out_id = model_id or out_path.name.split(".")[0]
    metadata = {
        "model_id": out_id,
        "merge_recipe": json.dumps(recipe.to_dict(), sort_keys=True, separators=(",", ":")),
    }
    specs = [
        (name, t.dtype if recipe.dtype == "preserve" else recipe.dtype, t.shape)
        for name, t in base.items()
    ]
    kernel = _tensor_kernel(recipe, ids)
    names = base.names()

    def work(name):
        return kernel(name, base[name], [m[name] for m in models])

    with CheckpointWriter(out_path, specs, metadata) as writer:
        if threads == 1:
            for name in names:
                writer.write(name, work(name))
        else:
            with ThreadPoolExecutor(max_workers=threads) as pool:
                for start in range(0, len(names), threads):
                    window = names[start : start + threads]
                    for name, tensor in zip(window, pool.map(work, window)):
                        writer.write(name, tensor)

    return {
        "method": recipe.method,
        "base": recipe.base,
        "inputs": [
            {"path": i.path, "weight": i.weight, "model_id": mid}
            for i, mid in zip(recipe.inputs, ids)
        ],
        "density": recipe.density,
        "lambda": recipe.lam,
        "seed": int(recipe.seed),
        "ties_inner_density": recipe.ties_inner_density,
        "dtype": recipe.dtype,
        "output": str(out_path),
        "model_id": out_id,
        "param_count": base.param_count,
    }
