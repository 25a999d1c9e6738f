"""Parameter-space similarity between checkpoints and rank correlation."""

from __future__ import annotations

import fnmatch
import itertools
import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .checkpoint import Checkpoint, CompatReport, IncompatibleCheckpointsError
from .merge import checkpoint_id, finite_values

# Tensors outside the transformer blocks for common LLM naming schemes.
EMBEDDING_AND_HEAD_PATTERNS = (
    "*embed_tokens*",
    "*embeddings*",
    "*wte*",
    "*wpe*",
    "lm_head*",
    "*.lm_head.*",
    "output.weight",
)

EXACT_PERMUTATION_MAX_N = 8


class EmptySelectionError(ValueError):
    pass


class ZeroNormError(ValueError):
    pass


class ConstantInputError(ValueError):
    pass


@dataclass(frozen=True)
class ParamFilter:
    include_patterns: tuple[str, ...] = ("*",)
    exclude_patterns: tuple[str, ...] = ()

    @classmethod
    def preset(cls, name: str) -> "ParamFilter":
        if name == "all":
            return cls()
        if name == "transformer-layers":
            return cls(exclude_patterns=EMBEDDING_AND_HEAD_PATTERNS)
        raise ValueError(f"unknown filter preset {name!r}; expected 'all' or 'transformer-layers'")

    def selects(self, name: str) -> bool:
        return any(fnmatch.fnmatchcase(name, p) for p in self.include_patterns) and not any(
            fnmatch.fnmatchcase(name, p) for p in self.exclude_patterns
        )


@dataclass(frozen=True)
class DistanceReport:
    model_a: str
    model_b: str
    param_count: int
    l2_normalized: float
    cosine: float
    tensors: list[str] = field(default_factory=list, repr=False)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["tensor_count"] = len(d.pop("tensors"))
        return d


def distance(a: Checkpoint, b: Checkpoint, filter: ParamFilter | None = None) -> DistanceReport:
    """Normalized L2 distance ``||a - b|| / n`` and cosine similarity.

    Computed over the selected tensors as one flattened vector, with float64
    pairwise sums per tensor and exactly rounded combination across tensors.
    """
    filter = filter or ParamFilter()
    names_a = [n for n in a.names() if filter.selects(n)]
    names_b = [n for n in b.names() if filter.selects(n)]
    shapes = [
        (n, list(a[n].shape), list(b[n].shape))
        for n in sorted(set(names_a) & set(names_b))
        if a[n].shape != b[n].shape
    ]
    report = CompatReport(
        sorted(set(names_b) - set(names_a)), sorted(set(names_a) - set(names_b)), shapes, []
    )
    if not report.ok:
        raise IncompatibleCheckpointsError(report, "distance")

    sq_diff, dot, sq_a, sq_b = [], [], [], []
    n = 0
    for name in names_a:
        va = finite_values(a[name], name)
        vb = finite_values(b[name], name)
        diff = va - vb
        sq_diff.append(float(np.sum(diff * diff)))
        dot.append(float(np.sum(va * vb)))
        sq_a.append(float(np.sum(va * va)))
        sq_b.append(float(np.sum(vb * vb)))
        n += va.size
    if n == 0:
        raise EmptySelectionError("no parameters selected by the filter")

    norm_prod_sq = math.fsum(sq_a) * math.fsum(sq_b)
    if norm_prod_sq == 0.0:
        which = "a" if math.fsum(sq_a) == 0.0 else "b"
        raise ZeroNormError(f"checkpoint {which} has zero norm; cosine is undefined")
    cosine = math.fsum(dot) / math.sqrt(norm_prod_sq)
    return DistanceReport(
        model_a=checkpoint_id(a, "a"),
        model_b=checkpoint_id(b, "b"),
        param_count=n,
        l2_normalized=math.sqrt(math.fsum(sq_diff)) / n,
        cosine=max(-1.0, min(1.0, cosine)),
        tensors=names_a,
    )


@dataclass(frozen=True)
class SpearmanResult:
    rho: float
    p_value: float
    n: int
    method: str  # "exact" or "t"

    def to_dict(self) -> dict:
        return asdict(self)


def _rho_from_ranks(rx: np.ndarray, ry: np.ndarray) -> float:
    cx, cy = rx - rx.mean(), ry - ry.mean()
    return float(np.dot(cx, cy) / math.sqrt(float(np.dot(cx, cx)) * float(np.dot(cy, cy))))


def exact_permutation_p(rx: np.ndarray, ry: np.ndarray) -> float:
    """Two-sided p: twice the smaller tail count over all n! permutations of ``ry``.

    Ranks are doubled so that average ranks become integers and the
    statistic comparisons are exact.
    """
    ix = np.rint(2 * rx).astype(np.int64)
    iy = np.rint(2 * ry).astype(np.int64)
    observed = int(np.dot(ix, iy))
    perms = np.array(list(itertools.permutations(iy)), dtype=np.int64)
    sums = perms @ ix
    upper = int(np.count_nonzero(sums >= observed))
    lower = int(np.count_nonzero(sums <= observed))
    return min(1.0, 2.0 * min(upper, lower) / len(perms))


def spearman(xs: Sequence[float], ys: Sequence[float]) -> SpearmanResult:
    xs = np.asarray(xs, dtype=np.float64)
    ys = np.asarray(ys, dtype=np.float64)
    if xs.shape != ys.shape or xs.ndim != 1:
        raise ValueError(f"inputs must be 1-d and equally long, got {xs.shape} and {ys.shape}")
    n = xs.size
    if n < 3:
        raise ValueError(f"need at least 3 pairs, got {n}")
    if not (np.isfinite(xs).all() and np.isfinite(ys).all()):
        raise ValueError("inputs must be finite")
    if np.all(xs == xs[0]) or np.all(ys == ys[0]):
        raise ConstantInputError("an input is constant; rank correlation is undefined")

    from scipy import stats  # slow to import; only needed here

    rx = stats.rankdata(xs, method="average")
    ry = stats.rankdata(ys, method="average")
    rho = _rho_from_ranks(rx, ry)
    if n <= EXACT_PERMUTATION_MAX_N:
        return SpearmanResult(rho, exact_permutation_p(rx, ry), n, "exact")
    if abs(rho) >= 1.0:
        return SpearmanResult(rho, 0.0, n, "t")
    t = rho * math.sqrt((n - 2) / (1.0 - rho * rho))
    p = float(2.0 * stats.t.sf(abs(t), n - 2))
    return SpearmanResult(rho, min(1.0, p), n, "t")
