"""Weight-space model merging: Task Arithmetic, TIES and DARE-TIES, a staged
merge/select pipeline, merge-quality metrics and parameter-space similarity."""

__version__ = "0.1.0"

from .checkpoint import (
    Checkpoint,
    CompatReport,
    Tensor,
    TensorMeta,
    inspect,
    load_checkpoint,
    save_checkpoint,
    validate_compat,
)
from .geometry import DistanceReport, ParamFilter, distance, spearman
from .merge import (
    TaskVector,
    compute_task_vector,
    drop_and_rescale,
    elect_signs,
    merge_dare_ties,
    merge_task_arithmetic,
    merge_ties,
    prune_topd,
)
from .metrics import (
    MetricsReport,
    ScoreTable,
    aggregate_runs,
    build_report,
    emit_matrix,
    gain,
    outperform_gap,
)
from .pipeline import Pipeline, StageConfig, select_best, select_top2
from .recipe import MergeInput, MergeRecipe, execute_recipe

__all__ = [
    "Checkpoint", "CompatReport", "DistanceReport", "MergeInput", "MergeRecipe",
    "MetricsReport", "ParamFilter", "Pipeline", "ScoreTable", "StageConfig",
    "TaskVector", "Tensor", "TensorMeta", "aggregate_runs", "build_report",
    "compute_task_vector", "distance", "drop_and_rescale", "elect_signs",
    "emit_matrix", "execute_recipe", "gain", "inspect", "load_checkpoint",
    "merge_dare_ties", "merge_task_arithmetic", "merge_ties", "outperform_gap",
    "prune_topd", "save_checkpoint", "select_best", "select_top2", "spearman",
    "validate_compat",
]
