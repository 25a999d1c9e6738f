"""Merge-quality metrics computed from score tables.

Scores are percentage points. Nothing is rounded during computation; only
the matrix renderers round (to two decimals).
"""

from __future__ import annotations

import csv
import io
import json
import math
import statistics
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence


class MissingScoreError(KeyError):
    def __init__(self, model_id: str, task: str | None = None):
        self.model_id = model_id
        self.task = task
        msg = f"no scores for model {model_id!r}"
        if task is not None:
            msg = f"missing score for model {model_id!r} on task {task!r}"
        super().__init__(msg)

    def __str__(self) -> str:
        return self.args[0]


class ZeroOracleError(ZeroDivisionError):
    pass


class ScoreRow(Mapping[str, float]):
    """One model's scores; looking up an absent task names the model in the error."""

    def __init__(self, model_id: str, scores: Mapping[str, float]):
        self.model_id = model_id
        self._scores = dict(scores)

    def __getitem__(self, task: str) -> float:
        try:
            return self._scores[task]
        except KeyError:
            raise MissingScoreError(self.model_id, task) from None

    def __iter__(self):
        return iter(self._scores)

    def __len__(self) -> int:
        return len(self._scores)

    def __repr__(self) -> str:
        return f"ScoreRow({self.model_id!r}, {self._scores})"


def _as_row(row, label: str) -> ScoreRow:
    return row if isinstance(row, ScoreRow) else ScoreRow(label, row)


@dataclass
class ScoreTable:
    tasks: list[str]
    models: dict[str, dict[str, float]] = field(default_factory=dict)

    def __post_init__(self):
        if len(set(self.tasks)) != len(self.tasks):
            raise ValueError(f"duplicate task ids in {self.tasks}")
        for model_id, row in self.models.items():
            for task, score in row.items():
                if isinstance(score, bool) or not isinstance(score, (int, float)):
                    raise ValueError(f"score for {model_id!r}/{task!r} is not a number: {score!r}")
                if not math.isfinite(score):
                    raise ValueError(f"score for {model_id!r}/{task!r} is not finite")

    @classmethod
    def from_dict(cls, d: Mapping) -> "ScoreTable":
        if not isinstance(d, Mapping) or "models" not in d:
            raise ValueError('score table must be an object with a "models" field')
        models = d["models"]
        if not isinstance(models, Mapping) or not all(isinstance(r, Mapping) for r in models.values()):
            raise ValueError('"models" must map model ids to {task: score} objects')
        tasks = d.get("tasks")
        if tasks is None:
            tasks = sorted({t for row in models.values() for t in row})
        if not isinstance(tasks, list) or not all(isinstance(t, str) for t in tasks):
            raise ValueError('"tasks" must be a list of task ids')
        return cls(list(tasks), {str(m): dict(r) for m, r in models.items()})

    @classmethod
    def load(cls, path) -> "ScoreTable":
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))

    def to_dict(self) -> dict:
        return {"tasks": list(self.tasks), "models": {m: dict(r) for m, r in self.models.items()}}

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n", encoding="utf-8")

    def row(self, model_id: str) -> ScoreRow:
        try:
            return ScoreRow(model_id, self.models[model_id])
        except KeyError:
            raise MissingScoreError(model_id) from None

    def has(self, model_id: str) -> bool:
        return model_id in self.models

    def overall(self, model_id: str, tasks: Sequence[str] | None = None) -> float:
        """Macro-average score over ``tasks`` (default: every task in the table)."""
        tasks = list(self.tasks if tasks is None else tasks)
        if not tasks:
            raise ValueError("overall score needs at least one task")
        row = self.row(model_id)
        return sum(row[t] for t in tasks) / len(tasks)


def gain(merged, constituents: Sequence, task: str) -> float:
    """Merged score minus the mean constituent score on ``task``."""
    merged = _as_row(merged, "merged")
    rows = [_as_row(c, f"constituent[{i}]") for i, c in enumerate(constituents)]
    if not rows:
        raise ValueError("at least one constituent is required")
    return merged[task] - sum(r[task] for r in rows) / len(rows)


def outperform_gap(merged, constituents: Sequence, task: str) -> float:
    """Merged score minus the best constituent score on ``task``."""
    merged = _as_row(merged, "merged")
    rows = [_as_row(c, f"constituent[{i}]") for i, c in enumerate(constituents)]
    if not rows:
        raise ValueError("at least one constituent is required")
    return merged[task] - max(r[task] for r in rows)


@dataclass
class MetricsReport:
    merged_id: str
    constituent_ids: list[str]
    tasks: list[str]
    per_task: dict[str, tuple[float, float]]
    macro_gain: float
    macro_og: float
    oracle_retention: float
    overall_merged: float
    overall_constituents: list[float]

    def gains(self) -> list[float]:
        return [self.per_task[t][0] for t in self.tasks]

    def ogs(self) -> list[float]:
        return [self.per_task[t][1] for t in self.tasks]

    def to_dict(self) -> dict:
        return {
            "merged_id": self.merged_id,
            "constituent_ids": list(self.constituent_ids),
            "tasks": list(self.tasks),
            "per_task": {t: {"gain": g, "og": o} for t, (g, o) in self.per_task.items()},
            "macro_gain": self.macro_gain,
            "macro_og": self.macro_og,
            "oracle_retention": self.oracle_retention,
            "overall_merged": self.overall_merged,
            "overall_constituents": list(self.overall_constituents),
        }


def build_report(
    table: ScoreTable,
    merged_id: str,
    constituent_ids: Sequence[str],
    tasks: Sequence[str] | None = None,
) -> MetricsReport:
    tasks = list(table.tasks if tasks is None else tasks)
    if not tasks:
        raise ValueError("the task list is empty")
    if not constituent_ids:
        raise ValueError("at least one constituent is required")
    merged = table.row(merged_id)
    rows = [table.row(c) for c in constituent_ids]

    per_task = {t: (gain(merged, rows, t), outperform_gap(merged, rows, t)) for t in tasks}
    oracle = sum(max(r[t] for r in rows) for t in tasks)
    if oracle == 0:
        raise ZeroOracleError(
            f"oracle score (sum of best constituent scores) is zero for {merged_id!r}"
        )
    n = len(tasks)
    return MetricsReport(
        merged_id=merged_id,
        constituent_ids=list(constituent_ids),
        tasks=tasks,
        per_task=per_task,
        macro_gain=sum(g for g, _ in per_task.values()) / n,
        macro_og=sum(o for _, o in per_task.values()) / n,
        oracle_retention=sum(merged[t] for t in tasks) / oracle,
        overall_merged=sum(merged[t] for t in tasks) / n,
        overall_constituents=[sum(r[t] for t in tasks) / n for r in rows],
    )


@dataclass
class RunAggregate:
    tasks: list[str]
    mean: dict[str, float]
    variance: dict[str, float]

    @property
    def max_variance(self) -> float:
        return max(self.variance.values(), default=0.0)

    def to_dict(self) -> dict:
        return {"tasks": self.tasks, "mean": self.mean, "variance": self.variance}


def aggregate_runs(rows: Sequence[Mapping[str, float]]) -> RunAggregate:
    """Per-task mean and population variance (divide by the run count) over seeded runs."""
    if not rows:
        raise ValueError("at least one run is required")
    tasks = list(rows[0])
    for i, row in enumerate(rows[1:], start=1):
        if set(row) != set(tasks):
            raise ValueError(
                f"run {i} covers tasks {sorted(row)}, run 0 covers {sorted(tasks)}"
            )
    mean = {t: statistics.fmean(r[t] for r in rows) for t in tasks}
    variance = {t: statistics.pvariance([r[t] for r in rows]) for t in tasks}
    return RunAggregate(tasks, mean, variance)


# --------------------------------------------------------------------------
# Gain / OG matrices


def _fmt(v: float) -> str:
    s = f"{v:.2f}"
    return "0.00" if s == "-0.00" else s


def matrix(reports: Sequence[MetricsReport], which: str) -> tuple[list[str], list[str], list[list[float]]]:
    """``(row ids, tasks, values)`` for ``which`` in {"gain", "og"}."""
    if which not in ("gain", "og"):
        raise ValueError(f"which must be 'gain' or 'og', got {which!r}")
    if not reports:
        raise ValueError("no reports to render")
    tasks = reports[0].tasks
    for r in reports[1:]:
        if r.tasks != tasks:
            raise ValueError(f"report {r.merged_id!r} has task order {r.tasks}, expected {tasks}")
    values = [r.gains() if which == "gain" else r.ogs() for r in reports]
    return [r.merged_id for r in reports], list(tasks), values


def emit_matrix(reports: Sequence[MetricsReport], which: str = "gain", format: str = "csv") -> str:
    """Render models x tasks as CSV or a markdown table, two decimals per cell."""
    rows, tasks, values = matrix(reports, which)
    if format == "csv":
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["model", *tasks])
        for rid, vals in zip(rows, values):
            writer.writerow([rid, *(_fmt(v) for v in vals)])
        return buf.getvalue()
    if format == "markdown":
        def esc(s):
            return s.replace("|", "\\|")
        lines = [
            "| " + " | ".join(["model", *map(esc, tasks)]) + " |",
            "|" + "---|" + "---:|" * len(tasks),
        ]
        for rid, vals in zip(rows, values):
            lines.append("| " + " | ".join([esc(rid), *(_fmt(v) for v in vals)]) + " |")
        return "\n".join(lines) + "\n"
    raise ValueError(f"format must be 'csv' or 'markdown', got {format!r}")


def _split_md_row(line: str) -> list[str]:
    cells, cur, i = [], "", 0
    body = line.strip()[1:-1]
    while i < len(body):
        if body[i] == "\\" and i + 1 < len(body) and body[i + 1] == "|":
            cur += "|"
            i += 2
            continue
        if body[i] == "|":
            cells.append(cur.strip())
            cur = ""
        else:
            cur += body[i]
        i += 1
    cells.append(cur.strip())
    return cells


def parse_matrix(doc: str, format: str = "csv") -> tuple[list[str], dict[str, list[float]]]:
    """Inverse of :func:`emit_matrix`: ``(tasks, {model: values})``."""
    if format == "csv":
        rows = list(csv.reader(io.StringIO(doc)))
    elif format == "markdown":
        lines = [ln for ln in doc.splitlines() if ln.strip()]
        rows = [_split_md_row(lines[0])] + [_split_md_row(ln) for ln in lines[2:]]
    else:
        raise ValueError(f"format must be 'csv' or 'markdown', got {format!r}")
    tasks = rows[0][1:]
    return tasks, {r[0]: [float(v) for v in r[1:]] for r in rows[1:]}
