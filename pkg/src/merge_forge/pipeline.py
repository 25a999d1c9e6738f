"""Three-stage merge/select pipeline.

Stage 1 merges the base with each domain model over a hyperparameter grid and
keeps the best setting per domain. Stage 2 merges the two best domains' stage-1
winners, and stage 3 merges the stage-2 winner with the best remaining domain's
stage-1 winner. Every two-model merge takes task vectors against the original
base.

Scores come from an external evaluator command (``run``) or from a score file
(``resume``). Manifests, ingested scores and decisions are persisted after
every step, so an interrupted run picks up where it stopped.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
import os
import re
import shlex
import statistics
import subprocess
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

from .metrics import MissingScoreError, ScoreTable, build_report, emit_matrix
from .recipe import MergeRecipe, canonical_method, canonical_policy, execute_recipe

log = logging.getLogger(__name__)

STATE_SCHEMA = "merge-forge/pipeline-state@1"
MANIFEST_SCHEMA = "merge-forge/manifest@1"
BASE_REFERENCE_ID = "base"
STATUSES = ("planned", "merged", "scored")

_DOMAIN_RE = re.compile(r"^[A-Za-z0-9_]+$")


class PipelineError(Exception):
    pass


class ConfigError(PipelineError):
    pass


class EvaluatorError(PipelineError):
    def __init__(self, model_id: str, message: str):
        self.model_id = model_id
        super().__init__(f"evaluator failed for {model_id!r}: {message}")


def default_grid() -> list[float]:
    return [round(0.1 * i, 10) for i in range(1, 10)]


def fmt_gamma(g: float) -> str:
    return f"{g:g}"


def _write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(f".{path.name}.tmp")
    tmp.write_text(json.dumps(obj, indent=2) + "\n", encoding="utf-8")
    os.replace(tmp, path)


def _no_duplicate_keys(pairs):
    out = {}
    for k, v in pairs:
        if k in out:
            raise ConfigError(f"duplicate key {k!r} in config")
        out[k] = v
    return out


# --------------------------------------------------------------------------
# configuration


@dataclass
class StageConfig:
    method: str
    base: str
    domains: dict[str, str]
    tasks: list[str]
    grid: list[float] = field(default_factory=default_grid)
    selection_tasks: list[str] | None = None
    seeds: list[int] = field(default_factory=lambda: [0])
    tie_break_order: list[str] | None = None
    evaluator: str | None = None
    workdir: str = "work"
    lam: float = 1.0
    ties_inner_density: float = 1.0
    dtype: str = "preserve"
    evaluate_references: bool = True
    root: Path = field(default_factory=Path.cwd, compare=False)

    def __post_init__(self):
        try:
            self.method = canonical_method(self.method)
            self.dtype = canonical_policy(self.dtype)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        if not self.domains:
            raise ConfigError("at least one domain model is required")
        for c in self.domains:
            if not _DOMAIN_RE.match(c) or c == BASE_REFERENCE_ID:
                raise ConfigError(f"invalid domain id {c!r} (letters, digits, underscore; not 'base')")
        if not self.grid:
            raise ConfigError("hyperparameter grid is empty")
        for g in self.grid:
            if isinstance(g, bool) or not isinstance(g, (int, float)) or not (0 < g <= 1):
                raise ConfigError(f"grid values must lie in (0, 1], got {g!r}")
        if len(set(self.grid)) != len(self.grid):
            raise ConfigError(f"duplicate values in grid {self.grid}")
        self.grid = [float(g) for g in self.grid]
        if not self.tasks or len(set(self.tasks)) != len(self.tasks):
            raise ConfigError("tasks must be a non-empty list of unique ids")
        if self.selection_tasks is not None:
            unknown = set(self.selection_tasks) - set(self.tasks)
            if not self.selection_tasks or unknown:
                raise ConfigError(f"selection_tasks must be a non-empty subset of tasks; unknown: {sorted(unknown)}")
        if not self.seeds or len(set(self.seeds)) != len(self.seeds):
            raise ConfigError("seeds must be a non-empty list of unique integers")
        if any(not isinstance(s, int) or not 0 <= s < 2**64 for s in self.seeds):
            raise ConfigError("seeds must be unsigned 64-bit integers")
        if self.tie_break_order is None:
            self.tie_break_order = list(self.domains)
        if sorted(self.tie_break_order) != sorted(self.domains):
            raise ConfigError("tie_break_order must list every domain exactly once")
        if self.method != "TA":
            if not (0 < self.ties_inner_density <= 1):
                raise ConfigError("ties_inner_density must lie in (0, 1]")

    @classmethod
    def from_dict(cls, d: Mapping, root=None) -> "StageConfig":
        known = {
            "method", "base", "domains", "tasks", "grid", "selection_tasks", "seeds",
            "tie_break_order", "evaluator", "workdir", "lambda", "ties_inner_density",
            "dtype", "evaluate_references",
        }
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config fields: {sorted(unknown)}")
        missing = {"method", "base", "domains", "tasks"} - set(d)
        if missing:
            raise ConfigError(f"missing config fields: {sorted(missing)}")
        kwargs = {k: v for k, v in d.items() if k != "lambda"}
        if "lambda" in d:
            kwargs["lam"] = float(d["lambda"])
        if not isinstance(kwargs["domains"], Mapping):
            raise ConfigError("domains must map domain ids to checkpoint paths")
        kwargs["domains"] = dict(kwargs["domains"])
        try:
            return cls(**kwargs, root=Path(root) if root is not None else Path.cwd())
        except TypeError as exc:
            raise ConfigError(str(exc)) from None

    @classmethod
    def load(cls, path) -> "StageConfig":
        path = Path(path)
        try:
            data = json.loads(path.read_text(encoding="utf-8"), object_pairs_hook=_no_duplicate_keys)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {path} is not valid JSON: {exc}") from None
        return cls.from_dict(data, root=path.resolve().parent)

    def to_dict(self) -> dict:
        return {
            "method": self.method,
            "base": self.base,
            "domains": dict(self.domains),
            "tasks": list(self.tasks),
            "grid": list(self.grid),
            "selection_tasks": self.selection_tasks,
            "seeds": list(self.seeds),
            "tie_break_order": list(self.tie_break_order),
            "evaluator": self.evaluator,
            "workdir": self.workdir,
            "lambda": self.lam,
            "ties_inner_density": self.ties_inner_density,
            "dtype": self.dtype,
            "evaluate_references": self.evaluate_references,
        }

    def digest(self) -> str:
        # the evaluator command does not influence decisions
        d = self.to_dict()
        d.pop("evaluator")
        raw = json.dumps(d, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(raw.encode()).hexdigest()

    def resolve(self, path: str) -> Path:
        return (self.root / path).resolve()

    @property
    def slug(self) -> str:
        return self.method.lower()

    @property
    def score_tasks(self) -> list[str]:
        return list(self.selection_tasks or self.tasks)

    def run_seeds(self) -> list[int | None]:
        return list(self.seeds) if self.method == "DARE-TIES" else [None]


# --------------------------------------------------------------------------
# manifests


@dataclass
class ManifestEntry:
    model_id: str
    domains: list[str]
    gamma: float
    seed: int | None
    recipe: dict
    output: str
    status: str = "planned"

    def to_dict(self) -> dict:
        return {
            "model_id": self.model_id,
            "domains": self.domains,
            "gamma": self.gamma,
            "seed": self.seed,
            "recipe": self.recipe,
            "output": self.output,
            "status": self.status,
        }


@dataclass
class SweepManifest:
    stage: int
    method: str
    parents: dict
    entries: list[ManifestEntry]

    def to_dict(self) -> dict:
        return {
            "schema": MANIFEST_SCHEMA,
            "stage": self.stage,
            "method": self.method,
            "parents": self.parents,
            "entries": [e.to_dict() for e in self.entries],
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "SweepManifest":
        if d.get("schema") != MANIFEST_SCHEMA:
            raise PipelineError(f"unsupported manifest schema {d.get('schema')!r}")
        return cls(d["stage"], d["method"], d["parents"], [ManifestEntry(**e) for e in d["entries"]])

    def save(self, path) -> None:
        _write_json(Path(path), self.to_dict())

    @classmethod
    def load(cls, path) -> "SweepManifest":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))

    def model_ids(self) -> list[str]:
        return [e.model_id for e in self.entries]


def _model_id(stage: int, cfg: StageConfig, domains: Sequence[str], gamma: float, seed) -> str:
    mid = f"s{stage}-{cfg.slug}-{'+'.join(domains)}-g{fmt_gamma(gamma)}"
    return mid if seed is None else f"{mid}-s{seed}"


def _recipe(cfg: StageConfig, inputs: list[dict], gamma: float, seed) -> dict:
    if cfg.method == "TA":
        recipe = MergeRecipe("TA", cfg.base, tuple(inputs), lam=1.0, dtype=cfg.dtype)
    else:
        recipe = MergeRecipe(
            cfg.method, cfg.base, tuple(dict(i, weight=1.0) for i in inputs),
            density=gamma, lam=cfg.lam, seed=seed or 0,
            ties_inner_density=cfg.ties_inner_density, dtype=cfg.dtype,
        )
    return recipe.to_dict()


def _pair_inputs(cfg, first: tuple[str, str], second: tuple[str, str], gamma: float) -> list[dict]:
    # TA weights the pair (gamma, 1 - gamma); TIES/DARE-TIES ignore weights
    return [
        {"path": first[1], "weight": gamma, "model_id": first[0]},
        {"path": second[1], "weight": 1.0 - gamma, "model_id": second[0]},
    ]


def _stage_output(cfg: StageConfig, stage: int, model_id: str) -> str:
    return str(Path(cfg.workdir) / f"stage{stage}" / f"{model_id}.safetensors")


def plan_stage1(cfg: StageConfig) -> SweepManifest:
    entries = []
    for c, path in cfg.domains.items():
        for g in cfg.grid:
            for seed in cfg.run_seeds():
                mid = _model_id(1, cfg, [c], g, seed)
                inputs = [{"path": path, "weight": g, "model_id": c}]
                entries.append(ManifestEntry(
                    mid, [c], g, seed, _recipe(cfg, inputs, g, seed), _stage_output(cfg, 1, mid)
                ))
    return SweepManifest(1, cfg.method, {}, entries)


def _pair_manifest(stage, cfg, domains, first, second, parents) -> SweepManifest:
    entries = []
    for g in cfg.grid:
        for seed in cfg.run_seeds():
            mid = _model_id(stage, cfg, domains, g, seed)
            inputs = _pair_inputs(cfg, first, second, g)
            entries.append(ManifestEntry(
                mid, list(domains), g, seed, _recipe(cfg, inputs, g, seed), _stage_output(cfg, stage, mid)
            ))
    return SweepManifest(stage, cfg.method, parents, entries)


def plan_stage2(state: "PipelineState", cfg: StageConfig) -> SweepManifest:
    if state.top2 is None:
        raise PipelineError("stage 1 decisions are not recorded yet")
    c1, c2 = state.top2["selected"]
    w1, w2 = state.stage1_best[c1], state.stage1_best[c2]
    return _pair_manifest(
        2, cfg, [c1, c2],
        (w1["model_id"], w1["output"]), (w2["model_id"], w2["output"]),
        {"selected": [c1, c2], "winners": [w1["model_id"], w2["model_id"]]},
    )


def plan_stage3(state: "PipelineState", cfg: StageConfig) -> SweepManifest:
    """Empty manifest when no domain is left over after stage 2."""
    if state.stage2_best is None:
        raise PipelineError("stage 2 decisions are not recorded yet")
    c3 = state.top2["remaining"]
    if c3 is None:
        return SweepManifest(3, cfg.method, {}, [])
    s2, w3 = state.stage2_best, state.stage1_best[c3]
    return _pair_manifest(
        3, cfg, [*state.top2["selected"], c3],
        (s2["model_id"], s2["output"]), (w3["model_id"], w3["output"]),
        {"stage2": s2["model_id"], "remaining": c3, "partner": w3["model_id"]},
    )


# --------------------------------------------------------------------------
# selection rules


def select_best(sweep_scores: Mapping[float, float]) -> float:
    """Hyperparameter with the highest score; ties go to the smallest value."""
    if not sweep_scores:
        raise ValueError("no sweep scores to select from")
    for g, s in sweep_scores.items():
        if not math.isfinite(s):
            raise ValueError(f"non-finite score {s!r} at hyperparameter {g!r}")
    return min(sweep_scores, key=lambda g: (-sweep_scores[g], g))


def select_top2(best_scores: Mapping[str, float], tie_break_order: Sequence[str] | None = None) -> tuple[str, str]:
    """Two highest-scoring domains, best first; ties follow ``tie_break_order``."""
    if len(best_scores) < 2:
        raise ValueError(f"need at least 2 domains, got {len(best_scores)}")
    order = list(tie_break_order or best_scores)
    missing = set(best_scores) - set(order)
    if missing:
        raise ValueError(f"tie_break_order lacks {sorted(missing)}")
    ranked = sorted(best_scores, key=lambda c: (-best_scores[c], order.index(c)))
    return ranked[0], ranked[1]


def remaining_domain(best_scores: Mapping[str, float], selected, order) -> str | None:
    rest = [c for c in order if c not in selected]
    if not rest:
        return None
    return min(rest, key=lambda c: (-best_scores[c], order.index(c)))


# --------------------------------------------------------------------------
# state


@dataclass
class PipelineState:
    config_digest: str
    method: str
    status: str = "new"
    stage1_best: dict[str, dict] = field(default_factory=dict)
    top2: dict | None = None
    stage2_best: dict | None = None
    stage3_best: dict | None = None
    decisions: list[dict] = field(default_factory=list)
    failure: dict | None = None

    def to_dict(self) -> dict:
        return {
            "schema": STATE_SCHEMA,
            "config_digest": self.config_digest,
            "method": self.method,
            "status": self.status,
            "stage1_best": self.stage1_best,
            "top2": self.top2,
            "stage2_best": self.stage2_best,
            "stage3_best": self.stage3_best,
            "decisions": self.decisions,
            "failure": self.failure,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "PipelineState":
        if d.get("schema") != STATE_SCHEMA:
            raise PipelineError(f"unsupported state schema {d.get('schema')!r}")
        d = {k: v for k, v in d.items() if k != "schema"}
        return cls(**d)

    def stage_decided(self, stage: int) -> bool:
        if stage == 1:
            return bool(self.stage1_best)
        if stage == 2:
            return self.stage2_best is not None
        return self.stage3_best is not None


def _sweep(entries: Sequence[ManifestEntry], store: ScoreTable, tasks) -> tuple[dict, list]:
    """Per-gamma mean selection score over seeds, plus the decision snapshot."""
    by_gamma: dict[float, list[ManifestEntry]] = {}
    for e in entries:
        by_gamma.setdefault(e.gamma, []).append(e)
    sweep, snapshot = {}, []
    for g, runs in by_gamma.items():
        scores = [store.overall(e.model_id, tasks) for e in runs]
        sweep[g] = statistics.fmean(scores)
        snapshot.append({
            "gamma": g,
            "score": sweep[g],
            "runs": {e.model_id: s for e, s in zip(runs, scores)},
            "variance": statistics.pvariance(scores),
        })
    return sweep, snapshot


def _best_record(entries, sweep, snapshot, stage, label, decisions) -> dict:
    g = select_best(sweep)
    winner = next(e for e in entries if e.gamma == g)
    decisions.append({
        "stage": stage, "kind": "select_best", "subject": label,
        "snapshot": snapshot, "gamma": g, "model_id": winner.model_id,
    })
    return {"gamma": g, "model_id": winner.model_id, "score": sweep[g],
            "output": winner.output, "sweep": [[x, sweep[x]] for x in sweep]}


def decide_stage1(cfg: StageConfig, state: PipelineState, manifest: SweepManifest, store: ScoreTable) -> None:
    tasks = cfg.score_tasks
    best = {}
    for c in cfg.domains:
        entries = [e for e in manifest.entries if e.domains == [c]]
        sweep, snapshot = _sweep(entries, store, tasks)
        best[c] = _best_record(entries, sweep, snapshot, 1, c, state.decisions)
    state.stage1_best = best
    if len(cfg.domains) >= 2:
        scores = {c: best[c]["score"] for c in cfg.domains}
        selected = list(select_top2(scores, cfg.tie_break_order))
        rest = remaining_domain(scores, selected, cfg.tie_break_order)
        state.top2 = {"selected": selected, "remaining": rest, "scores": scores}
        state.decisions.append({
            "stage": 1, "kind": "select_top2", "snapshot": scores,
            "selected": selected, "remaining": rest,
        })


def decide_pair_stage(stage, cfg, state, manifest, store) -> None:
    sweep, snapshot = _sweep(manifest.entries, store, cfg.score_tasks)
    record = _best_record(manifest.entries, sweep, snapshot, stage, f"stage{stage}", state.decisions)
    if stage == 2:
        state.stage2_best = record
    else:
        state.stage3_best = record


# --------------------------------------------------------------------------
# evaluator contract


def run_evaluator(cfg: StageConfig, checkpoint: Path, model_id: str, out: Path) -> dict[str, float]:
    """Run the evaluator command for one checkpoint and return its task scores.

    Placeholders in the command template: ``{checkpoint}``, ``{out}``,
    ``{model_id}``, ``{tasks}`` (comma-separated). The command must exit 0
    and write ``{"models": {model_id: {task: score}}}`` to ``{out}``.
    """
    if not cfg.evaluator:
        raise ConfigError("no evaluator command configured")
    out.parent.mkdir(parents=True, exist_ok=True)
    if out.exists():
        out.unlink()
    subst = {
        "{checkpoint}": str(checkpoint), "{out}": str(out),
        "{model_id}": model_id, "{tasks}": ",".join(cfg.tasks),
    }
    argv = []
    for token in shlex.split(cfg.evaluator):
        for key, value in subst.items():
            token = token.replace(key, value)
        argv.append(token)
    try:
        proc = subprocess.run(argv, cwd=cfg.root, capture_output=True, text=True)
    except OSError as exc:
        raise EvaluatorError(model_id, f"cannot start {argv[0]!r}: {exc}") from None
    if proc.returncode != 0:
        tail = proc.stderr.strip().splitlines()[-1:] or [""]
        raise EvaluatorError(model_id, f"exit status {proc.returncode}: {tail[0]}")
    try:
        table = ScoreTable.from_dict(json.loads(out.read_text(encoding="utf-8")))
        row = table.models[model_id]
        scores = {t: float(row[t]) for t in cfg.tasks}
    except FileNotFoundError:
        raise EvaluatorError(model_id, f"no output written to {out}") from None
    except (ValueError, KeyError, TypeError) as exc:
        raise EvaluatorError(model_id, f"malformed score output: {exc}") from None
    return scores


# --------------------------------------------------------------------------
# driver


class Pipeline:
    """Drives the stages for one config. ``mode`` is plan, execute, resume or materialize.

    With ``reports=False`` a completed run skips writing the report files.
    """

    def __init__(self, cfg: StageConfig, state_path=None, threads: int | None = None, reports: bool = True):
        self.cfg = cfg
        self.reports = reports
        self.workdir = cfg.resolve(cfg.workdir)
        self.state_path = Path(state_path) if state_path else self.workdir / "state.json"
        self.store_path = self.workdir / "scores.json"
        self.threads = threads

    # persistence -------------------------------------------------------

    def manifest_path(self, stage: int) -> Path:
        return self.workdir / f"manifest-stage{stage}.json"

    def load_state(self) -> PipelineState:
        if self.state_path.exists():
            state = PipelineState.from_dict(json.loads(self.state_path.read_text(encoding="utf-8")))
            if state.config_digest != self.cfg.digest():
                raise ConfigError(
                    f"config changed since {self.state_path} was created; use a fresh workdir or state file"
                )
            return state
        return PipelineState(self.cfg.digest(), self.cfg.method)

    def save_state(self, state: PipelineState) -> None:
        _write_json(self.state_path, state.to_dict())

    def load_store(self) -> ScoreTable:
        if self.store_path.exists():
            return ScoreTable.load(self.store_path)
        return ScoreTable(list(self.cfg.tasks))

    def save_store(self, store: ScoreTable) -> None:
        _write_json(self.store_path, store.to_dict())

    def _manifest(self, stage: int, state: PipelineState) -> SweepManifest | None:
        path = self.manifest_path(stage)
        if path.exists():
            return SweepManifest.load(path)
        if stage == 1:
            manifest = plan_stage1(self.cfg)
        elif stage == 2:
            if state.top2 is None:
                return None
            manifest = plan_stage2(state, self.cfg)
        else:
            manifest = plan_stage3(state, self.cfg)
            if not manifest.entries:
                return None
        manifest.save(path)
        return manifest

    # actions -----------------------------------------------------------

    def _materialize(self, entry: ManifestEntry) -> Path:
        out = self.cfg.resolve(entry.output)
        recipe = MergeRecipe.from_dict(entry.recipe)
        execute_recipe(recipe, out, threads=self.threads, model_id=entry.model_id,
                       resolve=self.cfg.resolve)
        return out

    def _evaluate(self, path: Path, model_id: str, store: ScoreTable, state: PipelineState):
        try:
            scores = run_evaluator(self.cfg, path, model_id, self.workdir / "evals" / f"{model_id}.json")
        except EvaluatorError as exc:
            state.failure = {"model_id": model_id, "error": str(exc)}
            self.save_state(state)
            raise
        store.models[model_id] = scores
        self.save_store(store)

    def _evaluate_references(self, store, state) -> None:
        refs = {BASE_REFERENCE_ID: self.cfg.base, **self.cfg.domains}
        for mid, path in refs.items():
            if not store.has(mid):
                log.info("evaluating reference %s", mid)
                self._evaluate(self.cfg.resolve(path), mid, store, state)

    def _execute(self, manifest: SweepManifest, store, state, evaluate: bool) -> None:
        path = self.manifest_path(manifest.stage)
        for entry in manifest.entries:
            if store.has(entry.model_id):
                if entry.status != "scored":
                    entry.status = "scored"
                    manifest.save(path)
                continue
            out = self.cfg.resolve(entry.output)
            if entry.status == "planned" or not out.exists():
                log.info("merging %s", entry.model_id)
                self._materialize(entry)
                entry.status = "merged"
                manifest.save(path)
            if evaluate:
                log.info("evaluating %s", entry.model_id)
                self._evaluate(out, entry.model_id, store, state)
                entry.status = "scored"
                manifest.save(path)

    def run(self, mode: str = "execute", scores: ScoreTable | None = None) -> PipelineState:
        if mode not in ("plan", "execute", "resume", "materialize"):
            raise ValueError(f"unknown mode {mode!r}")
        state = self.load_state()
        store = self.load_store()
        if mode == "resume":
            if scores is None:
                raise ConfigError("resume needs a score table")
            for mid, row in scores.models.items():
                store.models[mid] = dict(row)
            self.save_store(store)
        if mode == "execute":
            if not self.cfg.evaluator:
                raise ConfigError("execute mode needs an evaluator command in the config")
            state.failure = None
            if self.cfg.evaluate_references:
                self._evaluate_references(store, state)

        for stage in (1, 2, 3):
            if state.stage_decided(stage):
                continue
            manifest = self._manifest(stage, state)
            if manifest is None:
                break
            if mode == "plan":
                return self._pause(state, stage)
            if mode in ("execute", "materialize"):
                self._execute(manifest, store, state, evaluate=(mode == "execute"))
                if mode == "materialize":
                    return self._pause(state, stage)

            have = [e for e in manifest.entries if store.has(e.model_id)]
            if not have:
                return self._pause(state, stage)
            missing = [e.model_id for e in manifest.entries if not store.has(e.model_id)]
            if missing:
                self.save_state(state)
                raise MissingScoreError(missing[0])
            changed = False
            for e in manifest.entries:
                if e.status != "scored":
                    e.status, changed = "scored", True
            if changed:
                manifest.save(self.manifest_path(stage))

            if stage == 1:
                decide_stage1(self.cfg, state, manifest, store)
            else:
                decide_pair_stage(stage, self.cfg, state, manifest, store)
            self.save_state(state)

        state.status = "complete"
        state.failure = None
        self.save_state(state)
        if self.reports:
            write_reports(self.cfg, state, store, self.workdir / "reports")
        return state

    def _pause(self, state: PipelineState, stage: int) -> PipelineState:
        state.status = f"awaiting-scores-stage{stage}"
        self.save_state(state)
        return state


def report_pairs(cfg: StageConfig, state: PipelineState) -> list[tuple[str, list[str]]]:
    """(merged id, constituent ids) for every recorded stage winner."""
    pairs = []
    for c, rec in state.stage1_best.items():
        pairs.append((rec["model_id"], [BASE_REFERENCE_ID, c]))
    if state.stage2_best is not None:
        c1, c2 = state.top2["selected"]
        pairs.append((state.stage2_best["model_id"],
                      [state.stage1_best[c1]["model_id"], state.stage1_best[c2]["model_id"]]))
    if state.stage3_best is not None:
        c3 = state.top2["remaining"]
        pairs.append((state.stage3_best["model_id"],
                      [state.stage2_best["model_id"], state.stage1_best[c3]["model_id"]]))
    return pairs


def write_reports(cfg: StageConfig, state: PipelineState, store: ScoreTable, outdir: Path) -> list[Path]:
    """Metrics JSON, Gain/OG matrices (CSV, markdown) and figures for the stage winners.

    Winners whose constituents were never scored are left out of the metrics.
    """
    from . import report as figures

    outdir.mkdir(parents=True, exist_ok=True)
    written = []
    curves = {f"stage 1: {c}": [tuple(p) for p in rec["sweep"]] for c, rec in state.stage1_best.items()}
    for stage, rec in ((2, state.stage2_best), (3, state.stage3_best)):
        if rec is not None:
            curves[f"stage {stage}"] = [tuple(p) for p in rec["sweep"]]
    xlabel = "gamma (TA coefficient)" if cfg.method == "TA" else "gamma (density d)"
    written.append(figures.sweep_curves(curves, outdir / "sweep.png", xlabel=xlabel))

    reports = []
    for merged, constituents in report_pairs(cfg, state):
        if all(store.has(m) for m in (merged, *constituents)):
            reports.append(build_report(store, merged, constituents, cfg.tasks))
    if reports:
        _write_json(outdir / "metrics.json", [r.to_dict() for r in reports])
        written.append(outdir / "metrics.json")
        for which in ("gain", "og"):
            for fmt, ext in (("csv", "csv"), ("markdown", "md")):
                p = outdir / f"{which}.{ext}"
                p.write_text(emit_matrix(reports, which, fmt), encoding="utf-8")
                written.append(p)
        written.append(figures.gain_og_heatmaps(reports, outdir / "gain_og.png"))
    return written
