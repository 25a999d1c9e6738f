"""``merge-forge`` command line.

Machine-readable results go to stdout as one JSON document per invocation;
logs go to stderr (only with ``-v``).

Exit codes:
  0  success
  2  usage error: bad flags, invalid recipe or config, missing scores
  3  incompatible or unusable input checkpoints (shape/name mismatch, NaN/Inf)
  4  I/O error or malformed checkpoint file
  5  evaluator failure
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import __version__
from .checkpoint import (
    CheckpointFormatError,
    IncompatibleCheckpointsError,
    NonFiniteValueError,
    inspect,
    load_checkpoint,
)
from .dtypes import UnsupportedDtypeError
from .geometry import ParamFilter, distance
from .merge import MergeError
from .metrics import MissingScoreError, ScoreTable, build_report, emit_matrix
from .pipeline import ConfigError, EvaluatorError, Pipeline, PipelineError, StageConfig
from .recipe import MergeInput, MergeRecipe, execute_recipe

EXIT_OK, EXIT_USAGE, EXIT_INCOMPATIBLE, EXIT_IO, EXIT_EVALUATOR = 0, 2, 3, 4, 5

log = logging.getLogger("merge_forge")


class UsageError(Exception):
    pass


def _emit(obj) -> None:
    sys.stdout.write(json.dumps(obj, sort_keys=False) + "\n")


def _parse_model(spec: str) -> MergeInput:
    path, sep, weight = spec.rpartition(":")
    if sep:
        try:
            return MergeInput(path, float(weight))
        except ValueError:
            pass
    return MergeInput(spec)


# --------------------------------------------------------------------------
# subcommands


def cmd_merge(args) -> int:
    if args.method in ("ties", "dare-ties") and args.density is None:
        raise UsageError(f"--density is required for --method {args.method}")
    recipe = MergeRecipe(
        method=args.method,
        base=args.base,
        inputs=tuple(_parse_model(m) for m in args.model),
        density=args.density,
        lam=args.lam,
        seed=args.seed,
        ties_inner_density=args.ties_inner_density,
        dtype=args.dtype,
    )
    if recipe.method != "TA" and any(i.weight != 1.0 for i in recipe.inputs):
        log.info("per-model weights are ignored by %s", recipe.method)
    summary = execute_recipe(recipe, args.out, threads=args.threads)
    _emit(summary)
    return EXIT_OK


def cmd_pipeline(args) -> int:
    cfg = StageConfig.load(args.config)
    pipe = Pipeline(cfg, state_path=args.state, threads=args.threads)
    mode = {"plan": "plan", "run": "execute", "resume": "resume", "materialize": "materialize"}[args.action]
    scores = None
    if args.action == "resume":
        if not args.scores:
            raise UsageError("pipeline resume requires --scores")
        scores = ScoreTable.load(args.scores)
    elif args.scores:
        raise UsageError(f"--scores is only valid with resume, not {args.action}")
    state = pipe.run(mode, scores)
    manifests = [str(pipe.manifest_path(s)) for s in (1, 2, 3) if pipe.manifest_path(s).exists()]
    _emit({
        "status": state.status,
        "state": str(pipe.state_path),
        "manifests": manifests,
        "top2": state.top2,
        "stage1_best": {c: r["gamma"] for c, r in state.stage1_best.items()},
        "stage2_best": state.stage2_best and state.stage2_best["model_id"],
        "stage3_best": state.stage3_best and state.stage3_best["model_id"],
    })
    return EXIT_OK


def cmd_metrics(args) -> int:
    table = ScoreTable.load(args.scores)
    constituents = [c for c in args.constituents.split(",") if c]
    if not constituents:
        raise UsageError("--constituents needs at least one model id")
    report = build_report(table, args.merged, constituents)
    if args.report:
        out = Path(args.report)
        if out.suffix == ".csv":
            out.write_text(emit_matrix([report], args.which, "csv"), encoding="utf-8")
        elif out.suffix == ".md":
            out.write_text(emit_matrix([report], args.which, "markdown"), encoding="utf-8")
        elif out.suffix == ".json":
            out.write_text(json.dumps(report.to_dict(), indent=2) + "\n", encoding="utf-8")
        else:
            raise UsageError(f"--report must end in .csv, .md or .json, got {out.name!r}")
    if args.figure:
        from .report import gain_og_heatmaps

        gain_og_heatmaps([report], args.figure)
    _emit(report.to_dict())
    return EXIT_OK


def cmd_distance(args) -> int:
    flt = ParamFilter.preset(args.preset)
    if args.include:
        flt = ParamFilter(tuple(args.include), flt.exclude_patterns)
    if args.exclude:
        flt = ParamFilter(flt.include_patterns, flt.exclude_patterns + tuple(args.exclude))
    report = distance(load_checkpoint(args.a), load_checkpoint(args.b), flt)
    _emit(report.to_dict())
    return EXIT_OK


def cmd_inspect(args) -> int:
    _emit(inspect(args.path))
    return EXIT_OK


# --------------------------------------------------------------------------
# parser


def _threads(value: str) -> int:
    n = int(value)
    if n < 1:
        raise argparse.ArgumentTypeError("must be >= 1")
    return n


def _unit_interval(value: str) -> float:
    d = float(value)
    if not 0 < d <= 1:
        raise argparse.ArgumentTypeError(f"must lie in (0, 1], got {value}")
    return d


def _u64(value: str) -> int:
    n = int(value, 0)
    if not 0 <= n < 2**64:
        raise argparse.ArgumentTypeError("must be an unsigned 64-bit integer")
    return n


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="merge-forge",
        description="Merge checkpoints in weight space and analyse the results.",
        allow_abbrev=False,
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="count", default=0, help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    p = sub.add_parser("merge", help="merge checkpoints into a new one", allow_abbrev=False)
    p.add_argument("--method", required=True, choices=["ta", "ties", "dare-ties"])
    p.add_argument("--base", required=True, metavar="P", help="base checkpoint")
    p.add_argument("--model", required=True, action="append", metavar="P[:WEIGHT]",
                   help="model checkpoint, optionally with a task-arithmetic weight (default 1.0); repeatable")
    p.add_argument("--density", type=_unit_interval, metavar="D",
                   help="retention rate in (0, 1]; required for ties and dare-ties")
    p.add_argument("--lambda", dest="lam", type=float, default=1.0, metavar="L",
                   help="global scale on the merged delta (default 1.0)")
    p.add_argument("--seed", type=_u64, default=0, metavar="N", help="drop-and-rescale seed (default 0)")
    p.add_argument("--ties-inner-density", type=_unit_interval, default=1.0, metavar="D2",
                   help="magnitude pruning density applied after drop-and-rescale (default 1.0)")
    p.add_argument("--out", required=True, metavar="P", help="output checkpoint")
    p.add_argument("--dtype", choices=["preserve", "f32", "f16", "bf16"], default="preserve")
    p.add_argument("--threads", type=_threads, metavar="N",
                   help="worker threads (default: MERGE_FORGE_THREADS or all cores)")
    p.set_defaults(func=cmd_merge)

    p = sub.add_parser("pipeline", help="three-stage merge/select pipeline", allow_abbrev=False)
    p.add_argument("action", choices=["plan", "run", "resume", "materialize"])
    p.add_argument("--config", required=True, metavar="F", help="pipeline config JSON")
    p.add_argument("--state", metavar="F", help="state file (default: <workdir>/state.json)")
    p.add_argument("--scores", metavar="F", help="score table JSON (resume only)")
    p.add_argument("--threads", type=_threads, metavar="N")
    p.set_defaults(func=cmd_pipeline)

    p = sub.add_parser("metrics", help="Gain / OG / oracle retention for a merged model", allow_abbrev=False)
    p.add_argument("--scores", required=True, metavar="F", help="score table JSON")
    p.add_argument("--merged", required=True, metavar="ID")
    p.add_argument("--constituents", required=True, metavar="ID,ID")
    p.add_argument("--report", metavar="out.csv|out.md|out.json")
    p.add_argument("--which", choices=["gain", "og"], default="gain", help="matrix written by --report")
    p.add_argument("--figure", metavar="out.png", help="render Gain/OG heatmaps")
    p.set_defaults(func=cmd_metrics)

    p = sub.add_parser("distance", help="normalized L2 distance and cosine similarity", allow_abbrev=False)
    p.add_argument("--a", required=True, metavar="P")
    p.add_argument("--b", required=True, metavar="P")
    p.add_argument("--include", action="append", metavar="G", help="glob of tensor names to include")
    p.add_argument("--exclude", action="append", metavar="G", help="glob of tensor names to exclude")
    p.add_argument("--preset", choices=["all", "transformer-layers"], default="all")
    p.set_defaults(func=cmd_distance)

    p = sub.add_parser("inspect", help="summarize a checkpoint file", allow_abbrev=False)
    p.add_argument("path", metavar="P")
    p.set_defaults(func=cmd_inspect)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )

    def fail(code, exc):
        sys.stderr.write(f"merge-forge {args.command}: error: {exc}\n")
        return code

    try:
        return args.func(args)
    except (UsageError, MergeError, ConfigError, MissingScoreError, UnsupportedDtypeError) as exc:
        return fail(EXIT_USAGE, exc)
    except (IncompatibleCheckpointsError, NonFiniteValueError) as exc:
        return fail(EXIT_INCOMPATIBLE, exc)
    except EvaluatorError as exc:
        return fail(EXIT_EVALUATOR, exc)
    except (CheckpointFormatError, OSError) as exc:
        return fail(EXIT_IO, exc)
    except (PipelineError, ValueError) as exc:
        return fail(EXIT_USAGE, exc)


if __name__ == "__main__":
    sys.exit(main())
