"""Scripted evaluator for pipeline tests.

    toy_evaluator.py CHECKPOINT OUT MODEL_ID --base B --task NAME=PATH ...

A task's score is 100 / (1 + |theta - ref|^2 / |ref - base|^2): the task's
reference model scores 100, the base scores 50. ``--fail-on ID`` exits 1 for
that model and ``--malformed-on ID`` writes an unusable document.
"""

import argparse
import json
import sys

import numpy as np

from merge_forge import load_checkpoint


def flat(path):
    ckpt = load_checkpoint(path)
    return np.concatenate([ckpt[n].values() for n in ckpt.names()])


def main(argv=None):
    p = argparse.ArgumentParser()
    p.add_argument("checkpoint")
    p.add_argument("out")
    p.add_argument("model_id")
    p.add_argument("--base", required=True)
    p.add_argument("--task", action="append", default=[])
    p.add_argument("--fail-on", default=None)
    p.add_argument("--malformed-on", default=None)
    args = p.parse_args(argv)

    if args.model_id == args.fail_on:
        print("simulated evaluator crash", file=sys.stderr)
        return 1
    if args.model_id == args.malformed_on:
        with open(args.out, "w") as fh:
            fh.write('{"models": {"%s": {"oops": "n/a"}}}' % args.model_id)
        return 0

    theta = flat(args.checkpoint)
    base = flat(args.base)
    scores = {}
    for spec in args.task:
        name, path = spec.split("=", 1)
        ref = flat(path)
        scale = float(np.sum((ref - base) ** 2))
        scores[name] = 100.0 / (1.0 + float(np.sum((theta - ref) ** 2)) / scale)
    with open(args.out, "w") as fh:
        json.dump({"models": {args.model_id: scores}}, fh)
    return 0


if __name__ == "__main__":
    sys.exit(main())
