import sys
from pathlib import Path

import numpy as np
import pytest

from merge_forge import Checkpoint, Tensor

TESTS_DIR = Path(__file__).parent
sys.path.insert(0, str(TESTS_DIR))


def random_checkpoint(rng, max_tensors=10, max_elems=1000, dtypes=("F32", "F16", "BF16"), names=None, shapes=None):
    """Random checkpoint; pass ``names``/``shapes`` to share a structure between models."""
    if names is None:
        count = int(rng.integers(1, max_tensors + 1))
        names = [f"layers.{i}.w{int(rng.integers(0, 100))}" for i in range(count)]
    if shapes is None:
        shapes = []
        for _ in names:
            ndim = int(rng.integers(0, 3))
            dims = [int(rng.integers(1, 12)) for _ in range(ndim)]
            while np.prod(dims, dtype=int) > max_elems:
                dims[0] = max(1, dims[0] // 2)
            shapes.append(tuple(dims))
    tensors = {}
    for name, shape in zip(names, shapes):
        dtype = str(rng.choice(list(dtypes)))
        tensors[name] = Tensor.from_values(rng.standard_normal(shape), dtype, shape)
    return Checkpoint(tensors)


def sibling(rng, ckpt: Checkpoint, scale=1.0):
    """Independent random values with the same names, shapes and dtypes as ``ckpt``."""
    return Checkpoint({
        name: Tensor.from_values(rng.standard_normal(t.shape) * scale, t.dtype, t.shape)
        for name, t in ckpt.items()
    })


@pytest.fixture
def rng():
    return np.random.default_rng(20240518)


def make_toy_project(root: Path, domains=("f", "m", "j"), method="TA", grid=None, n=1000, seed=7,
                     evaluator_flags="", **extra) -> Path:
    """Base + domain checkpoints, a toy evaluator command and a config file; returns the config path."""
    import json
    import shlex

    from merge_forge import save_checkpoint

    rng = np.random.default_rng(seed)
    names, shapes = ["layers.0.attn", "layers.0.mlp", "norm"], [(n // 2,), (n // 2 - 10,), (10,)]
    base = random_checkpoint(rng, names=names, shapes=shapes, dtypes=("F32",))
    save_checkpoint(base, root / "base.safetensors")
    for i, c in enumerate(domains):
        # each domain moves a different amount, so the domains score differently
        model = Checkpoint({
            name: Tensor.from_values(t.values() + rng.standard_normal(t.values().size) * (0.5 + 0.25 * i), "F32", t.shape)
            for name, t in base.items()
        })
        save_checkpoint(model, root / f"{c}.safetensors")
    tasks = " ".join(f"--task {c}_task={c}.safetensors" for c in domains)
    evaluator = (f"{shlex.quote(sys.executable)} {shlex.quote(str(TESTS_DIR / 'toy_evaluator.py'))} "
                 f"{{checkpoint}} {{out}} {{model_id}} --base base.safetensors {tasks} {evaluator_flags}")
    cfg = {
        "method": method,
        "base": "base.safetensors",
        "domains": {c: f"{c}.safetensors" for c in domains},
        "tasks": [f"{c}_task" for c in domains],
        "evaluator": evaluator.strip(),
        "workdir": "work",
        **extra,
    }
    if grid is not None:
        cfg["grid"] = grid
    path = root / "pipeline.json"
    path.write_text(json.dumps(cfg, indent=2))
    return path
