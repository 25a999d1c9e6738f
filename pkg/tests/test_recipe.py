import json

import numpy as np
import pytest
from conftest import random_checkpoint, sibling

from merge_forge import (
    MergeRecipe,
    compute_task_vector,
    execute_recipe,
    load_checkpoint,
    merge_dare_ties,
    merge_task_arithmetic,
    merge_ties,
    save_checkpoint,
)
from merge_forge.checkpoint import IncompatibleCheckpointsError
from merge_forge.merge import MergeError
from merge_forge.recipe import MergeInput, resolve_threads


@pytest.fixture
def trio(tmp_path, rng):
    base = random_checkpoint(rng, max_tensors=12)
    paths = {"base": tmp_path / "base.safetensors"}
    save_checkpoint(base, paths["base"])
    for m in "AB":
        paths[m] = tmp_path / f"{m}.safetensors"
        save_checkpoint(sibling(rng, base), paths[m])
    return paths


def recipe(paths, method, **kw):
    inputs = [MergeInput(str(paths["A"]), 0.3), MergeInput(str(paths["B"]), 0.7)]
    return MergeRecipe(method, str(paths["base"]), inputs, **kw)


@pytest.mark.parametrize("method,kw", [
    ("ta", {}),
    ("ties", {"density": 0.4}),
    ("dare-ties", {"density": 0.4, "seed": 99}),
])
def test_thread_count_does_not_change_bytes(tmp_path, trio, method, kw):
    r = recipe(trio, method, **kw)
    blobs = set()
    for threads in (1, 2, 4, 7):
        out = tmp_path / f"out-{threads}.safetensors"
        execute_recipe(r, out, threads=threads, model_id="merged")
        blobs.add(out.read_bytes())
    assert len(blobs) == 1


def test_executor_matches_in_memory_api(tmp_path, trio):
    base, a, b = (load_checkpoint(trio[k]) for k in ("base", "A", "B"))
    tvs = [compute_task_vector(base, a), compute_task_vector(base, b)]
    cases = [
        (recipe(trio, "ta", lam=2.0), merge_task_arithmetic(base, tvs, [0.6, 1.4])),
        (recipe(trio, "ties", density=0.3, lam=0.8), merge_ties(base, tvs, 0.3, 0.8)),
        (recipe(trio, "dare-ties", density=0.6, seed=5), merge_dare_ties(base, tvs, 0.6, 1.0, 5)),
    ]
    for i, (r, expected) in enumerate(cases):
        out = tmp_path / f"m{i}.safetensors"
        execute_recipe(r, out, threads=3)
        got = load_checkpoint(out)
        assert got.names() == expected.names()
        for name in got:
            assert got[name] == expected[name]


def test_recipe_is_stored_in_metadata(tmp_path, trio):
    r = recipe(trio, "ties", density=0.5)
    summary = execute_recipe(r, tmp_path / "x.safetensors", threads=1)
    meta = load_checkpoint(tmp_path / "x.safetensors").metadata
    assert meta["model_id"] == "x" == summary["model_id"]
    assert MergeRecipe.from_dict(json.loads(meta["merge_recipe"])) == r


def test_recipe_validation():
    with pytest.raises(MergeError, match="requires a density"):
        MergeRecipe("ties", "b", [MergeInput("a")])
    with pytest.raises(MergeError, match="unknown merge method"):
        MergeRecipe("slerp", "b", [MergeInput("a")])
    with pytest.raises(MergeError, match="at least one"):
        MergeRecipe("ta", "b", [])
    with pytest.raises(MergeError):
        MergeRecipe("dare-ties", "b", [MergeInput("a")], density=1.2)


def test_incompatible_inputs(tmp_path, trio):
    save_checkpoint(random_checkpoint(np.random.default_rng(0), names=["other"]), tmp_path / "odd.st")
    r = MergeRecipe("ta", str(trio["base"]), [MergeInput(str(tmp_path / "odd.st"))])
    with pytest.raises(IncompatibleCheckpointsError):
        execute_recipe(r, tmp_path / "never.st", threads=1)
    assert not (tmp_path / "never.st").exists()


def test_threads_from_environment(monkeypatch):
    monkeypatch.setenv("MERGE_FORGE_THREADS", "3")
    assert resolve_threads() == 3
    assert resolve_threads(2) == 2
    with pytest.raises(ValueError):
        resolve_threads(0)
