import itertools
import math

import numpy as np
import pytest
from conftest import random_checkpoint, sibling
from hypothesis import given, settings
from hypothesis import strategies as st
from oracles import permutation_p_ref, rho_exact
from scipy import stats

from merge_forge import Checkpoint, ParamFilter, distance, spearman
from merge_forge.checkpoint import IncompatibleCheckpointsError, Tensor
from merge_forge.geometry import ConstantInputError, EmptySelectionError, ZeroNormError


def vec(values, name="w"):
    return Checkpoint({name: Tensor.from_values(values, "F32")})


def test_self_distance(rng):
    c = random_checkpoint(rng, dtypes=("F32",))
    r = distance(c, c)
    assert r.l2_normalized == 0.0
    assert abs(r.cosine - 1.0) <= 1e-12


def test_orthogonal_unit_vectors():
    r = distance(vec([1, 0]), vec([0, 1]))
    assert abs(r.l2_normalized - math.sqrt(2) / 2) <= 1e-12
    assert abs(r.cosine) <= 1e-12
    assert r.param_count == 2


def test_parallel_vectors():
    r = distance(vec([1, 2, 3]), vec([2, 4, 6]))
    assert abs(r.l2_normalized - math.sqrt(14) / 3) <= 1e-12
    assert abs(r.cosine - 1.0) <= 1e-12


def test_concatenates_tensors_in_canonical_order():
    a = Checkpoint({"y": Tensor.from_values([0.0]), "x": Tensor.from_values([1.0])})
    b = Checkpoint({"x": Tensor.from_values([0.0]), "y": Tensor.from_values([1.0])})
    r = distance(a, b)
    assert r.tensors == ["x", "y"]
    assert abs(r.l2_normalized - math.sqrt(2) / 2) <= 1e-12


def test_symmetry(rng):
    for _ in range(20):
        a = random_checkpoint(rng)
        b = sibling(rng, a)
        ab, ba = distance(a, b), distance(b, a)
        assert ab.l2_normalized == ba.l2_normalized
        assert ab.cosine == ba.cosine


def test_scale_behaviour(rng):
    a = random_checkpoint(rng, dtypes=("F32",))
    n = a.param_count
    for k in (0.5, 2.0, 4.0):  # powers of two keep the scaled copy exact
        scaled = Checkpoint({name: Tensor.from_values(t.values() * k, "F32", t.shape) for name, t in a.items()})
        assert abs(distance(a, scaled).cosine - 1.0) <= 1e-12
    c = 0.25
    shifted = Checkpoint({name: Tensor.from_values(t.values() + c, "F32", t.shape) for name, t in a.items()})
    # compare against the stored (rounded) shift rather than c itself
    diffs = np.concatenate([shifted[name].values() - a[name].values() for name in a.names()])
    expected = math.sqrt(float(np.sum(diffs**2))) / n
    assert abs(distance(a, shifted).l2_normalized - expected) <= 1e-12 * expected
    assert abs(expected - c * math.sqrt(n) / n) <= 1e-6 * expected


def test_filter_selects_tensors():
    a = Checkpoint.from_arrays({"model.embed_tokens.weight": [5.0], "model.layers.0.w": [1.0, 0.0], "lm_head.weight": [7.0]})
    b = Checkpoint.from_arrays({"model.embed_tokens.weight": [-5.0], "model.layers.0.w": [0.0, 1.0], "lm_head.weight": [1.0]})
    r = distance(a, b, ParamFilter.preset("transformer-layers"))
    assert r.tensors == ["model.layers.0.w"]
    assert abs(r.cosine) <= 1e-12
    only = ParamFilter(include_patterns=("lm_head*",))
    assert distance(a, b, only).param_count == 1


def test_filter_rule():
    f = ParamFilter(include_patterns=("layers.*",), exclude_patterns=("*.bias",))
    assert f.selects("layers.0.weight")
    assert not f.selects("layers.0.bias")
    assert not f.selects("head.weight")
    with pytest.raises(ValueError):
        ParamFilter.preset("nope")


def test_distance_errors():
    with pytest.raises(EmptySelectionError):
        distance(vec([1.0]), vec([1.0]), ParamFilter(include_patterns=("nothing",)))
    with pytest.raises(IncompatibleCheckpointsError):
        distance(vec([1.0, 2.0]), vec([1.0]))
    with pytest.raises(ZeroNormError, match="checkpoint b"):
        distance(vec([1.0]), vec([0.0]))


def test_large_model_precision():
    # tiny differences between large vectors, the regime of fine-tuned LLMs
    rng = np.random.default_rng(3)
    base = rng.standard_normal(200_000).astype(np.float32)
    other = base.copy()
    other[::1000] = np.nextafter(other[::1000], np.float32(np.inf))
    diffs = other.astype(np.float64) - base.astype(np.float64)
    expected = math.sqrt(math.fsum(diffs * diffs)) / base.size
    r = distance(vec(base), vec(other))
    assert abs(r.l2_normalized - expected) <= 1e-12 * expected


# -- Spearman -----------------------------------------------------------------


@pytest.mark.parametrize("xs,ys,rho", [
    ([1, 2, 3], [10, 20, 30], 1.0),
    ([1, 2, 3], [30, 20, 10], -1.0),
    ([1, 2, 3, 4], [2, 1, 4, 3], 0.6),
])
def test_spearman_examples(xs, ys, rho):
    assert abs(spearman(xs, ys).rho - rho) <= 1e-12


def test_spearman_example_p_value():
    r = spearman([1, 2, 3, 4], [2, 1, 4, 3])
    assert r.method == "exact"
    # 5 of the 24 orderings reach rho >= 0.6, so p = 2 * 5/24
    assert r.p_value == permutation_p_ref([1, 2, 3, 4], [2, 1, 4, 3])
    assert abs(r.p_value - 10 / 24) <= 1e-12


def test_exact_p_matches_enumeration_for_small_n():
    rng = np.random.default_rng(11)
    for n in range(3, 6):
        for _ in range(40):
            # small alphabets produce tied ranks
            xs = rng.integers(0, 4, n).tolist()
            ys = rng.integers(0, 4, n).tolist()
            if len(set(xs)) == 1 or len(set(ys)) == 1:
                continue
            r = spearman(xs, ys)
            assert r.p_value == pytest.approx(permutation_p_ref(xs, ys), abs=1e-15)
            assert abs(r.rho - rho_exact(xs, ys)) <= 1e-12


def test_every_permutation_of_four():
    xs = [1, 2, 3, 4]
    for ys in itertools.permutations(xs):
        assert spearman(xs, list(ys)).p_value == pytest.approx(permutation_p_ref(xs, list(ys)))


def test_t_approximation_matches_scipy():
    rng = np.random.default_rng(5)
    for n in (9, 12, 30):
        xs, ys = rng.standard_normal(n), rng.standard_normal(n)
        ours = spearman(xs, ys)
        ref = stats.spearmanr(xs, ys)
        assert ours.method == "t"
        assert abs(ours.rho - ref.statistic) <= 1e-12
        assert abs(ours.p_value - ref.pvalue) <= 1e-10


@settings(max_examples=100, deadline=None)
@given(st.lists(st.tuples(st.integers(-50, 50), st.integers(-50, 50)), min_size=3, max_size=12))
def test_invariant_under_increasing_transform(pairs):
    xs = [p[0] for p in pairs]
    ys = [p[1] for p in pairs]
    if len(set(xs)) == 1 or len(set(ys)) == 1:
        return
    r1 = spearman(xs, ys)
    r2 = spearman([x**3 + 7 for x in xs], [math.exp(y / 10) for y in ys])
    assert r1.rho == pytest.approx(r2.rho, abs=1e-12)
    assert r1.p_value == pytest.approx(r2.p_value, abs=1e-12)


def test_spearman_errors():
    with pytest.raises(ValueError, match="equally long"):
        spearman([1, 2, 3], [1, 2])
    with pytest.raises(ValueError, match="at least 3"):
        spearman([1, 2], [1, 2])
    with pytest.raises(ConstantInputError):
        spearman([1, 1, 1], [1, 2, 3])
