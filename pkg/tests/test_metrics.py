import json

import numpy as np
import pytest
from oracles import metrics_ref

from merge_forge import ScoreTable, aggregate_runs, build_report, emit_matrix, gain, outperform_gap
from merge_forge.metrics import MissingScoreError, ZeroOracleError, parse_matrix


def close(a, b, rel=1e-12):
    return abs(a - b) <= rel * max(1.0, abs(a), abs(b))


def example_table():
    return ScoreTable(["t1", "t2"], {
        "M": {"t1": 50, "t2": 30},
        "A": {"t1": 40, "t2": 20},
        "B": {"t1": 20, "t2": 40},
    })


def test_gain_and_og_examples():
    assert gain({"t": 50}, [{"t": 40}, {"t": 20}], "t") == 20
    assert outperform_gap({"t": 50}, [{"t": 40}, {"t": 20}], "t") == 10
    assert outperform_gap({"t": 30}, [{"t": 20}, {"t": 40}], "t") == -10
    assert gain({"t": 33.3}, [{"t": 33.3}], "t") == 0
    assert outperform_gap({"t": 40}, [{"t": 40}, {"t": 1}], "t") == 0


def test_single_constituent_gain_equals_og():
    rng = np.random.default_rng(2)
    for _ in range(100):
        m, c = rng.uniform(0, 100, 2)
        assert gain({"t": m}, [{"t": c}], "t") == outperform_gap({"t": m}, [{"t": c}], "t")


def test_missing_cell_names_model_and_task():
    table = ScoreTable(["t1", "t2"], {"M": {"t1": 1.0}, "A": {"t1": 1.0, "t2": 2.0}})
    with pytest.raises(MissingScoreError, match="'M' on task 't2'"):
        build_report(table, "M", ["A"])
    with pytest.raises(MissingScoreError, match="'Z'"):
        build_report(table, "Z", ["A"])


def test_report_worked_example():
    r = build_report(example_table(), "M", ["A", "B"])
    assert r.gains() == [20, 0]
    assert r.ogs() == [10, -10]
    assert r.macro_gain == 10
    assert r.macro_og == 0
    assert r.oracle_retention == 1.0
    assert r.overall_merged == 40
    assert r.overall_constituents == [30, 30]


def test_report_identical_to_sole_constituent():
    t = ScoreTable(["a", "b"], {"M": {"a": 10, "b": 20}, "C": {"a": 10, "b": 20}})
    r = build_report(t, "M", ["C"])
    assert (r.macro_gain, r.macro_og, r.oracle_retention) == (0, 0, 1)


def test_report_strictly_better():
    t = ScoreTable(["a", "b"], {"M": {"a": 50, "b": 60}, "A": {"a": 40, "b": 10}, "B": {"a": 5, "b": 59}})
    r = build_report(t, "M", ["A", "B"])
    assert all(o > 0 for o in r.ogs())
    assert r.oracle_retention > 1


def test_report_errors():
    t = ScoreTable(["a"], {"M": {"a": 1.0}, "Z": {"a": 0.0}})
    with pytest.raises(ZeroOracleError):
        build_report(t, "M", ["Z"])
    with pytest.raises(ValueError, match="empty"):
        build_report(t, "M", ["Z"], tasks=[])
    with pytest.raises(ValueError):
        build_report(t, "M", [])


def random_table(rng):
    n_tasks = int(rng.integers(1, 20))
    k = int(rng.integers(1, 5))
    tasks = [f"task{i}" for i in range(n_tasks)]
    ids = ["merged", *(f"c{j}" for j in range(k))]
    models = {m: {t: float(rng.uniform(0.5, 100)) for t in tasks} for m in ids}
    return ScoreTable(tasks, models), ids[1:]


def test_matches_brute_force_on_random_tables():
    rng = np.random.default_rng(42)
    for _ in range(1000):
        table, cons = random_table(rng)
        r = build_report(table, "merged", cons)
        ref = metrics_ref(
            [table.models["merged"][t] for t in table.tasks],
            [[table.models[c][t] for t in table.tasks] for c in cons],
        )
        assert all(close(a, b) for a, b in zip(r.gains(), ref["gains"]))
        assert all(close(a, b) for a, b in zip(r.ogs(), ref["ogs"]))
        for key in ("macro_gain", "macro_og", "oracle_retention", "overall_merged"):
            assert close(getattr(r, key), ref[key]), key


def test_invariants_on_random_tables():
    rng = np.random.default_rng(7)
    for _ in range(300):
        table, cons = random_table(rng)
        r = build_report(table, "merged", cons)
        for g, o in zip(r.gains(), r.ogs()):
            assert o <= g + 1e-12
        if all(o <= 0 for o in r.ogs()):
            assert r.oracle_retention <= 1 + 1e-12
        shuffled = list(rng.permutation(table.tasks))
        p = build_report(table, "merged", cons, tasks=shuffled)
        assert close(p.macro_gain, r.macro_gain) and close(p.macro_og, r.macro_og)
        assert close(p.oracle_retention, r.oracle_retention)
        assert p.gains() == [r.per_task[t][0] for t in shuffled]
        # a uniformly worse extra constituent cannot raise any OG
        table.models["worse"] = {t: min(table.models[c][t] for c in cons) - 1 for t in table.tasks}
        w = build_report(table, "merged", [*cons, "worse"])
        assert all(a <= b + 1e-12 for a, b in zip(w.ogs(), r.ogs()))
        assert w.oracle_retention == r.oracle_retention


def test_aggregate_runs_examples():
    agg = aggregate_runs([{"t": 10}, {"t": 20}])
    assert agg.mean == {"t": 15} and agg.variance == {"t": 25}
    agg = aggregate_runs([{"t": 10}] * 3)
    assert agg.mean == {"t": 10} and agg.variance == {"t": 0}
    assert aggregate_runs([{"t": 3.5}]).max_variance == 0
    with pytest.raises(ValueError, match="run 1"):
        aggregate_runs([{"t": 1}, {"u": 1}])


def test_csv_example():
    t = ScoreTable(["task"], {"M1": {"task": 50}, "A": {"task": 40}, "B": {"task": 20}})
    doc = emit_matrix([build_report(t, "M1", ["A", "B"])], "gain", "csv")
    assert doc == "model,task\nM1,20.00\n"


def test_negative_zero_renders_as_zero():
    t = ScoreTable(["x"], {"M": {"x": 10.001}, "A": {"x": 10.004}})
    assert emit_matrix([build_report(t, "M", ["A"])], "og").splitlines()[1] == "M,0.00"


def test_csv_quoting():
    t = ScoreTable(["a,b"], {"M,1": {"a,b": 1}, "A": {"a,b": 0.5}})
    doc = emit_matrix([build_report(t, "M,1", ["A"])], "gain")
    assert doc == 'model,"a,b"\n"M,1",0.50\n'
    assert parse_matrix(doc) == (["a,b"], {"M,1": [0.5]})


def test_markdown_round_trip():
    rng = np.random.default_rng(9)
    reports = []
    tasks = ["fin|qa", "ner", "sum"]
    for i in range(4):
        models = {m: {t: float(rng.uniform(0, 100)) for t in tasks} for m in ("M", "A", "B")}
        reports.append(build_report(ScoreTable(tasks, models), "M", ["A", "B"]))
        reports[-1].merged_id = f"m{i}"
    for which in ("gain", "og"):
        doc = emit_matrix(reports, which, "markdown")
        got_tasks, cells = parse_matrix(doc, "markdown")
        assert got_tasks == tasks
        for r in reports:
            expected = r.gains() if which == "gain" else r.ogs()
            assert cells[r.merged_id] == [float(f"{v:.2f}") for v in expected]


def test_emit_errors():
    with pytest.raises(ValueError, match="no reports"):
        emit_matrix([], "gain")
    r1 = build_report(example_table(), "M", ["A", "B"])
    r2 = build_report(example_table(), "M", ["A", "B"], tasks=["t2", "t1"])
    with pytest.raises(ValueError, match="task order"):
        emit_matrix([r1, r2])
    with pytest.raises(ValueError):
        emit_matrix([r1], "gain", "xml")


def test_score_table_file_round_trip(tmp_path):
    t = example_table()
    t.save(tmp_path / "s.json")
    assert ScoreTable.load(tmp_path / "s.json") == t
    assert json.loads((tmp_path / "s.json").read_text())["tasks"] == ["t1", "t2"]


@pytest.mark.parametrize("doc", [
    {"models": {"M": {"t": float("nan")}}},
    {"models": {"M": {"t": "high"}}},
    {"models": []},
    {"scores": {}},
])
def test_score_table_rejects_bad_documents(doc):
    with pytest.raises(ValueError):
        ScoreTable.from_dict(doc)
