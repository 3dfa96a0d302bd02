import ast

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dlis import build_network
from dlis.bench import (COLUMNS, BenchRecord, SweepPlan, accuracy_curve, elbow, emit_csv,
                        emit_plot_script, fixed_accuracy, format_gap_report, gap_report,
                        parse_csv, pareto_sweep, rounded, thread_sweep, time_inference)
from dlis.compression import magnitude_prune, to_sparse_format
from dlis.engine import ExecConfig
from dlis.errors import ConfigError, DeterminismError
from dlis.io import synth_dataset


def rec(technique="plain", threads=1, median=100, level=0.0, fmt="dense", exp=1.0, acc=0.9,
        model="m"):
    return BenchRecord(model, technique, level, fmt, threads, 3, median, median - 1, median + 1,
                       acc, 1000, 500, 64, exp, 1.0)


def test_columns_in_order():
    assert COLUMNS == ("model", "technique", "level", "format", "threads", "reps",
                       "latency_median_ns", "latency_min_ns", "latency_max_ns", "accuracy",
                       "total_macs", "effective_macs", "footprint_bytes", "expected_speedup",
                       "observed_speedup")


def test_record_validation():
    with pytest.raises(ValueError):
        BenchRecord("m", "plain", 0, "dense", 1, 0, 1, 1, 1, None, 1, 1, 1, 1, 1)
    with pytest.raises(ValueError):
        BenchRecord("m", "plain", 0, "dense", 1, 1, 5, 6, 7, None, 1, 1, 1, 1, 1)


finite = st.floats(0, 1e6, allow_nan=False)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.tuples(finite, st.one_of(st.none(), st.floats(0, 1)), finite, finite,
                          st.integers(1, 10 ** 12)), min_size=0, max_size=8))
def test_csv_roundtrip(tmp_path_factory, rows):
    path = tmp_path_factory.mktemp("csv") / "r.csv"
    recs = [BenchRecord("net,x", "ttq", lvl, "csr", 2, 4, lo + 1, lo, lo + 2, acc, 7, 3, 9, e, o)
            for lvl, acc, e, o, lo in rows]
    emit_csv(recs, path)
    assert parse_csv(path) == [rounded(r) for r in recs]


def test_csv_header_checked(tmp_path):
    path = tmp_path / "bad.csv"
    path.write_text("a,b\n1,2\n")
    with pytest.raises(ValueError):
        parse_csv(path)


def test_gap_report():
    recs = [rec(median=1000), rec(median=400, technique="weight_prune", fmt="csr", exp=4.0,
                                   level=0.75)]
    rows = gap_report(recs)
    assert rows[0].gap == 1.0
    assert rows[1].expected_ns == 250.0 and rows[1].gap == pytest.approx(1.6)
    assert "1.6000" in format_gap_report(rows)
    with pytest.raises(ConfigError):
        gap_report(recs[1:])


def test_gap_uses_matching_thread_baseline():
    recs = [rec(threads=1, median=1000), rec(threads=2, median=600),
            rec(technique="ttq", threads=2, median=300, exp=2.0, fmt="csr")]
    assert gap_report(recs)[2].gap == pytest.approx(1.0)


def test_curves():
    curve = [(0.5, 0.92), (0.7, 0.915), (0.9, 0.80)]
    assert elbow(curve, tolerance=0.01) == 0.7
    assert fixed_accuracy(curve, 0.90) == 0.7
    assert fixed_accuracy(curve, 0.99) is None
    recs = [rec(level=0.5, acc=0.92, threads=1), rec(level=0.5, acc=0.92, threads=2),
            rec(level=0.7, acc=0.8)]
    assert accuracy_curve(recs) == [(0.5, 0.92), (0.7, 0.8)]
    with pytest.raises(ValueError):
        elbow([(0.5, None)])


def test_time_inference(image):
    t = time_inference(build_network("tiny"), image, reps=5, warmup=1)
    assert t.min_ns <= t.median_ns <= t.max_ns and len(t.samples) == 5
    with pytest.raises(ValueError):
        time_inference(build_network("tiny"), image, reps=0)


def test_thread_sweep_records(image):
    net = build_network("tiny")
    sp = to_sparse_format(magnitude_prune(net, sparsity=0.5)[0])
    recs = thread_sweep(sp, image, ExecConfig(conv_algo="sparse_csr"), [1, 2], 3, 0, "tiny",
                        "weight_prune", 0.5, reference=net)
    assert [r.threads for r in recs] == [1, 2]
    assert recs[0].observed_speedup == 1.0
    assert all(r.format == "csr" and r.expected_speedup > 1 for r in recs)
    plain = thread_sweep(net, image, ExecConfig(), [1], 2, 0)
    assert plain[0].expected_speedup == 1.0 and plain[0].effective_macs == plain[0].total_macs
    with pytest.raises(ConfigError):
        thread_sweep(net, image, ExecConfig(), [], 2, 0)


def test_thread_sweep_detects_nondeterminism(monkeypatch, image):
    import dlis.bench as bench

    calls = []
    real = bench.forward

    def noisy(net, x, cfg=None, **kw):
        out = real(net, x, cfg, **kw)
        calls.append(1)
        return out + (len(calls) > 1) * np.float32(1e-3)

    monkeypatch.setattr(bench, "forward", noisy)
    with pytest.raises(DeterminismError):
        thread_sweep(build_network("tiny"), image, ExecConfig(), [1, 2], 2, 0)


def test_sweep_plan_validation():
    with pytest.raises(ConfigError):
        SweepPlan("m", "magic", [0.5])
    with pytest.raises(ConfigError):
        SweepPlan("m", "plain", [0.5, 0.3])
    with pytest.raises(ConfigError):
        SweepPlan("m", "plain", [])


def test_pareto_sweep_weight_prune():
    ds = synth_dataset(0, 32, classes=2)
    plan = SweepPlan("tiny", "weight_prune", [0.5, 0.8], threads=[1, 2], reps=2, warmup=0,
                     finetune_epochs=1)
    recs = pareto_sweep(plan, build_network("tiny", num_classes=2), ds, model="tiny")
    assert [(r.level, r.threads) for r in recs] == [(0.5, 1), (0.5, 2), (0.8, 1), (0.8, 2)]
    assert all(r.format == "csr" and r.accuracy is not None for r in recs)
    assert recs[2].expected_speedup > recs[0].expected_speedup


def test_plot_script_is_python(tmp_path):
    script = tmp_path / "plot.py"
    emit_plot_script(tmp_path / "r.csv", script)
    ast.parse(script.read_text())
    assert "r.png" in script.read_text()
