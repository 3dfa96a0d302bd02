"""Latency measurement, thread and compression sweeps, and expected-vs-observed gaps.

The harness itself is single-threaded; only the engine under test runs in
parallel.  Absolute timings are machine-specific and never asserted.
"""

from __future__ import annotations

import csv
import statistics
import time
from dataclasses import asdict, dataclass, field, fields, replace

import numpy as np

from .compression import (CompressionState, channel_prune, iterative_prune, to_sparse_format,
                          ttq_train, weight_sparsity)
from .engine import ExecConfig, ParallelExecutor, evaluate_accuracy, forward
from .errors import ConfigError, DeterminismError
from .graph import count_macs
from .io.footprint import effective_macs, expected_speedup, footprint
from .train import TrainSchedule

WARMUP = 3
REPS = 30


@dataclass
class BenchRecord:
    model: str
    technique: str
    level: float
    format: str
    threads: int
    reps: int
    latency_median_ns: int
    latency_min_ns: int
    latency_max_ns: int
    accuracy: float | None
    total_macs: int
    effective_macs: int
    footprint_bytes: int
    expected_speedup: float
    observed_speedup: float

    def __post_init__(self):
        if self.reps < 1:
            raise ValueError("reps must be >= 1")
        if not self.latency_min_ns <= self.latency_median_ns <= self.latency_max_ns:
            raise ValueError("latencies must satisfy min <= median <= max")


COLUMNS = tuple(f.name for f in fields(BenchRecord))
_FLOAT_DIGITS = {"level": 6, "accuracy": 6, "expected_speedup": 6, "observed_speedup": 6}
_INT_COLUMNS = ("threads", "reps", "latency_median_ns", "latency_min_ns", "latency_max_ns",
                "total_macs", "effective_macs", "footprint_bytes")


@dataclass
class Timing:
    median_ns: int
    min_ns: int
    max_ns: int
    reps: int
    samples: list = field(default_factory=list)


def time_inference(net, x, cfg: ExecConfig | None = None, reps=REPS, warmup=WARMUP) -> Timing:
    """Median/min/max wall time of ``reps`` forwards after ``warmup`` untimed ones."""
    if reps < 1:
        raise ValueError("reps must be >= 1")
    cfg = cfg or ExecConfig()
    samples = []
    with ParallelExecutor.from_config(cfg) as ex:
        for _ in range(warmup):
            forward(net, x, cfg, executor=ex)
        for _ in range(reps):
            t0 = time.perf_counter_ns()
            forward(net, x, cfg, executor=ex)
            samples.append(max(1, time.perf_counter_ns() - t0))
    return Timing(int(statistics.median_low(samples)), min(samples), max(samples), reps,
                  samples)


def format_of(cfg: ExecConfig) -> str:
    return "csr" if cfg.conv_algo == "sparse_csr" else "dense"


def thread_sweep(net, x, cfg_base: ExecConfig | None = None, threads=(1, 2, 4, 8), reps=REPS,
                 warmup=WARMUP, model="net", technique="plain", level=0.0, accuracy=None,
                 reference=None, footprint_granularity="per_filter_csr"):
    """One record per thread count; logits must match bitwise across counts.

    ``observed_speedup`` is the median latency at the first thread count
    divided by the median at each count.  ``reference`` is the uncompressed
    network the expected speedup is measured against (default ``net``).
    """
    threads = list(threads)
    if not threads:
        raise ConfigError("thread list must be non-empty")
    cfg_base = cfg_base or ExecConfig()
    ref_logits = None
    for t in threads:
        logits = forward(net, x, replace(cfg_base, threads=t))
        if ref_logits is None:
            ref_logits = logits
        elif not np.array_equal(ref_logits, logits) or logits.dtype != ref_logits.dtype:
            raise DeterminismError(f"logits at {t} threads differ from {threads[0]} threads")
    cost = count_macs(net)
    fp = footprint(net, cfg_base.conv_algo, footprint_granularity).total
    sparse = cfg_base.conv_algo == "sparse_csr"
    exp = expected_speedup(reference if reference is not None else net, net, sparse)
    eff = effective_macs(cost, sparse)
    records = []
    base_median = None
    for t in threads:
        tm = time_inference(net, x, replace(cfg_base, threads=t), reps, warmup)
        base_median = tm.median_ns if base_median is None else base_median
        records.append(BenchRecord(model, technique, float(level), format_of(cfg_base), t,
                                   reps, tm.median_ns, tm.min_ns, tm.max_ns, accuracy,
                                   cost.total_macs, eff, fp, exp,
                                   base_median / tm.median_ns))
    return records


@dataclass
class GapRow:
    record: BenchRecord
    expected_ns: float
    gap: float


def gap_report(records):
    """Expected time ``baseline median / expected_speedup`` and gap ``observed / expected``.

    The baseline is the ``plain`` record with the same model and thread
    count (falling back to the first plain record).
    """
    records = list(records)
    plain = [r for r in records if r.technique == "plain"]
    if not plain:
        raise ConfigError("gap_report needs a plain baseline record")
    rows = []
    for r in records:
        base = next((p for p in plain if p.threads == r.threads and p.model == r.model),
                    next((p for p in plain if p.threads == r.threads), plain[0]))
        expected = base.latency_median_ns / r.expected_speedup
        rows.append(GapRow(r, expected, r.latency_median_ns / expected))
    return rows


def format_gap_report(rows) -> str:
    lines = ["model technique level format threads observed_ns expected_ns gap"]
    for g in rows:
        r = g.record
        lines.append(f"{r.model} {r.technique} {r.level:.6f} {r.format} {r.threads} "
                     f"{r.latency_median_ns} {g.expected_ns:.1f} {g.gap:.4f}")
    return "\n".join(lines)


# -- CSV ---------------------------------------------------------------------

def _cell(name, value):
    if value is None:
        return ""
    if name in _FLOAT_DIGITS:
        return f"{float(value):.{_FLOAT_DIGITS[name]}f}"
    if name in _INT_COLUMNS:
        return str(int(value))
    return str(value)


def emit_csv(records, path):
    """Write records with the fixed :data:`COLUMNS` header."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(COLUMNS)
        for r in records:
            d = asdict(r)
            w.writerow([_cell(c, d[c]) for c in COLUMNS])


def parse_csv(path):
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows or tuple(rows[0]) != COLUMNS:
        raise ValueError(f"{path}: header does not match the bench record columns")
    out = []
    for row in rows[1:]:
        d = dict(zip(COLUMNS, row))
        for c in COLUMNS:
            if c in _INT_COLUMNS:
                d[c] = int(d[c])
            elif c in _FLOAT_DIGITS:
                d[c] = None if d[c] == "" else float(d[c])
        out.append(BenchRecord(**d))
    return out


def rounded(record: BenchRecord) -> BenchRecord:
    """The record as it reads back from CSV (floats rounded to emitted precision)."""
    d = asdict(record)
    for c, digits in _FLOAT_DIGITS.items():
        if d[c] is not None:
            d[c] = float(f"{float(d[c]):.{digits}f}")
    return BenchRecord(**d)


PLOT_TEMPLATE = '''"""Plot a bench CSV: accuracy against level, and latency against threads."""
import csv
import sys

import matplotlib.pyplot as plt

rows = list(csv.DictReader(open(sys.argv[1] if len(sys.argv) > 1 else {csv_path!r})))
fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(10, 4))
for tech in sorted({{r["technique"] for r in rows}}):
    sel = [r for r in rows if r["technique"] == tech and r["accuracy"]]
    pts = sorted({{(float(r["level"]), float(r["accuracy"])) for r in sel}})
    if pts:
        ax1.plot([p[0] for p in pts], [p[1] for p in pts], marker="o", label=tech)
    for lvl in sorted({{r["level"] for r in rows if r["technique"] == tech}}):
        pts = [(int(r["threads"]), int(r["latency_median_ns"]) / 1e6) for r in rows
               if r["technique"] == tech and r["level"] == lvl]
        ax2.plot([p[0] for p in pts], [p[1] for p in pts], marker="s", label=f"{{tech}} {{lvl}}")
ax1.set_xlabel("compression level")
ax1.set_ylabel("accuracy")
ax2.set_xlabel("threads")
ax2.set_ylabel("median latency (ms)")
ax1.legend()
ax2.legend(fontsize="small")
fig.tight_layout()
fig.savefig({png_path!r})
'''


def emit_plot_script(csv_path, script_path, png_path=None):
    """Write a standalone matplotlib script that plots ``csv_path``."""
    png_path = png_path or str(csv_path).rsplit(".", 1)[0] + ".png"
    with open(script_path, "w", encoding="utf-8") as fh:
        fh.write(PLOT_TEMPLATE.format(csv_path=str(csv_path), png_path=png_path))


# -- Pareto sweeps -----------------------------------------------------------

TECH_FORMAT = {"plain": "dense", "weight_prune": "csr", "channel_prune": "dense", "ttq": "csr"}


@dataclass
class SweepPlan:
    model: str
    technique: str
    levels: list
    threads: list = field(default_factory=lambda: [1])
    reps: int = REPS
    warmup: int = WARMUP
    data: str = "synth:0,256,2"
    exec_config: ExecConfig = field(default_factory=ExecConfig)
    finetune_epochs: int = 5
    lr: float = 0.01
    batch_size: int = 32
    prune_every: int = 100
    beta: float = 1e-6
    seed: int = 0
    batch: int = 1

    def __post_init__(self):
        if self.technique not in TECH_FORMAT:
            raise ConfigError(f"unknown technique {self.technique!r}")
        if not self.levels or not self.threads:
            raise ConfigError("sweep plan needs non-empty level and thread lists")
        if any(b < a for a, b in zip(self.levels, self.levels[1:])):
            raise ConfigError("sweep levels must be ascending")
        if self.reps < 1 or self.warmup < 0:
            raise ConfigError("reps must be >= 1 and warmup >= 0")


def _sched(plan, epochs):
    return TrainSchedule(base_lr=plan.lr, epochs=epochs, batch_size=plan.batch_size,
                         seed=plan.seed, decay_every=max(epochs, 1))


def compress_levels(net, plan: SweepPlan, train_set, eval_set):
    """Yield ``(level, compressed_net, state, accuracy)`` for each plan level."""
    tech = plan.technique
    if tech == "plain":
        for level in plan.levels:
            yield level, net, CompressionState("plain", level), evaluate_accuracy(net, eval_set)
    elif tech == "weight_prune":
        results = iterative_prune(net, train_set, plan.levels, plan.finetune_epochs,
                                  _sched(plan, plan.finetune_epochs), eval_set)
        for res in results:
            state = CompressionState("weight_prune", res.level, mask=res.mask,
                                     notes={"conv_sparsity": weight_sparsity(res.net, False)})
            yield res.level, to_sparse_format(res.net), state, res.accuracy
    elif tech == "channel_prune":
        for level in plan.levels:
            pruned, record = channel_prune(net, train_set, target_rate=level, beta=plan.beta,
                                           lr=plan.lr, prune_every=plan.prune_every,
                                           batch_size=plan.batch_size, seed=plan.seed)
            state = CompressionState("channel_prune", level, channels=record)
            yield level, pruned, state, evaluate_accuracy(pruned, eval_set)
    else:
        for level in plan.levels:
            qnet, params = ttq_train(net, train_set, level, _sched(plan, plan.finetune_epochs),
                                     eval_set=eval_set)
            state = CompressionState("ttq", level, ternary=params,
                                     notes={"sparsity": params.sparsity})
            yield level, to_sparse_format(qnet), state, evaluate_accuracy(qnet, eval_set)


def pareto_sweep(plan: SweepPlan, net, train_set, eval_set=None, model="net"):
    """Apply the plan's technique at each level, then time every thread count."""
    eval_set = eval_set if eval_set is not None else train_set
    x = eval_set.images[:plan.batch]
    records = []
    for level, cnet, _, acc in compress_levels(net, plan, train_set, eval_set):
        algo = plan.exec_config.conv_algo
        if TECH_FORMAT[plan.technique] == "csr":
            algo = "sparse_csr"
        elif algo == "sparse_csr":
            algo = "direct"
        cfg = replace(plan.exec_config, conv_algo=algo)
        records.extend(thread_sweep(cnet, x, cfg, plan.threads, plan.reps, plan.warmup, model,
                                    plan.technique, level, acc, reference=net))
    return records


def accuracy_curve(records):
    """``[(level, accuracy)]`` in emitted order, one point per level."""
    seen = {}
    for r in records:
        seen.setdefault(r.level, r.accuracy)
    return list(seen.items())


def elbow(curve, tolerance=0.01):
    """Highest level whose accuracy is within ``tolerance`` of the best accuracy."""
    curve = [(lvl, acc) for lvl, acc in curve if acc is not None]
    if not curve:
        raise ValueError("curve has no accuracy points")
    best = max(acc for _, acc in curve)
    return max(lvl for lvl, acc in curve if acc >= best - tolerance)


def fixed_accuracy(curve, target=0.90):
    """Highest level still reaching ``target`` accuracy, or ``None``."""
    ok = [lvl for lvl, acc in curve if acc is not None and acc >= target]
    return max(ok) if ok else None
