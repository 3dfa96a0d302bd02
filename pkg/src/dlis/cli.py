"""``dlis`` command line: train, compress, benchmark and verify networks.

Config and plan files hold one ``key = value`` pair per line; ``#`` starts a
comment.  Keys are flag names without the leading dashes (``decay-every``
or ``decay_every``).  Command-line flags override config values.

Exit codes: 0 success, 2 usage, 3 I/O, 4 validation, 5 verification failure.
"""

from __future__ import annotations

import argparse
import csv
import os
import sys
import warnings

import numpy as np

from . import bench
from .compression import (DEFAULT_BETA, FINETUNE_EPOCHS, PRUNE_EVERY, CompressionState,
                          channel_prune, iterative_prune, sparsity_report, to_dense_format,
                          to_sparse_format, ttq_train)
from .engine import CONV_ALGOS, ExecConfig, default_threads, evaluate_accuracy
from .errors import (ChannelPruneError, ConfigError, DatasetError, DeterminismError,
                     ModelFormatError, ShapeError)
from .graph import ARCHS, build_network, count_macs
from .io import GRANULARITIES, load_cifar10, load_model, save_model, synth_dataset
from .io.footprint import footprint
from .train import TrainSchedule, train
from .verify import SUITES, run_suite

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_VALIDATION, EXIT_VERIFY = 0, 2, 3, 4, 5


class UsageError(Exception):
    pass


def read_kv(path):
    """Parse a ``key = value`` file into an ordered dict of strings."""
    out = {}
    with open(path, encoding="utf-8") as fh:
        for n, raw in enumerate(fh, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise UsageError(f"{path}:{n}: expected key = value")
            key, value = (s.strip() for s in line.split("=", 1))
            out[key.replace("-", "_")] = value
    return out


def parse_floats(text):
    try:
        return [float(v) for v in str(text).split(",") if v.strip()]
    except ValueError:
        raise UsageError(f"expected a comma-separated list of numbers, got {text!r}") from None


def parse_ints(text):
    try:
        return [int(v) for v in str(text).split(",") if v.strip()]
    except ValueError:
        raise UsageError(f"expected a comma-separated list of integers, got {text!r}") from None


def load_data(spec):
    """``synth:seed,n,classes[,size]`` or ``cifar10:<dir>`` -> ``(train, test)``."""
    kind, _, rest = str(spec).partition(":")
    if kind == "synth":
        parts = parse_ints(rest)
        if len(parts) not in (3, 4):
            raise UsageError("synth data spec is synth:seed,n,classes[,size]")
        seed, n, classes = parts[:3]
        size = parts[3] if len(parts) == 4 else 32
        return (synth_dataset(seed, n, classes, size, split="train"),
                synth_dataset(seed, max(n // 4, 1), classes, size, split="test"))
    if kind == "cifar10":
        if not rest:
            raise UsageError("cifar10 data spec is cifar10:<directory>")
        return load_cifar10(rest)
    raise UsageError(f"unknown data spec {spec!r}; use synth:... or cifar10:<dir>")


def _open_model(path):
    if not os.path.isfile(path):
        raise FileNotFoundError(f"model file {path} not found")
    return load_model(path)


def _echo_config(args):
    items = {k: v for k, v in sorted(vars(args).items()) if k not in ("func", "config")}
    print("config " + " ".join(f"{k}={v}" for k, v in items.items()))


def _summary(net, state):
    sp = sparsity_report(net)
    extra = ""
    if state is not None and state.channels is not None:
        extra = f" compression_rate={state.channels.compression_rate:.6f}"
    if state is not None and state.ternary is not None:
        extra += f" ttq_threshold={state.ternary.threshold:g} ttq_sparsity={state.ternary.sparsity:.6f}"
    print(f"summary technique={state.technique if state else 'plain'} "
          f"conv_sparsity={sp['conv_weights']:.6f} weight_sparsity={sp['weights']:.6f} "
          f"param_sparsity={sp['all_params']:.6f}{extra} {count_macs(net).summary()}")


def _write_history(path, history):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "lr", "loss", "train_acc", "test_acc"])
        for h in history:
            w.writerow([h.epoch, f"{h.lr:.8g}", f"{h.loss:.8f}", f"{h.train_acc:.6f}",
                        "" if h.test_acc is None else f"{h.test_acc:.6f}"])


# -- commands ----------------------------------------------------------------

def cmd_train(args):
    train_set, test_set = load_data(args.data)
    net = build_network(args.arch, args.scale, train_set.num_classes,
                        train_set.images.shape[1:], args.seed)
    sched = TrainSchedule(base_lr=args.lr, decay_every=args.decay_every, epochs=args.epochs,
                          batch_size=args.batch, seed=args.seed, momentum=args.momentum,
                          weight_decay=args.weight_decay, augment=args.augment)
    net, history = train(net, train_set, sched, test_set=test_set)
    save_model(net, CompressionState("plain", 0.0), args.out)
    _write_history(args.out + ".history.csv", history)
    for h in history:
        print(f"epoch {h.epoch} lr={h.lr:g} loss={h.loss:.6f} train_acc={h.train_acc:.4f} "
              f"test_acc={h.test_acc:.4f}")
    print(f"wrote {args.out}")
    return EXIT_OK


def _finetune_sched(args, epochs):
    return TrainSchedule(base_lr=args.lr, epochs=epochs, batch_size=args.batch, seed=args.seed,
                         decay_every=max(epochs, 1))


def cmd_prune(args):
    levels = parse_floats(args.levels)
    if not levels:
        raise UsageError("--levels needs at least one sparsity")
    net, _ = _open_model(args.model)
    train_set, test_set = load_data(args.data)
    if max(levels) == 0.0:
        state = CompressionState("weight_prune", 0.0)
        out = net
    else:
        results = iterative_prune(net, train_set, levels, args.epochs,
                                  _finetune_sched(args, args.epochs), test_set)
        for r in results:
            print(f"level {r.level:g} pre_finetune_acc={r.pre_finetune_accuracy:.4f} "
                  f"acc={r.accuracy:.4f}")
        last = results[-1]
        state = CompressionState("weight_prune", last.level, mask=last.mask)
        out = to_sparse_format(last.net)
    save_model(out, state, args.out)
    _summary(out, state)
    return EXIT_OK


def cmd_channel_prune(args):
    net, _ = _open_model(args.model)
    train_set, test_set = load_data(args.data)
    if args.steps is None and args.target_rate is None:
        raise UsageError("give --steps or --target-rate")
    out, record = channel_prune(net, train_set, steps=args.steps, beta=args.beta, lr=args.lr,
                                prune_every=args.prune_every, batch_size=args.batch,
                                seed=args.seed, target_rate=args.target_rate)
    state = CompressionState("channel_prune", record.compression_rate, channels=record)
    save_model(out, state, args.out)
    print(f"removed {len(record)} channels accuracy={evaluate_accuracy(out, test_set):.4f}")
    _summary(out, state)
    return EXIT_OK


def cmd_quantize(args):
    net, _ = _open_model(args.model)
    train_set, test_set = load_data(args.data)
    out, params = ttq_train(net, train_set, args.ttq_threshold,
                            _finetune_sched(args, args.epochs), eval_set=test_set)
    state = CompressionState("ttq", args.ttq_threshold, ternary=params,
                             notes={"sparsity": params.sparsity})
    out = to_sparse_format(out)
    save_model(out, state, args.out)
    _summary(out, state)
    return EXIT_OK


def cmd_bench(args):
    net, state = _open_model(args.model)
    threads = parse_ints(args.threads)
    if not threads or min(threads) < 1:
        raise UsageError("--threads needs positive integers")
    technique = state.technique if state else "plain"
    level = state.level if state else 0.0
    if args.format == "csr":
        if net.layers and all(l.weight_format == "dense" for l in net.layers):
            net = to_sparse_format(net)
        if sparsity_report(net)["conv_weights"] == 0.0:
            warnings.warn("csr format on a model with 0% conv sparsity", stacklevel=1)
            print("warning: csr format requested for a model with 0% sparsity", file=sys.stderr)
    accuracy = None
    if args.data:
        _, test_set = load_data(args.data)
        accuracy = evaluate_accuracy(net, test_set)
    rng = np.random.default_rng(args.seed)
    x = rng.random((args.batch,) + tuple(net.input_shape)).astype(net.dtype)
    dense_net = to_dense_format(net)
    model_id = os.path.basename(args.model)
    base_cfg = ExecConfig(threads=default_threads(), conv_algo=args.algo)
    records = bench.thread_sweep(dense_net, x, base_cfg, threads, args.reps, args.warmup,
                                 model_id, "plain", 0.0, None)
    if args.format == "csr" or technique != "plain":
        cfg = ExecConfig(conv_algo="sparse_csr") if args.format == "csr" else base_cfg
        records += bench.thread_sweep(net, x, cfg, threads, args.reps, args.warmup, model_id,
                                      technique, level, accuracy, reference=dense_net)
    rows = bench.gap_report(records)
    tmp = args.out + ".partial"
    bench.emit_csv(records, tmp)
    os.replace(tmp, args.out)
    print(bench.format_gap_report(rows))
    if args.plot_script:
        bench.emit_plot_script(args.out, args.plot_script)
    print(f"wrote {args.out}")
    return EXIT_OK


def cmd_footprint(args):
    net, _ = _open_model(args.model)
    grans = [args.granularity] if args.granularity else list(GRANULARITIES)
    reports = [footprint(net, args.algo, g, args.batch) for g in grans]
    print(reports[0].format())
    if len(reports) > 1 and reports[1].total != reports[0].total:
        print(reports[1].format())
    for r in reports:
        print(f"total {r.granularity} weights={r.weight_bytes} model={r.model_bytes} "
              f"buffers={r.buffer_bytes} total={r.total}")
    return EXIT_OK


PLAN_KEYS = ("model", "technique", "levels", "threads", "reps", "warmup", "data", "algo",
             "finetune_epochs", "lr", "batch_size", "prune_every", "beta", "seed", "batch",
             "out", "plot_script", "arch", "scale")


def plan_from_kv(kv):
    """Build ``(SweepPlan, out_path, plot_script)`` from a parsed plan file."""
    if not kv:
        raise UsageError("plan file is empty")
    unknown = sorted(set(kv) - set(PLAN_KEYS))
    if unknown:
        raise UsageError(f"unknown plan keys: {', '.join(unknown)}")
    for key in ("technique", "levels", "out"):
        if key not in kv:
            raise UsageError(f"plan is missing {key}")
    if "model" not in kv and "arch" not in kv:
        raise UsageError("plan needs model (a model file) or arch")
    try:
        plan = bench.SweepPlan(
            model=kv.get("model") or kv["arch"], technique=kv["technique"],
            levels=parse_floats(kv["levels"]), threads=parse_ints(kv.get("threads", "1")),
            reps=int(kv.get("reps", bench.REPS)), warmup=int(kv.get("warmup", bench.WARMUP)),
            data=kv.get("data", "synth:0,256,2"),
            exec_config=ExecConfig(conv_algo=kv.get("algo", "direct")),
            finetune_epochs=int(kv.get("finetune_epochs", 5)), lr=float(kv.get("lr", 0.01)),
            batch_size=int(kv.get("batch_size", 32)),
            prune_every=int(kv.get("prune_every", PRUNE_EVERY)),
            beta=float(kv.get("beta", DEFAULT_BETA)), seed=int(kv.get("seed", 0)),
            batch=int(kv.get("batch", 1)))
    except ConfigError as exc:
        raise UsageError(str(exc)) from None
    except ValueError as exc:
        raise UsageError(f"bad plan value: {exc}") from None
    return plan, kv["out"], kv.get("plot_script")


def cmd_pareto(args):
    kv = read_kv(args.plan)
    plan, out, plot = plan_from_kv(kv)
    print("plan " + " ".join(f"{k}={v}" for k, v in kv.items()))
    train_set, test_set = load_data(plan.data)
    if "model" in kv:
        net, _ = _open_model(kv["model"])
    else:
        net = build_network(kv["arch"], float(kv.get("scale", 1.0)), train_set.num_classes,
                            train_set.images.shape[1:], plan.seed)
    records = bench.pareto_sweep(plan, net, train_set, test_set, os.path.basename(plan.model))
    tmp = out + ".partial"
    bench.emit_csv(records, tmp)
    os.replace(tmp, out)
    curve = bench.accuracy_curve(records)
    for level, acc in curve:
        print(f"level {level:g} accuracy={acc:.4f}")
    print(f"elbow level={bench.elbow(curve):g}")
    if plot:
        bench.emit_plot_script(out, plot)
    print(f"wrote {out}")
    return EXIT_OK


def cmd_verify(args):
    results = run_suite(args.suite, args.seed)
    for r in results:
        print(f"{'PASS' if r.passed else 'FAIL'} {r.name}: {r.detail}")
    return EXIT_OK if all(r.passed for r in results) else EXIT_VERIFY


# -- parser ------------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _positive_int(text):
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError("must be >= 1")
    return v


def _fraction(text):
    v = float(text)
    if not 0.0 <= v <= 1.0:
        raise argparse.ArgumentTypeError("must lie in [0, 1]")
    return v


def build_parser():
    fmt = argparse.ArgumentDefaultsHelpFormatter
    p = _Parser(prog="dlis", description="CNN inference, compression and benchmarking stack.",
                formatter_class=fmt)
    sub = p.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    def add(name, func, help_text):
        sp = sub.add_parser(name, help=help_text, formatter_class=fmt)
        sp.add_argument("--config", help="key = value file of flag defaults")
        sp.set_defaults(func=func)
        return sp

    t = add("train", cmd_train, "train a network from scratch with SGD")
    t.add_argument("--arch", choices=ARCHS, default="vgg16_cifar")
    t.add_argument("--scale", type=float, default=1.0, help="channel width multiplier")
    t.add_argument("--data", default="synth:0,256,2")
    t.add_argument("--epochs", type=int, default=150)
    t.add_argument("--lr", type=float, default=0.1)
    t.add_argument("--decay-every", type=_positive_int, default=50)
    t.add_argument("--batch", type=_positive_int, default=128)
    t.add_argument("--momentum", type=float, default=0.0)
    t.add_argument("--weight-decay", type=float, default=0.0)
    t.add_argument("--augment", action="store_true")
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--out", required=True)

    def compress_common(sp, lr, epochs=None):
        sp.add_argument("--model", required=True)
        sp.add_argument("--out", required=True)
        sp.add_argument("--data", default="synth:0,256,2")
        sp.add_argument("--lr", type=float, default=lr)
        sp.add_argument("--batch", type=_positive_int, default=64)
        sp.add_argument("--seed", type=int, default=0)
        if epochs is not None:
            sp.add_argument("--epochs", type=int, default=epochs, help="fine-tune epochs")

    pr = add("prune", cmd_prune, "iterative magnitude pruning")
    compress_common(pr, 0.01, FINETUNE_EPOCHS)
    pr.add_argument("--levels", default="0.5", help="ascending sparsities, comma separated")

    cp = add("channel-prune", cmd_channel_prune, "Fisher channel pruning with a MAC penalty")
    compress_common(cp, None)
    cp.add_argument("--steps", type=int, help="fine-tune steps (one removal per prune-every)")
    cp.add_argument("--target-rate", type=_fraction, help="stop at this compression rate")
    cp.add_argument("--beta", type=float, default=DEFAULT_BETA)
    cp.add_argument("--prune-every", type=_positive_int, default=PRUNE_EVERY)

    q = add("quantize", cmd_quantize, "trained ternary quantisation")
    compress_common(q, 0.01, 10)
    q.add_argument("--ttq-threshold", type=_fraction, default=0.1)

    b = add("bench", cmd_bench, "thread sweep and expected-vs-observed gap report")
    b.add_argument("--model", required=True)
    b.add_argument("--threads", default="1,2,4,8")
    b.add_argument("--reps", type=_positive_int, default=bench.REPS)
    b.add_argument("--warmup", type=int, default=bench.WARMUP)
    b.add_argument("--format", choices=("dense", "csr"), default="dense")
    b.add_argument("--algo", choices=("direct", "im2col_gemm"), default="direct",
                   help="dense convolution algorithm")
    b.add_argument("--batch", type=_positive_int, default=1)
    b.add_argument("--data", help="optional data spec for the accuracy column")
    b.add_argument("--seed", type=int, default=0)
    b.add_argument("--plot-script", help="also write a matplotlib script for the CSV")
    b.add_argument("--out", required=True)

    f = add("footprint", cmd_footprint, "predicted memory footprint by category")
    f.add_argument("--model", required=True)
    f.add_argument("--algo", choices=CONV_ALGOS, default="direct")
    f.add_argument("--granularity", choices=GRANULARITIES,
                   help="CSR accounting (default: print both when they differ)")
    f.add_argument("--batch", type=_positive_int, default=1)

    pa = add("pareto", cmd_pareto, "run a sweep plan file")
    pa.add_argument("--plan", required=True)

    v = add("verify", cmd_verify, "run the oracle suites")
    v.add_argument("--suite", choices=SUITES + ("all",), default="all")
    v.add_argument("--seed", type=int, default=0)
    return p


def _config_path(argv):
    for i, tok in enumerate(argv):
        if tok == "--config":
            if i + 1 >= len(argv):
                raise UsageError("--config needs a file")
            return argv[i + 1]
        if tok.startswith("--config="):
            return tok.split("=", 1)[1]
    return None


def _apply_config(parser, argv):
    """Parse ``argv`` with defaults taken from the ``--config`` file, if any."""
    path = _config_path(argv)
    command = next((tok for tok in argv if not tok.startswith("-")), None)
    choices = parser._subparsers._group_actions[0].choices
    if path is None or command not in choices:
        return parser.parse_args(argv)
    kv = read_kv(path)
    sub = choices[command]
    dests = {a.dest: a for a in sub._actions}
    defaults = {}
    for key, value in kv.items():
        if key not in dests or key in ("help", "config"):
            raise UsageError(f"unknown config key {key!r} for {command}")
        action = dests[key]
        if isinstance(action, argparse._StoreTrueAction):
            defaults[key] = value.lower() in ("1", "true", "yes", "on")
            continue
        conv = action.type or str
        try:
            defaults[key] = conv(value)
        except (TypeError, ValueError, argparse.ArgumentTypeError) as exc:
            raise UsageError(f"config key {key}: {exc}") from None
        if action.choices is not None and defaults[key] not in action.choices:
            raise UsageError(f"config key {key}: {value!r} not in {list(action.choices)}")
    for action in sub._actions:
        if action.dest in defaults:
            action.required = False
    sub.set_defaults(**defaults)
    return parser.parse_args(argv)


def main(argv=None):
    parser = build_parser()
    try:
        args = _apply_config(parser, sys.argv[1:] if argv is None else argv)
    except UsageError as exc:
        print(f"dlis: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as exc:
        print(f"dlis: {exc}", file=sys.stderr)
        return EXIT_IO
    _echo_config(args)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"dlis: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, DatasetError, ModelFormatError) as exc:
        print(f"dlis: {exc}", file=sys.stderr)
        return EXIT_IO
    except DeterminismError as exc:
        print(f"dlis: determinism check failed: {exc}", file=sys.stderr)
        return EXIT_VERIFY
    except (ShapeError, ConfigError, ChannelPruneError, ValueError) as exc:
        print(f"dlis: invalid input: {exc}", file=sys.stderr)
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
