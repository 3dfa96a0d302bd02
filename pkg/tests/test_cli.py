import os

import numpy as np
import pytest

from dlis.bench import COLUMNS, parse_csv
from dlis.cli import EXIT_IO, EXIT_OK, EXIT_USAGE, EXIT_VALIDATION, main, read_kv
from dlis.io import load_model

DATA = "synth:0,32,2,8"


@pytest.fixture
def model(tmp_path):
    path = str(tmp_path / "plain.dlis")
    assert main(["train", "--arch", "tiny", "--data", DATA, "--epochs", "2", "--lr", "0.05",
                 "--batch", "8", "--out", path]) == EXIT_OK
    return path


def test_train_writes_model_history_and_echoes_config(tmp_path, capsys, model):
    out = capsys.readouterr().out
    assert out.startswith("config ") and "decay_every=50" in out and "lr=0.05" in out
    hist = open(model + ".history.csv").read().splitlines()
    assert hist[0] == "epoch,lr,loss,train_acc,test_acc" and len(hist) == 3
    assert os.path.exists(model + ".manifest.txt")


def test_train_defaults():
    from dlis.cli import build_parser
    args = build_parser().parse_args(["train", "--out", "x"])
    assert args.lr == 0.1 and args.decay_every == 50


def test_train_zero_epochs_and_same_seed(tmp_path):
    a, b = str(tmp_path / "a.dlis"), str(tmp_path / "b.dlis")
    for p in (a, b):
        assert main(["train", "--arch", "tiny", "--data", DATA, "--epochs", "0", "--seed", "3",
                     "--out", p]) == EXIT_OK
    assert open(a, "rb").read() == open(b, "rb").read()
    assert open(a + ".history.csv").read().splitlines() == ["epoch,lr,loss,train_acc,test_acc"]


def test_usage_errors(tmp_path, capsys):
    assert main([]) == EXIT_USAGE
    assert main(["train", "--arch", "tiny", "--bogus", "--out", "x"]) == EXIT_USAGE
    assert main(["train", "--arch", "lenet", "--out", "x"]) == EXIT_USAGE
    assert main(["train", "--data", "mnist:1", "--out", str(tmp_path / "m")]) == EXIT_USAGE
    assert not os.path.exists(tmp_path / "m")


def test_config_file_supplies_flags(tmp_path):
    cfg = tmp_path / "run.cfg"
    out = tmp_path / "c.dlis"
    cfg.write_text(f"arch = tiny\ndata = {DATA}\nepochs = 1\n# comment\nout = {out}\n")
    assert main(["train", "--config", str(cfg)]) == EXIT_OK
    assert out.exists()
    cfg.write_text("colour = blue\n")
    assert main(["train", "--config", str(cfg), "--out", "x"]) == EXIT_USAGE
    assert read_kv(str(tmp_path / "run.cfg")) == {"colour": "blue"}


def test_prune_and_identity_level(tmp_path, capsys, model):
    out = str(tmp_path / "p.dlis")
    assert main(["prune", "--model", model, "--levels", "0.5", "--epochs", "1", "--data", DATA,
                 "--batch", "8", "--out", out]) == EXIT_OK
    text = capsys.readouterr().out
    assert "summary technique=weight_prune conv_sparsity=0.5" in text
    ident = str(tmp_path / "i.dlis")
    assert main(["prune", "--model", model, "--levels", "0.0", "--data", DATA,
                 "--out", ident]) == EXIT_OK
    a, _ = load_model(model)
    b, state = load_model(ident)
    assert state.technique == "weight_prune"
    assert all(np.array_equal(x, y) for (_, x), (_, y) in zip(a.parameters(), b.parameters()))
    assert main(["prune", "--model", model, "--levels", "0.7,0.5", "--data", DATA,
                 "--out", ident]) == EXIT_VALIDATION


def test_channel_prune_and_quantize(tmp_path, capsys, model):
    cp = str(tmp_path / "cp.dlis")
    assert main(["channel-prune", "--model", model, "--steps", "4", "--prune-every", "2",
                 "--data", DATA, "--batch", "8", "--out", cp]) == EXIT_OK
    out = capsys.readouterr().out
    assert "beta=1e-06" in out and "removed 2 channels" in out and "compression_rate=" in out
    assert main(["channel-prune", "--model", model, "--data", DATA, "--out", cp]) == EXIT_USAGE
    q = str(tmp_path / "q.dlis")
    assert main(["quantize", "--model", model, "--ttq-threshold", "0.2", "--epochs", "1",
                 "--data", DATA, "--batch", "8", "--out", q]) == EXIT_OK
    assert "ttq_threshold=0.2" in capsys.readouterr().out
    assert main(["quantize", "--model", model, "--ttq-threshold", "2", "--out", q]) == EXIT_USAGE


def test_bench_csv_and_warnings(tmp_path, capsys, model):
    csv_path = str(tmp_path / "b.csv")
    with pytest.warns(UserWarning, match="0% conv sparsity"):
        rc = main(["bench", "--model", model, "--threads", "1,2", "--reps", "2", "--warmup",
                   "0", "--format", "csr", "--out", csv_path,
                   "--plot-script", str(tmp_path / "plot.py")])
    assert rc == EXIT_OK
    recs = parse_csv(csv_path)
    assert open(csv_path).readline().strip() == ",".join(COLUMNS)
    assert [(r.technique, r.format, r.threads) for r in recs] == [
        ("plain", "dense", 1), ("plain", "dense", 2), ("plain", "csr", 1), ("plain", "csr", 2)]
    assert recs[0].expected_speedup == 1.0
    assert (tmp_path / "plot.py").exists()
    assert "gap" in capsys.readouterr().out


def test_bench_missing_model_leaves_no_csv(tmp_path):
    csv_path = tmp_path / "none.csv"
    assert main(["bench", "--model", str(tmp_path / "nope.dlis"), "--out",
                 str(csv_path)]) == EXIT_IO
    assert not csv_path.exists() and not (tmp_path / "none.csv.partial").exists()


def test_corrupt_model_is_io_error(tmp_path):
    bad = tmp_path / "bad.dlis"
    bad.write_bytes(b"DLIS\x01\x00garbage")
    assert main(["footprint", "--model", str(bad)]) == EXIT_IO


def test_footprint_plain_vs_pruned(tmp_path, capsys, model):
    pruned = str(tmp_path / "p.dlis")
    main(["prune", "--model", model, "--levels", "0.9", "--epochs", "0", "--data", DATA,
          "--out", pruned])
    capsys.readouterr()
    main(["footprint", "--model", model])
    plain = capsys.readouterr().out
    main(["footprint", "--model", pruned, "--algo", "sparse_csr"])
    sparse = capsys.readouterr().out
    assert "weights_dense" in plain and "total per_filter_csr" in plain
    assert "total per_layer_csr" in sparse
    assert plain.splitlines()[-1] != sparse.splitlines()[-1]


def test_pareto_plan(tmp_path, capsys):
    out = tmp_path / "sweep.csv"
    plan = tmp_path / "plan.txt"
    plan.write_text(f"arch = tiny\ntechnique = weight_prune\nlevels = 0.5,0.8\nthreads = 1,2\n"
                    f"reps = 2\nwarmup = 0\nfinetune_epochs = 1\ndata = {DATA}\nout = {out}\n")
    assert main(["pareto", "--plan", str(plan)]) == EXIT_OK
    assert len(parse_csv(out)) == 4
    assert "elbow level=" in capsys.readouterr().out
    empty = tmp_path / "empty.txt"
    empty.write_text("# nothing\n")
    assert main(["pareto", "--plan", str(empty)]) == EXIT_USAGE
    plan.write_text("technique = plain\nlevels = 0\n")
    assert main(["pareto", "--plan", str(plan)]) == EXIT_USAGE


def test_verify(capsys):
    assert main(["verify", "--suite", "kernels"]) == EXIT_OK
    lines = capsys.readouterr().out.splitlines()
    assert any(line.startswith("PASS direct_vs_gemm") for line in lines)
