import csv
import json

import pytest

from gpusched.cli import main

NODES = "2 x V100:8:64:512"


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    assert main(["gen-trace", "--jobs", "400", "--seed", "3", "--rate", "0.01",
                 "--runtime-mean", "1200", "--gpu-weights", "0.5,0.3,0.2,0,0",
                 "--out", str(d / "trace.csv")]) == 0
    assert main(["train", "--trace", str(d / "trace.csv"), "--nodes", NODES, "--epochs", "2",
                 "--batches", "10", "--batch-size", "32", "--seed", "1",
                 "--out", str(d / "train")]) == 0
    return d


def _eval(d, policy, name, extra=()):
    return main(["eval", "--checkpoint", str(d / "train" / "checkpoint.json"), "--trace",
                 str(d / "trace.csv"), "--nodes", NODES, "--runs", "2", "--batch", "32",
                 "--base-policy", policy, "--out", str(d / name), *extra])


def test_gen_trace_rows_and_bytes(tmp_path):
    assert main(["gen-trace", "--jobs", "1024", "--seed", "7", "--out", str(tmp_path / "a.csv")]) == 0
    assert main(["gen-trace", "--jobs", "1024", "--seed", "7", "--out", str(tmp_path / "b.csv")]) == 0
    a = (tmp_path / "a.csv").read_bytes()
    assert a == (tmp_path / "b.csv").read_bytes()
    assert len(a.decode().splitlines()) == 1025


def test_gen_trace_zero_jobs_is_usage_error(tmp_path):
    assert main(["gen-trace", "--jobs", "0", "--out", str(tmp_path / "x.csv")]) == 2


def test_usage_error_from_argparse():
    with pytest.raises(SystemExit) as exc:
        main(["train", "--epochs", "two"])
    assert exc.value.code == 2


def test_train_outputs(workdir):
    out = workdir / "train"
    with open(out / "curve.csv") as fh:
        assert len(list(csv.DictReader(fh))) == 20
    assert (out / "config.ini").exists()
    meta = json.loads((out / "checkpoint.json").read_text())["meta"]
    assert meta["base_policy"] == "fifo"


def test_train_reproducible_from_snapshot(workdir, tmp_path):
    out = workdir / "train"
    assert main(["train", "--config", str(out / "config.ini"), "--out", str(tmp_path / "again")]) == 0
    for name in ("curve.csv", "checkpoint.json", "config.ini"):
        assert (tmp_path / "again" / name).read_bytes() == (out / name).read_bytes()


def test_train_resume(workdir, tmp_path):
    args = ["train", "--trace", str(workdir / "trace.csv"), "--nodes", NODES, "--batches", "3",
            "--batch-size", "32", "--seed", "2"]
    assert main(args + ["--epochs", "1", "--out", str(tmp_path / "part")]) == 0
    assert main(args + ["--epochs", "2", "--resume", str(tmp_path / "part" / "checkpoint.json"),
                        "--out", str(tmp_path / "part")]) == 0
    assert main(args + ["--epochs", "2", "--out", str(tmp_path / "full")]) == 0
    assert (tmp_path / "part" / "curve.csv").read_bytes() == (tmp_path / "full" / "curve.csv").read_bytes()


def test_naive_flag(workdir, tmp_path):
    assert main(["train", "--trace", str(workdir / "trace.csv"), "--nodes", NODES, "--epochs", "1",
                 "--batches", "1", "--batch-size", "32", "--naive", "--out", str(tmp_path / "n")]) == 0
    assert json.loads((tmp_path / "n" / "checkpoint.json").read_text())["layout"] == "naive-ov8-v1"


def test_eval_reports_and_determinism(workdir):
    assert _eval(workdir, "fifo", "a") == 0
    assert _eval(workdir, "fifo", "b") == 0
    a = json.loads((workdir / "a.json").read_text())
    b = json.loads((workdir / "b.json").read_text())
    assert a.pop("timing") and b.pop("timing")
    assert a == b and len(a["per_run"]) == 2
    assert (workdir / "a.csv").read_bytes() == (workdir / "b.csv").read_bytes()
    assert a["checkpoint"]["trained_against"] == "fifo"


def test_cross_policy_eval_and_compare(workdir, capsys):
    assert _eval(workdir, "fifo", "fifo") == 0
    assert _eval(workdir, "wfp3", "wfp3") == 0
    capsys.readouterr()
    assert main(["compare", str(workdir / "fifo.json"), str(workdir / "wfp3.json"),
                 "--out", str(workdir / "table.csv")]) == 0
    table = capsys.readouterr().out.splitlines()
    assert "Time(s)" in table[0] and "Δwait%" in table[0]
    assert [r.split(" | ")[0] for r in table[1:]] == ["FIFO", "RL-FIFO", "WFP3", "RL-WFP3"]


def test_compare_two_rows(workdir, capsys):
    assert _eval(workdir, "fifo", "single") == 0
    capsys.readouterr()
    assert main(["compare", str(workdir / "single.json")]) == 0
    assert len(capsys.readouterr().out.splitlines()) == 3


def test_compare_refuses_other_trace(workdir, tmp_path):
    assert _eval(workdir, "fifo", "x") == 0
    assert main(["gen-trace", "--jobs", "400", "--seed", "4", "--out", str(tmp_path / "t2.csv")]) == 0
    assert main(["eval", "--checkpoint", str(workdir / "train" / "checkpoint.json"), "--trace",
                 str(tmp_path / "t2.csv"), "--nodes", "4 x V100:8:64:512", "--runs", "1",
                 "--batch", "32", "--out", str(tmp_path / "other")]) == 0
    assert main(["compare", str(workdir / "x.json"), str(tmp_path / "other.json")]) == 3


def test_eval_errors(workdir, tmp_path):
    assert main(["eval", "--checkpoint", str(tmp_path / "none.json"), "--trace",
                 str(workdir / "trace.csv")]) == 3
    assert main(["eval", "--checkpoint", str(workdir / "train" / "checkpoint.json"), "--trace",
                 str(tmp_path / "none.csv")]) == 3
    assert main(["eval", "--checkpoint", str(workdir / "train" / "checkpoint.json"), "--trace",
                 str(workdir / "trace.csv"), "--nodes", "1 x V100:2:64:512",
                 "--out", str(tmp_path / "r")]) == 4


def test_inspect_state(workdir, tmp_path):
    assert main(["inspect-state", "--trace", str(workdir / "trace.csv"), "--nodes", NODES,
                 "--at", "20000", "--out", str(tmp_path / "st")]) == 0
    lines = (tmp_path / "st" / "state.csv").read_text().splitlines()
    assert len(lines) == 257
    assert (tmp_path / "st" / "features.csv").exists()


def test_bench_overhead(workdir, tmp_path):
    assert main(["bench-overhead", "--nodes", NODES, "--sizes", "8,16", "--repeats", "2",
                 "--checkpoint", str(workdir / "train" / "checkpoint.json"),
                 "--out", str(tmp_path / "b.json")]) == 0
    rows = json.loads((tmp_path / "b.json").read_text())["rows"]
    assert [r["queue_size"] for r in rows] == [8, 16]
