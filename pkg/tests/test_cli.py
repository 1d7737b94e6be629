import csv

import pytest

from graphgpo import cli

from conftest import DATA

MERGED = str(DATA / "merged_example.jsonl")


def test_train_smoke(tmp_path, capsys):
    out = tmp_path / "run"
    rc = cli.main(["train", "--env", "chaintrap", "--algo", "graphgpo", "--group-size", "8", "--omega", "0.1", "--seed", "7", "--out-dir", str(out)])
    assert rc == 0
    rows = list(csv.DictReader(open(out / "metrics.csv")))
    assert len(rows) >= 1 and rows[0]["iteration"] == "0"
    assert (out / "policy.ckpt").stat().st_size > 0
    rc = cli.main(["eval", "--env", "chaintrap", "--checkpoint", str(out / "policy.ckpt"), "--episodes", "8"])
    assert rc == 0
    assert capsys.readouterr().out.strip().splitlines()[-1].startswith("success_rate ")


def test_unknown_flag_is_usage_error():
    with pytest.raises(SystemExit) as exc:
        cli.main(["train", "--bogus"])
    assert exc.value.code == 2


@pytest.mark.parametrize(
    "argv",
    [["train", "--env", "atari"], ["train", "--algo", "ppo"], ["train", "--omega", "1.5"], ["train", "--sweep", "seed=1,2"]],
)
def test_bad_values_are_usage_errors(argv, tmp_path):
    assert cli.main(argv + ["--out-dir", str(tmp_path)]) == 2


def test_bad_thread_cap(monkeypatch, tmp_path):
    monkeypatch.setenv("GRAPHGPO_THREADS", "many")
    assert cli.main(["train", "--iters", "1", "--out-dir", str(tmp_path)]) == 2


def test_thread_cap_is_applied(monkeypatch):
    monkeypatch.setenv("GRAPHGPO_THREADS", "2")
    cfg = cli.build_config(dict((k, d) for k, (_, d) in cli.TRAIN_FLAGS.items()))
    assert cfg.threads == 2


def test_missing_files_are_io_errors(tmp_path):
    assert cli.main(["inspect-graph", str(tmp_path / "nope.jsonl")]) == 1
    assert cli.main(["eval", "--checkpoint", str(tmp_path / "nope.ckpt")]) == 1
    assert cli.main(["convert", str(tmp_path / "nope"), "-"]) == 1
    bad = tmp_path / "bad.jsonl"
    bad.write_text("{oops\n")
    assert cli.main(["convert", str(bad), "-"]) == 1


def test_inspect_merged(capsys):
    assert cli.main(["inspect-graph", MERGED]) == 0
    out = capsys.readouterr().out
    assert out.startswith("digraph G {")
    table = out.split("}\n", 1)[1]
    rows = {ln.split()[0]: ln.split() for ln in table.splitlines() if ln.startswith("[[")}
    assert rows['[["node","s1"]]'][-1] == "2"
    assert rows['[["node","s2"]]'][-1] == "1"
    assert rows['[["node","s3"]]'][-1] == "inf"
    assert "d_max = 2" in table
    assert sum(1 for ln in out.splitlines() if ln.strip().startswith("n") and "label=" in ln and "->" not in ln) == 6


def test_inspect_to_files(tmp_path):
    adv = tmp_path / "adv.jsonl"
    assert cli.main(["inspect-graph", MERGED, "--out-dir", str(tmp_path), "--advantages", str(adv), "--omega", "0.5"]) == 0
    assert (tmp_path / "graph.dot").read_text().startswith("digraph")
    assert "d_max = 2" in (tmp_path / "distances.txt").read_text()
    assert len(adv.read_text().splitlines()) == 7


def test_convert_roundtrip(tmp_path):
    out = tmp_path / "copy.jsonl"
    assert cli.main(["convert", MERGED, str(out)]) == 0
    assert out.read_text() == open(MERGED).read()


def test_probe_suites():
    assert cli.main(["probe", "--suite", "monotonicity", "--graphs", "500"]) == 0
    assert cli.main(["probe", "--suite", "distances", "--graphs", "50"]) == 0
    assert cli.main(["probe", "--suite", "variance", "--batches", "50"]) == 0


def test_probe_violation_exit_code(monkeypatch):
    monkeypatch.setattr(cli, "monotonicity_probe", lambda g, dm, p: [("fake",)])
    assert cli.main(["probe", "--suite", "monotonicity", "--graphs", "3"]) == 3


def test_config_file_and_flag_precedence(tmp_path):
    conf = tmp_path / "run.cfg"
    conf.write_text("# toy run\nenv = keydoor\niters = 2\ngroup_size = 4\ndynamic-sampling = true\n")
    ns = cli.build_parser().parse_args(["train", "--config", str(conf), "--iters", "3"])
    values = cli.resolve(ns)
    assert values["env"] == "keydoor" and values["iters"] == 3 and values["group-size"] == 4
    assert values["dynamic-sampling"] is True and values["lr"] == 2.0
    conf.write_text("warp = 9\n")
    assert cli.main(["train", "--config", str(conf), "--out-dir", str(tmp_path)]) == 2


def test_sweep(tmp_path):
    rc = cli.main(["train", "--iters", "2", "--sweep", "omega=0.1,0.5", "--out-dir", str(tmp_path)])
    assert rc == 0
    rows = list(csv.reader(open(tmp_path / "sweep.csv")))
    assert rows[0][0] == "omega" and [r[0] for r in rows[1:]] == ["0.1", "0.5"]
    assert (tmp_path / "omega=0.5" / "metrics.csv").exists()


def test_defaults():
    d = {k: v for k, (_, v) in cli.TRAIN_FLAGS.items()}
    assert (d["group-size"], d["rsucc"], d["kl-coef"], d["gigpo-lambda"], d["beta-g"], d["beta-e"]) == (8, 10.0, 0.01, 0.95, 1.0, 1.0)
    assert cli.build_config(dict(d, env="minisokoban")).credit.omega == 0.8
    assert cli.build_config(d).credit.omega == 0.1
