import csv
import json

import pytest

from pathtracer import cli
from pathtracer.cli import EXIT_DATA, EXIT_INTERNAL, EXIT_OK, EXIT_USAGE, main

TINY = ["--addresses", "40", "--malicious-fraction", "0.25", "--horizon", "3", "--hidden", "8", "--heads", "2", "--epochs", "2"]


def run(*args):
    return main([*map(str, args)])


@pytest.fixture(scope="module")
def data_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("synth")
    assert run("synth", "--out", out, *TINY) == EXIT_OK
    return out


def data_flags(d):
    return ["--ledger", d / "ledger.jsonl", "--labels", d / "labels.csv"]


@pytest.fixture(scope="module")
def checkpoint(data_dir, tmp_path_factory):
    out = tmp_path_factory.mktemp("train")
    assert run("train", "--out", out, *data_flags(data_dir), *TINY) == EXIT_OK
    return out / "checkpoint.json"


def manifest(out):
    return json.loads((out / "manifest.json").read_text())


def test_synth_twice_is_byte_identical(tmp_path):
    for name in ("a", "b"):
        assert run("synth", "--out", tmp_path / name, *TINY) == EXIT_OK
    for f in ("ledger.jsonl", "labels.csv"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()
    m = manifest(tmp_path / "a")
    assert m["command"] == "synth" and m["config"]["addresses"] == 40
    assert all("/" not in v for v in m["outputs"].values())


def test_flags_override_config_file_over_defaults(tmp_path):
    conf = tmp_path / "conf.json"
    conf.write_text(json.dumps({"seed": 3, "theta": 0.05, "addresses": 40}))
    assert run("synth", "--out", tmp_path / "o", "--config", conf, "--seed", 4) == EXIT_OK
    cfg = manifest(tmp_path / "o")["config"]
    assert (cfg["seed"], cfg["theta"], cfg["addresses"], cfg["tau"]) == (4, 0.05, 40, 2.5)


def test_paths_and_features_outputs(data_dir, tmp_path):
    assert run("paths", "--out", tmp_path / "p", *data_flags(data_dir), *TINY) == EXIT_OK
    first = json.loads((tmp_path / "p" / "paths.jsonl").read_text().splitlines()[0])
    assert set(first) == {"direction", "anchor", "nodes"}
    assert run("features", "--out", tmp_path / "f", *data_flags(data_dir), *TINY) == EXIT_OK
    with open(tmp_path / "f" / "address_features.csv") as fh:
        rows = list(csv.reader(fh))
    assert len(rows) > 1 and len({len(r) for r in rows}) == 1


def test_train_writes_log_checkpoint_and_metrics(checkpoint):
    out = checkpoint.parent
    with open(out / "train_log.csv") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["epoch", "train_loss", "val_F1E", "val_F1C"]
    assert len(rows) == 3
    meta = json.loads(checkpoint.read_text())
    assert meta  # checkpoint is plain JSON
    m = manifest(out)
    assert m["command"] == "train" and "checkpoint" in m["outputs"]


def test_eval_writes_summary_row(data_dir, checkpoint, tmp_path):
    assert run("eval", "--out", tmp_path, *data_flags(data_dir), "--checkpoint", checkpoint, *TINY) == EXIT_OK
    rows = list(csv.reader(open(tmp_path / "metrics.csv")))
    assert rows[0] == ["timestep", "acc", "prec", "rec", "f1"]
    assert [r[0] for r in rows[1:4]] == ["1", "2", "3"]
    assert rows[-1][0] == "summary" and len(rows[-1]) >= 4


def test_monitor_replay_lines(data_dir, checkpoint, tmp_path):
    assert run("monitor", "--out", tmp_path, *data_flags(data_dir), "--checkpoint", checkpoint, *TINY) == EXIT_OK
    lines = [json.loads(x) for x in (tmp_path / "replay.jsonl").read_text().splitlines()]
    assert [x["t"] for x in lines] == [1, 2, 3]
    assert set(lines[0]) == {"t", "active", "removed", "flagged", "skip_ratio", "scores"}
    assert sum(manifest(tmp_path)["status"].values()) == 40


def test_bench_csv(data_dir, tmp_path):
    assert run("bench", "--out", tmp_path, *data_flags(data_dir), *TINY) == EXIT_OK
    rows = list(csv.DictReader(open(tmp_path / "bench.csv")))
    assert {r["method"] for r in rows} >= {"batch", "incremental"}
    assert all(float(r["seconds"]) >= 0 for r in rows)


@pytest.mark.parametrize(
    "argv",
    [[], ["nope"], ["synth", "--theta", "abc"], ["synth", "--theta", "2"], ["synth", "--heads", "3"], ["paths"]],
)
def test_usage_errors_exit_1(argv, tmp_path):
    assert run(*argv, *(["--out", tmp_path] if argv[:1] == ["synth"] else [])) == EXIT_USAGE


def test_unknown_config_key_is_usage_error(tmp_path):
    conf = tmp_path / "c.json"
    conf.write_text(json.dumps({"nonsense": 1}))
    assert run("synth", "--out", tmp_path, "--config", conf) == EXIT_USAGE


def test_missing_ledger_exits_2(tmp_path):
    assert run("paths", "--out", tmp_path, "--ledger", tmp_path / "none.jsonl", "--labels", tmp_path / "none.csv") == EXIT_DATA


def test_malformed_ledger_exits_2(data_dir, tmp_path):
    bad = tmp_path / "bad.jsonl"
    bad.write_text('{"tx_id": "x", "time": 1, "inputs": [], "outputs": [{"addr": "a", "amount": -5}], "fee": 0}\n')
    assert run("paths", "--out", tmp_path, "--ledger", bad, "--labels", data_dir / "labels.csv") == EXIT_DATA


def test_wrong_checkpoint_exits_2(data_dir, tmp_path):
    bogus = tmp_path / "ck.json"
    bogus.write_text("{}")
    assert run("eval", "--out", tmp_path, *data_flags(data_dir), "--checkpoint", bogus) == EXIT_DATA


def test_unexpected_failure_exits_3(monkeypatch, tmp_path):
    def boom(args, cfg):
        raise RuntimeError("boom")

    monkeypatch.setitem(cli.COMMANDS, "synth", boom)
    assert run("synth", "--out", tmp_path) == EXIT_INTERNAL
