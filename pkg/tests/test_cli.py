import json
import math
import os

import numpy as np
import pytest

from chordmixer import cli, load_adding, load_checkpoint


def run(argv):
    return cli.main(argv)


@pytest.fixture(scope="session")
def trained(tmp_path_factory):
    """One tiny generate + train pipeline shared by the read-only CLI tests."""
    root = tmp_path_factory.mktemp("cli")
    data = root / "train.add1"
    assert run(["generate", "--lambda", "6", "--count", "64", "--seed", "3",
                "--out", str(data)]) == 0
    out = root / "run"
    assert run(["train", "--data", str(data), "--track-size", "2", "--hidden", "6",
                "--lr", "1e-3", "--batch-size", "4", "--epochs", "2", "--seed", "3",
                "--out", str(out)]) == 0
    return {"root": root, "data": str(data), "run": str(out),
            "checkpoint": str(out / "checkpoint.chmx")}


# ---------------------------------------------------------------- generate

def test_generate_is_deterministic(tmp_path):
    a, b = tmp_path / "a.add1", tmp_path / "b.add1"
    assert run(["generate", "--lambda", "8", "--count", "50", "--seed", "9",
                "--out", str(a)]) == 0
    assert run(["generate", "--lambda", "8", "--count", "50", "--seed", "9",
                "--out", str(b)]) == 0
    assert a.read_bytes() == b.read_bytes()
    assert (tmp_path / "a.lengths.png").stat().st_size > 0


def test_generate_median_tracks_lambda(tmp_path):
    out = tmp_path / "d.add1"
    assert run(["generate", "--lambda", "24", "--count", "600", "--seed", "1",
                "--out", str(out)]) == 0
    lengths = [inst.n for inst in load_adding(str(out))]
    # LogNormal(0.5, 0.7^2) has median e^0.5
    assert np.median(lengths) == pytest.approx(24 * math.exp(0.5), rel=0.1)


def test_generate_rejects_bad_arguments(tmp_path, capsys):
    assert run(["generate", "--lambda", "8", "--count", "0",
                "--out", str(tmp_path / "x.add1")]) == 2
    assert run(["generate", "--lambda", "1", "--count", "5",
                "--out", str(tmp_path / "x.add1")]) == 2
    assert run(["generate", "--count", "5", "--out", str(tmp_path / "x.add1")]) == 2
    assert "--lambda is required" in capsys.readouterr().err


def test_no_subcommand_prints_usage(capsys):
    assert run([]) == 2
    assert "usage" in capsys.readouterr().err.lower()


# ---------------------------------------------------------------- config files

def test_config_file_supplies_flags(tmp_path):
    config = tmp_path / "gen.cfg"
    config.write_text(
        "# adding problem corpus\n"
        "lambda = 8\n"
        "count = 30   # instances\n"
        f"out = {tmp_path / 'c.add1'}\n")
    assert run(["generate", "--config", str(config)]) == 0
    assert len(load_adding(str(tmp_path / "c.add1"))) == 30


def test_cli_flags_override_config(tmp_path):
    config = tmp_path / "gen.cfg"
    config.write_text(f"lambda = 8\ncount = 30\nout = {tmp_path / 'c.add1'}\n")
    assert run(["generate", "--config", str(config), "--count", "12"]) == 0
    assert len(load_adding(str(tmp_path / "c.add1"))) == 12


def test_config_rejects_unknown_and_malformed_keys(tmp_path, capsys):
    bad = tmp_path / "bad.cfg"
    bad.write_text("widgets = 3\n")
    assert run(["generate", "--config", str(bad)]) == 2
    assert "unknown config key" in capsys.readouterr().err

    bad.write_text("lambda 8\n")
    assert run(["generate", "--config", str(bad)]) == 2
    assert "expected 'key = value'" in capsys.readouterr().err

    bad.write_text("lambda = 8\nlambda = 9\n")
    assert run(["generate", "--config", str(bad)]) == 2
    assert "duplicate key" in capsys.readouterr().err

    bad.write_text("config = other.cfg\n")
    assert run(["generate", "--config", str(bad)]) == 2
    assert "cannot nest" in capsys.readouterr().err

    bad.write_text("count = many\n")
    assert run(["generate", "--config", str(bad)]) == 2
    assert "cannot parse" in capsys.readouterr().err

    assert run(["generate", "--config", str(tmp_path / "absent.cfg")]) == 2
    assert "config file not found" in capsys.readouterr().err


def test_config_parses_booleans_and_choices(tmp_path, capsys):
    config = tmp_path / "p.cfg"
    config.write_text("d = 4\nh = 3\nblocks = 2\ncls = yes\n")
    assert run(["analyze", "params", "--config", str(config)]) == 0
    assert "cls 4" in capsys.readouterr().out

    config.write_text("d = 4\nh = 3\nblocks = 2\ncls = maybe\n")
    assert run(["analyze", "params", "--config", str(config)]) == 2

    train_cfg = tmp_path / "t.cfg"
    train_cfg.write_text("task = nonsense\n")
    assert run(["train", "--config", str(train_cfg)]) == 2
    assert "is not one of" in capsys.readouterr().err


# ---------------------------------------------------------------- train / eval

def test_train_requires_a_data_source(capsys):
    assert run(["train", "--epochs", "1"]) == 2
    assert run(["train", "--data", "/nonexistent/file.add1"]) == 2


def test_train_writes_reports(trained):
    out = trained["run"]
    for name in ("checkpoint.chmx", "last.chmx", "trainer_state.bin",
                 "metrics.jsonl", "loss_curves.png",
                 "test_percentiles.csv", "test_percentiles.png"):
        assert os.path.getsize(os.path.join(out, name)) > 0


def test_eval_reruns_are_byte_identical(trained, tmp_path):
    args = ["eval", "--checkpoint", trained["checkpoint"], "--data", trained["data"],
            "--seed", "3"]
    assert run(args + ["--out", str(tmp_path / "e1")]) == 0
    assert run(args + ["--out", str(tmp_path / "e2")]) == 0
    first = (tmp_path / "e1" / "eval_metrics.json").read_bytes()
    assert first == (tmp_path / "e2" / "eval_metrics.json").read_bytes()
    assert (tmp_path / "e1" / "percentiles.csv").read_bytes() == \
        (tmp_path / "e2" / "percentiles.csv").read_bytes()


def test_eval_matches_training_test_row(trained, tmp_path):
    assert run(["eval", "--checkpoint", trained["checkpoint"], "--data", trained["data"],
                "--seed", "3", "--out", str(tmp_path / "e")]) == 0
    record = json.load(open(tmp_path / "e" / "eval_metrics.json"))
    logged = [json.loads(line) for line in open(os.path.join(trained["run"], "metrics.jsonl"))]
    test_row = [r for r in logged if r["split"] == "test"][-1]
    assert record["loss"] == test_row["loss"]
    assert record["value"] == test_row["value"]


def test_eval_split_all_uses_whole_dataset(trained, tmp_path):
    assert run(["eval", "--checkpoint", trained["checkpoint"], "--data", trained["data"],
                "--seed", "3", "--split", "all", "--out", str(tmp_path / "e")]) == 0
    record = json.load(open(tmp_path / "e" / "eval_metrics.json"))
    assert record["count"] == 64
    assert record["split"] == "all"


def test_eval_missing_inputs(trained, tmp_path, capsys):
    assert run(["eval", "--checkpoint", "/nope.chmx", "--data", trained["data"],
                "--out", str(tmp_path)]) == 2
    assert run(["eval", "--checkpoint", trained["checkpoint"], "--data", "/nope.add1",
                "--out", str(tmp_path)]) == 2
    assert "not found" in capsys.readouterr().err


def test_corrupt_dataset_is_a_runtime_failure(trained, tmp_path, capsys):
    bad = tmp_path / "bad.add1"
    bad.write_bytes(b"ADD1" + b"\x00" * 10)  # truncated record table
    assert run(["eval", "--checkpoint", trained["checkpoint"], "--data", str(bad),
                "--out", str(tmp_path / "e")]) == 1
    assert "failed" in capsys.readouterr().err


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_exits_one(trained, tmp_path, capsys):
    assert run(["train", "--data", trained["data"], "--track-size", "2", "--hidden",
                "4", "--lr", "1e200", "--batch-size", "4", "--epochs", "1",
                "--out", str(tmp_path / "boom")]) == 1
    assert "diverged" in capsys.readouterr().err


# ---------------------------------------------------------------- analyze

def test_analyze_reachability_report(tmp_path, capsys):
    assert run(["analyze", "reachability", "--n", "64", "--out", str(tmp_path)]) == 0
    rows = [line.split(",") for line in
            (tmp_path / "reachability.csv").read_text().strip().splitlines()[1:]]
    assert rows[0] == ["0", "1", "0"]
    assert rows[-1][1] == "64" and rows[-1][2] == "1"
    assert int(rows[-1][0]) <= 6
    assert (tmp_path / "reachability.png").stat().st_size > 0
    assert "full receptive field after 6 blocks" in capsys.readouterr().out


def test_analyze_reach_prob_report(tmp_path):
    assert run(["analyze", "reach-prob", "--n", "64", "--out", str(tmp_path)]) == 0
    stats = json.load(open(tmp_path / "reach_prob.json"))
    assert stats["n"] == 64 and stats["hops"] == 7  # ceil(log2 64 + 1)
    assert stats["mean"] == pytest.approx(1 / 64, abs=1e-15)
    rows = (tmp_path / "reach_prob.csv").read_text().strip().splitlines()
    assert len(rows) == 65
    probs = np.array([float(r.split(",")[1]) for r in rows[1:]])
    assert probs.sum() == pytest.approx(1.0, abs=1e-12)


def test_analyze_rank_report(tmp_path):
    assert run(["analyze", "rank", "--d", "4", "--n", "8", "--out", str(tmp_path)]) == 0
    report = json.load(open(tmp_path / "rank.json"))
    assert report == {"d": 4, "n": 8, "dn": 32, "is_permutation": True,
                      "w_rank": 4, "block_diag_rank": 32, "passed": True}
    assert (tmp_path / "rank.png").stat().st_size > 0


def test_analyze_rank_rejects_oversize(tmp_path, capsys):
    assert run(["analyze", "rank", "--d", "9", "--n", "8", "--out", str(tmp_path)]) == 2
    assert "d*n <= 64" in capsys.readouterr().err


def test_analyze_params_closed_form(tmp_path, capsys):
    assert run(["analyze", "params", "--d", "208", "--h", "128", "--blocks", "13"]) == 0
    assert "total 696592" in capsys.readouterr().out

    assert run(["analyze", "params", "--d", "8", "--h", "4", "--blocks", "2",
                "--vocab-size", "5", "--n-outputs", "3", "--cls",
                "--out", str(tmp_path)]) == 0
    payload = json.load(open(tmp_path / "params.json"))
    assert payload["per_block"] == 2 * 8 * 4 + 4 + 8
    assert payload["total"] == 2 * payload["per_block"] + 8 * 5 + 8 + 3 * 9

    assert run(["analyze", "params", "--d", "8", "--h", "4", "--blocks", "2",
                "--vocab-size", "5", "--in-channels", "2"]) == 2


# ---------------------------------------------------------------- activations

def test_export_activations_writes_every_block(trained, tmp_path):
    out = tmp_path / "acts"
    assert run(["export-activations", "--checkpoint", trained["checkpoint"],
                "--data", trained["data"], "--index", "0", "--out", str(out)]) == 0
    net = load_checkpoint(trained["checkpoint"])
    item = load_adding(trained["data"])[0]
    depth = net.depth_for_length(item.n)
    csvs = sorted(p for p in os.listdir(out) if p.endswith(".csv"))
    assert len(csvs) == depth + 1
    assert "embedded.csv" in csvs
    assert csvs[:depth] == [f"block_{i:02d}.csv" for i in range(1, depth + 1)]
    pngs = [p for p in os.listdir(out) if p.endswith(".png")]
    assert len(pngs) == depth + 1
    for name in csvs:
        matrix = np.loadtxt(out / name, delimiter=",", ndmin=2)
        assert matrix.shape == (net.d, item.n)


def test_export_activations_is_repeatable(trained, tmp_path):
    argv = ["export-activations", "--checkpoint", trained["checkpoint"],
            "--data", trained["data"], "--index", "2"]
    assert run(argv + ["--out", str(tmp_path / "a")]) == 0
    assert run(argv + ["--out", str(tmp_path / "b")]) == 0
    for name in os.listdir(tmp_path / "a"):
        if name.endswith(".csv"):
            assert (tmp_path / "a" / name).read_bytes() == \
                (tmp_path / "b" / name).read_bytes()


def test_export_activations_index_out_of_range(trained, tmp_path, capsys):
    assert run(["export-activations", "--checkpoint", trained["checkpoint"],
                "--data", trained["data"], "--index", "999",
                "--out", str(tmp_path)]) == 2
    assert "out of range" in capsys.readouterr().err


# ---------------------------------------------------------------- help

HELP_FLAGS = {
    ("generate",): ["--config", "--lambda", "--count", "--seed", "--out"],
    ("train",): ["--config", "--task", "--data", "--lambda", "--count", "--track-size",
                 "--hidden", "--dropout", "--lr", "--batch-size", "--epochs", "--seed",
                 "--eval-every", "--n-max", "--head", "--clip", "--eval-bins", "--out",
                 "--resume"],
    ("eval",): ["--config", "--checkpoint", "--data", "--split", "--seed",
                "--eval-bins", "--out"],
    ("analyze", "reachability"): ["--config", "--n", "--out"],
    ("analyze", "reach-prob"): ["--config", "--n", "--hops", "--out"],
    ("analyze", "rank"): ["--config", "--d", "--n", "--seed", "--out"],
    ("analyze", "params"): ["--config", "--d", "--h", "--blocks", "--vocab-size",
                            "--in-channels", "--n-outputs", "--cls", "--out"],
    ("export-activations",): ["--config", "--checkpoint", "--data", "--index", "--out"],
}


@pytest.mark.parametrize("command", sorted(HELP_FLAGS), ids="-".join)
def test_help_lists_every_flag(command, capsys):
    with pytest.raises(SystemExit) as info:
        run([*command, "--help"])
    assert info.value.code == 0
    text = capsys.readouterr().out
    for flag in HELP_FLAGS[command]:
        assert flag in text
