import json
import subprocess
import sys

import pytest

from normshift import datagen
from normshift.cli import main
from normshift.config import ConfigError, parse_run_config
from normshift.evalkit import read_metrics

SMALL = {"data": {"n_train": 100, "n_test": 50}, "train": {"batch_size": 25},
         "model": {"conv_channels": [4, 8], "fc_widths": [16]}}


def write_config(path, doc):
    path.write_text(json.dumps(doc))
    return str(path)


@pytest.fixture(scope="module")
def asr_run(tmp_path_factory):
    root = tmp_path_factory.mktemp("asr")
    doc = {**SMALL, "ada": {"enabled": True, "interval": 2, "aug_rounds": 1, "inner_steps": 2,
                            "step_size": 0.003},
           "eval": {"grid": ["corruption:contrast:5"]}}
    assert main(["train", "--config", write_config(root / "c.json", doc), "--out-dir", str(root / "run")]) == 0
    return root / "run"


@pytest.fixture(scope="module")
def bn_checkpoint(tmp_path_factory):
    root = tmp_path_factory.mktemp("bn")
    doc = {**SMALL, "norm": {"kind": "bn"}, "eval": {"enabled": False}}
    assert main(["train", "--config", write_config(root / "c.json", doc), "--out-dir", str(root / "run")]) == 0
    return root / "run" / "checkpoint.nsck"


def test_gen_data_writes_readable_file(tmp_path, capsys):
    out = tmp_path / "d.nsds"
    assert main(["gen-data", "--spec", "source", "--out", str(out), "--n", "30"]) == 0
    assert "wrote 30 images" in capsys.readouterr().out
    assert len(datagen.read_dataset(out)) == 30


def test_gen_data_is_idempotent(tmp_path):
    paths = [tmp_path / "a.nsds", tmp_path / "b.nsds"]
    for p in paths:
        assert main(["gen-data", "--spec", "corruption:gaussian_noise:3", "--out", str(p), "--n", "20",
                     "--seed", "4"]) == 0
    assert paths[0].read_bytes() == paths[1].read_bytes()


def test_gen_data_bad_spec_exits_2(tmp_path, capsys):
    assert main(["gen-data", "--spec", "corruption:box_blur:9", "--out", str(tmp_path / "x")]) == 2
    assert "level" in capsys.readouterr().err
    assert not (tmp_path / "x").exists()


def test_gen_data_unwritable_exits_1(tmp_path):
    assert main(["gen-data", "--spec", "source", "--out", str(tmp_path / "no" / "x.nsds"), "--n", "10"]) == 1


def test_usage_errors_exit_2(capsys):
    assert main([]) == 2
    assert main(["frobnicate"]) == 2
    assert main(["eval"]) == 2


def test_train_minimal_config_smoke(tmp_path):
    cfg = write_config(tmp_path / "c.json", {})
    assert main(["train", "--config", cfg, "--out-dir", str(tmp_path / "run")]) == 0
    run = tmp_path / "run"
    for name in ("checkpoint.nsck", "metrics.csv", "trajectory.csv", "resolved-config.json"):
        assert (run / name).exists()
    rows = read_metrics(run / "metrics.csv")
    assert len([r for r in rows if r["run_id"] == "run"]) == 31
    resolved = json.loads((run / "resolved-config.json").read_text())
    assert resolved["train"]["epochs"] == 1 and resolved["norm"]["kind"] == "asr"


def test_train_with_ada_logs_trajectory(asr_run, capsys):
    lines = (asr_run / "trajectory.csv").read_text().splitlines()
    assert lines[0].startswith("step,layer,lambda_mu") and len(lines) > 1
    assert lines[1].startswith("0,norm1,0.047426,0.047426")
    rows = read_metrics(asr_run / "metrics.csv")
    assert rows[-1]["domain"] == "contrast" and rows[-1]["level"] == "5"


def test_train_unknown_key_exits_2(tmp_path, capsys):
    cfg = write_config(tmp_path / "c.json", {"normm": {"kind": "bn"}})
    assert main(["train", "--config", cfg, "--out-dir", str(tmp_path / "run")]) == 2
    assert "normm" in capsys.readouterr().err


def test_train_missing_config_exits_1(tmp_path):
    assert main(["train", "--config", str(tmp_path / "none.json"), "--out-dir", str(tmp_path / "r")]) == 1


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_train_divergence_exits_3(tmp_path):
    cfg = write_config(tmp_path / "c.json", {**SMALL, "train": {"lr": 1e30, "total_steps": 20, "batch_size": 25},
                                             "norm": {"kind": "none"}, "eval": {"enabled": False}})
    assert main(["train", "--config", cfg, "--out-dir", str(tmp_path / "run")]) == 3
    assert (tmp_path / "run" / "checkpoint.nsck").exists()


def test_train_is_byte_deterministic(tmp_path):
    doc = {**SMALL, "eval": {"grid": ["source", "corruption:box_blur:2"]}}
    args = ["train", "--config", write_config(tmp_path / "c.json", doc), "--out-dir", str(tmp_path / "run")]
    files = ("checkpoint.nsck", "metrics.csv", "trajectory.csv", "resolved-config.json")
    assert main(args) == 0
    first = {f: (tmp_path / "run" / f).read_bytes() for f in files}
    assert main(args) == 0
    assert all((tmp_path / "run" / f).read_bytes() == first[f] for f in files)


def test_eval_full_grid(asr_run, tmp_path, capsys):
    out = tmp_path / "m.csv"
    args = ["eval", "--checkpoint", str(asr_run / "checkpoint.nsck"), "--out", str(out), "--n", "40"]
    assert main(args) == 0
    assert "31 domains" in capsys.readouterr().out
    assert len(out.read_text().splitlines()) == 32
    first = out.read_bytes()
    assert main(args) == 0
    assert out.read_bytes() == first


def test_eval_styles_and_bad_grid(asr_run, tmp_path):
    ckpt = str(asr_run / "checkpoint.nsck")
    assert main(["eval", "--checkpoint", ckpt, "--grid", "styles", "--out", str(tmp_path / "s.csv"),
                 "--n", "20"]) == 0
    assert [r["domain"] for r in read_metrics(tmp_path / "s.csv")] == [
        "source", "style:invert", "style:texture_bg", "style:dilate"]
    assert main(["eval", "--checkpoint", ckpt, "--grid", "corruption:fog:1", "--out", str(tmp_path / "x")]) == 2


def test_eval_missing_or_corrupt_checkpoint(tmp_path):
    assert main(["eval", "--checkpoint", str(tmp_path / "none.nsck")]) == 1
    bad = tmp_path / "bad.nsck"
    bad.write_bytes(b"garbage")
    assert main(["eval", "--checkpoint", str(bad)]) == 2


def test_gradcheck_exits_0(capsys):
    assert main(["gradcheck", "--seeds", "1"]) == 0
    out = capsys.readouterr().out
    assert "asr" in out and "max error" in out


def test_gradcheck_impossible_threshold_exits_3():
    assert main(["gradcheck", "--seeds", "1", "--threshold", "0"]) == 3


def test_dump_stats(asr_run, tmp_path):
    out = tmp_path / "stats.csv"
    assert main(["dump-stats", "--checkpoint", str(asr_run / "checkpoint.nsck"), "--out", str(out),
                 "--n", "12", "--spec", "corruption:contrast:3", "--layer", "norm2"]) == 0
    lines = out.read_text().splitlines()
    assert len(lines) == 13 and lines[1].startswith("corruption:contrast:3,")
    assert len(lines[0].split(",")) == 2 + 2 * 8


def test_dump_stats_on_bn_checkpoint_exits_2(bn_checkpoint, tmp_path):
    assert main(["dump-stats", "--checkpoint", str(bn_checkpoint), "--out", str(tmp_path / "s.csv")]) == 2
    assert main(["dump-stats", "--checkpoint", str(tmp_path / "none.nsck")]) == 1


def test_module_entry_point_honours_thread_variable(tmp_path):
    env = {"NORMSHIFT_THREADS": "x", "PATH": ""}
    proc = subprocess.run([sys.executable, "-m", "normshift", "gradcheck", "--seeds", "1"],
                          capture_output=True, text=True, env=env)
    assert proc.returncode == 2 and "NORMSHIFT_THREADS" in proc.stderr


def test_config_parsing_rules():
    cfg = parse_run_config({"model": {"conv_channels": [8, 8]}, "train": {"lr": 1}})
    assert cfg.model.conv_channels == (8, 8) and cfg.train.lr == 1.0 and cfg.ada_config is None
    assert parse_run_config({"ada": {"enabled": True}}).ada_config.interval == 1000
    with pytest.raises(ConfigError) as err:
        parse_run_config({"normm": {}, "train": {"epoch": 3, "lr": "fast"}})
    assert len(err.value.problems) == 3
    with pytest.raises(ConfigError):
        parse_run_config({"norm": {"kind": "bn"}, "train": {"batch_size": 1}})
    with pytest.raises(ConfigError):
        parse_run_config({"model": {"input_dims": [3, 2, 2]}})
    with pytest.raises(ConfigError):
        parse_run_config([])
