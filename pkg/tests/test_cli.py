"""End-to-end command-line workflows on a scaled-down configuration."""

import json

import numpy as np
import pytest

from gfr.cli import main
from gfr.config import load_config, save_config

from helpers import tiny_config


GEN_ARGS = ["--input-size", "32", "--num-classes", "2", "--count", "4", "--max-objects", "2"]


@pytest.fixture
def dataset(tmp_path):
    data = tmp_path / "data"
    assert main(["gen", "--out", str(data), "--seed", "1", *GEN_ARGS]) == 0
    return data


@pytest.fixture
def config_file(tmp_path):
    path = tmp_path / "run.txt"
    save_config(tiny_config(iterations=3), path)
    return path


@pytest.fixture
def run_dir(tmp_path, dataset, config_file):
    out = tmp_path / "run"
    code = main(["train", "--config", str(config_file), "--data", str(dataset), "--out", str(out)])
    assert code == 0
    return out


def test_gen_writes_dataset(dataset):
    assert (dataset / "annotations.jsonl").is_file()
    assert (dataset / "generate.txt").is_file()
    lines = (dataset / "annotations.jsonl").read_text().splitlines()
    assert len(lines) == 4
    for i in range(4):
        assert (dataset / f"image_{i:05d}.bin").is_file()


def test_gen_refuses_nonempty_dir(dataset):
    with pytest.raises(SystemExit):
        main(["gen", "--out", str(dataset), *GEN_ARGS])
    assert main(["gen", "--out", str(dataset), "--force", *GEN_ARGS]) == 0


def test_gen_rejects_bad_size_mix(tmp_path):
    with pytest.raises(SystemExit):
        main(["gen", "--out", str(tmp_path / "x"), "--size-mix", "tiny=1.0", *GEN_ARGS])
    with pytest.raises(SystemExit):
        main(["gen", "--out", str(tmp_path / "y"), "--size-mix", "small", *GEN_ARGS])


def test_train_outputs(run_dir, config_file):
    assert (run_dir / "checkpoint.bin").is_file()
    assert (run_dir / "config.txt").is_file()
    lines = (run_dir / "loss.csv").read_text().splitlines()
    assert lines[0] == "iteration,loss,lr"
    assert len(lines) == 1 + 3
    assert load_config(run_dir / "config.txt") == load_config(config_file)


def test_train_set_overrides(tmp_path, dataset, config_file):
    out = tmp_path / "run2"
    code = main(
        ["train", "--config", str(config_file), "--data", str(dataset), "--out", str(out), "--set", "iterations=2"]
    )
    assert code == 0
    assert len((out / "loss.csv").read_text().splitlines()) == 1 + 2
    assert load_config(out / "config.txt").iterations == 2


def test_train_rejects_unknown_key(tmp_path, dataset, config_file):
    with pytest.raises(SystemExit):
        main(
            ["train", "--config", str(config_file), "--data", str(dataset), "--out", str(tmp_path / "r"), "--set", "bogus=1"]
        )


def test_train_missing_dataset(tmp_path, config_file):
    with pytest.raises(SystemExit):
        main(["train", "--config", str(config_file), "--data", str(tmp_path / "nope"), "--out", str(tmp_path / "r")])


def test_train_nan_abort_writes_dump(tmp_path, dataset, config_file):
    out = tmp_path / "boom"
    with np.errstate(all="ignore"):
        code = main(
            [
                "train",
                "--config",
                str(config_file),
                "--data",
                str(dataset),
                "--out",
                str(out),
                "--set",
                "lr=1e8",
                "--set",
                "iterations=60",
                "--set",
                "weight_decay=0.0",
            ]
        )
    assert code == 3
    assert (out / "nan_dump.txt").is_file()
    assert "grad_absmax" in (out / "nan_dump.txt").read_text()
    assert not (out / "checkpoint.bin").exists()


def test_eval_outputs(tmp_path, dataset, run_dir, capsys):
    report_dir = tmp_path / "report"
    code = main(
        ["eval", "--checkpoint", str(run_dir / "checkpoint.bin"), "--data", str(dataset), "--report", str(report_dir)]
    )
    assert code == 0
    out = capsys.readouterr().out
    assert "mAP@0.5" in out
    report = json.loads((report_dir / "report.json").read_text())
    assert set(report) == {"num_images", "num_boxes", "per_class_ap", "map", "bucket_recall", "gate_means"}
    assert report["num_images"] == 4
    assert (report_dir / "detections.jsonl").is_file()
    for line in (report_dir / "detections.jsonl").read_text().splitlines():
        rec = json.loads(line)
        assert set(rec) == {"image_id", "class_id", "score", "box"}


def test_params_prints_table(capsys):
    code = main(["params", "--set", "input_size=32", "--set", "scale_sizes=4,2,1",
                 "--set", "channels_per_scale=6", "--set", "bottleneck_mid=4",
                 "--set", "backbone_channels=4,4,5,6,6", "--set", "num_classes=2"])
    assert code == 0
    out = capsys.readouterr().out
    lines = out.splitlines()
    assert lines[0] == "module,tensor,count"
    data = [l.split(",") for l in lines[1:] if l.split(",")[1] != "_total"]
    totals = {l.split(",")[0]: int(l.split(",")[2]) for l in lines[1:] if l.split(",")[1] == "_total"}
    assert totals["total"] == sum(int(c) for _, _, c in data)
    for module in {m for m, _, _ in data}:
        assert totals[module] == sum(int(c) for m, _, c in data if m == module)


def test_params_gate_toggle_changes_total(tmp_path):
    base_args = ["params", "--set", "input_size=32", "--set", "scale_sizes=4,2,1",
                 "--set", "channels_per_scale=6", "--set", "bottleneck_mid=4",
                 "--set", "backbone_channels=4,4,5,6,6", "--set", "num_classes=2"]
    with_g = tmp_path / "with.csv"
    without_g = tmp_path / "without.csv"
    assert main([*base_args, "--out", str(with_g)]) == 0
    assert main([*base_args, "--set", "use_gates=false", "--out", str(without_g)]) == 0

    def total(path):
        rows = [l.split(",") for l in path.read_text().splitlines()]
        return next(int(c) for m, n, c in rows[1:] if m == "total" and n == "_total")

    assert total(with_g) > total(without_g)


def test_diag_outputs(tmp_path, dataset, run_dir):
    out = tmp_path / "diag"
    code = main(["diag", "--checkpoint", str(run_dir / "checkpoint.bin"), "--data", str(dataset), "--out", str(out)])
    assert code == 0
    assert (out / "attention.csv").is_file()
    assert (out / "report.json").is_file()
    pngs = list(out.glob("gate_scale*_before_after.png"))
    assert len(pngs) == 3
    report = json.loads((out / "report.json").read_text())
    assert "mean_global_attention" in report
    assert "channel_attention_histograms" in report


def test_diag_refuses_ungated_checkpoint(tmp_path, dataset, config_file):
    out = tmp_path / "ungated"
    code = main(
        ["train", "--config", str(config_file), "--data", str(dataset), "--out", str(out),
         "--set", "use_gates=false", "--set", "iterations=1"]
    )
    assert code == 0
    with pytest.raises(SystemExit):
        main(["diag", "--checkpoint", str(out / "checkpoint.bin"), "--data", str(dataset), "--out", str(tmp_path / "d")])


def test_cli_rejects_unknown_command_and_flags(tmp_path):
    with pytest.raises(SystemExit):
        main([])
    with pytest.raises(SystemExit):
        main(["frobnicate"])
    with pytest.raises(SystemExit):
        main(["gen", "--out", str(tmp_path / "x"), "--bogus-flag"])
