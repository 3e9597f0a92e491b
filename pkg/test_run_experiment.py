import os

import pandas as pd
import pytest
import yaml

from run_experiment import main

TINY_DOCUMENT = {
    "seed": 3,
    "dataset": {
        "name": "tiny", "width": 16, "height": 16, "n_sequences": 4, "sequence_length": 8,
        "n_objects": 1, "radius": 3.0, "speed_min": 1.0, "speed_max": 2.0, "dt": 100,
    },
    "training": {
        "lr": 0.01, "batch_size": 2, "epochs": 1, "unroll": 7,
        "evaluator_epochs": 1, "evaluator_samples": 8, "max_horizon": 3,
    },
    "attention": {"thresholds": [0.5], "seeds": [0], "n_sequences": 2, "noise_level": 0.1},
}


@pytest.fixture
def tiny_config(tmp_path):
    document = dict(TINY_DOCUMENT, output={"root": str(tmp_path / "run")})
    path = tmp_path / "tiny.yaml"
    path.write_text(yaml.safe_dump(document))
    return str(path)


def test_shifted_ball_metrics_table(tmp_path):
    out = tmp_path / "metrics.csv"
    assert main(["metrics", "--scenario", "shifted-ball", "--out", str(out), "--seed", "0"]) == 0
    table = pd.read_csv(out)
    assert list(table.columns) == ["offset_pct", "metric", "value"]
    assert len(table) == 16
    assert set(table["metric"]) == {"MSS", "Esim", "Esim2", "Esim4"}


def test_gen_data_is_reproducible(tmp_path, tiny_config):
    first, second = tmp_path / "a", tmp_path / "b"
    assert main(["gen-data", "--config", tiny_config, "--out", str(first)]) == 0
    assert main(["gen-data", "--config", tiny_config, "--out", str(second)]) == 0
    names = sorted(os.listdir(first))
    assert names == sorted(os.listdir(second))
    assert "manifest.csv" in names
    for name in names:
        assert (first / name).read_bytes() == (second / name).read_bytes()


def test_missing_checkpoint_exits_with_one(tiny_config):
    assert main(["gen-data", "--config", tiny_config]) == 0
    assert main(["run-attention", "--config", tiny_config]) == 1


def test_bad_config_exits_with_one(tmp_path):
    path = tmp_path / "bad.yaml"
    path.write_text("dataset: {}\n")
    assert main(["gen-data", "--config", str(path)]) == 1


def test_dump_frames(tmp_path, tiny_config):
    data = tmp_path / "data"
    assert main(["gen-data", "--config", tiny_config, "--out", str(data)]) == 0
    out = tmp_path / "frames"
    assert main(["dump-frames", "--config", tiny_config, "--aer", str(data / "seq_00000.aer"),
                 "--prefix", "seq", "--out", str(out)]) == 0
    names = sorted(os.listdir(out))
    assert names[0] == "seq_00000.pgm"
    assert all(n.startswith("seq_") and n.endswith(".pgm") for n in names)


def test_pairwise_metrics_of_identical_files(tmp_path, tiny_config):
    data = tmp_path / "data"
    assert main(["gen-data", "--config", tiny_config, "--out", str(data)]) == 0
    aer = str(data / "seq_00000.aer")
    out = tmp_path / "pair.csv"
    assert main(["metrics", "--config", tiny_config, "--a", aer, "--b", aer, "--out", str(out)]) == 0
    table = pd.read_csv(out)
    assert list(table.columns) == ["frame_index", "metric", "value"]
    for _, group in table.groupby("frame_index"):
        assert group["metric"].tolist() == ["MSS", "Esim", "Esim2", "Esim4"]
    assert (table["value"] == 1.0).all()


def test_non_ascii_aer_exits_with_one(tmp_path, tiny_config):
    bad = tmp_path / "bad.aer"
    bad.write_bytes(b"# aer v1 W=16 H=16\n10,3,4,1\n1\xc3\xa9,3,4,1\n")
    out = tmp_path / "pair.csv"
    assert main(["metrics", "--config", tiny_config, "--a", str(bad), "--b", str(bad), "--out", str(out)]) == 1
    assert not out.exists()


def test_full_pipeline(tmp_path, tiny_config):
    root = tmp_path / "run"
    assert main(["gen-data", "--config", tiny_config]) == 0
    assert main(["train", "--target", "predictor", "--config", tiny_config]) == 0
    assert main(["train", "--target", "evaluator", "--config", tiny_config]) == 0
    checkpoints = root / "checkpoints"
    for name in ("predictor.ckpt", "predictor_loss.csv", "predictor_scores.csv",
                 "evaluator.ckpt", "evaluator_loss.csv", "evaluator_quality.csv"):
        assert (checkpoints / name).exists(), name

    assert main(["run-attention", "--config", tiny_config, "--threshold", "0.5"]) == 0
    summary = pd.read_csv(root / "attention" / "summary.csv")
    assert len(summary) == 2
    assert ((summary["gating_rate"] + summary["attend_rate"]) - 1.0).abs().max() < 1e-6
    assert (root / "attention" / "trace_000.csv").exists()
    assert (root / "attention" / "frames_000").is_dir()

    assert main(["compare", "--config", tiny_config]) == 0
    comparison = pd.read_csv(root / "comparison.csv")
    assert comparison["policy"].tolist() == ["predictive", "random", "periodic"]


def test_metrics_rerun_is_byte_identical(tmp_path):
    a, b = tmp_path / "a.csv", tmp_path / "b.csv"
    assert main(["metrics", "--scenario", "shifted-ball", "--out", str(a), "--seed", "1"]) == 0
    assert main(["metrics", "--scenario", "shifted-ball", "--out", str(b), "--seed", "1"]) == 0
    assert a.read_bytes() == b.read_bytes()
