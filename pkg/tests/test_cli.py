"""End-to-end checks of the command line: every subcommand is exercised
through a real subprocess so argument parsing, config resolution, exit
codes, and artifact layout are all tested exactly as a user hits them."""

import hashlib
import json
import os
import subprocess
import sys

import numpy as np
import pytest

from amlstm.data import Container, SampleRecord, load_container, save_container


def run_cli(*args, cwd=None):
    return subprocess.run(
        [sys.executable, "-m", "amlstm", *[str(a) for a in args]],
        capture_output=True, text=True, cwd=cwd)


def read_manifest(base):
    meta = {}
    with open(str(base) + ".manifest", "r", encoding="utf-8") as fh:
        for line in fh:
            key, _, value = line.strip().partition("=")
            meta[key] = value
    return meta


def file_hash(path):
    with open(path, "rb") as fh:
        return hashlib.sha256(fh.read()).hexdigest()


GEN_ARGS = ("--classes", 3, "--samples-per-class", 4, "--steps", 5,
            "--d-v", 4, "--d-a", 3, "--noise-sigma", 0.3, "--seed", 7)


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    """One full gen-data -> preprocess -> train -> eval -> gradcheck run."""
    root = tmp_path_factory.mktemp("pipeline")
    raw = root / "raw"
    feats = root / "feats"
    run = root / "run"

    steps = {}
    steps["gen"] = run_cli("gen-data", "--out", raw, *GEN_ARGS)
    raw_hashes = (file_hash(str(raw) + ".bin"), file_hash(str(raw) + ".manifest"))
    steps["prep"] = run_cli(
        "preprocess", "--data", raw, "--out", feats,
        "--train-fraction", 0.75, "--augment", 1, "--max-shift", 2, "--seed", 3)
    steps["train"] = run_cli(
        "train", "--data", str(feats) + "_train", "--out", run,
        "--epochs-max", 3, "--batch-size", 6, "--hidden", 5, "--fused", 5,
        "--mlp-hidden", "5,5", "--val-fraction", 0, "--patience", 3, "--seed", 1)
    steps["eval_av"] = run_cli(
        "eval", "--checkpoint", run / "model.ckpt",
        "--data", str(feats) + "_test", "--out", root / "eval_av")
    steps["eval_vo"] = run_cli(
        "eval", "--checkpoint", run / "model.ckpt",
        "--data", str(feats) + "_test", "--out", root / "eval_vo",
        "--mode", "video-only")
    steps["gradcheck"] = run_cli(
        "gradcheck", "--seed", 0, "--out", root / "gc")
    return root, steps, raw_hashes


def test_pipeline_exit_codes(pipeline):
    _, steps, _ = pipeline
    for name, proc in steps.items():
        assert proc.returncode == 0, f"{name}: {proc.stderr}"


def test_gen_data_artifacts(pipeline):
    root, _, _ = pipeline
    meta = read_manifest(root / "raw")
    assert meta["format"] and meta["records"] == "12"
    assert meta["classes"] == "3" and meta["aligned"] == "0"
    assert meta["d_v"] == "4" and meta["d_a"] == "3"
    assert os.path.exists(root / "raw.config")


def test_preprocess_split_augment_align(pipeline):
    root, _, _ = pipeline
    train = read_manifest(root / "feats_train")
    test = read_manifest(root / "feats_test")
    # 0.75 of 4 per class -> 9 train, augmentation doubles the train side
    assert train["records"] == "18" and test["records"] == "3"
    assert train["aligned"] == "1" and test["aligned"] == "1"
    # four audio frames fold into each aligned step
    assert train["d_a"] == str(4 * 3) and test["d_a"] == str(4 * 3)
    container = load_container(root / "feats_train")
    originals = [r for r in container.records if "~shift" not in r.id]
    shifted = [r for r in container.records if "~shift" in r.id]
    assert len(originals) == len(shifted) == 9


def test_preprocess_leaves_input_untouched(pipeline):
    root, _, raw_hashes = pipeline
    raw = root / "raw"
    assert file_hash(str(raw) + ".bin") == raw_hashes[0]
    assert file_hash(str(raw) + ".manifest") == raw_hashes[1]


def test_train_artifacts(pipeline):
    root, _, _ = pipeline
    run = root / "run"
    for name in ("model.ckpt", "metrics.csv", "summary.json", "losses.png",
                 "accuracy.png", "train.log", "config.resolved"):
        assert os.path.exists(run / name), name
    with open(run / "summary.json") as fh:
        summary = json.load(fh)
    assert summary["status"] == "ok"
    assert summary["epochs_run"] == 3
    assert summary["classes"] == 3
    assert summary["decomposition_max_error"] <= 1e-12
    with open(run / "metrics.csv") as fh:
        rows = fh.read().strip().splitlines()
    assert rows[0].startswith("epoch,") and len(rows) == 1 + 3
    # wall time belongs to the log, not the delimited metrics
    assert "wall_time" not in rows[0]
    with open(run / "train.log") as fh:
        assert "epoch 1:" in fh.read()


def test_config_echo_is_reloadable(pipeline):
    root, _, _ = pipeline
    with open(root / "run" / "config.resolved") as fh:
        lines = dict(line.strip().split("=", 1) for line in fh)
    assert lines["epochs_max"] == "3"
    assert lines["mlp_hidden"] == "5,5"
    assert lines["data"] == str(root / "feats_train")


def test_eval_artifacts(pipeline):
    root, steps, _ = pipeline
    with open(root / "eval_av" / "eval.json") as fh:
        av = json.load(fh)
    with open(root / "eval_vo" / "eval.json") as fh:
        vo = json.load(fh)
    assert av["mode"] == "audio-visual" and av["audio_muted"] is False
    assert vo["mode"] == "video-only" and vo["audio_muted"] is True
    assert av["samples"] == vo["samples"] == 3
    assert np.array(av["confusion"]).sum() == 3
    assert "audio stream muted" in steps["eval_vo"].stdout
    assert "audio stream muted" not in steps["eval_av"].stdout
    assert os.path.exists(root / "eval_av" / "confusion.png")


def test_gradcheck_report(pipeline):
    root, steps, _ = pipeline
    assert "result: all blocks pass" in steps["gradcheck"].stdout
    with open(root / "gc" / "gradcheck.txt") as fh:
        report = fh.read()
    assert "result: all blocks pass" in report
    assert "full-model" in report


def test_gen_data_rejects_bad_config(tmp_path):
    out = tmp_path / "bad"
    proc = run_cli("gen-data", "--out", out, "--classes", 0)
    assert proc.returncode == 1
    assert proc.stderr.startswith("error:")
    assert not os.path.exists(str(out) + ".manifest")
    assert not os.path.exists(str(out) + ".bin")


def test_unknown_config_key_rejected(tmp_path):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("classes=2\nturbo=1\n")
    proc = run_cli("gen-data", "--config", cfg, "--out", tmp_path / "x")
    assert proc.returncode == 1
    assert "turbo" in proc.stderr


def test_flag_overrides_config_file(tmp_path):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("# generation settings\nclasses=2\nsamples_per_class=2\n")
    out = tmp_path / "data"
    proc = run_cli("gen-data", "--config", cfg, "--out", out, "--classes", 3)
    assert proc.returncode == 0
    meta = read_manifest(out)
    assert meta["classes"] == "3" and meta["records"] == "6"
    with open(str(out) + ".config") as fh:
        assert "classes=3" in fh.read()


def test_gen_data_is_deterministic(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    assert run_cli("gen-data", "--out", a, *GEN_ARGS).returncode == 0
    assert run_cli("gen-data", "--out", b, *GEN_ARGS).returncode == 0
    assert file_hash(str(a) + ".bin") == file_hash(str(b) + ".bin")
    assert file_hash(str(a) + ".manifest") == file_hash(str(b) + ".manifest")


def test_preprocess_rejects_aligned_container(pipeline, tmp_path):
    root, _, _ = pipeline
    proc = run_cli("preprocess", "--data", str(root / "feats_train"),
                   "--out", tmp_path / "again")
    assert proc.returncode == 1
    assert "already aligned" in proc.stderr


def test_preprocess_spectrogram_and_pca_path(tmp_path):
    # waveform audio: 20 frames at the default 320/160 geometry
    rng = np.random.default_rng(5)
    records = [
        SampleRecord(id=f"s{i}", label=i % 2,
                     video=rng.normal(size=(5, 3)),
                     audio=rng.normal(size=320 + 19 * 160))
        for i in range(4)
    ]
    save_container(tmp_path / "wave", Container(records=records, classes=2))
    proc = run_cli(
        "preprocess", "--data", tmp_path / "wave", "--out", tmp_path / "spec",
        "--train-fraction", 1, "--spectral-points", 161, "--pca-audio", 6)
    assert proc.returncode == 0, proc.stderr
    meta = read_manifest(tmp_path / "spec_train")
    assert meta["records"] == "4"
    assert meta["d_a"] == str(4 * 6)  # spectrogram -> 6 whitened dims -> align
    container = load_container(tmp_path / "spec_train")
    assert container.records[0].video.shape == (5, 3)
    provenance = "\n".join(container.provenance)
    assert "spectrogram" in provenance and "pca_audio" in provenance


def test_eval_missing_checkpoint(pipeline, tmp_path):
    root, _, _ = pipeline
    proc = run_cli("eval", "--checkpoint", tmp_path / "nope.ckpt",
                   "--data", str(root / "feats_test"), "--out", tmp_path / "e")
    assert proc.returncode == 1
    assert "missing checkpoint" in proc.stderr


def test_eval_rejects_unknown_mode(pipeline, tmp_path):
    root, _, _ = pipeline
    proc = run_cli("eval", "--checkpoint", root / "run" / "model.ckpt",
                   "--data", str(root / "feats_test"), "--out", tmp_path / "e",
                   "--mode", "audio-only")
    assert proc.returncode == 1
    assert "mode" in proc.stderr


def test_gradcheck_corrupt_exits_two(tmp_path):
    proc = run_cli("gradcheck", "--corrupt", 1)
    assert proc.returncode == 2
    assert "FAILED" in proc.stdout


def test_train_unweighted_aux_still_reported(pipeline, tmp_path):
    root, _, _ = pipeline
    out = tmp_path / "noaux"
    proc = run_cli(
        "train", "--data", str(root / "feats_train"), "--out", out,
        "--alpha", 0, "--beta", 0, "--epochs-max", 2, "--patience", 2,
        "--batch-size", 6,
        "--hidden", 5, "--fused", 5, "--mlp-hidden", "5,5", "--val-fraction", 0)
    assert proc.returncode == 0, proc.stderr
    with open(out / "summary.json") as fh:
        summary = json.load(fh)
    assert summary["alpha"] == 0.0 and summary["beta"] == 0.0
    # the heads still train and report even when their weight is zero
    assert summary["final"]["aux_video_loss"] > 0.0
    assert summary["final"]["total_loss"] == summary["final"]["main_loss"]


def test_train_divergence_exits_two(pipeline, tmp_path):
    root, _, _ = pipeline
    out = tmp_path / "boom"
    proc = run_cli(
        "train", "--data", str(root / "feats_train"), "--out", out,
        "--learning-rate", 1e200, "--grad-clip", 0, "--epochs-max", 5,
        "--patience", 5,
        "--batch-size", 6, "--hidden", 5, "--fused", 5, "--mlp-hidden", "5,5",
        "--val-fraction", 0)
    assert proc.returncode == 2
    assert "diverged" in proc.stderr
    with open(out / "summary.json") as fh:
        assert json.load(fh)["status"] == "diverged"
    assert os.path.exists(out / "model.ckpt")  # rolled back, still loadable
