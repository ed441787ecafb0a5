"""Release gate: one check per acceptance criterion.

Each criterion prints a single pass/fail line (plus the required comparison
table for the auxiliary-loss study).  Works under pytest (`pytest -s`) and
standalone (`python3 tests/test_acceptance.py`), exiting nonzero on failure.
"""

import dataclasses
import functools
import hashlib
import json
import os
import subprocess
import sys
import time

import numpy as np

from amlstm.data import SynthConfig, generate, split
from amlstm.gradcheck import run_gradcheck
from amlstm.rng import Rng
from amlstm.signal_prep import (
    SpectrogramConfig, align_streams, augment_dataset, pca_whiten_fit,
    shift_frames, spectrogram,
)
from amlstm.training import TrainConfig, build_model, evaluate, train


def _check(num, label, ok, detail=""):
    status = "PASS" if ok else "FAIL"
    tail = f"  {detail}" if detail else ""
    print(f"criterion {num} ({label}): {status}{tail}")
    assert ok, f"criterion {num} ({label}): {detail}"


def _aligned_synthetic(**kw):
    records = []
    for rec in generate(SynthConfig(**kw)):
        video, audio = align_streams(rec.video, rec.audio, 4)
        records.append(dataclasses.replace(rec, video=video, audio=audio))
    return records


def _train_config(**kw):
    base = dict(epochs_max=60, batch_size=16, learning_rate=0.05, momentum=0.9,
                alpha=0.2, beta=0.2, patience=10, seed=0, variant="tanh-gate",
                pooling="sum", dropout_rate=0.5, loss_form="hinge",
                grad_clip=5.0, val_fraction=0.1, hidden=16, fused=16,
                mlp_hidden=(16, 16), bn_momentum=0.1, bn_eps=1e-5)
    base.update(kw)
    return TrainConfig(**base)


# --- 1: gradient fidelity ----------------------------------------------------


def test_criterion_1_gradient_fidelity():
    start = time.monotonic()
    worst = 0.0
    all_ok = True
    for seed in range(5):
        _, block_errors, ok = run_gradcheck(seed=seed, eps=1e-5, tolerance=1e-4)
        worst = max(worst, max(block_errors.values()))
        all_ok = all_ok and ok
    elapsed = time.monotonic() - start
    _check(1, "gradient fidelity", all_ok and worst < 1e-4 and elapsed < 60.0,
           f"max_rel_err={worst:.3e} over 5 seeds, both output variants, "
           f"{elapsed:.1f}s")


# --- 2 + 3: shared overfitting run -------------------------------------------


@functools.lru_cache(maxsize=1)
def _overfit_run():
    data = _aligned_synthetic(classes=4, samples_per_class=10, steps=12,
                              d_v=8, d_a=4, noise_sigma=0.1,
                              audio_informativeness=1.0, seed=0)
    cfg = _train_config(epochs_max=300, patience=300, batch_size=8,
                        val_fraction=0.0)
    start = time.monotonic()
    result = train(build_model(4, 8, 16, cfg), data, None, cfg)
    return result, cfg, time.monotonic() - start


def test_criterion_2_loss_decomposition():
    result, cfg, _ = _overfit_run()
    worst = max(
        abs(row["total_loss"] - (row["main_loss"]
                                 + cfg.alpha * row["aux_video_loss"]
                                 + cfg.beta * row["aux_audio_loss"]))
        for row in result.history)
    _check(2, "loss decomposition", worst <= 1e-12,
           f"max |total - (main + 0.2 aux_v + 0.2 aux_a)| = {worst:.2e} "
           f"over {len(result.history)} epochs")


def test_criterion_3_overfit_capacity():
    result, _, elapsed = _overfit_run()
    first = next((row["epoch"] for row in result.history
                  if row["train_accuracy"] == 1.0), None)
    _check(3, "overfit capacity", first is not None and elapsed < 60.0,
           f"100% train accuracy at epoch {first} "
           f"(4x10 samples, {elapsed:.1f}s for {result.epochs_run} epochs)")


# --- 4: generalization smoke -------------------------------------------------


def test_criterion_4_generalization():
    accuracies = []
    for seed in (0, 1, 2):
        data = _aligned_synthetic(classes=4, samples_per_class=100, steps=12,
                                  d_v=8, d_a=4, noise_sigma=0.5,
                                  audio_informativeness=1.0, seed=seed)
        train_recs, test_recs = split(data, 0.8, seed)
        cfg = _train_config(seed=seed)
        result = train(build_model(4, 8, 16, cfg), train_recs, None, cfg)
        accuracies.append(evaluate(result.model, test_recs).accuracy)
    _check(4, "generalization", all(a >= 0.90 for a in accuracies),
           "test accuracy " + " ".join(f"{a:.3f}" for a in accuracies)
           + " on seeds 0,1,2 (chance 0.25)")


# --- 5: cross-modality trend -------------------------------------------------


def test_criterion_5_cross_modality():
    wins = 0
    pairs = []
    for seed in range(5):
        data = _aligned_synthetic(classes=4, samples_per_class=100, steps=12,
                                  d_v=8, d_a=4, noise_sigma=0.3,
                                  audio_informativeness=0.8, seed=seed)
        train_recs, test_recs = split(data, 0.8, seed)
        cfg = _train_config(seed=seed, dropout_rate=0.7)

        bimodal = train(build_model(4, 8, 16, cfg), train_recs, None, cfg)
        cross = evaluate(bimodal.model, test_recs, "video-only").accuracy

        # the single-modality baseline never sees audio, in train or test
        silent_train = [dataclasses.replace(r, audio=np.zeros_like(r.audio))
                        for r in train_recs]
        silent_test = [dataclasses.replace(r, audio=np.zeros_like(r.audio))
                       for r in test_recs]
        video_only = train(build_model(4, 8, 16, cfg), silent_train, None, cfg)
        baseline = evaluate(video_only.model, silent_test).accuracy

        wins += cross >= baseline
        pairs.append(f"{cross:.3f}/{baseline:.3f}")
    _check(5, "cross-modality trend", wins >= 4,
           f"bimodal-tested-video-only >= video-only-trained on {wins}/5 "
           f"paired seeds ({' '.join(pairs)})")


# --- 6: auxiliary-loss effect ------------------------------------------------


def test_criterion_6_auxiliary_loss_study():
    rows = []
    complete = True
    for seed in range(5):
        data = _aligned_synthetic(classes=4, samples_per_class=25, steps=12,
                                  d_v=8, d_a=4, noise_sigma=2.0,
                                  audio_informativeness=1.0, seed=seed)
        epochs = []
        for weight in (0.2, 0.0):
            cfg = _train_config(seed=seed, learning_rate=0.02, epochs_max=30,
                                patience=30, val_fraction=0.0,
                                alpha=weight, beta=weight)
            result = train(build_model(4, 8, 16, cfg), data, None, cfg)
            hit = next((row["epoch"] for row in result.history
                        if row["train_accuracy"] >= 0.95), None)
            complete = complete and result.epochs_run > 0
            epochs.append(hit)
        rows.append((seed, epochs[0], epochs[1]))
    print("epochs to 95% train accuracy (noise_sigma=2.0):")
    print("  seed  aux weight 0.2  aux weight 0.0")
    for seed, on, off in rows:
        fmt = lambda e: f"{e:d}" if e is not None else ">30"
        print(f"  {seed:4d}  {fmt(on):>14s}  {fmt(off):>14s}")
    faster = sum(1 for _, on, off in rows
                 if on is not None and (off is None or on <= off))
    _check(6, "auxiliary-loss study", complete,
           f"all 10 runs completed; aux-on at least as fast on {faster}/5 "
           "seeds (direction reported, not asserted)")


# --- 7: preprocessing properties ---------------------------------------------


def test_criterion_7_preprocessing():
    # frame-count formula against a walked-out oracle
    rng = np.random.default_rng(11)
    formula_ok = True
    for _ in range(100):
        rate = int(rng.integers(4000, 48001))
        window_ms = float(rng.uniform(5.0, 40.0))
        hop_ms = float(rng.uniform(2.0, window_ms))
        win = int(round(rate * window_ms / 1000.0))
        hop = max(1, int(round(rate * hop_ms / 1000.0)))
        n = int(rng.integers(win, win + 50 * hop))
        expected, start = 0, 0
        while start + win <= n:
            expected += 1
            start += hop
        cfg = SpectrogramConfig(sample_rate=rate, window_ms=window_ms,
                                hop_ms=hop_ms, spectral_points=win // 2 + 2)
        frames = spectrogram(np.ones(n), cfg).shape[0]
        formula_ok = formula_ok and frames == expected == (n - win) // hop + 1

    # 1 kHz sine at 16 kHz with 500-point FFT: 32 Hz bins, peak in bin 31
    t = np.arange(16000) / 16000.0
    spec = spectrogram(np.sin(2 * np.pi * 1000.0 * t), SpectrogramConfig())
    sine_ok = bool((spec.argmax(axis=1) == 31).all())

    # whitening drives the training covariance to the identity
    base = np.random.default_rng(3).normal(size=(2000, 6))
    mixed = base @ np.random.default_rng(4).normal(size=(6, 6)) + 5.0
    white = pca_whiten_fit(mixed, 6).transform(mixed)
    pca_err = float(np.abs(np.cov(white.T, ddof=1) - np.eye(6)).max())

    # augmentation: doubled count, |k| <= 10, one k shared by both streams
    records = _aligned_synthetic(classes=2, samples_per_class=20, steps=24,
                                 d_v=3, d_a=2, noise_sigma=0.5,
                                 audio_informativeness=1.0, seed=9)
    augmented = augment_dataset(records, Rng(9).child("augment"), 10)
    originals = {r.id: r for r in records}
    aug_ok = len(augmented) == 2 * len(records)
    for rec in augmented:
        if "~shift" not in rec.id:
            continue
        base_id, _, tail = rec.id.partition("~shift")
        k = int(tail)
        source = originals[base_id]
        aug_ok = aug_ok and 0 < abs(k) <= 10
        aug_ok = aug_ok and np.array_equal(rec.video, shift_frames(source.video, k))
        aug_ok = aug_ok and np.array_equal(rec.audio, shift_frames(source.audio, k))

    ok = formula_ok and sine_ok and pca_err < 1e-8 and aug_ok
    _check(7, "preprocessing properties", ok,
           f"frame formula 100/100, sine peak bin 31, "
           f"whitened cov err {pca_err:.1e}, augmentation doubled with shared k")


# --- 8: determinism ----------------------------------------------------------


def _run_cli(*args):
    proc = subprocess.run(
        [sys.executable, "-m", "amlstm", *[str(a) for a in args]],
        capture_output=True, text=True)
    if proc.returncode != 0:
        raise AssertionError(f"cli failed: {args[0]}: {proc.stderr}")


def _pipeline_hashes(root):
    raw, feats, run = root / "raw", root / "feats", root / "run"
    _run_cli("gen-data", "--out", raw, "--classes", 3,
             "--samples-per-class", 4, "--steps", 5, "--d-v", 4, "--d-a", 3,
             "--noise-sigma", 0.3, "--seed", 7)
    _run_cli("preprocess", "--data", raw, "--out", feats,
             "--train-fraction", 0.75, "--augment", 1, "--max-shift", 2,
             "--seed", 3)
    _run_cli("train", "--data", str(feats) + "_train", "--out", run,
             "--epochs-max", 3, "--patience", 3, "--batch-size", 6,
             "--hidden", 5, "--fused", 5, "--mlp-hidden", "5,5",
             "--val-fraction", 0, "--seed", 1)
    _run_cli("eval", "--checkpoint", run / "model.ckpt",
             "--data", str(feats) + "_test", "--out", root / "ev")
    _run_cli("gradcheck", "--seed", 0, "--out", root / "gc")
    hashes = {}
    for dirpath, _, names in os.walk(root):
        for name in names:
            if name == "train.log":  # wall times live here by design
                continue
            path = os.path.join(dirpath, name)
            with open(path, "rb") as fh:
                digest = hashlib.sha256(fh.read()).hexdigest()
            hashes[os.path.relpath(path, root)] = digest
    return hashes


def test_criterion_8_determinism(tmp_path):
    first = _pipeline_hashes(tmp_path)
    second = _pipeline_hashes(tmp_path)  # same paths, same config, same seeds
    differing = sorted(name for name in first
                       if second.get(name) != first[name])
    ok = not differing and set(first) == set(second) and len(first) >= 15
    _check(8, "determinism", ok,
           f"{len(first)} artifacts byte-identical across reruns"
           + (f"; differing: {', '.join(differing)}" if differing else ""))


CRITERIA = [
    test_criterion_1_gradient_fidelity,
    test_criterion_2_loss_decomposition,
    test_criterion_3_overfit_capacity,
    test_criterion_4_generalization,
    test_criterion_5_cross_modality,
    test_criterion_6_auxiliary_loss_study,
    test_criterion_7_preprocessing,
    test_criterion_8_determinism,
]


def main():
    import tempfile
    from pathlib import Path

    failures = 0
    for fn in CRITERIA:
        kwargs = {}
        if fn is test_criterion_8_determinism:
            tmp = tempfile.TemporaryDirectory()
            kwargs["tmp_path"] = Path(tmp.name)
        try:
            fn(**kwargs)
        except AssertionError:
            failures += 1
    print(f"acceptance: {len(CRITERIA) - failures}/{len(CRITERIA)} criteria pass")
    return 1 if failures else 0


if __name__ == "__main__":
    sys.exit(main())
