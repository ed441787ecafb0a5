"""Command-line entry point.

Subcommands cover the whole pipeline:

  gen-data    synthesize a bimodal feature container
  preprocess  split, (spectrogram), whiten, center, align, augment
  train       fit the fusion classifier, writing checkpoint/metrics/figures
  eval        score a checkpoint under audio-visual or video-only protocol
  gradcheck   finite-difference verification of all backward passes

Exit codes: 0 success, 1 validation/configuration error, 2 numeric error.
All primary outputs are written atomically and are byte-identical across
reruns with the same config; wall-clock values go to *.log files only.
"""

from __future__ import annotations

import argparse
import os
import sys

import numpy as np

from . import config as cfg_mod
from .core import ConfigError, FormatError, NumericError
from .data import Container, SynthConfig, generate, load_container, save_container, split
from .gradcheck import run_gradcheck
from .model import FusionModel
from .rng import Rng
from .signal_prep import (
    SpectrogramConfig,
    align_streams,
    augment_dataset,
    pca_whiten_fit,
    spectrogram,
)
from .training import TrainConfig, TrainingDiverged, build_model, evaluate, train


def _ensure_parent(path: str) -> None:
    parent = os.path.dirname(os.path.abspath(path))
    os.makedirs(parent, exist_ok=True)


def _echo_config(cfg: dict, path: str) -> None:
    from .core import atomic_write_text
    _ensure_parent(path)
    atomic_write_text(path, cfg_mod.dump(cfg))


def _stage_line(name: str, cfg: dict, keys: tuple) -> str:
    parts = [name]
    for key in keys:
        value = cfg[key]
        if isinstance(value, bool):
            value = int(value)
        parts.append(f"{key}={value}")
    return " ".join(parts)


def cmd_gen_data(cfg: dict) -> int:
    scfg = SynthConfig(
        classes=cfg["classes"], samples_per_class=cfg["samples_per_class"],
        steps=cfg["steps"], d_v=cfg["d_v"], d_a=cfg["d_a"],
        noise_sigma=cfg["noise_sigma"],
        audio_informativeness=cfg["audio_informativeness"], seed=cfg["seed"],
    )
    records = generate(scfg)
    container = Container(
        records=records, classes=scfg.classes, aligned=False,
        provenance=[_stage_line("generate", cfg, (
            "classes", "samples_per_class", "steps", "d_v", "d_a",
            "noise_sigma", "audio_informativeness", "seed"))],
    )
    _ensure_parent(cfg["out"])
    save_container(cfg["out"], container)
    _echo_config(cfg, cfg["out"] + ".config")
    print(f"wrote {len(records)} records ({scfg.classes} classes) to "
          f"{cfg['out']}.manifest/.bin")
    return 0


def _audio_is_waveform(records) -> bool:
    ranks = {rec.audio.ndim for rec in records}
    if ranks == {1}:
        return True
    if ranks == {2}:
        return False
    raise ConfigError("container mixes waveform (1-D) and feature (2-D) audio")


def cmd_preprocess(cfg: dict) -> int:
    container = load_container(cfg["data"])
    if not container.records:
        raise ConfigError(f"{cfg['data']}: container has no records")
    if container.aligned:
        raise ConfigError(f"{cfg['data']}: container is already aligned")
    provenance = list(container.provenance)

    fraction = cfg["train_fraction"]
    if not 0.0 < fraction <= 1.0:
        raise ConfigError(f"train_fraction must be in (0, 1], got {fraction}")
    if fraction < 1.0:
        train_recs, test_recs = split(container.records, fraction, cfg["seed"])
        provenance.append(_stage_line("split", cfg, ("train_fraction", "seed")))
    else:
        train_recs, test_recs = list(container.records), []

    if _audio_is_waveform(train_recs + test_recs):
        sp_cfg = SpectrogramConfig(
            sample_rate=cfg["sample_rate"], window_ms=cfg["window_ms"],
            hop_ms=cfg["hop_ms"], spectral_points=cfg["spectral_points"],
            log_compress=cfg["log_compress"],
        )
        for rec in train_recs + test_recs:
            rec.audio = spectrogram(rec.audio, sp_cfg)
        provenance.append(_stage_line("spectrogram", cfg, (
            "sample_rate", "window_ms", "hop_ms", "spectral_points", "log_compress")))

    for modality, k in (("video", cfg["pca_video"]), ("audio", cfg["pca_audio"])):
        if k <= 0:
            continue
        stacked = np.concatenate([getattr(r, modality) for r in train_recs], axis=0)
        pca = pca_whiten_fit(stacked, k, eps=cfg["pca_eps"])
        for rec in train_recs + test_recs:
            setattr(rec, modality, pca.transform(getattr(rec, modality)))
        provenance.append(f"pca_{modality} k={k} eps={cfg['pca_eps']!r}")

    if cfg["center"]:
        for modality in ("video", "audio"):
            stacked = np.concatenate([getattr(r, modality) for r in train_recs], axis=0)
            mean = stacked.mean(axis=0)
            for rec in train_recs + test_recs:
                setattr(rec, modality, getattr(rec, modality) - mean)
        provenance.append("center")

    for rec in train_recs + test_recs:
        rec.video, rec.audio = align_streams(rec.video, rec.audio, cfg["align_ratio"])
    provenance.append(_stage_line("align", cfg, ("align_ratio",)))

    test_provenance = list(provenance)
    if cfg["augment"]:
        train_recs = augment_dataset(
            train_recs, Rng(cfg["seed"]).child("augment"), cfg["max_shift"])
        provenance.append(_stage_line("augment", cfg, ("max_shift", "seed")))

    _ensure_parent(cfg["out"])
    save_container(cfg["out"] + "_train", Container(
        records=train_recs, classes=container.classes, aligned=True,
        provenance=provenance))
    message = f"wrote {len(train_recs)} train records to {cfg['out']}_train.*"
    if test_recs:
        save_container(cfg["out"] + "_test", Container(
            records=test_recs, classes=container.classes, aligned=True,
            provenance=test_provenance))
        message += f" and {len(test_recs)} test records to {cfg['out']}_test.*"
    _echo_config(cfg, cfg["out"] + ".config")
    print(message)
    return 0


def _train_config(cfg: dict) -> TrainConfig:
    return TrainConfig(
        epochs_max=cfg["epochs_max"], batch_size=cfg["batch_size"],
        learning_rate=cfg["learning_rate"], momentum=cfg["momentum"],
        alpha=cfg["alpha"], beta=cfg["beta"], patience=cfg["patience"],
        seed=cfg["seed"], variant=cfg["variant"], pooling=cfg["pooling"],
        dropout_rate=cfg["dropout_rate"], loss_form=cfg["loss_form"],
        grad_clip=cfg["grad_clip"], val_fraction=cfg["val_fraction"],
        hidden=cfg["hidden"], fused=cfg["fused"], mlp_hidden=cfg["mlp_hidden"],
        bn_momentum=cfg["bn_momentum"], bn_eps=cfg["bn_eps"],
    )


def _final_metrics(history: list) -> dict:
    if not history:
        return {}
    last = history[-1]
    return {key: last[key] for key in (
        "epoch", "total_loss", "main_loss", "aux_video_loss", "aux_audio_loss",
        "train_accuracy", "val_loss", "val_accuracy")}


def cmd_train(cfg: dict) -> int:
    from .report import (
        render_accuracy_curves, render_loss_curves, write_json,
        write_metrics_csv, write_run_log,
    )

    container = load_container(cfg["data"])
    if not container.records:
        raise ConfigError(f"{cfg['data']}: container has no records")
    val_records = None
    if cfg["val_data"]:
        val_records = load_container(cfg["val_data"]).records

    tcfg = _train_config(cfg)
    model = build_model(container.classes, container.d_v, container.d_a, tcfg)

    out = cfg["out"]
    os.makedirs(out, exist_ok=True)
    _echo_config(cfg, os.path.join(out, "config.resolved"))
    ckpt = os.path.join(out, "model.ckpt")

    try:
        result = train(model, container.records, val_records, tcfg)
    except TrainingDiverged as exc:
        model.save(ckpt)  # rolled back to the last finite epoch by train()
        write_metrics_csv(os.path.join(out, "metrics.csv"), exc.history)
        write_json(os.path.join(out, "summary.json"), {
            "status": "diverged", "message": str(exc),
            "epochs_run": len(exc.history),
            "alpha": tcfg.alpha, "beta": tcfg.beta,
            "final": _final_metrics(exc.history),
        })
        print(f"training diverged: {exc}", file=sys.stderr)
        return 2

    model.save(ckpt)
    write_metrics_csv(os.path.join(out, "metrics.csv"), result.history)
    decomposition_error = max(
        (abs(row["total_loss"]
             - (row["main_loss"] + tcfg.alpha * row["aux_video_loss"]
                + tcfg.beta * row["aux_audio_loss"]))
         for row in result.history), default=0.0)
    write_json(os.path.join(out, "summary.json"), {
        "status": "ok",
        "epochs_run": result.epochs_run,
        "best_epoch": result.best_epoch,
        "best_val_loss": result.best_val_loss,
        "stopped_early": result.stopped_early,
        "alpha": tcfg.alpha, "beta": tcfg.beta,
        "variant": tcfg.variant, "pooling": tcfg.pooling,
        "loss_form": tcfg.loss_form,
        "classes": container.classes,
        "d_v": container.d_v, "d_a": container.d_a,
        "decomposition_max_error": decomposition_error,
        "final": _final_metrics(result.history),
    })
    render_loss_curves(os.path.join(out, "losses.png"), result.history)
    render_accuracy_curves(os.path.join(out, "accuracy.png"), result.history)
    write_run_log(os.path.join(out, "train.log"), [
        f"epoch {row['epoch']}: {row['wall_time']:.3f} s"
        for row in result.history
    ] + [f"total: {sum(r['wall_time'] for r in result.history):.3f} s"])
    print(f"trained {result.epochs_run} epochs "
          f"(best val loss {result.best_val_loss:.6f} at epoch {result.best_epoch}); "
          f"artifacts in {out}")
    return 0


def cmd_eval(cfg: dict) -> int:
    from .report import render_confusion, write_json

    if not os.path.exists(cfg["checkpoint"]):
        raise FileNotFoundError(f"missing checkpoint: {cfg['checkpoint']}")
    model = FusionModel.load(cfg["checkpoint"])
    container = load_container(cfg["data"])
    result = evaluate(model, container.records, cfg["mode"])

    out = cfg["out"]
    os.makedirs(out, exist_ok=True)
    _echo_config(cfg, os.path.join(out, "config.resolved"))

    lines = [f"mode: {result.mode}"]
    if result.mode == "video-only":
        lines.append("audio stream muted for video-only evaluation")
        lines.append(f"aux video-head accuracy: {result.aux_v_accuracy:.4f}")
    lines.append(f"accuracy: {result.accuracy:.4f} over {result.samples} samples")
    lines.append("confusion (rows true, columns predicted):")
    for row in result.confusion:
        lines.append("  " + " ".join(f"{int(v):4d}" for v in row))
    print("\n".join(lines))

    write_json(os.path.join(out, "eval.json"), {
        "mode": result.mode,
        "audio_muted": result.mode == "video-only",
        "accuracy": result.accuracy,
        "aux_v_accuracy": result.aux_v_accuracy,
        "aux_a_accuracy": result.aux_a_accuracy,
        "samples": result.samples,
        "confusion": result.confusion.tolist(),
    })
    render_confusion(os.path.join(out, "confusion.png"), result.confusion, result.mode)
    return 0


def cmd_gradcheck(cfg: dict) -> int:
    lines, _, ok = run_gradcheck(
        seed=cfg["seed"], eps=cfg["eps"], tolerance=cfg["tolerance"],
        corrupt=cfg["corrupt"])
    print("\n".join(lines))
    if cfg["out"]:
        from .core import atomic_write_text
        os.makedirs(cfg["out"], exist_ok=True)
        atomic_write_text(os.path.join(cfg["out"], "gradcheck.txt"),
                          "\n".join(lines) + "\n")
        _echo_config(cfg, os.path.join(cfg["out"], "config.resolved"))
    return 0 if ok else 2


HANDLERS = {
    "gen-data": cmd_gen_data,
    "preprocess": cmd_preprocess,
    "train": cmd_train,
    "eval": cmd_eval,
    "gradcheck": cmd_gradcheck,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="amlstm",
        description="dual-stream audio-visual sequence classifier",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for command, schema in cfg_mod.SCHEMAS.items():
        p = sub.add_parser(command)
        p.add_argument("--config", default=None, help="key=value config file")
        for key, opt in schema.items():
            p.add_argument(f"--{key.replace('_', '-')}", dest=f"opt_{key}",
                           default=None, metavar="V", help=opt.help)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    command = args.command
    try:
        file_values = cfg_mod.load_kv_file(args.config) if args.config else {}
        overrides = {}
        for key in cfg_mod.SCHEMAS[command]:
            value = getattr(args, f"opt_{key}")
            if value is not None:
                overrides[key] = value
        cfg = cfg_mod.resolve(command, file_values, overrides)
        return HANDLERS[command](cfg)
    except (ConfigError, FormatError, FileNotFoundError, NotADirectoryError,
            IsADirectoryError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (NumericError, FloatingPointError) as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    raise SystemExit(main())
