"""Run configuration: a flat key=value text file plus command-line overrides.

Every subcommand has a typed schema below.  Values resolve as
defaults < config file < flags, and the fully resolved result is echoed next
to the outputs of each run so any artifact can be traced back to its exact
configuration.  A config file may hold keys for several subcommands; each
command picks out its own and ignores the rest, but unknown keys are
rejected.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

from .core import ConfigError

_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


def parse_bool(text: str) -> bool:
    low = text.strip().lower()
    if low in _TRUE:
        return True
    if low in _FALSE:
        return False
    raise ValueError(f"not a boolean: {text!r}")


def parse_int_tuple(text: str) -> tuple:
    return tuple(int(part) for part in text.split(","))


@dataclass
class Opt:
    cast: object   # callable str -> value
    default: object  # None marks a required key
    help: str


def _obligatory(help_text: str) -> Opt:
    return Opt(str, None, help_text)


_TRAIN_KEYS = {
    "data": _obligatory("path base of the training feature container"),
    "val_data": Opt(str, "", "optional validation container (default: carve val_fraction)"),
    "out": _obligatory("output directory for checkpoint, metrics, figures"),
    "epochs_max": Opt(int, 300, "maximum training epochs"),
    "batch_size": Opt(int, 16, "mini-batch size (>= 2)"),
    "learning_rate": Opt(float, 0.05, "SGD learning rate"),
    "momentum": Opt(float, 0.9, "SGD momentum coefficient"),
    "alpha": Opt(float, 0.2, "video auxiliary loss weight"),
    "beta": Opt(float, 0.2, "audio auxiliary loss weight"),
    "patience": Opt(int, 20, "early-stopping patience in epochs"),
    "seed": Opt(int, 0, "root seed for init, shuffling, dropout"),
    "variant": Opt(str, "tanh-gate", "lstm output rule: tanh-gate or standard"),
    "pooling": Opt(str, "sum", "temporal pooling: sum or mean"),
    "dropout_rate": Opt(float, 0.5, "dropout on lstm hidden outputs"),
    "loss_form": Opt(str, "hinge", "margin loss form: hinge or literal"),
    "grad_clip": Opt(float, 5.0, "global gradient-norm clip (0 disables)"),
    "val_fraction": Opt(float, 0.1, "fraction carved for validation when val_data unset"),
    "hidden": Opt(int, 50, "lstm hidden width per stream"),
    "fused": Opt(int, 50, "fused projection width"),
    "mlp_hidden": Opt(parse_int_tuple, (50, 50), "comma-separated mlp hidden widths"),
    "bn_momentum": Opt(float, 0.1, "batch-norm running-stat momentum"),
    "bn_eps": Opt(float, 1e-5, "batch-norm variance epsilon"),
}

SCHEMAS: dict[str, dict[str, Opt]] = {
    "gen-data": {
        "out": _obligatory("output path base (writes <out>.manifest / <out>.bin)"),
        "classes": Opt(int, 4, "number of classes"),
        "samples_per_class": Opt(int, 10, "samples generated per class"),
        "steps": Opt(int, 12, "video steps per sample (audio gets 4x)"),
        "d_v": Opt(int, 8, "video feature dimension"),
        "d_a": Opt(int, 4, "audio feature dimension"),
        "noise_sigma": Opt(float, 0.1, "observation noise level"),
        "audio_informativeness": Opt(float, 1.0, "audio signal scale in [0, 1]"),
        "seed": Opt(int, 0, "generator seed"),
    },
    "preprocess": {
        "data": _obligatory("input container path base"),
        "out": _obligatory("output path base (writes <out>_train / <out>_test)"),
        "train_fraction": Opt(float, 0.8, "train share of the split; 1 keeps everything"),
        "seed": Opt(int, 0, "seed for split and augmentation draws"),
        "pca_video": Opt(int, 0, "video PCA-whitening components (0 skips)"),
        "pca_audio": Opt(int, 0, "audio PCA-whitening components (0 skips)"),
        "pca_eps": Opt(float, 1e-12, "whitening variance floor"),
        "center": Opt(parse_bool, True, "subtract the training mean"),
        "align_ratio": Opt(int, 4, "audio frames per video frame"),
        "augment": Opt(parse_bool, False, "add one shifted copy per training sample"),
        "max_shift": Opt(int, 10, "largest augmentation shift in frames"),
        "sample_rate": Opt(int, 16000, "waveform sample rate in Hz"),
        "window_ms": Opt(float, 20.0, "spectrogram window in ms"),
        "hop_ms": Opt(float, 10.0, "spectrogram hop in ms"),
        "spectral_points": Opt(int, 251, "one-sided spectral coefficients"),
        "log_compress": Opt(parse_bool, True, "log(1+m) magnitude compression"),
    },
    "train": _TRAIN_KEYS,
    "eval": {
        "checkpoint": _obligatory("model checkpoint path"),
        "data": _obligatory("evaluation container path base"),
        "out": _obligatory("output directory"),
        "mode": Opt(str, "audio-visual", "audio-visual or video-only"),
    },
    "gradcheck": {
        "seed": Opt(int, 0, "scenario seed"),
        "eps": Opt(float, 1e-5, "central-difference step"),
        "tolerance": Opt(float, 1e-4, "max relative error allowed"),
        "corrupt": Opt(parse_bool, False, "debug: double one analytic grad"),
        "out": Opt(str, "", "optional directory for the report file"),
    },
}

_ALL_KEYS = {key for schema in SCHEMAS.values() for key in schema}


def load_kv_file(path) -> dict[str, str]:
    """Parse a flat key=value file; '#' starts a comment, blanks ignored."""
    if not os.path.exists(path):
        raise FileNotFoundError(f"config file not found: {path}")
    values: dict[str, str] = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            key, sep, value = line.partition("=")
            if not sep:
                raise ConfigError(f"{path}:{lineno}: expected key=value, got {raw.strip()!r}")
            values[key.strip()] = value.strip()
    return values


def resolve(command: str, file_values: dict[str, str],
            overrides: dict[str, str]) -> dict:
    """Merge defaults, config-file values, and flag overrides into a typed dict."""
    schema = SCHEMAS[command]
    for key in file_values:
        if key not in _ALL_KEYS:
            raise ConfigError(f"unknown config key {key!r}")
    for key in overrides:
        if key not in schema:
            raise ConfigError(f"key {key!r} does not apply to command {command!r}")

    resolved = {}
    for key, opt in schema.items():
        raw = overrides.get(key, file_values.get(key))
        if raw is None:
            if opt.default is None:
                raise ConfigError(f"missing required config key {key!r}")
            resolved[key] = opt.default
            continue
        try:
            resolved[key] = opt.cast(raw)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"config key {key!r}: cannot parse {raw!r} ({exc})") from None
    return resolved


def dump(resolved: dict) -> str:
    """Render a resolved config as sorted key=value lines."""
    lines = []
    for key in sorted(resolved):
        value = resolved[key]
        if isinstance(value, bool):
            text = "1" if value else "0"
        elif isinstance(value, tuple):
            text = ",".join(str(v) for v in value)
        elif isinstance(value, float):
            text = repr(value)
        else:
            text = str(value)
        lines.append(f"{key}={text}")
    return "\n".join(lines) + "\n"
