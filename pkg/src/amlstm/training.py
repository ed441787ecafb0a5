"""Mini-batch training loop and the two evaluation protocols.

Batches are grouped by sequence length so the recurrent streams unroll a
single T per forward call; the batch-normalized head therefore always sees
same-length groups.  A trailing batch of one sample is folded into the
previous batch because batch normalization cannot train on a singleton.

Optimizer: SGD with momentum and global-gradient-norm clipping.  Early
stopping watches validation loss; the best-validation parameter snapshot is
restored before returning, so the returned model is never worse than the
best epoch observed.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .core import ConfigError, NumericError
from .data import split
from .layers import LSTM_VARIANTS
from .model import FusionModel, ModelOutput, POOLING_MODES, LOSS_FORMS, combined_loss
from .rng import Rng

EVAL_MODES = ("audio-visual", "video-only")
EVAL_BATCH = 64

METRIC_FIELDS = (
    "epoch", "total_loss", "main_loss", "aux_video_loss", "aux_audio_loss",
    "train_accuracy", "val_loss", "val_accuracy",
)


@dataclass
class TrainConfig:
    epochs_max: int = 300
    batch_size: int = 16
    learning_rate: float = 0.05
    momentum: float = 0.9
    alpha: float = 0.2
    beta: float = 0.2
    patience: int = 20
    seed: int = 0
    variant: str = "tanh-gate"
    pooling: str = "sum"
    dropout_rate: float = 0.5
    loss_form: str = "hinge"
    grad_clip: float = 5.0
    val_fraction: float = 0.1
    hidden: int = 50
    fused: int = 50
    mlp_hidden: tuple = (50, 50)
    bn_momentum: float = 0.1
    bn_eps: float = 1e-5

    def __post_init__(self):
        if self.epochs_max < 1:
            raise ConfigError(f"epochs_max must be >= 1, got {self.epochs_max}")
        if self.batch_size < 2:
            raise ConfigError(
                f"batch_size must be >= 2 (batch normalization), got {self.batch_size}"
            )
        if not 1 <= self.patience <= self.epochs_max:
            raise ConfigError(
                f"patience must be in [1, epochs_max], got {self.patience}"
            )
        if self.learning_rate < 0:
            raise ConfigError(f"learning_rate must be >= 0, got {self.learning_rate}")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigError(f"momentum must be in [0, 1), got {self.momentum}")
        if self.grad_clip < 0:
            raise ConfigError(f"grad_clip must be >= 0 (0 disables), got {self.grad_clip}")
        if not 0.0 <= self.val_fraction < 1.0:
            raise ConfigError(f"val_fraction must be in [0, 1), got {self.val_fraction}")
        if self.variant not in LSTM_VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}")
        if self.pooling not in POOLING_MODES:
            raise ConfigError(f"unknown pooling {self.pooling!r}")
        if self.loss_form not in LOSS_FORMS:
            raise ConfigError(f"unknown loss_form {self.loss_form!r}")


@dataclass
class TrainResult:
    model: FusionModel
    history: list          # one dict per epoch, METRIC_FIELDS plus wall_time
    best_epoch: int
    best_val_loss: float
    epochs_run: int
    stopped_early: bool


class TrainingDiverged(NumericError):
    """Loss went non-finite; the model is restored to its last finite state."""

    def __init__(self, message: str, history: list):
        super().__init__(message)
        self.history = history


def build_model(classes: int, d_v: int, d_a: int, cfg: TrainConfig) -> FusionModel:
    return FusionModel(
        d_v=d_v, d_a=d_a, hidden=cfg.hidden, fused=cfg.fused, classes=classes,
        mlp_hidden=cfg.mlp_hidden, alpha=cfg.alpha, beta=cfg.beta,
        dropout_rate=cfg.dropout_rate, variant=cfg.variant,
        pooling=cfg.pooling, loss_form=cfg.loss_form,
        bn_momentum=cfg.bn_momentum, bn_eps=cfg.bn_eps,
        rng=Rng(cfg.seed).child("model_init"),
    )


def _check_records(records: list, what: str) -> None:
    if not records:
        raise ConfigError(f"{what} set is empty")
    for rec in records:
        if rec.video.ndim != 2 or rec.audio.ndim != 2:
            raise ConfigError(f"{what} record {rec.id!r} is not feature-shaped")
        if rec.video.shape[0] != rec.audio.shape[0]:
            raise ConfigError(
                f"{what} record {rec.id!r} has unaligned streams "
                f"({rec.video.shape[0]} vs {rec.audio.shape[0]} steps)"
            )


def _length_groups(records: list) -> dict[int, list[int]]:
    groups: dict[int, list[int]] = {}
    for idx, rec in enumerate(records):
        groups.setdefault(rec.video.shape[0], []).append(idx)
    return groups


def _epoch_batches(groups: dict, batch_size: int, rng: Rng) -> list[list[int]]:
    """Shuffled same-length batches; a trailing singleton joins the batch
    before it."""
    batches = []
    for t in sorted(groups):
        idxs = groups[t]
        order = [idxs[i] for i in rng.child("perm", t).permutation(len(idxs))]
        start = 0
        group_batches = []
        while start < len(order):
            group_batches.append(order[start : start + batch_size])
            start += batch_size
        if len(group_batches) >= 2 and len(group_batches[-1]) == 1:
            group_batches[-2].extend(group_batches.pop())
        if len(group_batches[-1]) == 1:
            raise ConfigError(
                f"length group T={t} has a single sample; batch normalization "
                f"needs training batches of >= 2"
            )
        batches.extend(group_batches)
    return batches


def _stack_batch(records: list, idxs: list[int]):
    video = np.stack([records[i].video for i in idxs])
    audio = np.stack([records[i].audio for i in idxs])
    targets = np.array([records[i].label for i in idxs])
    return video, audio, targets


def _global_grad_norm(params) -> float:
    total = 0.0
    for name in params.trainable_names():
        g = params.grad(name)
        total += float((g * g).sum())
    return float(np.sqrt(total))


def _eval_pass(model: FusionModel, records: list, mute_audio: bool):
    """Eval-mode scores for every record; returns (outputs, targets) with
    rows in record order."""
    n = len(records)
    main = np.empty((n, model.classes))
    aux_v = np.empty((n, model.classes))
    aux_a = np.empty((n, model.classes))
    targets = np.array([rec.label for rec in records])
    for t, idxs in sorted(_length_groups(records).items()):
        for start in range(0, len(idxs), EVAL_BATCH):
            chunk = idxs[start : start + EVAL_BATCH]
            video, audio, _ = _stack_batch(records, chunk)
            out, _ = model.forward(video, audio, mode="eval", mute_audio=mute_audio)
            main[chunk] = out.main_scores
            aux_v[chunk] = out.aux_v_scores
            aux_a[chunk] = out.aux_a_scores
    return ModelOutput(main, aux_v, aux_a), targets


@dataclass
class EvalResult:
    accuracy: float
    confusion: np.ndarray  # (classes, classes); rows true, columns predicted
    aux_v_accuracy: float
    aux_a_accuracy: float
    samples: int
    mode: str = "audio-visual"


def evaluate(model: FusionModel, records: list, mode: str = "audio-visual") -> EvalResult:
    """Accuracy and per-class confusion under one of the two protocols.

    "audio-visual" feeds both streams; "video-only" mutes the audio stream
    (its hidden sequence contributes nothing, so the audio auxiliary head
    degenerates to a constant).  The auxiliary-head accuracies are reported
    as secondary diagnostics either way.  Ties at argmax go to the lowest
    class index.
    """
    if mode not in EVAL_MODES:
        raise ConfigError(f"eval mode must be one of {EVAL_MODES}, got {mode!r}")
    _check_records(records, "eval")
    out, targets = _eval_pass(model, records, mute_audio=(mode == "video-only"))
    pred = np.argmax(out.main_scores, axis=1)
    confusion = np.zeros((model.classes, model.classes), dtype=np.int64)
    np.add.at(confusion, (targets, pred), 1)
    return EvalResult(
        accuracy=float((pred == targets).mean()),
        confusion=confusion,
        aux_v_accuracy=float((np.argmax(out.aux_v_scores, axis=1) == targets).mean()),
        aux_a_accuracy=float((np.argmax(out.aux_a_scores, axis=1) == targets).mean()),
        samples=len(records),
        mode=mode,
    )


def _val_loss_acc(model: FusionModel, records: list):
    out, targets = _eval_pass(model, records, mute_audio=False)
    total, _ = combined_loss(out, targets, model.alpha, model.beta, model.loss_form)
    acc = float((np.argmax(out.main_scores, axis=1) == targets).mean())
    return float(total), acc


def train(model: FusionModel, train_records: list, val_records: list | None,
          cfg: TrainConfig) -> TrainResult:
    """SGD-with-momentum training on the combined loss.

    Stops at epochs_max or when validation loss has not improved for
    ``patience`` epochs; the best-validation snapshot is restored before
    returning.  A non-finite loss raises TrainingDiverged with the model
    rolled back to the last finite epoch.
    """
    _check_records(train_records, "train")
    if val_records is None:
        if cfg.val_fraction > 0:
            train_records, val_records = split(
                train_records, 1.0 - cfg.val_fraction, cfg.seed)
        else:
            val_records = train_records
    else:
        _check_records(val_records, "validation")

    groups = _length_groups(train_records)
    params = model.params
    rng = Rng(cfg.seed).child("train_loop")
    velocity = {name: np.zeros_like(params.grad(name))
                for name in params.trainable_names()}
    n_total = len(train_records)

    history: list[dict] = []
    best_val = np.inf
    best_epoch = -1
    best_snap = params.snapshot()
    last_finite = params.snapshot()
    bad_epochs = 0
    stopped_early = False

    for epoch in range(1, cfg.epochs_max + 1):
        tic = time.perf_counter()
        erng = rng.child("epoch", epoch)
        sums = np.zeros(3)
        for bi, batch in enumerate(_epoch_batches(groups, cfg.batch_size, erng)):
            video, audio, targets = _stack_batch(train_records, batch)
            params.zero_grads()
            _, trace = model.forward(video, audio, mode="train",
                                     rng=erng.child("batch", bi))
            total, parts = model.backward(trace, targets)
            if not np.isfinite(total):
                params.restore(last_finite)
                raise TrainingDiverged(
                    f"non-finite loss at epoch {epoch}, batch {bi}; "
                    f"model rolled back to epoch {epoch - 1}", history)
            sums += np.array(parts) * len(batch)

            if cfg.grad_clip > 0:
                norm = _global_grad_norm(params)
                if norm > cfg.grad_clip:
                    scale = cfg.grad_clip / norm
                    for name in velocity:
                        params.grad(name)[...] *= scale
            for name, buf in velocity.items():
                buf *= cfg.momentum
                buf += params.grad(name)
                params.value(name)[...] -= cfg.learning_rate * buf

        main_l, aux_v_l, aux_a_l = (sums / n_total).tolist()
        # the reported total is composed from its parts, so the decomposition
        # identity holds exactly
        total_l = main_l + cfg.alpha * aux_v_l + cfg.beta * aux_a_l
        train_acc = evaluate(model, train_records, "audio-visual").accuracy
        val_loss, val_acc = _val_loss_acc(model, val_records)
        if not (np.isfinite(val_loss) and np.isfinite(total_l)):
            params.restore(last_finite)
            raise TrainingDiverged(
                f"non-finite epoch metrics at epoch {epoch}; "
                f"model rolled back to epoch {epoch - 1}", history)
        history.append({
            "epoch": epoch,
            "total_loss": total_l, "main_loss": main_l,
            "aux_video_loss": aux_v_l, "aux_audio_loss": aux_a_l,
            "train_accuracy": train_acc,
            "val_loss": val_loss, "val_accuracy": val_acc,
            "wall_time": time.perf_counter() - tic,
        })
        last_finite = params.snapshot()

        if val_loss < best_val:
            best_val = val_loss
            best_epoch = epoch
            best_snap = params.snapshot()
            bad_epochs = 0
        else:
            bad_epochs += 1
            if bad_epochs >= cfg.patience:
                stopped_early = True
                break

    params.restore(best_snap)
    return TrainResult(
        model=model, history=history, best_epoch=best_epoch,
        best_val_loss=float(best_val), epochs_run=len(history),
        stopped_early=stopped_early,
    )
