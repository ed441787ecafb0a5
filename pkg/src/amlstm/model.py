"""The dual-stream fusion classifier.

Two LSTMs read the video and audio sequences; per step their hidden states
are projected into a shared space, added, and squashed by g(x) = tanh(2x/3).
The fused steps are pooled over time (sum by default) and classified by a
three-layer batch-normalized MLP.  Each stream also feeds a bare linear
auxiliary head from its pooled hidden states; the auxiliary losses join the
main loss with weights alpha and beta.

Training minimizes a squared multi-label margin loss.  The squared hinge
form is the default; the degenerate no-hinge form is kept behind
``loss_form="literal"`` for comparison (it penalizes confident correct
predictions and is not expected to train well).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import ConfigError, DimensionError, FormatError, ParamStore, atomic_write_bytes
from .layers import (
    LSTM_PARAM_NAMES,
    LSTM_VARIANTS,
    batch_norm_backward,
    batch_norm_forward,
    dropout_backward,
    dropout_forward,
    g_activation,
    g_activation_backward,
    linear_backward,
    linear_forward,
    lstm_step,
    lstm_step_backward,
    relu_backward,
    relu_forward,
)

POOLING_MODES = ("sum", "mean")
LOSS_FORMS = ("hinge", "literal")


@dataclass
class ModelOutput:
    main_scores: np.ndarray
    aux_v_scores: np.ndarray
    aux_a_scores: np.ndarray


# --- losses -----------------------------------------------------------------


def margin_loss(scores, target: int, form: str = "hinge") -> float:
    """Squared multi-label margin loss of one score vector against a class id.

    form "hinge":   L = (1/n) sum_{i != t} max(0, 1 - (x_t - x_i))^2
    form "literal": L = (1/n) sum_i (1 - x_i + y_i)^2 with y one-hot
    """
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    loss, _ = _margin_loss_batch(scores[None, :], np.array([target]), form)
    return float(loss)


def _margin_loss_batch(scores: np.ndarray, targets: np.ndarray, form: str):
    """Batch-mean margin loss and its gradient w.r.t. the scores."""
    if form not in LOSS_FORMS:
        raise ConfigError(f"loss form must be one of {LOSS_FORMS}, got {form!r}")
    if scores.ndim != 2:
        raise DimensionError(f"scores must be (batch x classes), got {scores.shape}")
    b, n = scores.shape
    if n < 2:
        raise ConfigError(f"margin loss needs at least 2 classes, got {n}")
    targets = np.asarray(targets)
    if targets.shape != (b,):
        raise DimensionError(
            f"targets shape {targets.shape} does not match batch {b}"
        )
    if targets.min() < 0 or targets.max() >= n:
        raise ConfigError(f"target class out of range [0, {n})")

    rows = np.arange(b)
    if form == "hinge":
        target_scores = scores[rows, targets][:, None]
        m = np.maximum(0.0, 1.0 - (target_scores - scores))
        m[rows, targets] = 0.0
        loss = float((m * m).sum() / (n * b))
        dscores = (2.0 / (n * b)) * m
        dscores[rows, targets] = -dscores.sum(axis=1)
    else:
        onehot = np.zeros_like(scores)
        onehot[rows, targets] = 1.0
        u = 1.0 - scores + onehot
        loss = float((u * u).sum() / (n * b))
        dscores = (-2.0 / (n * b)) * u
    return loss, dscores


def combined_loss(out: ModelOutput, targets, alpha: float, beta: float,
                  form: str = "hinge"):
    """Total = main + alpha*aux_video + beta*aux_audio, each term the
    batch-averaged margin loss.  Returns (total, (main, aux_v, aux_a))."""
    total, parts, _ = _combined_loss_grads(out, targets, alpha, beta, form)
    return total, parts


def _combined_loss_grads(out: ModelOutput, targets, alpha, beta, form):
    targets = np.asarray(targets)
    l_main, d_main = _margin_loss_batch(out.main_scores, targets, form)
    l_v, d_v = _margin_loss_batch(out.aux_v_scores, targets, form)
    l_a, d_a = _margin_loss_batch(out.aux_a_scores, targets, form)
    total = l_main + alpha * l_v + beta * l_a
    return total, (l_main, l_v, l_a), (d_main, alpha * d_v, beta * d_a)


# --- fusion -----------------------------------------------------------------


def fuse_step(h_v: np.ndarray, h_a: np.ndarray, p_v: np.ndarray,
              p_a: np.ndarray) -> np.ndarray:
    """One fusion step: f = g(P_v h_v + P_a h_a)."""
    h_v = np.asarray(h_v, dtype=np.float64)
    h_a = np.asarray(h_a, dtype=np.float64)
    if p_v.shape[1] != h_v.shape[-1] or p_a.shape[1] != h_a.shape[-1]:
        raise DimensionError(
            f"fuse_step projections {p_v.shape}/{p_a.shape} do not match "
            f"hidden dims {h_v.shape[-1]}/{h_a.shape[-1]}"
        )
    if p_v.shape[0] != p_a.shape[0]:
        raise DimensionError(
            f"projections map to different fused dims: {p_v.shape[0]} vs {p_a.shape[0]}"
        )
    return g_activation(h_v @ p_v.T + h_a @ p_a.T)


# --- the model --------------------------------------------------------------


class FusionModel:
    """Parameter bundle plus forward/backward for the whole classifier.

    Every weight lives in ``self.params`` (a ParamStore); backward accumulates
    into the matching grad buffers, so callers zero the grads per step.
    """

    def __init__(self, d_v: int, d_a: int, hidden: int = 50, fused: int = 50,
                 classes: int = 10, mlp_hidden: tuple = (50, 50),
                 alpha: float = 0.2, beta: float = 0.2,
                 dropout_rate: float = 0.5, variant: str = "tanh-gate",
                 pooling: str = "sum", loss_form: str = "hinge",
                 bn_momentum: float = 0.1, bn_eps: float = 1e-5, rng=None):
        if variant not in LSTM_VARIANTS:
            raise ConfigError(f"unknown lstm variant {variant!r}")
        if pooling not in POOLING_MODES:
            raise ConfigError(f"pooling must be one of {POOLING_MODES}, got {pooling!r}")
        if loss_form not in LOSS_FORMS:
            raise ConfigError(f"loss_form must be one of {LOSS_FORMS}, got {loss_form!r}")
        if classes < 2:
            raise ConfigError(f"need at least 2 classes, got {classes}")
        if alpha < 0 or beta < 0:
            raise ConfigError("loss weights alpha/beta must be >= 0")
        if not 0.0 <= dropout_rate < 1.0:
            raise ConfigError(f"dropout_rate must be in [0, 1), got {dropout_rate}")
        mlp_hidden = tuple(int(w) for w in mlp_hidden)
        if len(mlp_hidden) != 2 or min(mlp_hidden) < 1:
            raise ConfigError("mlp_hidden must be two positive widths")
        for name, v in (("d_v", d_v), ("d_a", d_a), ("hidden", hidden), ("fused", fused)):
            if v < 1:
                raise ConfigError(f"{name} must be positive, got {v}")

        self.d_v, self.d_a = int(d_v), int(d_a)
        self.hidden, self.fused, self.classes = int(hidden), int(fused), int(classes)
        self.mlp_hidden = mlp_hidden
        self.alpha, self.beta = float(alpha), float(beta)
        self.dropout_rate = float(dropout_rate)
        self.variant = variant
        self.pooling = pooling
        self.loss_form = loss_form
        self.bn_momentum = float(bn_momentum)
        self.bn_eps = float(bn_eps)

        self.params = ParamStore()
        self._register(rng)

    # --- parameter registration ---------------------------------------

    def _init_weight(self, rng, name: str, shape: tuple) -> np.ndarray:
        # uniform in +/- 1/sqrt(fan_in); fan_in is the last axis
        if rng is None:
            return np.zeros(shape)
        bound = 1.0 / np.sqrt(shape[-1])
        return rng.child("init", name).random(shape) * (2.0 * bound) - bound

    def _register(self, rng) -> None:
        add = self.params.add
        for stream, d_in in (("video_lstm", self.d_v), ("audio_lstm", self.d_a)):
            for g in ("i", "f", "z", "o"):
                add(f"{stream}.W_{g}", self._init_weight(rng, f"{stream}.W_{g}",
                                                         (self.hidden, d_in)))
                add(f"{stream}.U_{g}", self._init_weight(rng, f"{stream}.U_{g}",
                                                         (self.hidden, self.hidden)))
                add(f"{stream}.b_{g}", np.zeros(self.hidden))
        for pname in ("P_v", "P_a"):
            if self.fused == self.hidden:
                # dims match: start from the identity the projection degenerates to
                init = np.eye(self.fused) if rng is not None else np.zeros((self.fused, self.hidden))
                add(pname, init)
            else:
                add(pname, self._init_weight(rng, pname, (self.fused, self.hidden)))
        widths = (self.fused,) + self.mlp_hidden + (self.classes,)
        for k in range(3):
            d_in, d_out = widths[k], widths[k + 1]
            add(f"mlp{k + 1}.w", self._init_weight(rng, f"mlp{k + 1}.w", (d_out, d_in)))
            # the batch statistics cancel a pre-norm bias exactly, so it can
            # never receive gradient; kept as a constant for the layer shape
            add(f"mlp{k + 1}.b", np.zeros(d_out), trainable=False)
            add(f"mlp{k + 1}.bn_gamma", np.ones(d_out))
            add(f"mlp{k + 1}.bn_shift", np.zeros(d_out))
            add(f"mlp{k + 1}.bn_mean", np.zeros(d_out), trainable=False)
            add(f"mlp{k + 1}.bn_var", np.ones(d_out), trainable=False)
        for head in ("aux_v", "aux_a"):
            add(f"{head}.w", self._init_weight(rng, f"{head}.w",
                                               (self.classes, self.hidden)))
            add(f"{head}.b", np.zeros(self.classes))

    def _lstm_params(self, stream: str) -> dict:
        return {n: self.params.value(f"{stream}.{n}") for n in LSTM_PARAM_NAMES}

    def _lstm_grads(self, stream: str) -> dict:
        return {n: self.params.grad(f"{stream}.{n}") for n in LSTM_PARAM_NAMES}

    # --- forward -------------------------------------------------------

    def _run_lstm(self, stream: str, x: np.ndarray):
        p = self._lstm_params(stream)
        b, t = x.shape[0], x.shape[1]
        h = np.zeros((b, self.hidden))
        c = np.zeros((b, self.hidden))
        traces = []
        h_seq = np.empty((b, t, self.hidden))
        for step in range(t):
            h, c, tr = lstm_step(x[:, step, :], h, c, p, self.variant)
            traces.append(tr)
            h_seq[:, step, :] = h
        return h_seq, traces

    def forward(self, video: np.ndarray, audio: np.ndarray, mode: str = "eval",
                rng=None, mute_audio: bool = False):
        """Run the full model on a batch.

        ``video`` is (batch, T, d_v) and ``audio`` (batch, T, d_a); a single
        (T, d) pair is promoted to a batch of one.  Returns
        (ModelOutput, trace); pass the trace to :meth:`backward`.  Train mode
        needs an rng when dropout_rate > 0 and a batch of >= 2 for the
        batch-normalized head.

        ``mute_audio`` treats the audio stream as absent: its hidden sequence
        is replaced by zeros before fusion and the audio auxiliary head, so
        the prediction rests on video alone.  Evaluation-only.
        """
        video = np.asarray(video, dtype=np.float64)
        audio = np.asarray(audio, dtype=np.float64)
        if video.ndim == 2 and audio.ndim == 2:
            video, audio = video[None], audio[None]
        if video.ndim != 3 or audio.ndim != 3:
            raise DimensionError(
                f"expected (batch, T, features) inputs, got {video.shape} and {audio.shape}"
            )
        if video.shape[0] != audio.shape[0] or video.shape[1] != audio.shape[1]:
            raise DimensionError(
                f"video {video.shape} and audio {audio.shape} disagree on batch or step count"
            )
        if video.shape[1] < 1:
            raise DimensionError("need at least one time step")
        if video.shape[2] != self.d_v or audio.shape[2] != self.d_a:
            raise DimensionError(
                f"feature dims ({video.shape[2]}, {audio.shape[2]}) do not match "
                f"model ({self.d_v}, {self.d_a})"
            )
        if mode not in ("train", "eval"):
            raise ConfigError(f"mode must be 'train' or 'eval', got {mode!r}")
        if mute_audio and mode == "train":
            raise ConfigError("mute_audio is an evaluation protocol, not a training mode")

        hv_seq, traces_v = self._run_lstm("video_lstm", video)
        ha_seq, traces_a = self._run_lstm("audio_lstm", audio)
        if mute_audio:
            ha_seq = np.zeros_like(ha_seq)

        drop_rng_v = rng.child("drop_v") if (rng is not None and mode == "train") else None
        drop_rng_a = rng.child("drop_a") if (rng is not None and mode == "train") else None
        hv_drop, drop_cache_v = dropout_forward(hv_seq, self.dropout_rate, mode, drop_rng_v)
        ha_drop, drop_cache_a = dropout_forward(ha_seq, self.dropout_rate, mode, drop_rng_a)

        p_v, p_a = self.params.value("P_v"), self.params.value("P_a")
        f_seq = g_activation(hv_drop @ p_v.T + ha_drop @ p_a.T)
        if self.pooling == "sum":
            pooled = f_seq.sum(axis=1)
            sv = hv_drop.sum(axis=1)
            sa = ha_drop.sum(axis=1)
        else:
            pooled = f_seq.mean(axis=1)
            sv = hv_drop.mean(axis=1)
            sa = ha_drop.mean(axis=1)

        x = pooled
        mlp_caches = []
        for k in range(3):
            w = self.params.value(f"mlp{k + 1}.w")
            bias = self.params.value(f"mlp{k + 1}.b")
            a, lin_cache = linear_forward(x, w, bias)
            n, bn_cache = batch_norm_forward(
                a,
                self.params.value(f"mlp{k + 1}.bn_gamma"),
                self.params.value(f"mlp{k + 1}.bn_shift"),
                self.params.value(f"mlp{k + 1}.bn_mean"),
                self.params.value(f"mlp{k + 1}.bn_var"),
                mode, self.bn_momentum, self.bn_eps,
            )
            if k < 2:
                x, relu_cache = relu_forward(n)
            else:
                x, relu_cache = n, None
            mlp_caches.append((lin_cache, bn_cache, relu_cache))
        main_scores = x

        aux_v_scores, aux_v_cache = linear_forward(
            sv, self.params.value("aux_v.w"), self.params.value("aux_v.b"))
        aux_a_scores, aux_a_cache = linear_forward(
            sa, self.params.value("aux_a.w"), self.params.value("aux_a.b"))

        out = ModelOutput(main_scores, aux_v_scores, aux_a_scores)
        trace = {
            "mode": mode,
            "T": video.shape[1],
            "traces_v": traces_v, "traces_a": traces_a,
            "drop_cache_v": drop_cache_v, "drop_cache_a": drop_cache_a,
            "hv_drop": hv_drop, "ha_drop": ha_drop,
            "f_seq": f_seq,
            "mlp_caches": mlp_caches,
            "aux_v_cache": aux_v_cache, "aux_a_cache": aux_a_cache,
            "out": out,
        }
        return out, trace

    # --- backward ------------------------------------------------------

    def backward(self, trace: dict, targets):
        """Backpropagate the combined loss for the forward pass in ``trace``.

        Accumulates parameter gradients into ``self.params`` grads and
        returns (total, (main, aux_v, aux_a)) for the batch.
        """
        if trace["mode"] != "train":
            raise ConfigError("backward needs a trace from forward(mode='train')")
        total, parts, (d_main, d_aux_v, d_aux_a) = _combined_loss_grads(
            trace["out"], targets, self.alpha, self.beta, self.loss_form)

        grads = self.params.grad
        t_steps = trace["T"]

        # auxiliary heads
        dsv, dw, db = linear_backward(d_aux_v, trace["aux_v_cache"])
        grads("aux_v.w")[...] += dw
        grads("aux_v.b")[...] += db
        dsa, dw, db = linear_backward(d_aux_a, trace["aux_a_cache"])
        grads("aux_a.w")[...] += dw
        grads("aux_a.b")[...] += db

        # main head, reversed
        dx = d_main
        for k in reversed(range(3)):
            lin_cache, bn_cache, relu_cache = trace["mlp_caches"][k]
            if relu_cache is not None:
                dx = relu_backward(dx, relu_cache)
            dn, dgamma, dshift = batch_norm_backward(dx, bn_cache)
            grads(f"mlp{k + 1}.bn_gamma")[...] += dgamma
            grads(f"mlp{k + 1}.bn_shift")[...] += dshift
            dx, dw, db = linear_backward(dn, lin_cache)
            grads(f"mlp{k + 1}.w")[...] += dw
            grads(f"mlp{k + 1}.b")[...] += db
        dpooled = dx

        # pooling spreads the gradient uniformly over time
        scale = 1.0 if self.pooling == "sum" else 1.0 / t_steps
        df_seq = np.repeat(dpooled[:, None, :] * scale, t_steps, axis=1)
        ds_seq = g_activation_backward(df_seq, trace["f_seq"])

        p_v, p_a = self.params.value("P_v"), self.params.value("P_a")
        hv_drop, ha_drop = trace["hv_drop"], trace["ha_drop"]
        grads("P_v")[...] += np.einsum("btf,bth->fh", ds_seq, hv_drop)
        grads("P_a")[...] += np.einsum("btf,bth->fh", ds_seq, ha_drop)
        dhv_drop = ds_seq @ p_v
        dha_drop = ds_seq @ p_a
        dhv_drop += dsv[:, None, :] * scale
        dha_drop += dsa[:, None, :] * scale

        dhv_seq = dropout_backward(dhv_drop, trace["drop_cache_v"])
        dha_seq = dropout_backward(dha_drop, trace["drop_cache_a"])

        self._bptt("video_lstm", trace["traces_v"], dhv_seq)
        self._bptt("audio_lstm", trace["traces_a"], dha_seq)
        return total, parts

    def _bptt(self, stream: str, traces: list, dh_seq: np.ndarray) -> None:
        p = self._lstm_params(stream)
        g = self._lstm_grads(stream)
        b = dh_seq.shape[0]
        dh_next = np.zeros((b, self.hidden))
        dc_next = np.zeros((b, self.hidden))
        for step in reversed(range(len(traces))):
            dh = dh_seq[:, step, :] + dh_next
            _, dh_next, dc_next = lstm_step_backward(dh, dc_next, traces[step], p, g)

    # --- persistence ----------------------------------------------------

    def hyperparams(self) -> dict:
        return {
            "d_v": self.d_v, "d_a": self.d_a,
            "hidden": self.hidden, "fused": self.fused, "classes": self.classes,
            "mlp_hidden": ",".join(str(w) for w in self.mlp_hidden),
            "alpha": repr(self.alpha), "beta": repr(self.beta),
            "dropout_rate": repr(self.dropout_rate),
            "variant": self.variant, "pooling": self.pooling,
            "loss_form": self.loss_form,
            "bn_momentum": repr(self.bn_momentum), "bn_eps": repr(self.bn_eps),
        }

    def save(self, path) -> None:
        """Checkpoint: key=value metadata lines, a '---' separator, then the
        ParamStore binary section."""
        lines = [f"{k}={v}" for k, v in self.hyperparams().items()]
        head = ("\n".join(lines) + "\n---\n").encode("utf-8")
        atomic_write_bytes(path, head + self.params.to_bytes())

    @classmethod
    def load(cls, path) -> "FusionModel":
        with open(path, "rb") as fh:
            blob = fh.read()
        sep = b"\n---\n"
        cut = blob.find(sep)
        if cut < 0:
            raise FormatError(f"{path}: missing metadata separator; not a model checkpoint")
        meta = {}
        for line in blob[:cut].decode("utf-8").splitlines():
            if line.strip():
                k, _, v = line.partition("=")
                meta[k.strip()] = v.strip()
        try:
            model = cls(
                d_v=int(meta["d_v"]), d_a=int(meta["d_a"]),
                hidden=int(meta["hidden"]), fused=int(meta["fused"]),
                classes=int(meta["classes"]),
                mlp_hidden=tuple(int(w) for w in meta["mlp_hidden"].split(",")),
                alpha=float(meta["alpha"]), beta=float(meta["beta"]),
                dropout_rate=float(meta["dropout_rate"]),
                variant=meta["variant"], pooling=meta["pooling"],
                loss_form=meta["loss_form"],
                bn_momentum=float(meta["bn_momentum"]), bn_eps=float(meta["bn_eps"]),
            )
        except KeyError as exc:
            raise FormatError(f"{path}: checkpoint metadata missing key {exc}") from None
        model.params.load_values(blob[cut + len(sep):])
        return model
