"""Finite-difference verification of every hand-derived backward pass.

Each block builds a tiny scenario whose inputs and weights all live in a
ParamStore (so the checker also exercises input gradients), runs the
analytic backward once, and compares against central differences.  Losses
are random-weighted sums of the block outputs, which projects every output
element into the scalar without flat directions.
"""

from __future__ import annotations

import numpy as np

from .core import ParamStore, check_gradients
from .layers import (
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
    LSTM_PARAM_NAMES,
)
from .model import FusionModel, _margin_loss_batch, combined_loss
from .rng import Rng

DEFAULT_EPS = 1e-5
DEFAULT_TOLERANCE = 1e-4


def _weighted(out: np.ndarray, r: np.ndarray) -> float:
    return float((out * r).sum())


def _check_linear(seed: int, eps: float) -> float:
    rng = Rng(seed).child("gc_linear")
    ps = ParamStore()
    ps.add("x", rng.child("x").normal((3, 4)))
    ps.add("w", rng.child("w").normal((2, 4)))
    ps.add("b", rng.child("b").normal((2,)))
    r = rng.child("r").normal((3, 2))

    out, cache = linear_forward(ps.value("x"), ps.value("w"), ps.value("b"))
    dx, dw, db = linear_backward(r, cache)
    ps.grad("x")[...] = dx
    ps.grad("w")[...] = dw
    ps.grad("b")[...] = db

    def f(p):
        out, _ = linear_forward(p.value("x"), p.value("w"), p.value("b"))
        return _weighted(out, r)

    return check_gradients(f, ps, eps)


def _check_batch_norm(seed: int, eps: float) -> float:
    rng = Rng(seed).child("gc_bn")
    ps = ParamStore()
    ps.add("x", rng.child("x").normal((6, 3)))
    ps.add("gamma", 1.0 + 0.1 * rng.child("g").normal((3,)))
    ps.add("shift", rng.child("s").normal((3,)))
    r = rng.child("r").normal((6, 3))
    # running buffers are plain arrays here; train-mode output ignores them
    run_mean, run_var = np.zeros(3), np.ones(3)

    out, cache = batch_norm_forward(ps.value("x"), ps.value("gamma"),
                                    ps.value("shift"), run_mean, run_var, "train")
    dx, dgamma, dshift = batch_norm_backward(r, cache)
    ps.grad("x")[...] = dx
    ps.grad("gamma")[...] = dgamma
    ps.grad("shift")[...] = dshift

    def f(p):
        out, _ = batch_norm_forward(p.value("x"), p.value("gamma"),
                                    p.value("shift"), run_mean, run_var, "train")
        return _weighted(out, r)

    return check_gradients(f, ps, eps)


def _check_dropout(seed: int, eps: float) -> float:
    rng = Rng(seed).child("gc_drop")
    ps = ParamStore()
    ps.add("x", rng.child("x").normal((4, 5)))
    r = rng.child("r").normal((4, 5))
    rate = 0.4

    def mask_rng():
        # rebuilt per call so every finite-difference evaluation sees the
        # identical mask
        return Rng(seed).child("gc_drop", "mask")

    out, cache = dropout_forward(ps.value("x"), rate, "train", mask_rng())
    ps.grad("x")[...] = dropout_backward(r, cache)

    def f(p):
        out, _ = dropout_forward(p.value("x"), rate, "train", mask_rng())
        return _weighted(out, r)

    return check_gradients(f, ps, eps)


def _check_fusion(seed: int, eps: float) -> float:
    rng = Rng(seed).child("gc_fuse")
    ps = ParamStore()
    ps.add("P_v", rng.child("pv").normal((3, 2)))
    ps.add("P_a", rng.child("pa").normal((3, 2)))
    ps.add("h_v", rng.child("hv").normal((4, 2)))
    ps.add("h_a", rng.child("ha").normal((4, 2)))
    r = rng.child("r").normal((4, 3))

    h_v, h_a = ps.value("h_v"), ps.value("h_a")
    p_v, p_a = ps.value("P_v"), ps.value("P_a")
    fused = g_activation(h_v @ p_v.T + h_a @ p_a.T)
    ds = g_activation_backward(r, fused)
    ps.grad("P_v")[...] = ds.T @ h_v
    ps.grad("P_a")[...] = ds.T @ h_a
    ps.grad("h_v")[...] = ds @ p_v
    ps.grad("h_a")[...] = ds @ p_a

    def f(p):
        fused = g_activation(p.value("h_v") @ p.value("P_v").T
                             + p.value("h_a") @ p.value("P_a").T)
        return _weighted(fused, r)

    return check_gradients(f, ps, eps)


def _check_margin_loss(seed: int, eps: float, form: str) -> float:
    rng = Rng(seed).child("gc_margin")
    ps = ParamStore()
    ps.add("scores", rng.child("s").normal((3, 5)))
    targets = np.array([0, 3, 1])

    _, dscores = _margin_loss_batch(ps.value("scores"), targets, form)
    ps.grad("scores")[...] = dscores

    def f(p):
        loss, _ = _margin_loss_batch(p.value("scores"), targets, form)
        return loss

    return check_gradients(f, ps, eps)


def _lstm_store(rng: Rng, hidden: int, d_in: int, batch: int, t: int | None):
    ps = ParamStore()
    for name in LSTM_PARAM_NAMES:
        shape = ((hidden, d_in) if name.startswith("W")
                 else (hidden, hidden) if name.startswith("U") else (hidden,))
        ps.add(name, 0.5 * rng.child(name).normal(shape))
    if t is None:
        ps.add("x", rng.child("x").normal((batch, d_in)))
        ps.add("h_prev", rng.child("h0").normal((batch, hidden)))
        ps.add("c_prev", rng.child("c0").normal((batch, hidden)))
    else:
        ps.add("x", rng.child("x").normal((batch, t, d_in)))
    return ps


def _check_lstm_step(seed: int, eps: float, variant: str) -> float:
    rng = Rng(seed).child("gc_lstm_step")
    hidden, d_in, batch = 2, 3, 2
    ps = _lstm_store(rng, hidden, d_in, batch, t=None)
    r_h = rng.child("rh").normal((batch, hidden))
    r_c = rng.child("rc").normal((batch, hidden))

    p = {n: ps.value(n) for n in LSTM_PARAM_NAMES}
    grads = {n: ps.grad(n) for n in LSTM_PARAM_NAMES}
    _, _, trace = lstm_step(ps.value("x"), ps.value("h_prev"),
                            ps.value("c_prev"), p, variant)
    dx, dh_prev, dc_prev = lstm_step_backward(r_h, r_c, trace, p, grads)
    ps.grad("x")[...] = dx
    ps.grad("h_prev")[...] = dh_prev
    ps.grad("c_prev")[...] = dc_prev

    def f(pstore):
        pp = {n: pstore.value(n) for n in LSTM_PARAM_NAMES}
        h, c, _ = lstm_step(pstore.value("x"), pstore.value("h_prev"),
                            pstore.value("c_prev"), pp, variant)
        return _weighted(h, r_h) + _weighted(c, r_c)

    return check_gradients(f, ps, eps)


def _check_lstm_sequence(seed: int, eps: float, variant: str) -> float:
    rng = Rng(seed).child("gc_lstm_seq")
    hidden, d_in, batch, t_steps = 2, 3, 2, 5
    ps = _lstm_store(rng, hidden, d_in, batch, t=t_steps)
    r = rng.child("r").normal((batch, t_steps, hidden))

    def run(pstore):
        pp = {n: pstore.value(n) for n in LSTM_PARAM_NAMES}
        h = np.zeros((batch, hidden))
        c = np.zeros((batch, hidden))
        traces, h_all = [], []
        for step in range(t_steps):
            h, c, tr = lstm_step(pstore.value("x")[:, step, :], h, c, pp, variant)
            traces.append(tr)
            h_all.append(h)
        return np.stack(h_all, axis=1), traces

    h_seq, traces = run(ps)
    p = {n: ps.value(n) for n in LSTM_PARAM_NAMES}
    grads = {n: ps.grad(n) for n in LSTM_PARAM_NAMES}
    dh_next = np.zeros((batch, hidden))
    dc_next = np.zeros((batch, hidden))
    dx = np.zeros_like(ps.value("x"))
    for step in reversed(range(t_steps)):
        dh = r[:, step, :] + dh_next
        dx[:, step, :], dh_next, dc_next = lstm_step_backward(
            dh, dc_next, traces[step], p, grads)
    ps.grad("x")[...] = dx

    def f(pstore):
        h_seq, _ = run(pstore)
        return _weighted(h_seq, r)

    return check_gradients(f, ps, eps)


def _full_model(seed: int, variant: str):
    rng = Rng(seed).child("gc_model")
    model = FusionModel(
        d_v=2, d_a=2, hidden=2, fused=2, classes=2, mlp_hidden=(3, 3),
        alpha=0.2, beta=0.2, dropout_rate=0.3, variant=variant,
        rng=rng.child("init"),
    )
    # batch of 4: with only 2 samples the batch-norm outputs pin to +-1 and
    # the true gradients shrink below what central differences can resolve.
    # Targets deliberately imbalanced: balanced targets plus the zero batch
    # means enforced by the final batch-norm make the loss exactly flat in
    # the last bn_shift directions, which a finite difference cannot certify.
    video = rng.child("video").normal((4, 3, 2))
    audio = rng.child("audio").normal((4, 3, 2))
    targets = np.array([0, 0, 0, 1])
    mask_key = f"gc_model_mask_{variant}"

    def mask_rng():
        return Rng(seed).child(mask_key)

    return model, video, audio, targets, mask_rng


def _check_full_model(seed: int, eps: float, variant: str,
                      corrupt: bool = False) -> float:
    model, video, audio, targets, mask_rng = _full_model(seed, variant)
    model.params.zero_grads()
    _, trace = model.forward(video, audio, mode="train", rng=mask_rng())
    model.backward(trace, targets)
    if corrupt:
        # deliberately double the largest analytic grad entry; the checker
        # must flag roughly 0.5 relative error
        g = model.params.grad("mlp1.w")
        idx = np.unravel_index(np.argmax(np.abs(g)), g.shape)
        g[idx] *= 2.0

    def f(pstore):
        out, _ = model.forward(video, audio, mode="train", rng=mask_rng())
        total, _ = combined_loss(out, targets, model.alpha, model.beta,
                                 model.loss_form)
        return total

    return check_gradients(f, model.params, eps)


def run_gradcheck(seed: int = 0, eps: float = DEFAULT_EPS,
                  tolerance: float = DEFAULT_TOLERANCE, corrupt: bool = False):
    """Check every block; returns (report lines, per-block errors, all_ok)."""
    blocks = [
        ("linear", lambda: _check_linear(seed, eps)),
        ("batch-norm", lambda: _check_batch_norm(seed, eps)),
        ("dropout", lambda: _check_dropout(seed, eps)),
        ("fusion-projection", lambda: _check_fusion(seed, eps)),
        ("margin-loss[hinge]", lambda: _check_margin_loss(seed, eps, "hinge")),
        ("margin-loss[literal]", lambda: _check_margin_loss(seed, eps, "literal")),
    ]
    for variant in ("tanh-gate", "standard"):
        blocks.append((f"lstm-step[{variant}]",
                       lambda v=variant: _check_lstm_step(seed, eps, v)))
        blocks.append((f"lstm-sequence[{variant}]",
                       lambda v=variant: _check_lstm_sequence(seed, eps, v)))
    for variant in ("tanh-gate", "standard"):
        blocks.append((f"full-model[{variant}]",
                       lambda v=variant: _check_full_model(
                           seed, eps, v, corrupt=corrupt and v == "tanh-gate")))

    errors = {}
    lines = [f"gradient check: seed={seed} eps={eps:g} tolerance={tolerance:g}"]
    for name, runner in blocks:
        err = runner()
        errors[name] = err
        verdict = "pass" if err < tolerance else "FAIL"
        lines.append(f"{name:<26} max_rel_err {err:.3e}  {verdict}")
    ok = all(err < tolerance for err in errors.values())
    if ok:
        lines.append("result: all blocks pass")
    else:
        bad = ", ".join(n for n, e in errors.items() if e >= tolerance)
        lines.append(f"result: FAILED blocks: {bad}")
    return lines, errors, ok
