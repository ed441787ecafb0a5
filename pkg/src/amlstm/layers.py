"""Forward/backward passes for every building block.

All functions follow the same convention: ``*_forward`` returns
``(out, cache)`` and the matching ``*_backward`` consumes upstream gradients
plus the cache and returns input/parameter gradients.  Inputs are batch-major
(``batch x features``); weights keep the ``out x in`` orientation so a linear
map is ``x @ w.T + b``.  Backward passes are derived by hand, not traced.
"""

from __future__ import annotations

import numpy as np

from .core import ConfigError, DimensionError

LSTM_PARAM_NAMES = (
    "W_i", "W_f", "W_z", "W_o",
    "U_i", "U_f", "U_z", "U_o",
    "b_i", "b_f", "b_z", "b_o",
)

LSTM_VARIANTS = ("tanh-gate", "standard")


def sigmoid(x: np.ndarray) -> np.ndarray:
    """Numerically stable logistic function."""
    x = np.asarray(x, dtype=np.float64)
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def g_activation(x: np.ndarray) -> np.ndarray:
    """Fusion activation g(x) = tanh(2x/3)."""
    return np.tanh(2.0 * np.asarray(x, dtype=np.float64) / 3.0)


def g_activation_backward(dout: np.ndarray, g_out: np.ndarray) -> np.ndarray:
    # dg/dx = (2/3) (1 - g^2)
    return dout * (2.0 / 3.0) * (1.0 - g_out * g_out)


def relu_forward(x: np.ndarray):
    out = np.maximum(x, 0.0)
    return out, x


def relu_backward(dout: np.ndarray, cache) -> np.ndarray:
    x = cache
    return dout * (x > 0)


def linear_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray):
    """out = x @ w.T + b with w shaped (out_features, in_features)."""
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[1]:
        raise DimensionError(
            f"linear expects x (batch x in) against w (out x in); "
            f"got x {x.shape}, w {w.shape}"
        )
    out = x @ w.T + b
    return out, (x, w)


def linear_backward(dout: np.ndarray, cache):
    x, w = cache
    dx = dout @ w
    dw = dout.T @ x
    db = dout.sum(axis=0)
    return dx, dw, db


# --- LSTM cell --------------------------------------------------------------


def _check_lstm_shapes(x, h_prev, c_prev, p):
    hidden, input_dim = p["W_i"].shape
    if x.ndim != 2 or x.shape[1] != input_dim:
        raise DimensionError(
            f"lstm_step input has shape {x.shape}, expected (batch, {input_dim})"
        )
    for s, name in ((h_prev, "h_prev"), (c_prev, "c_prev")):
        if s.shape != (x.shape[0], hidden):
            raise DimensionError(
                f"lstm_step {name} has shape {s.shape}, "
                f"expected ({x.shape[0]}, {hidden})"
            )


def lstm_step(x: np.ndarray, h_prev: np.ndarray, c_prev: np.ndarray,
              p: dict, variant: str):
    """One LSTM cell step over a batch.

    Gates: i = sigmoid(W_i x + U_i h_prev + b_i), f and o likewise,
    z = tanh(W_z x + U_z h_prev + b_z), c = z*i + c_prev*f.  The two update
    rules for the hidden output:

      variant "tanh-gate": h = c * tanh(o)   (the default)
      variant "standard":  h = o * tanh(c)

    Returns (h, c, trace); the trace carries everything backward needs.
    """
    if variant not in LSTM_VARIANTS:
        raise ConfigError(f"unknown lstm variant {variant!r}; pick from {LSTM_VARIANTS}")
    _check_lstm_shapes(x, h_prev, c_prev, p)
    if not np.isfinite(x).all():
        raise ValueError("lstm_step input contains non-finite values")

    i = sigmoid(x @ p["W_i"].T + h_prev @ p["U_i"].T + p["b_i"])
    f = sigmoid(x @ p["W_f"].T + h_prev @ p["U_f"].T + p["b_f"])
    z = np.tanh(x @ p["W_z"].T + h_prev @ p["U_z"].T + p["b_z"])
    o = sigmoid(x @ p["W_o"].T + h_prev @ p["U_o"].T + p["b_o"])
    c = z * i + c_prev * f
    if variant == "tanh-gate":
        h = c * np.tanh(o)
    else:
        h = o * np.tanh(c)
    trace = {
        "x": x, "h_prev": h_prev, "c_prev": c_prev,
        "i": i, "f": f, "z": z, "o": o, "c": c, "h": h,
        "variant": variant,
    }
    return h, c, trace


def lstm_step_backward(dh: np.ndarray, dc_in: np.ndarray, trace: dict,
                       p: dict, grads: dict):
    """Backward through one cell step.

    ``dh``/``dc_in`` are the gradients flowing into h_t and c_t from above
    and from the next step.  Parameter gradients are accumulated (+=) into
    ``grads`` under the LSTM_PARAM_NAMES keys; returns (dx, dh_prev, dc_prev).
    """
    i, f, z, o = trace["i"], trace["f"], trace["z"], trace["o"]
    c, c_prev = trace["c"], trace["c_prev"]
    x, h_prev = trace["x"], trace["h_prev"]

    if trace["variant"] == "tanh-gate":
        to = np.tanh(o)
        dc = dc_in + dh * to
        do = dh * c * (1.0 - to * to)
    else:
        tc = np.tanh(c)
        do = dh * tc
        dc = dc_in + dh * o * (1.0 - tc * tc)

    di = dc * z
    df = dc * c_prev
    dz = dc * i
    dc_prev = dc * f

    # back through the gate nonlinearities to pre-activations
    da_i = di * i * (1.0 - i)
    da_f = df * f * (1.0 - f)
    da_z = dz * (1.0 - z * z)
    da_o = do * o * (1.0 - o)

    grads["W_i"] += da_i.T @ x
    grads["W_f"] += da_f.T @ x
    grads["W_z"] += da_z.T @ x
    grads["W_o"] += da_o.T @ x
    grads["U_i"] += da_i.T @ h_prev
    grads["U_f"] += da_f.T @ h_prev
    grads["U_z"] += da_z.T @ h_prev
    grads["U_o"] += da_o.T @ h_prev
    grads["b_i"] += da_i.sum(axis=0)
    grads["b_f"] += da_f.sum(axis=0)
    grads["b_z"] += da_z.sum(axis=0)
    grads["b_o"] += da_o.sum(axis=0)

    dx = da_i @ p["W_i"] + da_f @ p["W_f"] + da_z @ p["W_z"] + da_o @ p["W_o"]
    dh_prev = da_i @ p["U_i"] + da_f @ p["U_f"] + da_z @ p["U_z"] + da_o @ p["U_o"]
    return dx, dh_prev, dc_prev


# --- batch normalization ----------------------------------------------------


def batch_norm_forward(x: np.ndarray, gamma: np.ndarray, beta_shift: np.ndarray,
                       running_mean: np.ndarray, running_var: np.ndarray,
                       mode: str, momentum: float = 0.1, eps: float = 1e-5):
    """Batch normalization over the batch axis.

    Train mode normalizes by the biased batch statistics and updates the
    running buffers in place: running = (1 - momentum)*running + momentum*batch.
    Eval mode normalizes by the running buffers.  Train mode requires a batch
    of at least 2 (a singleton has no variance to normalize by).
    """
    if x.ndim != 2:
        raise DimensionError(f"batch_norm expects (batch x features), got {x.shape}")
    if not 0.0 < momentum <= 1.0:
        raise ConfigError(f"batch_norm momentum must be in (0, 1], got {momentum}")
    if eps <= 0:
        raise ConfigError(f"batch_norm eps must be positive, got {eps}")

    if mode == "train":
        if x.shape[0] < 2:
            raise ConfigError(
                f"batch_norm train mode needs batch >= 2, got {x.shape[0]}"
            )
        mu = x.mean(axis=0)
        var = x.var(axis=0)
        inv_std = 1.0 / np.sqrt(var + eps)
        xhat = (x - mu) * inv_std
        out = gamma * xhat + beta_shift
        running_mean *= 1.0 - momentum
        running_mean += momentum * mu
        running_var *= 1.0 - momentum
        running_var += momentum * var
        cache = (mode, x, mu, inv_std, xhat, gamma)
    elif mode == "eval":
        inv_std = 1.0 / np.sqrt(running_var + eps)
        xhat = (x - running_mean) * inv_std
        out = gamma * xhat + beta_shift
        cache = (mode, x, running_mean, inv_std, xhat, gamma)
    else:
        raise ConfigError(f"batch_norm mode must be 'train' or 'eval', got {mode!r}")
    return out, cache


def batch_norm_backward(dout: np.ndarray, cache):
    """Gradients of batch_norm_forward; returns (dx, dgamma, dbeta_shift)."""
    mode, x, mu, inv_std, xhat, gamma = cache
    dgamma = (dout * xhat).sum(axis=0)
    dbeta = dout.sum(axis=0)
    dxhat = dout * gamma
    if mode == "eval":
        # running stats are constants in eval mode
        return dxhat * inv_std, dgamma, dbeta
    n = x.shape[0]
    xc = x - mu
    dvar = (dxhat * xc).sum(axis=0) * (-0.5) * inv_std**3
    dmu = -(dxhat.sum(axis=0)) * inv_std + dvar * (-2.0 / n) * xc.sum(axis=0)
    dx = dxhat * inv_std + dvar * (2.0 / n) * xc + dmu / n
    return dx, dgamma, dbeta


# --- dropout ----------------------------------------------------------------


def dropout_forward(x: np.ndarray, rate: float, mode: str, rng=None):
    """Inverted dropout: each element kept with probability 1-rate and scaled
    by 1/(1-rate) at train time, so eval is an exact identity."""
    if not 0.0 <= rate < 1.0:
        raise ConfigError(f"dropout rate must be in [0, 1), got {rate}")
    if mode == "eval" or rate == 0.0:
        mask = np.ones_like(x)
        return x, (mask, 1.0)
    if mode != "train":
        raise ConfigError(f"dropout mode must be 'train' or 'eval', got {mode!r}")
    if rng is None:
        raise ConfigError("dropout in train mode with rate > 0 needs an rng")
    keep = 1.0 - rate
    mask = (rng.random(x.shape) >= rate).astype(np.float64)
    return x * mask / keep, (mask, keep)


def dropout_backward(dout: np.ndarray, cache) -> np.ndarray:
    mask, keep = cache
    return dout * mask / keep
