"""Float64 tensor helpers, the named-parameter registry, and the
finite-difference gradient checker.

Every trainable weight in this package lives in a :class:`ParamStore`; layer
backward passes accumulate into the matching grad buffers in place.  Arrays
are row-major float64 throughout so that central-difference checks at
``eps=1e-5`` are meaningful.
"""

from __future__ import annotations

import struct

import numpy as np

CHECKPOINT_MAGIC = b"AMLSTM01"


class DimensionError(ValueError):
    """Operand shapes do not conform."""


class NumericError(ArithmeticError):
    """A computation produced or encountered a non-finite value."""


class FormatError(ValueError):
    """A serialized artifact is malformed, truncated, or mislabeled."""


class ConfigError(ValueError):
    """A configuration value violates its contract."""


def as_tensor(data) -> np.ndarray:
    """Copy ``data`` into a C-ordered float64 array."""
    return np.array(data, dtype=np.float64, order="C")


def matmul(a, b) -> np.ndarray:
    """Matrix product of two rank-2 arrays with explicit shape validation."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2:
        raise DimensionError(
            f"matmul expects rank-2 operands, got shapes {a.shape} and {b.shape}"
        )
    if a.shape[1] != b.shape[0]:
        raise DimensionError(
            f"matmul inner dimensions disagree: {a.shape} x {b.shape}"
        )
    return a @ b


class ParamStore:
    """Ordered registry of named parameters with equally shaped grad buffers.

    Non-trainable entries (e.g. batch-norm running statistics) are serialized
    like any other value but are skipped by optimizers and by the gradient
    checker.
    """

    def __init__(self):
        self._values: dict[str, np.ndarray] = {}
        self._grads: dict[str, np.ndarray] = {}
        self._trainable: dict[str, bool] = {}

    def add(self, name: str, value, trainable: bool = True) -> np.ndarray:
        """Register ``value`` under ``name`` and return the stored array."""
        if name in self._values:
            raise ConfigError(f"duplicate parameter name: {name!r}")
        arr = as_tensor(value)
        self._values[name] = arr
        self._grads[name] = np.zeros_like(arr)
        self._trainable[name] = bool(trainable)
        return arr

    def __contains__(self, name: str) -> bool:
        return name in self._values

    def __len__(self) -> int:
        return len(self._values)

    def names(self) -> list[str]:
        return list(self._values)

    def trainable_names(self) -> list[str]:
        return [n for n, t in self._trainable.items() if t]

    def is_trainable(self, name: str) -> bool:
        return self._trainable[name]

    def value(self, name: str) -> np.ndarray:
        return self._values[name]

    def grad(self, name: str) -> np.ndarray:
        return self._grads[name]

    def zero_grads(self) -> None:
        for g in self._grads.values():
            g[...] = 0.0

    def n_elements(self) -> int:
        return sum(v.size for v in self._values.values())

    def snapshot(self) -> dict[str, np.ndarray]:
        """Deep copy of all values (used for best-epoch checkpointing)."""
        return {n: v.copy() for n, v in self._values.items()}

    def restore(self, snap: dict[str, np.ndarray]) -> None:
        if set(snap) != set(self._values):
            raise ValueError("snapshot entry names do not match this store")
        for n, v in snap.items():
            self._values[n][...] = v

    # --- serialization -----------------------------------------------------
    # File layout: magic "AMLSTM01", then per entry: u32 name length, UTF-8
    # name, u32 rank, u32 dims, raw little-endian float64 payload.  Entries
    # repeat until end of buffer.

    def to_bytes(self) -> bytes:
        chunks = [CHECKPOINT_MAGIC]
        for name, arr in self._values.items():
            encoded = name.encode("utf-8")
            chunks.append(struct.pack("<I", len(encoded)))
            chunks.append(encoded)
            chunks.append(struct.pack("<I", arr.ndim))
            chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
            chunks.append(arr.astype("<f8", copy=False).tobytes(order="C"))
        return b"".join(chunks)

    def save(self, path) -> None:
        atomic_write_bytes(path, self.to_bytes())

    @classmethod
    def from_bytes(cls, data: bytes) -> "ParamStore":
        store = cls()
        for name, arr in _iter_entries(data):
            if name in store:
                raise FormatError(f"duplicate entry {name!r} in checkpoint")
            store.add(name, arr)
        return store

    @classmethod
    def load(cls, path) -> "ParamStore":
        with open(path, "rb") as fh:
            return cls.from_bytes(fh.read())

    def load_values(self, data: bytes) -> None:
        """Fill existing entries from serialized bytes; names and shapes must
        match this store exactly."""
        seen = set()
        for name, arr in _iter_entries(data):
            if name not in self._values:
                raise FormatError(f"checkpoint entry {name!r} unknown to this model")
            if arr.shape != self._values[name].shape:
                raise FormatError(
                    f"checkpoint entry {name!r} has shape {arr.shape}, "
                    f"expected {self._values[name].shape}"
                )
            self._values[name][...] = arr
            seen.add(name)
        missing = set(self._values) - seen
        if missing:
            raise FormatError(f"checkpoint is missing entries: {sorted(missing)}")


def _iter_entries(data: bytes):
    if len(data) < len(CHECKPOINT_MAGIC) or data[: len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise FormatError("bad checkpoint magic; not a parameter file")
    offset = len(CHECKPOINT_MAGIC)
    total = len(data)

    def take(n: int, what: str) -> bytes:
        nonlocal offset
        if offset + n > total:
            raise FormatError(f"truncated checkpoint while reading {what}")
        out = data[offset : offset + n]
        offset += n
        return out

    while offset < total:
        (name_len,) = struct.unpack("<I", take(4, "name length"))
        if name_len > total - offset:
            raise FormatError("corrupted name length field in checkpoint")
        try:
            name = take(name_len, "name").decode("utf-8")
        except UnicodeDecodeError as exc:
            raise FormatError(f"undecodable entry name: {exc}") from None
        (rank,) = struct.unpack("<I", take(4, "rank"))
        if rank > 32:
            raise FormatError(f"implausible rank {rank} for entry {name!r}")
        dims = struct.unpack(f"<{rank}I", take(4 * rank, "dims"))
        count = 1
        for d in dims:
            count *= d
        payload = take(8 * count, f"payload of {name!r}")
        arr = np.frombuffer(payload, dtype="<f8").reshape(dims).astype(np.float64)
        yield name, arr


def atomic_write_bytes(path, data: bytes) -> None:
    """Write via a same-directory temp file and rename, so readers never see
    a partially written file."""
    import os

    path = os.fspath(path)
    tmp = f"{path}.tmp-{os.getpid()}"
    with open(tmp, "wb") as fh:
        fh.write(data)
        fh.flush()
        os.fsync(fh.fileno())
    os.replace(tmp, path)


def atomic_write_text(path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def check_gradients(f, params: ParamStore, eps: float = 1e-5) -> float:
    """Compare analytic grads stored in ``params`` against central differences
    of the scalar function ``f``.

    ``f(params)`` must be evaluable at the current values and at +/-eps
    single-element perturbations, and must not touch the grad buffers.  The
    analytic gradients are expected to be populated already by the backward
    pass under test.  Returns the max over all trainable elements of
    ``|analytic - numeric| / max(|analytic|, |numeric|, 1e-8)``.
    """
    per_entry = check_gradients_detailed(f, params, eps)
    return max(per_entry.values(), default=0.0)


def check_gradients_detailed(f, params: ParamStore, eps: float = 1e-5) -> dict[str, float]:
    """Per-entry worst relative error; see :func:`check_gradients`."""
    if eps <= 0:
        raise ConfigError("eps must be positive")
    worst: dict[str, float] = {}
    for name in params.trainable_names():
        value = params.value(name).reshape(-1)
        grad = params.grad(name).reshape(-1)
        err = 0.0
        for i in range(value.size):
            orig = value[i]
            value[i] = orig + eps
            f_plus = float(f(params))
            value[i] = orig - eps
            f_minus = float(f(params))
            value[i] = orig
            if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
                raise NumericError(
                    f"non-finite loss while perturbing {name!r} element {i}"
                )
            numeric = (f_plus - f_minus) / (2.0 * eps)
            analytic = grad[i]
            denom = max(abs(analytic), abs(numeric), 1e-8)
            err = max(err, abs(analytic - numeric) / denom)
        worst[name] = err
    return worst
