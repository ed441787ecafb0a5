"""Feature preparation: spectrograms, PCA whitening, centering, 4:1
audio-to-video alignment, and temporal shift augmentation.

The stage order used by the preprocessing command is
spectrogram -> whiten -> center -> align -> augment.  Statistics (PCA, mean)
are fit on the training split only and applied frozen to test data.
Augmentation runs after alignment so both modalities share one frame clock
and a single shift k keeps them synchronized.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .core import ConfigError, DimensionError


@dataclass
class SpectrogramConfig:
    sample_rate: int = 16000
    window_ms: float = 20.0
    hop_ms: float = 10.0
    spectral_points: int = 251
    log_compress: bool = True

    def __post_init__(self):
        if self.sample_rate <= 0:
            raise ConfigError(f"sample_rate must be positive, got {self.sample_rate}")
        if self.hop_ms <= 0 or self.window_ms <= 0:
            raise ConfigError("window_ms and hop_ms must be positive")
        if self.hop_ms > self.window_ms:
            raise ConfigError(
                f"hop_ms ({self.hop_ms}) must not exceed window_ms ({self.window_ms})"
            )
        if self.spectral_points < 2:
            raise ConfigError(f"spectral_points must be >= 2, got {self.spectral_points}")

    @property
    def window_samples(self) -> int:
        return int(round(self.sample_rate * self.window_ms / 1000.0))

    @property
    def hop_samples(self) -> int:
        return int(round(self.sample_rate * self.hop_ms / 1000.0))

    @property
    def fft_length(self) -> int:
        # spectral_points one-sided coefficients come from a length
        # 2*(spectral_points-1) transform
        return 2 * (self.spectral_points - 1)


def spectrogram(samples, cfg: SpectrogramConfig) -> np.ndarray:
    """Windowed one-sided magnitude spectrogram with log(1+m) compression.

    Frames are hop-spaced Hamming-windowed slices, zero-padded to the FFT
    length; frame count is floor((N - win)/hop) + 1.
    """
    samples = np.asarray(samples, dtype=np.float64).reshape(-1)
    win, hop = cfg.window_samples, cfg.hop_samples
    if win < 1 or hop < 1:
        raise ConfigError(
            f"window/hop of {cfg.window_ms}/{cfg.hop_ms} ms collapse to zero samples "
            f"at {cfg.sample_rate} Hz"
        )
    if cfg.fft_length < win:
        raise ConfigError(
            f"FFT length {cfg.fft_length} is shorter than the {win}-sample window; "
            f"raise spectral_points"
        )
    n = samples.shape[0]
    if n < win:
        raise DimensionError(
            f"signal of {n} samples is shorter than one {win}-sample window"
        )
    frames = (n - win) // hop + 1
    window = np.hamming(win)
    out = np.empty((frames, cfg.spectral_points))
    for k in range(frames):
        chunk = samples[k * hop : k * hop + win] * window
        out[k] = np.abs(np.fft.rfft(chunk, n=cfg.fft_length))
    if cfg.log_compress:
        out = np.log1p(out)
    return out


@dataclass
class PcaModel:
    """Whitening transform fit on training data.

    transform(x) = diag(1/sqrt(eigenvalues + eps)) @ components @ (x - mean),
    applied row-wise.
    """

    mean: np.ndarray
    components: np.ndarray   # (k, d), orthonormal rows
    eigenvalues: np.ndarray  # (k,), descending
    eps: float = 1e-12

    def transform(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.shape[-1] != self.mean.shape[0]:
            raise DimensionError(
                f"PCA transform expects feature dim {self.mean.shape[0]}, "
                f"got {x.shape[-1]}"
            )
        scale = 1.0 / np.sqrt(self.eigenvalues + self.eps)
        return ((x - self.mean) @ self.components.T) * scale


def pca_whiten_fit(x: np.ndarray, k: int, eps: float = 1e-12) -> PcaModel:
    """Fit PCA whitening to the rows of ``x`` keeping the top-k components."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2:
        raise DimensionError(f"PCA expects (samples x features), got {x.shape}")
    n, d = x.shape
    if n < 2:
        raise ConfigError(f"PCA needs at least 2 samples, got {n}")
    if not 1 <= k <= min(n - 1, d):
        raise ConfigError(
            f"component count k={k} must be in [1, min(N-1, d)] = "
            f"[1, {min(n - 1, d)}]"
        )
    mean = x.mean(axis=0)
    cov = np.atleast_2d(np.cov(x, rowvar=False, ddof=1))
    evals, evecs = np.linalg.eigh(cov)
    evals = evals[::-1].copy()
    evecs = evecs[:, ::-1]
    evals[evals < 0] = 0.0
    # effective rank: eigenvalues carrying more than float slack of the top one
    tol = evals[0] * 1e-10 if evals[0] > 0 else 0.0
    rank = int((evals > tol).sum())
    if k > rank:
        raise ConfigError(
            f"requested k={k} components but the data has effective rank {rank}"
        )
    return PcaModel(mean=mean, components=evecs[:, :k].T.copy(),
                    eigenvalues=evals[:k].copy(), eps=eps)


def center(x: np.ndarray):
    """Subtract the per-dimension mean; returns (centered, mean)."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 1:
        raise DimensionError(f"center expects a non-empty (N x d) array, got {x.shape}")
    mean = x.mean(axis=0)
    return x - mean, mean


def align_streams(video: np.ndarray, audio: np.ndarray, ratio: int = 4):
    """Pack each group of ``ratio`` audio frames into one video-rate step.

    The audio is zero-padded or truncated at the tail to exactly
    ratio * T_video frames, then reshaped to (T_video, ratio * d_audio).
    """
    video = np.asarray(video, dtype=np.float64)
    audio = np.asarray(audio, dtype=np.float64)
    if video.ndim != 2 or audio.ndim != 2:
        raise DimensionError(
            f"align_streams expects 2-D streams, got {video.shape} and {audio.shape}"
        )
    if ratio < 1:
        raise ConfigError(f"alignment ratio must be >= 1, got {ratio}")
    t_v = video.shape[0]
    want = ratio * t_v
    t_a, d_a = audio.shape
    if t_a < want:
        audio = np.concatenate([audio, np.zeros((want - t_a, d_a))], axis=0)
    elif t_a > want:
        audio = audio[:want]
    return video, audio.reshape(t_v, ratio * d_a)


def shift_frames(x: np.ndarray, k: int) -> np.ndarray:
    """Shift rows by k (positive = later), zero-filling vacated frames."""
    out = np.zeros_like(x)
    if k == 0:
        out[...] = x
    elif k > 0:
        out[k:] = x[:-k]
    else:
        out[:k] = x[-k:]
    return out


def draw_shift(rng, max_shift: int) -> int:
    """Uniform draw from [-max_shift, max_shift] excluding 0."""
    idx = int(rng.integers(0, 2 * max_shift))
    return idx - max_shift if idx < max_shift else idx - max_shift + 1


def augment_shift(sample, rng, max_shift: int = 10):
    """Shifted copy of an aligned sample: one k drawn uniformly from
    [-max_shift, max_shift] excluding 0, applied to both modalities."""
    if max_shift < 1:
        raise ConfigError(f"max_shift must be >= 1, got {max_shift}")
    t = sample.video.shape[0]
    if t <= max_shift:
        raise ConfigError(
            f"sequence of {t} steps is too short to shift by up to {max_shift}"
        )
    if sample.audio.shape[0] != t:
        raise DimensionError(
            "augment_shift needs aligned modalities with equal step counts; "
            f"got {t} video vs {sample.audio.shape[0]} audio frames"
        )
    k = draw_shift(rng, max_shift)
    return replace(
        sample,
        id=f"{sample.id}~shift{k:+d}",
        video=shift_frames(sample.video, k),
        audio=shift_frames(sample.audio, k),
    )


def augment_dataset(records: list, rng, max_shift: int = 10) -> list:
    """Originals plus one shifted copy each; doubles the record count."""
    out = list(records)
    for idx, rec in enumerate(records):
        out.append(augment_shift(rec, rng.child("shift", idx), max_shift))
    return out
