"""Dual-stream recurrent audio-visual fusion classifier.

A from-scratch differentiable sequence learner: two LSTMs (one per
modality), projection fusion with a scaled-tanh activation, temporal
pooling, a batch-normalized MLP head, and per-stream auxiliary heads whose
margin losses join the main objective.  All backward passes are derived by
hand and verified against central differences.  The ``amlstm`` command
exposes data synthesis, preprocessing, training, evaluation, and gradient
checking.
"""

from .core import (
    ConfigError,
    DimensionError,
    FormatError,
    NumericError,
    ParamStore,
    check_gradients,
    matmul,
)
from .data import Container, SampleRecord, SynthConfig, generate, load_container, save_container, split
from .model import FusionModel, ModelOutput, combined_loss, fuse_step, margin_loss
from .rng import Rng
from .signal_prep import (
    PcaModel,
    SpectrogramConfig,
    align_streams,
    augment_shift,
    center,
    pca_whiten_fit,
    spectrogram,
)
from .training import EvalResult, TrainConfig, TrainResult, TrainingDiverged, evaluate, train

__version__ = "0.1.0"

__all__ = [
    "ConfigError", "DimensionError", "FormatError", "NumericError",
    "ParamStore", "check_gradients", "matmul",
    "Container", "SampleRecord", "SynthConfig", "generate",
    "load_container", "save_container", "split",
    "FusionModel", "ModelOutput", "combined_loss", "fuse_step", "margin_loss",
    "Rng",
    "PcaModel", "SpectrogramConfig", "align_streams", "augment_shift",
    "center", "pca_whiten_fit", "spectrogram",
    "EvalResult", "TrainConfig", "TrainResult", "TrainingDiverged",
    "evaluate", "train",
    "__version__",
]
