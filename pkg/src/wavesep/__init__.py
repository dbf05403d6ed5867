"""End-to-end single-channel source separation toolkit.

Seven differentiable front-end/mask architectures over a from-scratch
reverse-mode engine, trained with waveform-domain objectives (MSE,
SDR/SIR/SAR correlation forms, STOI) and scored against independent
BSS-style and intelligibility oracles.
"""

from . import autodiff, data, dsp, losses, metrics, models, training
from .autodiff import Parameter, Tensor, backward, grad_check
from .dsp import FilterBank, LatentGrid, Waveform, build_fourier_filterbank
from .errors import WavesepError
from .losses import CompositeLoss, LossTerm, StoiConfig, calibrate_unity, parse_loss
from .metrics import MetricScores, SeparationReport, aggregate, bss_eval, stoi_reference
from .models import ArchitectureSpec, SeparationModel, build, forward, load_checkpoint, save_checkpoint
from .training import Adam, ExperimentReport, TrainConfig, train

__version__ = "0.1.0"

__all__ = [
    "Adam",
    "ArchitectureSpec",
    "CompositeLoss",
    "ExperimentReport",
    "FilterBank",
    "LatentGrid",
    "LossTerm",
    "MetricScores",
    "Parameter",
    "SeparationModel",
    "SeparationReport",
    "StoiConfig",
    "Tensor",
    "TrainConfig",
    "Waveform",
    "WavesepError",
    "aggregate",
    "autodiff",
    "backward",
    "bss_eval",
    "build",
    "build_fourier_filterbank",
    "calibrate_unity",
    "data",
    "dsp",
    "forward",
    "grad_check",
    "load_checkpoint",
    "losses",
    "metrics",
    "models",
    "parse_loss",
    "save_checkpoint",
    "stoi_reference",
    "train",
    "training",
]
