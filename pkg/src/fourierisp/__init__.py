"""RAW-to-RGB mapping with networks that refine Fourier amplitude and phase
separately."""

from .exceptions import (
    ConfigError,
    DatasetError,
    DimensionError,
    FourierISPError,
    NonFiniteLossError,
    NumericError,
    PairingError,
    ParameterError,
)
from .fourier import SpectralPair, decompose, recompose, swap_amplitude
from .imaging import DegradationParams, RawImage, demosaic, load_dataset, pack_bayer, synthesize_raw
from .losses import LossReport, LossWeights, total_loss
from .metrics import MetricReport, ms_ssim, psnr, ssim
from .network import FourierISPNet, ModelConfig, build_model, fourierisp_forward
from .training import Checkpoint, TrainConfig, Trainer, evaluate, infer, lr_at, train

__version__ = "0.1.0"

__all__ = [
    "Checkpoint", "ConfigError", "DatasetError", "DegradationParams", "DimensionError", "FourierISPError", "FourierISPNet",
    "LossReport", "LossWeights", "MetricReport", "ModelConfig", "NonFiniteLossError", "NumericError",
    "PairingError", "ParameterError", "RawImage", "SpectralPair", "TrainConfig", "Trainer", "build_model",
    "decompose", "demosaic", "evaluate", "fourierisp_forward", "infer", "load_dataset", "lr_at", "ms_ssim",
    "pack_bayer", "psnr", "recompose", "ssim", "swap_amplitude", "synthesize_raw", "total_loss", "train",
]
