"""Spiking convolutional U-Net for underwater image enhancement, in plain NumPy.

Modules: ``tensor`` (conv/deconv/pool kernels), ``neuron`` (LIF dynamics and
surrogate gradient), ``network`` (layer graph, forward pass, checkpoints),
``training`` (BPTT, Adam, train loop), ``profiler`` (SOPs and energy),
``quality`` (PSNR/SSIM/UCIQE/UIQM), ``data`` (paired images) and ``cli``.
"""

from .errors import (CheckpointError, ConfigError, DivergenceError, IngestionError, PreconditionError,
                     ShapeError, StructuralError, TapeError, UieSnnError)
from .neuron import LifConfig
from .network import LayerGraph, NetworkConfig, build, forward, infer, load, save
from .profiler import EnergyReport, EnergyTable, energy_report
from .quality import MetricWeights, psnr, ssim, uciqe, uiqm
from .training import TrainSchedule, train

__version__ = "0.1.0"

__all__ = [
    "CheckpointError", "ConfigError", "DivergenceError", "IngestionError", "PreconditionError", "ShapeError",
    "StructuralError", "TapeError", "UieSnnError", "LifConfig", "LayerGraph", "NetworkConfig", "build",
    "forward", "infer", "load", "save", "EnergyReport", "EnergyTable", "energy_report", "MetricWeights",
    "psnr", "ssim", "uciqe", "uiqm", "TrainSchedule", "train",
]
