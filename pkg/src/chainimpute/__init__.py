"""Chained spatial imputation with recurrent time regularization for voxel time series."""

from .data import (CorrelationMatrix, DistanceMatrix, MaskedRecording, NormStats, Recording,
                   SynthConfig, compute_correlation_matrix, compute_distance_matrix, synth_dataset)
from .corruption import RemovalMode, RemovalSpec, corrupt
from .phi import DropoutLayer, PhiLayer
from .denoiser import GruDenoiser
from .errors import FormatError, TrainingError, ValidationError

__all__ = [
    "CorrelationMatrix", "DistanceMatrix", "MaskedRecording", "NormStats", "Recording",
    "SynthConfig", "compute_correlation_matrix", "compute_distance_matrix", "synth_dataset",
    "RemovalMode", "RemovalSpec", "corrupt", "DropoutLayer", "PhiLayer", "GruDenoiser",
    "FormatError", "TrainingError", "ValidationError",
]
