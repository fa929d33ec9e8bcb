"""Chunkwise and tiled gated linear attention (mLSTM) in numpy."""

from .chunkwise import ChunkStates, Gradients, SavedStats, chunkwise_backward, chunkwise_forward
from .core import (
    Dims,
    GeometryError,
    MemoryState,
    NumericError,
    ParameterError,
    Precision,
    PrecisionConfig,
    Rng,
    SequenceInputs,
    Variant,
    exponent_monitor,
    make_inputs,
    max_abs_diff,
)
from .gates import chunkwise_gates, logsigmoid, softcap
from .parallel import Normalizer, normalizer_variant_forward, parallel_forward
from .recurrent import run_recurrent, step_exp, step_sig
from .tiled import BlockConfig, tfla_backward, tfla_backward_dK, tfla_backward_dQ, tfla_backward_dV, tfla_forward
from .transfer import GainGrid, gain, rms_norm, transfer_scan

__all__ = [
    "BlockConfig",
    "ChunkStates",
    "Dims",
    "GainGrid",
    "GeometryError",
    "Gradients",
    "MemoryState",
    "Normalizer",
    "NumericError",
    "ParameterError",
    "Precision",
    "PrecisionConfig",
    "Rng",
    "SavedStats",
    "SequenceInputs",
    "Variant",
    "chunkwise_backward",
    "chunkwise_forward",
    "chunkwise_gates",
    "exponent_monitor",
    "gain",
    "logsigmoid",
    "make_inputs",
    "max_abs_diff",
    "normalizer_variant_forward",
    "parallel_forward",
    "rms_norm",
    "run_recurrent",
    "softcap",
    "step_exp",
    "step_sig",
    "tfla_backward",
    "tfla_backward_dK",
    "tfla_backward_dQ",
    "tfla_backward_dV",
    "tfla_forward",
    "transfer_scan",
]
