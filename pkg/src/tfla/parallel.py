"""Fully parallel O(T^2) formulation.

It materializes the full ``T x T`` gate and logit matrices on purpose: it
exists to be obviously correct, not to be fast.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from .core import (
    Dims,
    NumericError,
    ParameterError,
    SequenceInputs,
    Variant,
    as_variant,
    clamped_divide,
    gate_exp,
)
from .gates import log_gate_matrix, log_input_gate, logsigmoid


class Normalizer(str, enum.Enum):
    DEFAULT = "default"  # max(|S_bar 1|, exp(-m))
    MAX_ABS_ONE = "max_abs_one"  # max(|S_bar 1|, 1)
    ABS_SUM = "abs_sum"  # |S_bar 1|
    RAW_SUM = "raw_sum"  # S_bar 1
    ONES = "ones"  # n = 1


# (variant, normalizer) combinations examined in the transfer experiments
VALID_NORMALIZERS = {
    Variant.EXP: (Normalizer.DEFAULT, Normalizer.MAX_ABS_ONE, Normalizer.ONES),
    Variant.SIG: (Normalizer.ONES, Normalizer.MAX_ABS_ONE, Normalizer.ABS_SUM, Normalizer.RAW_SUM),
}


@dataclass(frozen=True, eq=False)
class ParallelIntermediates:
    D_tilde: np.ndarray  # [B, H, T, T], NEG_SENTINEL above the diagonal
    m: np.ndarray  # [B, H, T] row max (zeros for sig)
    S: np.ndarray  # [B, H, T, T]
    n_denom: np.ndarray  # [B, H, T]
    h_tilde: np.ndarray


def log_gate_matrix_full(f_pre, i_pre, variant: Variant):
    """``log F + I`` for the whole sequence from prefix sums of log forget gates."""
    f_cum = np.cumsum(logsigmoid(f_pre), axis=-1)
    return log_gate_matrix(f_cum, f_cum, log_input_gate(i_pre, variant))


def _check(inputs: SequenceInputs, dims: Dims | None) -> None:
    if dims is not None:
        inputs.check(dims)
    for name in ("q", "k", "v", "i_pre", "f_pre"):
        if not np.all(np.isfinite(getattr(inputs, name))):
            raise NumericError(f"{name} contains non-finite entries")


def _logits(inputs: SequenceInputs) -> np.ndarray:
    d_qk = inputs.q.shape[-1]
    return np.einsum("bhid,bhjd->bhij", inputs.q, inputs.k) / np.sqrt(d_qk)


def parallel_intermediates(inputs: SequenceInputs, dims: Dims | None = None, variant=Variant.EXP) -> ParallelIntermediates:
    variant = as_variant(variant)
    _check(inputs, dims)
    D_tilde = log_gate_matrix_full(inputs.f_pre, inputs.i_pre, variant)
    S = _logits(inputs)
    if variant is Variant.EXP:
        m = D_tilde.max(axis=-1)
        S_bar = S * gate_exp(D_tilde - m[..., None])
        h, n_denom = clamped_divide(S_bar @ inputs.v, S_bar.sum(axis=-1), m)
    else:
        m = np.zeros(D_tilde.shape[:-1], dtype=D_tilde.dtype)
        S_bar = S * gate_exp(D_tilde)
        h = S_bar @ inputs.v
        n_denom = np.ones_like(m)
    return ParallelIntermediates(D_tilde=D_tilde, m=m, S=S, n_denom=n_denom, h_tilde=h)


def parallel_forward_exp(inputs: SequenceInputs, dims: Dims | None = None) -> np.ndarray:
    return parallel_intermediates(inputs, dims, Variant.EXP).h_tilde


def parallel_forward_sig(inputs: SequenceInputs, dims: Dims | None = None) -> np.ndarray:
    return parallel_intermediates(inputs, dims, Variant.SIG).h_tilde


def parallel_forward(inputs: SequenceInputs, dims: Dims | None = None, variant=Variant.EXP) -> np.ndarray:
    return parallel_intermediates(inputs, dims, variant).h_tilde


def check_normalizer(variant, normalizer) -> tuple[Variant, Normalizer]:
    variant = as_variant(variant)
    try:
        normalizer = Normalizer(normalizer)
    except ValueError:
        raise ParameterError(f"unknown normalizer {normalizer!r}") from None
    if normalizer not in VALID_NORMALIZERS[variant]:
        allowed = ", ".join(n.value for n in VALID_NORMALIZERS[variant])
        raise ParameterError(f"normalizer {normalizer.value!r} not defined for variant {variant.value!r} (allowed: {allowed})")
    return variant, normalizer


def normalize_outputs(S, D_tilde, V, variant: Variant, normalizer: Normalizer):
    """Apply gates and the chosen normalizer to precomputed logits ``S``."""
    if variant is Variant.EXP:
        m = D_tilde.max(axis=-1)
        S_bar = S * gate_exp(D_tilde - m[..., None])
    else:
        m = None
        S_bar = S * gate_exp(D_tilde)
    num = S_bar @ V
    if normalizer is Normalizer.ONES:
        return num
    row_sum = S_bar.sum(axis=-1)
    if normalizer is Normalizer.DEFAULT:
        return clamped_divide(num, row_sum, m)[0]
    if normalizer is Normalizer.MAX_ABS_ONE:
        den = np.maximum(np.abs(row_sum), 1.0)
    elif normalizer is Normalizer.ABS_SUM:
        den = np.abs(row_sum)
    else:
        den = row_sum
    return num / den[..., None]


def normalizer_variant_forward(inputs: SequenceInputs, dims: Dims | None = None, variant=Variant.EXP, normalizer="default"):
    """Parallel forward with the normalizer replaced by a named alternative."""
    variant, normalizer = check_normalizer(variant, normalizer)
    _check(inputs, dims)
    D_tilde = log_gate_matrix_full(inputs.f_pre, inputs.i_pre, variant)
    return normalize_outputs(_logits(inputs), D_tilde, inputs.v, variant, normalizer)
