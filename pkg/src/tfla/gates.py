"""Stable log-gate primitives and the chunkwise gate decomposition."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import NEG_SENTINEL, GeometryError, ParameterError, Variant, as_variant


def logsigmoid(x):
    """``log(sigmoid(x))`` via ``min(x, 0) - log1p(exp(-|x|))``."""
    x = np.asarray(x, dtype=float) if not isinstance(x, np.ndarray) else x
    return np.minimum(x, 0.0) - np.log1p(np.exp(-np.abs(x)))


def sigmoid(x):
    x = np.asarray(x)
    z = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + z), z / (1.0 + z))


def softcap(x, c: float):
    """Smoothly cap ``x`` to ``(-c, c)`` with ``c * tanh(x / c)``."""
    if not c > 0:
        raise ParameterError(f"softcap requires c > 0, got {c!r}")
    return c * np.tanh(np.asarray(x) / c)


def log_input_gate(i_pre, variant: str | Variant):
    """Log-domain input gate: identity for ``exp``, logsigmoid for ``sig``."""
    if as_variant(variant) is Variant.EXP:
        return np.asarray(i_pre)
    return logsigmoid(i_pre)


@dataclass(frozen=True, eq=False)
class ChunkwiseGates:
    """Per-chunk log gates; leading axes follow the pre-activations.

    ``g``: ``[..., n_chunk]`` summed log forget gates.
    ``b``: ``[..., n_chunk, L]`` within-chunk cumulative log forget gates.
    ``a``: ``[..., n_chunk, L]`` log input gate plus forget tail to chunk end.
    ``i_log``: ``[..., n_chunk, L]`` chunked log input gates.
    """

    g: np.ndarray
    b: np.ndarray
    a: np.ndarray
    i_log: np.ndarray


def chunkwise_gates(f_pre, i_pre, L: int, variant: str | Variant = Variant.EXP, cap: float | None = None) -> ChunkwiseGates:
    """Chunk the gate pre-activations and build ``g``, ``b`` and ``a``.

    ``a`` is the reversed cumulative sum of the chunk's forget gates without
    their first element, padded with a trailing zero; it is never formed as
    ``g - b + i``.  Pass ``cap`` to softcap both pre-activations first.
    """
    f_pre = np.asarray(f_pre)
    i_pre = np.asarray(i_pre)
    if f_pre.shape != i_pre.shape:
        raise GeometryError(f"gate shapes differ: {f_pre.shape} vs {i_pre.shape}")
    T = f_pre.shape[-1]
    if L < 1 or T % L:
        raise GeometryError(f"T not divisible by L (T={T}, L={L})")
    if cap is not None:
        f_pre = softcap(f_pre, cap)
        i_pre = softcap(i_pre, cap)
    lead = f_pre.shape[:-1]
    f_log = logsigmoid(f_pre).reshape(lead + (T // L, L))
    i_log = log_input_gate(i_pre, variant).reshape(lead + (T // L, L))

    b = np.cumsum(f_log, axis=-1)
    g = b[..., -1].copy()
    tail = np.flip(np.cumsum(np.flip(f_log[..., 1:], axis=-1), axis=-1), axis=-1)
    a = np.concatenate([tail, np.zeros(lead + (T // L, 1), dtype=f_log.dtype)], axis=-1) + i_log
    return ChunkwiseGates(g=g, b=b, a=a, i_log=i_log)


def log_gate_matrix(b_q, b_kv, i_kv, row0: int = 0, col0: int = 0, mask: bool = True):
    """Masked log gate block ``b_q[i] - b_kv[j] + i_kv[j]`` for ``i >= j``.

    ``row0`` / ``col0`` are the within-chunk offsets of the block, used only
    for the causal mask.  Entries above the diagonal hold ``NEG_SENTINEL``.
    With ``mask=False`` the block is returned unmasked (caller guarantees it
    lies entirely on or below the diagonal).  All formulations build their gate matrices through this function so that
    recomputed values are bit-identical to the forward pass.
    """
    logits = (b_q[..., :, None] - b_kv[..., None, :]) + i_kv[..., None, :]
    if not mask:
        return logits
    rows = row0 + np.arange(b_q.shape[-1])
    cols = col0 + np.arange(b_kv.shape[-1])
    causal = rows[:, None] >= cols[None, :]
    return np.where(causal, logits, NEG_SENTINEL)
