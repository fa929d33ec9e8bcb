"""Chunkwise-parallel forward and reference backward pass.

The forward pass runs in two phases: a sequential inter-chunk recurrence
that materializes the memory state at every chunk boundary, then a
chunk-parallel phase that combines the intra-chunk quadratic part with the
inter-chunk contribution of the previous state.

The backward pass does not differentiate through the normalizer: the
denominator ``h_denom`` and all max states saved in the forward pass are
constants.  For the sigmoid variant (no normalizer) this is the exact
gradient.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import (
    Dims,
    GeometryError,
    MemoryState,
    SequenceInputs,
    Variant,
    as_variant,
    clamped_divide,
    gate_exp,
)
from .gates import ChunkwiseGates, chunkwise_gates, log_gate_matrix, sigmoid


@dataclass(frozen=True, eq=False)
class ChunkStates:
    """States at all chunk boundaries; index 0 is the initial state.

    ``C``: ``[B, H, n_chunk + 1, d_qk, d_hv]``, ``n``: ``[B, H, n_chunk + 1, d_qk]``,
    ``m``: ``[B, H, n_chunk + 1]`` (``n`` and ``m`` stay zero for ``sig``).
    """

    C: np.ndarray
    n: np.ndarray
    m: np.ndarray


@dataclass(frozen=True, eq=False)
class SavedStats:
    m_combine: np.ndarray  # [B, H, n_chunk, L]
    h_denom: np.ndarray  # [B, H, n_chunk, L]


@dataclass(frozen=True, eq=False)
class Gradients:
    dq: np.ndarray
    dk: np.ndarray
    dv: np.ndarray
    d_fpre: np.ndarray
    d_ipre: np.ndarray

    def as_dict(self) -> dict[str, np.ndarray]:
        return {"dq": self.dq, "dk": self.dk, "dv": self.dv, "d_fpre": self.d_fpre, "d_ipre": self.d_ipre}


def to_chunks(x: np.ndarray, L: int) -> np.ndarray:
    """``[B, H, T, ...] -> [B, H, n_chunk, L, ...]``."""
    B, H, T = x.shape[:3]
    return x.reshape((B, H, T // L, L) + x.shape[3:])


def from_chunks(x: np.ndarray) -> np.ndarray:
    B, H, NC, L = x.shape[:4]
    return x.reshape((B, H, NC * L) + x.shape[4:])


def _prepare(inputs: SequenceInputs, dims: Dims, variant: Variant) -> ChunkwiseGates:
    inputs.check(dims)
    dims.check_chunked()
    return chunkwise_gates(inputs.f_pre, inputs.i_pre, dims.L, variant)


def chunk_states(
    inputs: SequenceInputs,
    dims: Dims,
    variant=Variant.EXP,
    gates: ChunkwiseGates | None = None,
    initial_state: MemoryState | None = None,
    state_dtype=None,
) -> ChunkStates:
    """Inter-chunk recurrence; materializes ``C_k, n_k, m_k`` for every boundary."""
    variant = as_variant(variant)
    if gates is None:
        gates = _prepare(inputs, dims, variant)
    L, NC = dims.L, dims.n_chunk
    dtype = np.dtype(state_dtype) if state_dtype is not None else inputs.dtype
    K = to_chunks(inputs.k, L)
    V = to_chunks(inputs.v, L)
    lead = inputs.q.shape[:2]
    C = np.zeros(lead + (NC + 1, dims.d_qk, dims.d_hv), dtype=dtype)
    n = np.zeros(lead + (NC + 1, dims.d_qk), dtype=dtype)
    m = np.zeros(lead + (NC + 1,), dtype=dtype)
    if initial_state is not None:
        C[:, :, 0] = initial_state.C
        n[:, :, 0] = initial_state.n
        m[:, :, 0] = initial_state.m

    for k in range(NC):
        g_k, a_k = gates.g[:, :, k], gates.a[:, :, k]
        if variant is Variant.EXP:
            gm = g_k + m[:, :, k]
            m[:, :, k + 1] = np.maximum(gm, a_k.max(axis=-1))
            g_bar = gate_exp(gm - m[:, :, k + 1])
            a_bar = gate_exp(a_k - m[:, :, k + 1, None])
        else:
            g_bar = gate_exp(g_k)
            a_bar = gate_exp(a_k)
        K_bar = a_bar[..., None] * K[:, :, k]
        C[:, :, k + 1] = g_bar[..., None, None] * C[:, :, k] + np.swapaxes(K_bar, -1, -2) @ V[:, :, k]
        if variant is Variant.EXP:
            n[:, :, k + 1] = g_bar[..., None] * n[:, :, k] + K_bar.sum(axis=-2)
    return ChunkStates(C=C, n=n, m=m)


def chunkwise_forward(
    inputs: SequenceInputs,
    dims: Dims,
    variant=Variant.EXP,
    *,
    initial_state: MemoryState | None = None,
    state_dtype=None,
):
    """Return ``(h_tilde, ChunkStates, SavedStats)``; ``h_tilde`` is ``[B, H, T, d_hv]``."""
    variant = as_variant(variant)
    gates = _prepare(inputs, dims, variant)
    states = chunk_states(inputs, dims, variant, gates, initial_state, state_dtype)
    L = dims.L
    scale = 1.0 / np.sqrt(dims.d_qk)
    Q = to_chunks(inputs.q, L)
    K = to_chunks(inputs.k, L)
    V = to_chunks(inputs.v, L)
    C_prev = states.C[:, :, :-1]
    n_prev = states.n[:, :, :-1]
    m_prev = states.m[:, :, :-1]

    D_tilde = log_gate_matrix(gates.b, gates.b, gates.i_log)
    S = (Q @ np.swapaxes(K, -1, -2)) * scale
    if variant is Variant.EXP:
        bm = gates.b + m_prev[..., None]
        m_combine = np.maximum(bm, D_tilde.max(axis=-1))
        b_bar = gate_exp(bm - m_combine)
        S_bar = S * gate_exp(D_tilde - m_combine[..., None])
    else:
        m_combine = np.zeros_like(gates.b)
        b_bar = gate_exp(gates.b)
        S_bar = S * gate_exp(D_tilde)
    Q_bar = Q * (scale * b_bar)[..., None]
    num = Q_bar @ C_prev + S_bar @ V
    if variant is Variant.EXP:
        den = np.einsum("...ld,...d->...l", Q_bar, n_prev) + S_bar.sum(axis=-1)
        h, h_denom = clamped_divide(num, den, m_combine)
    else:
        h, h_denom = num, np.ones_like(m_combine)
    return from_chunks(h), states, SavedStats(m_combine=m_combine, h_denom=h_denom)


# --- backward ----------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class StateGradients:
    """Gradients w.r.t. the materialized states and summed chunk forget gates."""

    dC: np.ndarray  # [B, H, n_chunk + 1, d_qk, d_hv]; dC[k] = dLoss/dC_k, last entry zero
    dg: np.ndarray  # [B, H, n_chunk]


@dataclass(frozen=True, eq=False)
class StabilizedGates:
    b_bar: np.ndarray  # [B, H, NC, L]
    a_bar: np.ndarray  # [B, H, NC, L]
    g_bar: np.ndarray  # [B, H, NC]
    m_combine: np.ndarray  # [B, H, NC, L]


def stabilized_gates(gates: ChunkwiseGates, states: ChunkStates, stats: SavedStats, variant: Variant) -> StabilizedGates:
    """Recompute ``b_bar``, ``a_bar``, ``g_bar`` from saved max states (no new maxima)."""
    m = states.m
    if variant is Variant.EXP:
        b_bar = gate_exp((gates.b + m[:, :, :-1, None]) - stats.m_combine)
        a_bar = gate_exp(gates.a - m[:, :, 1:, None])
        g_bar = gate_exp((gates.g + m[:, :, :-1]) - m[:, :, 1:])
    else:
        b_bar = gate_exp(gates.b)
        a_bar = gate_exp(gates.a)
        g_bar = gate_exp(gates.g)
    return StabilizedGates(b_bar=b_bar, a_bar=a_bar, g_bar=g_bar, m_combine=stats.m_combine)


def _check_saved(saved) -> tuple[ChunkStates, SavedStats]:
    if saved is None or len(saved) != 2 or saved[0] is None or saved[1] is None:
        raise GeometryError("backward needs the (ChunkStates, SavedStats) saved by the forward pass")
    return saved


def scaled_output_grad(dH: np.ndarray, stats: SavedStats, L: int) -> np.ndarray:
    """``dH / h_denom`` in chunked layout ``[B, H, NC, L, d_hv]``."""
    with np.errstate(divide="ignore", invalid="ignore"):
        return to_chunks(dH, L) / stats.h_denom[..., None]


def state_gradients(dH_tilde: np.ndarray, Q_bar: np.ndarray, states: ChunkStates, sg: StabilizedGates) -> StateGradients:
    """Reverse recurrence ``dC_{k-1} = g_bar_k dC_k + Q_bar_k^T dH_k``."""
    NC = Q_bar.shape[2]
    dC = np.zeros_like(states.C)
    for k in range(NC, 0, -1):
        dC[:, :, k - 1] = sg.g_bar[:, :, k - 1, None, None] * dC[:, :, k] + np.swapaxes(Q_bar[:, :, k - 1], -1, -2) @ dH_tilde[:, :, k - 1]
    dg = sg.g_bar * np.einsum("bhkij,bhkij->bhk", states.C[:, :, :-1], dC[:, :, 1:])
    return StateGradients(dC=dC, dg=dg)


def gate_gradients(dg, db, da, di_intra, inputs: SequenceInputs, variant: Variant):
    """Map chunk-gate gradients back to the raw gate pre-activations.

    With ``g = sum(f)``, ``b = cumsum(f)`` and ``a_j = sum_{i>j} f_i + i_j``,
    each log forget gate collects ``dg``, the reversed cumsum of ``db`` and
    the exclusive forward cumsum of ``da``.
    """
    rev_db = np.flip(np.cumsum(np.flip(db, axis=-1), axis=-1), axis=-1)
    excl_da = np.cumsum(da, axis=-1) - da
    df_log = dg[..., None] + rev_db + excl_da
    di_log = da + di_intra
    d_fpre = from_chunks(df_log) * sigmoid(-inputs.f_pre)
    d_ipre = from_chunks(di_log)
    if variant is Variant.SIG:
        d_ipre = d_ipre * sigmoid(-inputs.i_pre)
    return d_fpre, d_ipre


def chunkwise_backward(inputs: SequenceInputs, dims: Dims, variant, dH: np.ndarray, saved) -> Gradients:
    """Gradients of ``sum(dH * h_tilde)`` w.r.t. q, k, v and both gate pre-activations."""
    variant = as_variant(variant)
    states, stats = _check_saved(saved)
    gates = _prepare(inputs, dims, variant)
    if dH.shape != inputs.v.shape:
        raise GeometryError(f"dH shape {dH.shape} != output shape {inputs.v.shape}")
    L = dims.L
    scale = 1.0 / np.sqrt(dims.d_qk)
    Q = to_chunks(inputs.q, L)
    K = to_chunks(inputs.k, L)
    V = to_chunks(inputs.v, L)
    sg = stabilized_gates(gates, states, stats, variant)
    dHt = scaled_output_grad(dH, stats, L)

    # intra-chunk part
    D_tilde = log_gate_matrix(gates.b, gates.b, gates.i_log)
    D = gate_exp(D_tilde - sg.m_combine[..., None]) if variant is Variant.EXP else gate_exp(D_tilde)
    S = (Q @ np.swapaxes(K, -1, -2)) * scale
    S_bar = S * D
    dV = np.swapaxes(S_bar, -1, -2) @ dHt
    dS = (dHt @ np.swapaxes(V, -1, -2)) * D
    dQ = scale * (dS @ K)
    dK = scale * (np.swapaxes(dS, -1, -2) @ Q)
    dD_tilde = dS * S
    db = dD_tilde.sum(axis=-1) - dD_tilde.sum(axis=-2)
    di_intra = dD_tilde.sum(axis=-2)

    # inter-chunk output part
    Q_bar = Q * (scale * sg.b_bar)[..., None]
    C_prev = states.C[:, :, :-1]
    dQ_bar = dHt @ np.swapaxes(C_prev, -1, -2)
    dQ = dQ + scale * dQ_bar * sg.b_bar[..., None]
    db = db + (dQ_bar * Q_bar).sum(axis=-1)

    # state recurrence
    st = state_gradients(dHt, Q_bar, states, sg)
    dC_next = st.dC[:, :, 1:]
    K_bar = K * sg.a_bar[..., None]
    dV = dV + K_bar @ dC_next
    dK_bar = V @ np.swapaxes(dC_next, -1, -2)
    dK = dK + dK_bar * sg.a_bar[..., None]
    da = (dK_bar * K_bar).sum(axis=-1)

    d_fpre, d_ipre = gate_gradients(st.dg, db, da, di_intra, inputs, variant)
    return Gradients(dq=from_chunks(dQ), dk=from_chunks(dK), dv=from_chunks(dV), d_fpre=d_fpre, d_ipre=d_ipre)
