"""Step-by-step recurrence for both gate variants.

This is the O(T) ground truth every other formulation is checked against.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import (
    Dims,
    MemoryState,
    NumericError,
    SequenceInputs,
    Variant,
    as_variant,
    clamped_divide,
    gate_exp,
)
from .gates import logsigmoid, sigmoid


@dataclass(frozen=True, eq=False)
class RecurrentTrace:
    h_tilde: np.ndarray  # [B, H, T, d_hv]
    states: list[MemoryState] | None = None
    final_state: MemoryState | None = None


def _check_finite(*arrays) -> None:
    for x in arrays:
        if not np.all(np.isfinite(x)):
            raise NumericError("non-finite input to recurrent step")


def step_exp(state: MemoryState, q, k, v, i_pre, f_pre, dims: Dims | None = None):
    """One stabilized step of the exponential-input-gate cell.

    ``q, k`` have shape ``[..., d_qk]``, ``v`` ``[..., d_hv]`` and the gate
    pre-activations ``[...]``.  Returns the new state and ``h_tilde``.
    """
    _check_finite(q, k, v, i_pre, f_pre)
    d_qk = q.shape[-1] if dims is None else dims.d_qk
    f_log = logsigmoid(f_pre)
    m_new = np.maximum(f_log + state.m, i_pre)
    f_gate = gate_exp((f_log + state.m) - m_new)
    i_gate = gate_exp(i_pre - m_new)

    C = f_gate[..., None, None] * state.C + i_gate[..., None, None] * (k[..., :, None] * v[..., None, :])
    n = f_gate[..., None] * state.n + i_gate[..., None] * k
    q_scaled = q / np.sqrt(d_qk)
    num = np.einsum("...dh,...d->...h", C, q_scaled)
    den = np.einsum("...d,...d->...", n, q_scaled)
    h, _ = clamped_divide(num, den, m_new)
    return MemoryState(C=C, n=n, m=m_new), h


def step_sig(state: MemoryState, q, k, v, i_pre, f_pre, dims: Dims | None = None):
    """One step of the sigmoid-input-gate cell (no normalizer, no max state)."""
    _check_finite(q, k, v, i_pre, f_pre)
    d_qk = q.shape[-1] if dims is None else dims.d_qk
    f_gate = sigmoid(f_pre)
    i_gate = sigmoid(i_pre)
    C = f_gate[..., None, None] * state.C + i_gate[..., None, None] * (k[..., :, None] * v[..., None, :])
    h = np.einsum("...dh,...d->...h", C, q / np.sqrt(d_qk))
    return MemoryState(C=C, n=state.n, m=state.m), h


def run_recurrent(
    inputs: SequenceInputs,
    dims: Dims | None = None,
    variant: str | Variant = Variant.EXP,
    *,
    initial_state: MemoryState | None = None,
    keep_states: bool = False,
) -> RecurrentTrace:
    """Fold the step function over ``t = 1..T`` from the zero state."""
    variant = as_variant(variant)
    if dims is None:
        dims = inputs.dims()
    else:
        inputs.check(dims)
    state = initial_state if initial_state is not None else MemoryState.zeros(dims, dtype=inputs.dtype)
    step = step_exp if variant is Variant.EXP else step_sig

    out = np.empty(inputs.v.shape, dtype=np.result_type(inputs.dtype, state.C.dtype))
    states = [] if keep_states else None
    for t in range(dims.T):
        state, out[:, :, t] = step(
            state,
            inputs.q[:, :, t],
            inputs.k[:, :, t],
            inputs.v[:, :, t],
            inputs.i_pre[:, :, t],
            inputs.f_pre[:, :, t],
            dims,
        )
        if keep_states:
            states.append(state)
    return RecurrentTrace(h_tilde=out, states=states, final_state=state)
