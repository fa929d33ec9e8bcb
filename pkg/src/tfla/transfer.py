"""Gain of a single cell as a function of constant gate pre-activations.

For every grid point the input and forget gate pre-activations are held
constant over the whole sequence; the gain compares the max-norm of the
outputs with the max-norm of the values, before and after an RMS norm.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import Dims, NumericError, ParameterError, Rng, make_inputs
from .parallel import check_normalizer, log_gate_matrix_full, normalize_outputs

I_RANGE = (-12.0, 8.0)
F_RANGE = (-5.0, 12.0)


def rms_norm(x, gamma=None, eps: float = 1e-6):
    """``x / sqrt(mean(x**2) + eps) * gamma`` over the last axis.

    With ``eps == 0`` an all-zero row maps to zero.
    """
    if eps < 0:
        raise ParameterError(f"eps must be >= 0, got {eps}")
    x = np.asarray(x, dtype=float)
    rms = np.sqrt(np.mean(x * x, axis=-1, keepdims=True) + eps)
    with np.errstate(invalid="ignore", divide="ignore"):
        y = np.where(rms > 0, x / np.where(rms > 0, rms, 1.0), 0.0)
    return y if gamma is None else y * np.asarray(gamma)


def gain(h_seq, v_seq) -> float:
    """Time average of ``max|h_t| / max|v_t|``."""
    h = np.asarray(h_seq, dtype=float)
    v = np.asarray(v_seq, dtype=float)
    if h.shape[0] != v.shape[0]:
        raise ParameterError(f"sequence lengths differ: {h.shape[0]} vs {v.shape[0]}")
    v_max = np.abs(v).reshape(v.shape[0], -1).max(axis=-1)
    if np.any(v_max == 0):
        raise NumericError("gain undefined: a value vector is zero")
    h_max = np.abs(h).reshape(h.shape[0], -1).max(axis=-1)
    return float(np.mean(h_max / v_max))


@dataclass(frozen=True, eq=False)
class GainGrid:
    i_values: np.ndarray
    f_values: np.ndarray
    G_before: np.ndarray  # [n_i, n_f]
    G_after: np.ndarray

    def at(self, i_pre: float, f_pre: float) -> tuple[float, float]:
        a = int(np.argmin(np.abs(self.i_values - i_pre)))
        b = int(np.argmin(np.abs(self.f_values - f_pre)))
        return float(self.G_before[a, b]), float(self.G_after[a, b])

    def rows(self):
        """``(i_pre, f_pre, gain_before, gain_after)`` in row-major order."""
        for a, iv in enumerate(self.i_values):
            for b, fv in enumerate(self.f_values):
                yield float(iv), float(fv), float(self.G_before[a, b]), float(self.G_after[a, b])


def default_dims() -> Dims:
    return Dims(T=512, d_qk=128, d_hv=128)


def grid_values(lo: float, hi: float, n: int) -> np.ndarray:
    if n < 1:
        raise ParameterError(f"grid needs at least one point, got {n}")
    return np.linspace(lo, hi, n)


def transfer_scan(
    variant="exp",
    normalizer="default",
    eps: float = 1e-6,
    *,
    i_values=None,
    f_values=None,
    i_range: tuple[float, float] = I_RANGE,
    f_range: tuple[float, float] = F_RANGE,
    n_points: int = 50,
    dims: Dims | None = None,
    rng: Rng | None = None,
) -> GainGrid:
    """Gains over a grid of constant gate pre-activations.

    ``i_values`` / ``f_values`` override the evenly spaced grids.  One set of
    ``q, k, v`` is drawn and shared by all grid points.
    """
    variant, normalizer = check_normalizer(variant, normalizer)
    if eps < 0:
        raise ParameterError(f"eps must be >= 0, got {eps}")
    dims = dims or default_dims()
    rng = rng or Rng(0)
    iv = np.asarray(i_values, dtype=float) if i_values is not None else grid_values(*i_range, n_points)
    fv = np.asarray(f_values, dtype=float) if f_values is not None else grid_values(*f_range, n_points)

    x = make_inputs(dims, rng)
    S = np.einsum("bhid,bhjd->bhij", x.q, x.k) / np.sqrt(dims.d_qk)
    ones = np.ones(x.i_pre.shape)
    v_seq = x.v.reshape(-1, dims.T, dims.d_hv)

    G_before = np.zeros((iv.size, fv.size))
    G_after = np.zeros_like(G_before)
    for b, f_pre in enumerate(fv):
        for a, i_pre in enumerate(iv):
            D_tilde = log_gate_matrix_full(f_pre * ones, i_pre * ones, variant)
            h = normalize_outputs(S, D_tilde, x.v, variant, normalizer).reshape(-1, dims.T, dims.d_hv)
            # average over batch and heads as well
            G_before[a, b] = np.mean([gain(h[j], v_seq[j]) for j in range(h.shape[0])])
            G_after[a, b] = np.mean([gain(rms_norm(h[j], eps=eps), v_seq[j]) for j in range(h.shape[0])])
    return GainGrid(i_values=iv, f_values=fv, G_before=G_before, G_after=G_after)
