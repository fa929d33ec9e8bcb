"""Central finite differences for the backward passes.

The exponential variant's backward treats the output denominator and all
max states as constants.  :func:`detached_forward` is the function that
backward actually differentiates: the parallel numerator with the row max
and the denominator frozen at a reference point.  The sigmoid variant has no
normalizer, so its oracle is the plain forward pass.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .core import Dims, ParameterError, SequenceInputs, Variant, as_variant, gate_exp
from .parallel import log_gate_matrix_full, parallel_intermediates

INPUT_NAMES = ("q", "k", "v", "f_pre", "i_pre")
GRAD_NAMES = {"q": "dq", "k": "dk", "v": "dv", "f_pre": "d_fpre", "i_pre": "d_ipre"}
MAX_T = 32


@dataclass(frozen=True, eq=False)
class FrozenNormalizer:
    m: np.ndarray  # [B, H, T]
    denom: np.ndarray  # [B, H, T]


def freeze_normalizer(inputs: SequenceInputs) -> FrozenNormalizer:
    pi = parallel_intermediates(inputs, None, Variant.EXP)
    return FrozenNormalizer(m=pi.m, denom=pi.n_denom)


def detached_forward(inputs: SequenceInputs, variant, frozen: FrozenNormalizer | None = None) -> np.ndarray:
    variant = as_variant(variant)
    if variant is Variant.SIG:
        return parallel_intermediates(inputs, None, variant).h_tilde
    if frozen is None:
        raise ParameterError("exp oracle needs a frozen normalizer")
    D_tilde = log_gate_matrix_full(inputs.f_pre, inputs.i_pre, variant)
    S = np.einsum("bhid,bhjd->bhij", inputs.q, inputs.k) / np.sqrt(inputs.q.shape[-1])
    # not gate_exp: perturbed inputs may lift the row max above the frozen one
    S_bar = S * np.exp(D_tilde - frozen.m[..., None])
    return (S_bar @ inputs.v) / frozen.denom[..., None]


def fd_gradients(inputs: SequenceInputs, variant, dH: np.ndarray, step: float = 1e-6) -> dict[str, np.ndarray]:
    """Central differences of ``sum(dH * h)`` w.r.t. every input entry."""
    variant = as_variant(variant)
    inputs = inputs.astype(np.float64)
    frozen = freeze_normalizer(inputs) if variant is Variant.EXP else None

    def loss(x: SequenceInputs) -> float:
        return float(np.sum(dH * detached_forward(x, variant, frozen)))

    grads = {}
    for name in INPUT_NAMES:
        base = getattr(inputs, name)
        g = np.zeros_like(base)
        for idx in np.ndindex(base.shape):
            plus = base.copy()
            plus[idx] += step
            minus = base.copy()
            minus[idx] -= step
            g[idx] = (loss(inputs.replace(**{name: plus})) - loss(inputs.replace(**{name: minus}))) / (2 * step)
        grads[GRAD_NAMES[name]] = g
    return grads


def relative_error(analytic, numeric) -> float:
    """Max entrywise ``|a - n| / max(|a|, |n|, 1e-3 * max|n|)``.

    The floor keeps entries whose true value is near zero from dominating
    through FD round-off alone.
    """
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    if a.shape != n.shape:
        raise ParameterError(f"shape mismatch {a.shape} vs {n.shape}")
    floor = 1e-3 * float(np.max(np.abs(n))) if n.size else 0.0
    scale = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    if not np.any(scale > 0):
        return 0.0
    with np.errstate(invalid="ignore", divide="ignore"):
        err = np.where(scale > 0, np.abs(a - n) / np.where(scale > 0, scale, 1.0), 0.0)
    return float(np.max(err))


@dataclass
class GradcheckResult:
    errors: dict[str, dict[str, float]] = field(default_factory=dict)  # implementation -> tensor -> rel err
    tol: float = 1e-5

    @property
    def max_error(self) -> float:
        return max((e for per in self.errors.values() for e in per.values()), default=0.0)

    @property
    def passed(self) -> bool:
        return self.max_error < self.tol


def check_gradcheck_dims(dims: Dims) -> None:
    if dims.T > MAX_T:
        raise ParameterError(f"gradcheck limited to T<={MAX_T}")
    dims.check_chunked()


def compare(analytic: dict[str, np.ndarray], numeric: dict[str, np.ndarray]) -> dict[str, float]:
    return {name: relative_error(analytic[name], numeric[name]) for name in analytic}
