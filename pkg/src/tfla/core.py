"""Shared geometry, input containers, RNG and numeric helpers.

Every formulation in the package works on dense ``numpy`` arrays with the
layout ``[n_batch, n_head, T, d]`` for queries, keys and values and
``[n_batch, n_head, T]`` for the gate pre-activations.
"""

from __future__ import annotations

import contextlib
import contextvars
import dataclasses
import enum
from dataclasses import dataclass
from typing import Iterator

import numpy as np

# Stand-in for -inf in log-domain gate matrices; exp() maps it to exactly 0
# and it never produces (-inf) - (-inf) = nan.
NEG_SENTINEL = -1e30


class GeometryError(ValueError):
    """Invalid sequence / chunk / block geometry."""


class NumericError(FloatingPointError):
    """Non-finite values where finite ones are required."""


class ParameterError(ValueError):
    """Invalid scalar parameter (e.g. a non-positive cap)."""


class Variant(str, enum.Enum):
    EXP = "exp"
    SIG = "sig"


def as_variant(variant: str | Variant) -> Variant:
    try:
        return Variant(variant)
    except ValueError:
        raise ParameterError(f"unknown variant {variant!r}; expected 'exp' or 'sig'") from None


@dataclass(frozen=True)
class Dims:
    """Sequence, chunk and head geometry."""

    T: int
    L: int = 1
    d_qk: int = 1
    d_hv: int = 1
    n_head: int = 1
    n_batch: int = 1

    def __post_init__(self) -> None:
        for name in ("T", "L", "d_qk", "d_hv", "n_head", "n_batch"):
            value = getattr(self, name)
            if int(value) != value or value < 1:
                raise GeometryError(f"{name} must be a positive integer, got {value!r}")

    @property
    def n_chunk(self) -> int:
        if self.T % self.L:
            raise GeometryError(f"T not divisible by L (T={self.T}, L={self.L})")
        return self.T // self.L

    def check_chunked(self) -> None:
        self.n_chunk  # noqa: B018 - raises on invalid geometry

    def with_chunk(self, L: int) -> "Dims":
        return dataclasses.replace(self, L=L)


class Precision(str, enum.Enum):
    F64 = "f64"
    F32 = "f32"

    @property
    def dtype(self) -> np.dtype:
        return np.dtype(np.float64 if self is Precision.F64 else np.float32)


@dataclass(frozen=True)
class PrecisionConfig:
    mode: Precision = Precision.F64
    # "wider" keeps inter-chunk states in float64 even for float32 activations
    state_mode: str = "same"

    @property
    def state_dtype(self) -> np.dtype:
        if self.state_mode == "wider":
            return np.dtype(np.float64)
        return self.mode.dtype


@dataclass(frozen=True)
class Rng:
    """Seeded standard-normal source (numpy PCG64)."""

    seed: int = 0

    def generator(self) -> np.random.Generator:
        return np.random.default_rng(self.seed)


@dataclass(frozen=True, eq=False)
class SequenceInputs:
    q: np.ndarray
    k: np.ndarray
    v: np.ndarray
    i_pre: np.ndarray
    f_pre: np.ndarray

    def __post_init__(self) -> None:
        if self.q.ndim != 4 or self.k.shape != self.q.shape:
            raise GeometryError(f"q and k must share a 4-d shape, got {self.q.shape} and {self.k.shape}")
        if self.v.ndim != 4 or self.v.shape[:3] != self.q.shape[:3]:
            raise GeometryError(f"v shape {self.v.shape} inconsistent with q shape {self.q.shape}")
        for name in ("i_pre", "f_pre"):
            if getattr(self, name).shape != self.q.shape[:3]:
                raise GeometryError(f"{name} must have shape {self.q.shape[:3]}")
        for name in ("q", "k", "v", "i_pre", "f_pre"):
            if not np.all(np.isfinite(getattr(self, name))):
                raise NumericError(f"{name} contains non-finite entries")

    @property
    def dtype(self) -> np.dtype:
        return self.q.dtype

    def dims(self, L: int = 1) -> Dims:
        B, H, T, dqk = self.q.shape
        return Dims(T=T, L=L, d_qk=dqk, d_hv=self.v.shape[-1], n_head=H, n_batch=B)

    def check(self, dims: Dims) -> None:
        own = self.dims(dims.L)
        if own != dims:
            raise GeometryError(f"inputs have geometry {own}, caller passed {dims}")

    def replace(self, **changes: np.ndarray) -> "SequenceInputs":
        return dataclasses.replace(self, **changes)

    def astype(self, dtype) -> "SequenceInputs":
        return SequenceInputs(*(np.asarray(getattr(self, n), dtype=dtype) for n in ("q", "k", "v", "i_pre", "f_pre")))


@dataclass(frozen=True, eq=False)
class MemoryState:
    """Matrix memory ``C``, normalizer ``n`` and log-domain max state ``m``.

    Arrays carry leading ``[n_batch, n_head]`` axes.  The sigmoid variant only
    reads ``C``.
    """

    C: np.ndarray
    n: np.ndarray
    m: np.ndarray

    @classmethod
    def zeros(cls, dims: Dims, dtype=np.float64) -> "MemoryState":
        lead = (dims.n_batch, dims.n_head)
        return cls(
            C=np.zeros(lead + (dims.d_qk, dims.d_hv), dtype=dtype),
            n=np.zeros(lead + (dims.d_qk,), dtype=dtype),
            m=np.zeros(lead, dtype=dtype),
        )


def make_inputs(
    dims: Dims,
    rng: Rng,
    scale: float = 1.0,
    *,
    i_pre: float = 0.0,
    f_pre: float = 0.0,
    gate_scale: float = 0.0,
    precision: Precision = Precision.F64,
) -> SequenceInputs:
    """Draw ``q, k, v ~ scale * N(0, 1)``.

    Gate pre-activations are the constants ``i_pre`` / ``f_pre`` plus
    ``gate_scale * N(0, 1)`` noise (no noise by default).
    """
    if not isinstance(dims, Dims):
        raise GeometryError("dims must be a Dims instance")
    gen = rng.generator()
    B, H, T = dims.n_batch, dims.n_head, dims.T
    q = scale * gen.standard_normal((B, H, T, dims.d_qk))
    k = scale * gen.standard_normal((B, H, T, dims.d_qk))
    v = scale * gen.standard_normal((B, H, T, dims.d_hv))
    ig = i_pre + gate_scale * gen.standard_normal((B, H, T))
    fg = f_pre + gate_scale * gen.standard_normal((B, H, T))
    return SequenceInputs(q, k, v, ig, fg).astype(precision.dtype)


def max_abs_diff(a, b) -> float:
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape != b.shape:
        raise GeometryError(f"shape mismatch: {a.shape} vs {b.shape}")
    if a.size == 0:
        return 0.0
    return float(np.max(np.abs(a - b)))


# --- exponent monitoring -----------------------------------------------------


@dataclass
class ExponentStats:
    calls: int = 0
    violations: int = 0
    max_arg: float = -np.inf

    def record(self, x: np.ndarray) -> None:
        self.calls += 1
        if x.size:
            self.max_arg = max(self.max_arg, float(np.max(x)))
            self.violations += int(np.count_nonzero(x > 0))


_monitor: contextvars.ContextVar[ExponentStats | None] = contextvars.ContextVar("tfla_exp_monitor", default=None)


@contextlib.contextmanager
def exponent_monitor() -> Iterator[ExponentStats]:
    """Record every argument passed to :func:`gate_exp` within the block."""
    stats = ExponentStats()
    token = _monitor.set(stats)
    try:
        yield stats
    finally:
        _monitor.reset(token)


def gate_exp(x):
    """``exp`` for gate / stabilizer arguments, which must never be positive."""
    x = np.asarray(x)
    stats = _monitor.get()
    if stats is not None:
        stats.record(x)
    return np.exp(x)


def clamped_divide(num: np.ndarray, den: np.ndarray, m: np.ndarray):
    """Return ``num / max(|den|, exp(-m))`` and the denominator itself.

    ``num`` has one trailing axis more than ``den`` and ``m``.  The division
    is rearranged so that no exponent argument is positive: for ``m < 0`` both
    sides are multiplied by ``exp(m)``.
    """
    scale = gate_exp(np.minimum(m, 0.0))
    floor = gate_exp(-np.maximum(m, 0.0))
    bounded = np.maximum(np.abs(den) * scale, floor)
    out = num * (scale / bounded)[..., None]
    with np.errstate(over="ignore", divide="ignore"):
        h_denom = bounded / scale
    return out, h_denom
