"""Analytical FLOP, memory-traffic and runtime model for the forward pass.

Counts are per head and batch element, scaled to a full sequence:
chunkwise tables are per chunk (times ``T / L``), parallel tables per
sequence, recurrent tables per step (times ``T``).  ``exact`` mode keeps the
per-operation factors in :class:`PerfParams`; ``simplified`` mode evaluates
the simplified tables, where every such factor is 1.

Two families of numbers exist for the chunkwise form: the sum of the per-row
line items (:func:`flops_chunkwise`) and the closed-form sequence totals
(:func:`total_flops`).  They differ by a few lower-order terms.  The runtime
model, the intensity and both optimal chunk sizes are built on the closed
forms, because the optimal chunk sizes are derived from them.
"""

from __future__ import annotations

import enum
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable

from .core import ParameterError, Variant, as_variant

OPS = ("exp", "log", "sig", "max", "abs", "mask")


class RegistryError(LookupError):
    pass


class Mode(str, enum.Enum):
    EXACT = "exact"
    SIMPLIFIED = "simplified"


class Formulation(str, enum.Enum):
    CHUNKWISE = "chunkwise"
    PARALLEL = "parallel"
    RECURRENT = "recurrent"


class Bound(str, enum.Enum):
    SUM = "sum"  # no overlap of compute and memory traffic
    MAX = "max"  # perfect overlap


@dataclass(frozen=True)
class PerfParams:
    F_causal: float = 0.5
    F_op: dict = field(default_factory=dict)
    bytes_qkv: int = 2
    bytes_if: int = 2
    bytes_Cmn: int = 4

    def __post_init__(self) -> None:
        if not 0.5 <= self.F_causal <= 1.0:
            raise ParameterError(f"F_causal must lie in [0.5, 1], got {self.F_causal}")
        for name in ("bytes_qkv", "bytes_if", "bytes_Cmn"):
            if getattr(self, name) not in (2, 4):
                raise ParameterError(f"{name} must be 2 or 4, got {getattr(self, name)}")
        unknown = set(self.F_op) - set(OPS)
        if unknown:
            raise ParameterError(f"unknown op factors: {sorted(unknown)}")

    def f(self, op: str) -> float:
        return float(self.F_op.get(op, 1.0))


@dataclass(frozen=True)
class Shape:
    """Head geometry and sequence size; ``d_qk`` may be fractional."""

    d_hv: float
    d_qk: float
    T: float = 8192
    n_head: int = 1
    n_batch: int = 1

    @classmethod
    def from_pqk(cls, d_hv: float, p_qk: float, **kw) -> "Shape":
        return cls(d_hv=d_hv, d_qk=p_qk * d_hv, **kw)

    @property
    def p_qk(self) -> float:
        return self.d_qk / self.d_hv

    @property
    def heads(self) -> float:
        return float(self.n_head * self.n_batch)


@dataclass(frozen=True)
class CostBreakdown:
    items: dict  # line item -> FLOPs, already scaled to the full problem
    bytes_loaded: float
    bytes_stored: float

    @property
    def flops(self) -> float:
        return float(sum(self.items.values()))

    @property
    def bytes_total(self) -> float:
        return self.bytes_loaded + self.bytes_stored


# --- FLOPs -------------------------------------------------------------------


def _factors(params: PerfParams, mode: Mode) -> Callable[[str], float]:
    if Mode(mode) is Mode.SIMPLIFIED:
        return lambda op: 1.0
    return params.f


def chunk_flop_items(s: Shape, params: PerfParams, variant, mode=Mode.EXACT, L: float = 64) -> dict:
    """Per-chunk, per-head FLOPs of every table row."""
    variant, mode = as_variant(variant), Mode(mode)
    F = _factors(params, mode)
    Fc, dq, dh = params.F_causal, s.d_qk, s.d_hv
    tri = 0.5 * L * (L + 1)
    intra = Fc * (2 * L * L * (dq + dh) + 3 * L * L)
    numerator = 2 * dq * dh + 2 * L * dq * dh + L * dq
    if variant is Variant.EXP:
        return {
            "gates": 2 * L + tri + L * (1 + F("exp") + F("log") + F("sig")) + 3 + F("max") + F("exp"),
            "numerator": numerator,
            "denominator": 2 * dq + 2 * L * dq,
            "cum_forget": tri + L * (F("log") + F("sig")),
            "gate_matrix": Fc * (L * L * (3 + F("exp") + F("max")) + L * (1 + F("max"))),
            "intra_outputs": intra,
            "inter_outputs": 2 * L * dq * dh + 3 * L * dq,
            "combination": 2 * L * dh + L * (1 + F("max") + F("abs") + F("exp")),
        }
    # the simplified table lists 2.5 L for this row, the exact one 2 L (F_log + F_sig)
    cum_forget = tri + 2 * L if mode is Mode.SIMPLIFIED else tri + 2 * L * (F("log") + F("sig"))
    return {
        "gates": 2 * L + tri + L * F("exp") + F("exp") + 2 * L * (F("log") + F("sig")),
        "numerator": numerator,
        "denominator": 0.0,
        "cum_forget": cum_forget,
        "gate_matrix": Fc * L * L * (2 + F("exp")),
        "intra_outputs": intra,
        "inter_outputs": 2 * L * dq * dh + L * dq,
        "combination": L * dh,
    }


def flops_chunkwise(s: Shape, params: PerfParams, variant="sig", mode=Mode.EXACT, L: float = 64) -> CostBreakdown:
    if L <= 0:
        raise ParameterError(f"chunk size must be positive, got {L}")
    scale = s.heads * s.T / L
    items = {k: scale * v for k, v in chunk_flop_items(s, params, variant, mode, L).items()}
    loaded, stored = memops(s, params, variant, Formulation.CHUNKWISE, L)[:2]
    return CostBreakdown(items=items, bytes_loaded=loaded, bytes_stored=stored)


def flops_parallel(s: Shape, params: PerfParams, variant="sig", mode=Mode.EXACT) -> CostBreakdown:
    variant = as_variant(variant)
    F = _factors(params, mode)
    Fc, dq, dh, T = params.F_causal, s.d_qk, s.d_hv, s.T
    n_log_sig = 1 if variant is Variant.EXP else 2
    items = {
        "cum_forget": 0.5 * T * (T + 1) + n_log_sig * T * (F("log") + F("sig")),
        "gate_matrix": T * T * (3 + F("exp") + F("max") + F("mask")),
        "logits": Fc * (2 * T * T * dq + 2 * T * T),
        "normalization": Fc * (T * T * (3 + F("abs")) + T * (F("exp") + F("max"))) if variant is Variant.EXP else 0.0,
        "outputs": Fc * 2 * T * T * dh,
    }
    items = {k: s.heads * v for k, v in items.items()}
    loaded, stored = memops(s, params, variant, Formulation.PARALLEL)[:2]
    return CostBreakdown(items=items, bytes_loaded=loaded, bytes_stored=stored)


def flops_recurrent(s: Shape, params: PerfParams, variant="sig", mode=Mode.EXACT) -> CostBreakdown:
    variant = as_variant(variant)
    F = _factors(params, mode)
    dq, dh = s.d_qk, s.d_hv
    if variant is Variant.EXP:
        items = {
            "gates": 4 + 2 * F("exp") + F("log") + F("sig") + F("max"),
            "cell_update": 4 * dq * dh,
            "denominator": 6 * dq + dh + 1 + F("abs") + F("max"),
            "output": 2 * dh * dq + dq,
        }
    else:
        items = {"gates": 2 * F("sig"), "cell_update": 4 * dq * dh, "denominator": 0.0, "output": 2 * dh * dq + dq}
    items = {k: s.heads * s.T * v for k, v in items.items()}
    loaded, stored = memops(s, params, variant, Formulation.RECURRENT)[:2]
    return CostBreakdown(items=items, bytes_loaded=loaded, bytes_stored=stored)


def total_flops(s: Shape, params: PerfParams, variant="sig", formulation=Formulation.CHUNKWISE, L: float = 64) -> float:
    """Closed-form simplified sequence totals, scaled by heads and batch."""
    variant, formulation = as_variant(variant), Formulation(formulation)
    Fc, dq, dh, T = params.F_causal, s.d_qk, s.d_hv, s.T
    if formulation is Formulation.CHUNKWISE:
        if variant is Variant.EXP:
            per = (
                T * L * Fc * (2 * (dq + dh) + 8)
                + T * L
                + 2 * T * Fc
                + T * (4 * dq * dh + 6 * dq + 4 * dh + 13)
                + T / L * (2 * dq * dh + 2 * dq + 5)
            )
        else:
            per = T * L * Fc * (2 * (dq + dh) + 6) + T * L + T * (4 * dq * dh + 2 * dq + dh + 11) + T / L * (2 * dq * dh + 5)
    elif formulation is Formulation.PARALLEL:
        if variant is Variant.EXP:
            per = T * T * Fc * (2 * (dq + dh) + 6) + 2 * T * Fc + 6.5 * T * T + 2.5 * T
        else:
            per = T * T * Fc * (2 * (dq + dh) + 2) + 6.5 * T * T + 4.5 * T
    else:
        if variant is Variant.EXP:
            per = T * (6 * dq * dh + 7 * dq + dh + 12)
        else:
            per = T * (6 * dq * dh + dq + 2)
    return s.heads * per


# --- memory traffic ----------------------------------------------------------


def memops(s: Shape, params: PerfParams, variant="sig", formulation=Formulation.CHUNKWISE, L: float = 64):
    """``(bytes_loaded, bytes_stored, total)`` over the full problem.

    The total is always load + store; initial and final states are not
    counted.
    """
    variant, formulation = as_variant(variant), Formulation(formulation)
    dq, dh = s.d_qk, s.d_hv
    bq, bi, bc = params.bytes_qkv, params.bytes_if, params.bytes_Cmn
    exp_ = variant is Variant.EXP
    state = (dq * dh + dq + 1) if exp_ else dq * dh
    if formulation is Formulation.CHUNKWISE:
        load = L * (dq + dh) * bq + 2 * L * bi + L * (2 * dq + dh) * bq + 2 * L * bi + state * bc
        store = state * bc + L * dh * bq + (2 * L * bc if exp_ else 0.0)
        scale = s.heads * s.T / L
    elif formulation is Formulation.PARALLEL:
        load = s.T * (2 * dq + dh) * bq + 2 * s.T * bi
        store = s.T * dh * bq + (2 * s.T * bc if exp_ else 0.0)
        scale = s.heads
    else:
        load = (2 * dq + dh) * bq + 2 * bi + state * bc
        store = dh * bq + state * bc
        scale = s.heads * s.T
    return scale * load, scale * store, scale * (load + store)


def state_bytes(s: Shape, params: PerfParams, variant="sig", L: float = 64) -> float:
    """Bytes of the chunk-boundary states the chunkwise form materializes."""
    state = (s.d_qk * s.d_hv + s.d_qk + 1) if as_variant(variant) is Variant.EXP else s.d_qk * s.d_hv
    return s.heads * (s.T / L) * state * params.bytes_Cmn


# --- accelerators ------------------------------------------------------------


@dataclass(frozen=True)
class AcceleratorSpec:
    name: str
    flops_per_s: float
    bytes_per_s: float

    def __post_init__(self) -> None:
        if not (self.flops_per_s > 0 and self.bytes_per_s > 0):
            raise ParameterError(f"accelerator {self.name!r} needs positive throughput and bandwidth")

    @property
    def intensity(self) -> float:
        return self.flops_per_s / self.bytes_per_s


PRESETS = (
    AcceleratorSpec("V100 SXM2", 120e12, 0.9e12),
    AcceleratorSpec("A100 SXM", 312e12, 1.935e12),
    AcceleratorSpec("H100 SXM", 989e12, 3.35e12),
    AcceleratorSpec("B200 HGX", 2250e12, 7.7e12),
)


def accelerator_registry(path: str | Path | None = None) -> list[AcceleratorSpec]:
    """Presets, extended (or overridden by name) with a JSON array file."""
    specs = {a.name: a for a in PRESETS}
    if path is not None:
        try:
            entries = json.loads(Path(path).read_text())
            for e in entries:
                specs[e["name"]] = AcceleratorSpec(str(e["name"]), float(e["flops_per_s"]), float(e["bytes_per_s"]))
        except (OSError, ValueError, KeyError, TypeError) as err:
            raise RegistryError(f"cannot read accelerator file {path}: {err}") from err
    return list(specs.values())


def lookup_accelerator(name: str, registry: Iterable[AcceleratorSpec] | None = None) -> AcceleratorSpec:
    registry = list(registry) if registry is not None else accelerator_registry()
    for spec in registry:
        if spec.name.lower() == name.lower():
            return spec
    # bare model name such as "H100"
    matches = [a for a in registry if a.name.split()[0].lower() == name.lower()]
    if len(matches) == 1:
        return matches[0]
    known = ", ".join(a.name for a in registry)
    raise RegistryError(f"unknown accelerator {name!r} (known: {known})")


def accelerator_intensity(accel: AcceleratorSpec) -> float:
    return accel.intensity


def roofline(accel: AcceleratorSpec, intensity: float) -> float:
    if intensity < 0:
        raise ParameterError(f"intensity must be >= 0, got {intensity}")
    return min(accel.bytes_per_s * intensity, accel.flops_per_s)


# --- runtime, intensity, optimal chunk sizes ---------------------------------


def is_extension(variant) -> bool:
    """The runtime template is only written down for the sigmoid variant."""
    return as_variant(variant) is Variant.EXP


def theoretical_runtime(
    s: Shape, params: PerfParams, accel: AcceleratorSpec, L: float, variant="sig", bound=Bound.SUM
) -> float:
    if L < 1:
        raise ParameterError(f"chunk size must be >= 1, got {L}")
    t_flops = total_flops(s, params, variant, Formulation.CHUNKWISE, L) / accel.flops_per_s
    t_bytes = memops(s, params, variant, Formulation.CHUNKWISE, L)[2] / accel.bytes_per_s
    return t_flops + t_bytes if Bound(bound) is Bound.SUM else max(t_flops, t_bytes)


def arithmetic_intensity(s: Shape, params: PerfParams, L: float, variant="sig") -> float:
    return total_flops(s, params, variant, Formulation.CHUNKWISE, L) / memops(s, params, variant, Formulation.CHUNKWISE, L)[2]


def _check_positive(**kw) -> None:
    for name, value in kw.items():
        if not value > 0:
            raise ParameterError(f"{name} must be positive, got {value}")


def flop_optimal_chunk_size(d_hv: float, p_qk: float, F_causal: float) -> float:
    _check_positive(d_hv=d_hv, p_qk=p_qk, F_causal=F_causal)
    return math.sqrt((2 * d_hv**2 * p_qk + 5) / (2 * F_causal * (d_hv * (1 + p_qk) + 3) + 1))


def runtime_optimal_chunk_size(d_hv: float, p_qk: float, F_causal: float, bytes_Cmn: float, I_acc: float) -> float:
    _check_positive(d_hv=d_hv, p_qk=p_qk, F_causal=F_causal, bytes_Cmn=bytes_Cmn)
    if I_acc < 0:
        raise ParameterError(f"I_acc must be >= 0, got {I_acc}")
    num = 2 * d_hv**2 * p_qk + 5 + 2 * I_acc * d_hv**2 * p_qk * bytes_Cmn
    return math.sqrt(num / (2 * F_causal * (d_hv * (1 + p_qk) + 3) + 1))


def chunk_candidates(T: int | None = None, L_max: int = 8192) -> list[int]:
    """Divisors of ``T`` when given, otherwise every integer in ``[1, L_max]``."""
    if T is None:
        return list(range(1, L_max + 1))
    T = int(T)
    return [L for L in range(1, T + 1) if T % L == 0]


def brute_force_argmin(objective: Callable[[float], float], candidates: Iterable[int]) -> int:
    best, best_val = None, math.inf
    for L in candidates:
        val = objective(L)
        if val < best_val:
            best, best_val = L, val
    if best is None:
        raise ParameterError("no candidate chunk sizes")
    return best


def brute_force_flop_optimal(d_hv: float, p_qk: float, F_causal: float, candidates=None) -> int:
    s = Shape.from_pqk(d_hv, p_qk, T=1)
    p = PerfParams(F_causal=F_causal)
    return brute_force_argmin(lambda L: total_flops(s, p, "sig", Formulation.CHUNKWISE, L), candidates or chunk_candidates())


def brute_force_runtime_optimal(
    d_hv: float, p_qk: float, F_causal: float, bytes_Cmn: int, accel: AcceleratorSpec, candidates=None, bound=Bound.SUM
) -> int:
    s = Shape.from_pqk(d_hv, p_qk, T=1)
    p = PerfParams(F_causal=F_causal, bytes_Cmn=bytes_Cmn)
    return brute_force_argmin(lambda L: theoretical_runtime(s, p, accel, L, "sig", bound), candidates or chunk_candidates())
