"""Tiled intra-chunk kernels, rendered as explicit block loops.

Each *program* owns a disjoint output tile and runs its loop axes
sequentially in ascending block order.  Programs are independent, so the
order in which they are executed does not matter; ``schedule_seed`` shuffles
that order to demonstrate it.  Batch and head axes are vectorized.

Forward (exp): online max over the key/value blocks, rescaling the running
numerator and denominator by ``exp(m_old - m_new)``, then one combine step
against the inter-chunk contribution.  Forward (sig): a single fused loop,
no max tracking.

Backward work partitioning:

====== ================= =================
kernel parallel axes     loop axes
====== ================= =================
dQ     (L_hq, d_qk)      (L_kv, d_hv)
dK     (L_kv, d_qk)      (L_hq, d_hv)
dV     (L_kv, d_hv)      (L_hq, d_qk)
====== ================= =================

The backward kernels reuse the forward's saved combine max and denominator;
no maxima are recomputed.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np

from .chunkwise import (
    ChunkStates,
    Gradients,
    SavedStats,
    StabilizedGates,
    _check_saved,
    _prepare,
    chunk_states,
    from_chunks,
    gate_gradients,
    scaled_output_grad,
    stabilized_gates,
    state_gradients,
    to_chunks,
)
from .core import (
    NEG_SENTINEL,
    Dims,
    GeometryError,
    MemoryState,
    SequenceInputs,
    Variant,
    as_variant,
    clamped_divide,
    gate_exp,
)
from .gates import log_gate_matrix


@dataclass(frozen=True)
class BlockConfig:
    B_Lhq: int
    B_Lkv: int
    B_dqk: int
    B_dhv: int

    def __post_init__(self) -> None:
        for name in ("B_Lhq", "B_Lkv", "B_dqk", "B_dhv"):
            value = getattr(self, name)
            if int(value) != value or value < 1:
                raise GeometryError(f"{name} must be a positive integer, got {value!r}")
        if self.B_Lhq < self.B_Lkv:
            raise GeometryError(f"B_Lhq ({self.B_Lhq}) must be >= B_Lkv ({self.B_Lkv})")
        if self.B_Lhq % self.B_Lkv:
            # keeps key/value block edges on query block edges, so a block is
            # either fully below the diagonal or straddles it
            raise GeometryError(f"B_Lkv ({self.B_Lkv}) must divide B_Lhq ({self.B_Lhq})")

    def check(self, dims: Dims) -> None:
        dims.check_chunked()
        for block, size, label in (
            (self.B_Lhq, dims.L, "L"),
            (self.B_Lkv, dims.L, "L"),
            (self.B_dqk, dims.d_qk, "d_qk"),
            (self.B_dhv, dims.d_hv, "d_hv"),
        ):
            if size % block:
                raise GeometryError(f"block size {block} does not divide {label}={size}")

    @classmethod
    def single(cls, dims: Dims) -> "BlockConfig":
        return cls(dims.L, dims.L, dims.d_qk, dims.d_hv)

    @classmethod
    def default(cls, dims: Dims) -> "BlockConfig":
        """Halve every axis that is even; enough to exercise all block paths."""

        def half(n: int) -> int:
            return n // 2 if n % 2 == 0 and n > 1 else n

        hq = half(dims.L)
        return cls(hq, half(hq), half(dims.d_qk), half(dims.d_hv))

    def as_tuple(self) -> tuple[int, int, int, int]:
        return (self.B_Lhq, self.B_Lkv, self.B_dqk, self.B_dhv)


@dataclass
class TileTrace:
    """Visited (chunk, q_block, kv_block, masked) tuples of the forward pass."""

    visits: list[tuple[int, int, int, bool]] = field(default_factory=list)


def kv_block_count(i_q: int, blocks: BlockConfig) -> int:
    """Number of key/value blocks a query block visits (through the diagonal)."""
    return ((i_q + 1) * blocks.B_Lhq) // blocks.B_Lkv


def needs_mask(i_q: int, i_kv: int, blocks: BlockConfig) -> bool:
    return i_kv * blocks.B_Lkv >= i_q * blocks.B_Lhq


def _programs(*counts: int, schedule_seed: int | None):
    order = list(itertools.product(*(range(c) for c in counts)))
    if schedule_seed is not None:
        perm = np.random.default_rng(schedule_seed).permutation(len(order))
        order = [order[p] for p in perm]
    return order


def _blk(i: int, size: int) -> slice:
    return slice(i * size, (i + 1) * size)


@dataclass(frozen=True, eq=False)
class _Chunked:
    Q: np.ndarray
    K: np.ndarray
    V: np.ndarray
    scale: float


def _chunked(inputs: SequenceInputs, dims: Dims) -> _Chunked:
    L = dims.L
    return _Chunked(to_chunks(inputs.q, L), to_chunks(inputs.k, L), to_chunks(inputs.v, L), 1.0 / np.sqrt(dims.d_qk))


def tfla_forward(
    inputs: SequenceInputs,
    dims: Dims,
    blocks: BlockConfig,
    variant=Variant.EXP,
    *,
    initial_state: MemoryState | None = None,
    state_dtype=None,
    schedule_seed: int | None = None,
    trace: TileTrace | None = None,
):
    """Return ``(h_tilde, ChunkStates, SavedStats)`` like the chunkwise forward."""
    variant = as_variant(variant)
    blocks.check(dims)
    gates = _prepare(inputs, dims, variant)
    states = chunk_states(inputs, dims, variant, gates, initial_state, state_dtype)
    x = _chunked(inputs, dims)
    B, H = inputs.q.shape[:2]
    NC, L = dims.n_chunk, dims.L
    dtype = np.result_type(inputs.dtype, states.C.dtype)
    out = np.zeros((B, H, NC, L, dims.d_hv), dtype=dtype)
    m_combine = np.zeros((B, H, NC, L), dtype=dtype)
    h_denom = np.ones((B, H, NC, L), dtype=dtype)
    n_q, n_v = L // blocks.B_Lhq, dims.d_hv // blocks.B_dhv
    n_qk = dims.d_qk // blocks.B_dqk

    for k, i_q, i_v in _programs(NC, n_q, n_v, schedule_seed=schedule_seed):
        rows = _blk(i_q, blocks.B_Lhq)
        vcols = _blk(i_v, blocks.B_dhv)
        Q, K, V = x.Q[:, :, k], x.K[:, :, k], x.V[:, :, k]
        b = gates.b[:, :, k]
        i_log = gates.i_log[:, :, k]
        C_prev = states.C[:, :, k]
        exp_variant = variant is Variant.EXP

        acc = np.zeros((B, H, blocks.B_Lhq, blocks.B_dhv), dtype=dtype)
        inter = np.zeros_like(acc)
        n_acc = np.zeros((B, H, blocks.B_Lhq), dtype=dtype)
        n_inter = np.zeros_like(n_acc)
        m_old = np.full((B, H, blocks.B_Lhq), NEG_SENTINEL, dtype=dtype)

        def inter_loop():
            nonlocal inter, n_inter
            for i_d in range(n_qk):
                dq = _blk(i_d, blocks.B_dqk)
                Qs = Q[:, :, rows, dq] * x.scale
                inter = inter + Qs @ C_prev[:, :, dq, vcols]
                if exp_variant:
                    n_inter = n_inter + np.einsum("bhld,bhd->bhl", Qs, states.n[:, :, k, dq])

        if not exp_variant:
            # fused: inter contribution enters on the first kv iteration
            inter_loop()
            acc = gate_exp(b[:, :, rows])[..., None] * inter

        for i_kv in range(kv_block_count(i_q, blocks)):
            cols = _blk(i_kv, blocks.B_Lkv)
            S = np.zeros((B, H, blocks.B_Lhq, blocks.B_Lkv), dtype=dtype)
            for i_d in range(n_qk):
                dq = _blk(i_d, blocks.B_dqk)
                S = S + Q[:, :, rows, dq] @ np.swapaxes(K[:, :, cols, dq], -1, -2)
            S = S * x.scale
            masked = needs_mask(i_q, i_kv, blocks)
            if trace is not None and i_v == 0:
                trace.visits.append((k, i_q, i_kv, masked))
            D_tilde = log_gate_matrix(b[:, :, rows], b[:, :, cols], i_log[:, :, cols], rows.start, cols.start, mask=masked)
            if exp_variant:
                m_new = np.maximum(m_old, D_tilde.max(axis=-1))
                rescale = gate_exp(m_old - m_new)
                S_bar = S * gate_exp(D_tilde - m_new[..., None])
                acc = rescale[..., None] * acc + S_bar @ V[:, :, cols, vcols]
                n_acc = rescale * n_acc + S_bar.sum(axis=-1)
                m_old = m_new
            else:
                acc = acc + (S * gate_exp(D_tilde)) @ V[:, :, cols, vcols]

        if exp_variant:
            inter_loop()
            bm = b[:, :, rows] + states.m[:, :, k, None]
            mc = np.maximum(bm, m_old)
            inter_f = gate_exp(bm - mc)
            intra_f = gate_exp(m_old - mc)
            num = inter_f[..., None] * inter + intra_f[..., None] * acc
            den = inter_f * n_inter + intra_f * n_acc
            out[:, :, k, rows, vcols], hd = clamped_divide(num, den, mc)
            m_combine[:, :, k, rows] = mc
            h_denom[:, :, k, rows] = hd
        else:
            out[:, :, k, rows, vcols] = acc

    return from_chunks(out), states, SavedStats(m_combine=m_combine, h_denom=h_denom)


# --- backward ----------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class BackwardContext:
    """Recomputed quantities shared by the three backward kernels."""

    x: _Chunked
    gates: object
    sg: StabilizedGates
    states: ChunkStates
    dHt: np.ndarray  # [B, H, NC, L, d_hv]
    dC: np.ndarray  # [B, H, NC + 1, d_qk, d_hv]
    dg: np.ndarray  # [B, H, NC]
    variant: Variant


@dataclass(frozen=True, eq=False)
class DQResult:
    dq: np.ndarray  # [B, H, T, d_qk]
    db: np.ndarray  # [B, H, T] = q . dq, the query-side log-gate partial


@dataclass(frozen=True, eq=False)
class DKResult:
    dk: np.ndarray  # [B, H, T, d_qk]
    di_intra: np.ndarray  # [B, H, T] = k . dk_intra
    da: np.ndarray  # [B, H, T] = k . dk_inter


def backward_context(inputs: SequenceInputs, dims: Dims, variant, dH: np.ndarray, saved) -> BackwardContext:
    """Recompute stabilized gates and run the reverse state recurrence once."""
    variant = as_variant(variant)
    states, stats = _check_saved(saved)
    gates = _prepare(inputs, dims, variant)
    if dH.shape != inputs.v.shape:
        raise GeometryError(f"dH shape {dH.shape} != output shape {inputs.v.shape}")
    x = _chunked(inputs, dims)
    sg = stabilized_gates(gates, states, stats, variant)
    dHt = scaled_output_grad(dH, stats, dims.L)
    Q_bar = x.Q * (x.scale * sg.b_bar)[..., None]
    st = state_gradients(dHt, Q_bar, states, sg)
    return BackwardContext(x=x, gates=gates, sg=sg, states=states, dHt=dHt, dC=st.dC, dg=st.dg, variant=variant)


def _gate_block(ctx: BackwardContext, k: int, i_q: int, i_kv: int, blocks: BlockConfig) -> np.ndarray:
    """Stabilized gate block ``D`` from the saved combine max."""
    rows, cols = _blk(i_q, blocks.B_Lhq), _blk(i_kv, blocks.B_Lkv)
    b = ctx.gates.b[:, :, k]
    D_tilde = log_gate_matrix(
        b[:, :, rows], b[:, :, cols], ctx.gates.i_log[:, :, k, cols], rows.start, cols.start, mask=needs_mask(i_q, i_kv, blocks)
    )
    if ctx.variant is Variant.EXP:
        return gate_exp(D_tilde - ctx.sg.m_combine[:, :, k, rows, None])
    return gate_exp(D_tilde)


def _resolve(inputs, dims, blocks, variant, dH, saved, ctx):
    blocks.check(dims)
    return ctx if ctx is not None else backward_context(inputs, dims, variant, dH, saved)


def tfla_backward_dQ(
    inputs: SequenceInputs,
    dims: Dims,
    blocks: BlockConfig,
    variant,
    dH: np.ndarray,
    saved,
    *,
    ctx: BackwardContext | None = None,
    schedule_seed: int | None = None,
) -> DQResult:
    ctx = _resolve(inputs, dims, blocks, variant, dH, saved, ctx)
    x, L = ctx.x, dims.L
    dQ = np.zeros_like(x.Q)
    n_q, n_d, n_v = L // blocks.B_Lhq, dims.d_qk // blocks.B_dqk, dims.d_hv // blocks.B_dhv
    for k, i_q, i_d in _programs(dims.n_chunk, n_q, n_d, schedule_seed=schedule_seed):
        rows, dq = _blk(i_q, blocks.B_Lhq), _blk(i_d, blocks.B_dqk)
        dH_rows = ctx.dHt[:, :, k, rows]
        acc = np.zeros(dQ.shape[:2] + (blocks.B_Lhq, blocks.B_dqk), dtype=dQ.dtype)
        for i_kv in range(kv_block_count(i_q, blocks)):
            cols = _blk(i_kv, blocks.B_Lkv)
            dS = np.zeros(dQ.shape[:2] + (blocks.B_Lhq, blocks.B_Lkv), dtype=dQ.dtype)
            for i_v in range(n_v):
                vc = _blk(i_v, blocks.B_dhv)
                dS = dS + dH_rows[..., vc] @ np.swapaxes(x.V[:, :, k, cols, vc], -1, -2)
            acc = acc + (dS * _gate_block(ctx, k, i_q, i_kv, blocks)) @ x.K[:, :, k, cols, dq]
        inter = np.zeros_like(acc)
        for i_v in range(n_v):
            vc = _blk(i_v, blocks.B_dhv)
            inter = inter + dH_rows[..., vc] @ np.swapaxes(ctx.states.C[:, :, k, dq, vc], -1, -2)
        dQ[:, :, k, rows, dq] = x.scale * (acc + ctx.sg.b_bar[:, :, k, rows, None] * inter)
    dq_flat = from_chunks(dQ)
    return DQResult(dq=dq_flat, db=np.einsum("bhtd,bhtd->bht", inputs.q, dq_flat))


def tfla_backward_dK(
    inputs: SequenceInputs,
    dims: Dims,
    blocks: BlockConfig,
    variant,
    dH: np.ndarray,
    saved,
    *,
    ctx: BackwardContext | None = None,
    schedule_seed: int | None = None,
) -> DKResult:
    ctx = _resolve(inputs, dims, blocks, variant, dH, saved, ctx)
    x, L = ctx.x, dims.L
    dK_intra = np.zeros_like(x.K)
    dK_inter = np.zeros_like(x.K)
    n_kv, n_d, n_v = L // blocks.B_Lkv, dims.d_qk // blocks.B_dqk, dims.d_hv // blocks.B_dhv
    n_q = L // blocks.B_Lhq
    for k, i_kv, i_d in _programs(dims.n_chunk, n_kv, n_d, schedule_seed=schedule_seed):
        cols, dq = _blk(i_kv, blocks.B_Lkv), _blk(i_d, blocks.B_dqk)
        V_cols = x.V[:, :, k, cols]
        acc = np.zeros(x.K.shape[:2] + (blocks.B_Lkv, blocks.B_dqk), dtype=x.K.dtype)
        for i_q in range((i_kv * blocks.B_Lkv) // blocks.B_Lhq, n_q):
            rows = _blk(i_q, blocks.B_Lhq)
            dS_t = np.zeros(x.K.shape[:2] + (blocks.B_Lkv, blocks.B_Lhq), dtype=x.K.dtype)
            for i_v in range(n_v):
                vc = _blk(i_v, blocks.B_dhv)
                dS_t = dS_t + V_cols[..., vc] @ np.swapaxes(ctx.dHt[:, :, k, rows, vc], -1, -2)
            D_t = np.swapaxes(_gate_block(ctx, k, i_q, i_kv, blocks), -1, -2)
            acc = acc + (dS_t * D_t) @ x.Q[:, :, k, rows, dq]
        inter = np.zeros_like(acc)
        for i_v in range(n_v):
            vc = _blk(i_v, blocks.B_dhv)
            inter = inter + V_cols[..., vc] @ np.swapaxes(ctx.dC[:, :, k + 1, dq, vc], -1, -2)
        dK_intra[:, :, k, cols, dq] = x.scale * acc
        dK_inter[:, :, k, cols, dq] = ctx.sg.a_bar[:, :, k, cols, None] * inter
    intra, inter = from_chunks(dK_intra), from_chunks(dK_inter)
    return DKResult(
        dk=intra + inter,
        di_intra=np.einsum("bhtd,bhtd->bht", inputs.k, intra),
        da=np.einsum("bhtd,bhtd->bht", inputs.k, inter),
    )


def tfla_backward_dV(
    inputs: SequenceInputs,
    dims: Dims,
    blocks: BlockConfig,
    variant,
    dH: np.ndarray,
    saved,
    *,
    ctx: BackwardContext | None = None,
    schedule_seed: int | None = None,
) -> np.ndarray:
    ctx = _resolve(inputs, dims, blocks, variant, dH, saved, ctx)
    x, L = ctx.x, dims.L
    dV = np.zeros_like(x.V)
    n_kv, n_d, n_v = L // blocks.B_Lkv, dims.d_qk // blocks.B_dqk, dims.d_hv // blocks.B_dhv
    n_q = L // blocks.B_Lhq
    for k, i_kv, i_v in _programs(dims.n_chunk, n_kv, n_v, schedule_seed=schedule_seed):
        cols, vc = _blk(i_kv, blocks.B_Lkv), _blk(i_v, blocks.B_dhv)
        acc = np.zeros(x.V.shape[:2] + (blocks.B_Lkv, blocks.B_dhv), dtype=x.V.dtype)
        for i_q in range((i_kv * blocks.B_Lkv) // blocks.B_Lhq, n_q):
            rows = _blk(i_q, blocks.B_Lhq)
            S_t = np.zeros(x.V.shape[:2] + (blocks.B_Lkv, blocks.B_Lhq), dtype=x.V.dtype)
            for i_d in range(n_d):
                dq = _blk(i_d, blocks.B_dqk)
                S_t = S_t + x.K[:, :, k, cols, dq] @ np.swapaxes(x.Q[:, :, k, rows, dq], -1, -2)
            S_bar_t = x.scale * S_t * np.swapaxes(_gate_block(ctx, k, i_q, i_kv, blocks), -1, -2)
            acc = acc + S_bar_t @ ctx.dHt[:, :, k, rows, vc]
        K_bar = x.K[:, :, k, cols] * ctx.sg.a_bar[:, :, k, cols, None]
        for i_d in range(n_d):
            dq = _blk(i_d, blocks.B_dqk)
            acc = acc + K_bar[..., dq] @ ctx.dC[:, :, k + 1, dq, vc]
        dV[:, :, k, cols, vc] = acc
    return from_chunks(dV)


def tfla_backward(
    inputs: SequenceInputs,
    dims: Dims,
    blocks: BlockConfig,
    variant,
    dH: np.ndarray,
    saved,
    *,
    schedule_seed: int | None = None,
) -> Gradients:
    """Run the three kernels and assemble gate gradients from their partials.

    The log-gate partials follow from dot products with the kernels'
    outputs: the query side gives ``q . dq`` and the key side splits into
    the intra part (``k . dk_intra``) and the inter part (``k . dk_inter``).
    """
    variant = as_variant(variant)
    blocks.check(dims)
    ctx = backward_context(inputs, dims, variant, dH, saved)
    rq = tfla_backward_dQ(inputs, dims, blocks, variant, dH, saved, ctx=ctx, schedule_seed=schedule_seed)
    rk = tfla_backward_dK(inputs, dims, blocks, variant, dH, saved, ctx=ctx, schedule_seed=schedule_seed)
    dv = tfla_backward_dV(inputs, dims, blocks, variant, dH, saved, ctx=ctx, schedule_seed=schedule_seed)
    L = dims.L
    db = to_chunks(rq.db - rk.di_intra, L)
    d_fpre, d_ipre = gate_gradients(ctx.dg, db, to_chunks(rk.da, L), to_chunks(rk.di_intra, L), inputs, variant)
    return Gradients(dq=rq.dq, dk=rk.dk, dv=dv, d_fpre=d_fpre, d_ipre=d_ipre)
