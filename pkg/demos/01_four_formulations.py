"""
One cell, four ways to compute it
=================================

The mLSTM cell can be run step by step, as one masked matrix product over
the whole sequence, chunk by chunk, or chunk by chunk with the chunk itself
split into tiles.  All four give the same outputs; this script checks that
and shows what the chunk size trades off.
"""

import time

import numpy as np

from tfla import (
    BlockConfig,
    Dims,
    Rng,
    chunkwise_forward,
    exponent_monitor,
    make_inputs,
    max_abs_diff,
    parallel_forward,
    run_recurrent,
    tfla_forward,
)

# A small problem: 2 heads, a sequence of 256 steps, chunks of 32.
dims = Dims(T=256, L=32, d_qk=32, d_hv=64, n_head=2)
x = make_inputs(dims, Rng(0))
print("q", x.q.shape, "v", x.v.shape, "gates", x.i_pre.shape)

# %%
# Run every formulation for both input gates.  The monitor records every
# argument handed to the stabilized exponential.
for variant in ("exp", "sig"):
    with exponent_monitor() as stats:
        outs = {
            "recurrent": run_recurrent(x, dims, variant).h_tilde,
            "parallel": parallel_forward(x, dims, variant),
            "chunkwise": chunkwise_forward(x, dims, variant)[0],
            "tiled": tfla_forward(x, dims, BlockConfig(16, 8, 16, 32), variant)[0],
        }
    ref = outs["recurrent"]
    print(f"\n{variant} input gate")
    for name, h in outs.items():
        print(f"  {name:10s} max |h - recurrent| = {max_abs_diff(h, ref):.1e}")
    print(f"  exponent arguments: {stats.calls} calls, largest {stats.max_arg:.3g}, {stats.violations} above zero")

# %%
# Large gate pre-activations would overflow a naive exponential; the
# stabilized forms stay finite.
loud = x.replace(i_pre=x.i_pre + 80.0)
h = chunkwise_forward(loud, dims, "exp")[0]
print("\ninput gates shifted by +80: finite =", bool(np.all(np.isfinite(h))),
      " diff to recurrent =", f"{max_abs_diff(h, run_recurrent(loud, dims, 'exp').h_tilde):.1e}")

# %%
# The chunk size moves work between the quadratic part inside a chunk and
# the state recurrence across chunks.  Only the wall clock changes.
long = Dims(T=1024, d_qk=64, d_hv=64)
xl = make_inputs(long, Rng(1))
print("\nchunk size  seconds  states kept")
for L in (16, 64, 256, 1024):
    d = long.with_chunk(L)
    t0 = time.perf_counter()
    _, states, _ = chunkwise_forward(xl, d, "sig")
    print(f"{L:10d}  {time.perf_counter() - t0:7.4f}  {states.C.shape[2]:11d}")
