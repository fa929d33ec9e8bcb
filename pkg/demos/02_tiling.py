"""
Tiling inside a chunk
=====================

Inside a chunk the query rows and key/value columns are split again into
blocks, so each program only touches a small tile.  Blocks above the
diagonal are skipped, blocks on it are masked.
"""

import numpy as np

from tfla import BlockConfig, Dims, Rng, chunkwise_forward, make_inputs, max_abs_diff, tfla_forward
from tfla.core import GeometryError
from tfla.tiled import TileTrace, kv_block_count, needs_mask

dims = Dims(T=64, L=32, d_qk=16, d_hv=16)
x = make_inputs(dims, Rng(0))
blocks = BlockConfig(B_Lhq=16, B_Lkv=8, B_dqk=8, B_dhv=8)

# %%
# Which key/value blocks does each query block visit?
for i_q in range(dims.L // blocks.B_Lhq):
    visits = ["M" if needs_mask(i_q, j, blocks) else "." for j in range(kv_block_count(i_q, blocks))]
    print(f"query block {i_q}: {' '.join(visits)}   (. full, M masked)")

# %%
# The trace records the order in which tiles were visited.  Shuffling the
# program order does not change the result.
trace = TileTrace()
h_ref = chunkwise_forward(x, dims, "exp")[0]
h_tiled = tfla_forward(x, dims, blocks, "exp", trace=trace)[0]
h_shuffled = tfla_forward(x, dims, blocks, "exp", schedule_seed=7)[0]
print(f"\n{len(trace.visits)} tile visits, {sum(v[3] for v in trace.visits)} masked")
print(f"tiled vs chunkwise  {max_abs_diff(h_tiled, h_ref):.1e}")
print(f"shuffled vs tiled   {max_abs_diff(h_shuffled, h_tiled):.1e}")

# %%
# Any valid block shape gives the same answer.
for cfg in [(32, 32, 16, 16), (32, 8, 4, 16), (8, 8, 16, 2), (16, 16, 16, 16)]:
    h = tfla_forward(x, dims, BlockConfig(*cfg), "exp")[0]
    print(f"blocks {cfg}: diff {max_abs_diff(h, h_ref):.1e}")

# %%
# Shapes that do not tile the chunk are refused up front.
for cfg in [(8, 16, 8, 8), (32, 32, 3, 16)]:
    try:
        BlockConfig(*cfg).check(dims)
    except GeometryError as err:
        print(f"blocks {cfg}: {err}")

print("\nfinite:", bool(np.all(np.isfinite(h_tiled))))
