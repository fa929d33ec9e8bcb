"""
Counting FLOPs and bytes
========================

An analytical model of the work and memory traffic of one mLSTM layer.
From it follow the arithmetic intensity, a roofline runtime estimate and
the chunk sizes that minimize FLOPs or runtime.
"""

from tfla.perfmodel import (
    Formulation,
    Mode,
    PerfParams,
    Shape,
    accelerator_registry,
    lookup_accelerator,
    arithmetic_intensity,
    brute_force_argmin,
    chunk_candidates,
    flop_optimal_chunk_size,
    flops_chunkwise,
    memops,
    roofline,
    runtime_optimal_chunk_size,
    theoretical_runtime,
    total_flops,
)

params = PerfParams()

# %%
# Accelerators, described by peak FLOP/s and memory bandwidth.
print("accelerator      FLOP/byte")
for acc in accelerator_registry():
    print(f"{acc.name:15s}  {acc.intensity:9.1f}")

# %%
# Where the FLOPs of a chunkwise layer go, for a 64-wide head.
s = Shape(64, 64, T=8192)
for variant in ("sig", "exp"):
    cost = flops_chunkwise(s, params, variant, Mode.SIMPLIFIED, 64)
    print(f"\n{variant}: {cost.flops:.3e} FLOPs")
    for item, value in cost.items.items():
        print(f"  {item:14s} {value / cost.flops:6.1%}")
overhead = flops_chunkwise(s, params, "exp", Mode.SIMPLIFIED, 64).flops / flops_chunkwise(s, params, "sig", Mode.SIMPLIFIED, 64).flops - 1
print(f"exponential gate overhead: {overhead:.2%}")

# %%
# Small chunks mean many states to write; large chunks mean quadratic work.
big = Shape.from_pqk(512, 0.5, T=8192, n_head=8, n_batch=8)
h100 = lookup_accelerator("H100")
print("\n    L   GFLOP   MB moved  FLOP/byte  runtime ms  attainable TFLOP/s")
for L in (16, 64, 256, 1024, 4096):
    flops = total_flops(big, params, "sig", Formulation.CHUNKWISE, L)
    moved = memops(big, params, "sig", Formulation.CHUNKWISE, L)[2]
    intensity = arithmetic_intensity(big, params, L)
    print(f"{L:5d} {flops / 1e9:7.0f} {moved / 1e6:10.0f} {intensity:10.1f} "
          f"{theoretical_runtime(big, params, h100, L) * 1e3:11.2f} {roofline(h100, intensity) / 1e12:19.1f}")

# %%
# Optimal chunk sizes: closed forms against a brute-force search.
L_flop = flop_optimal_chunk_size(512, 0.5, 0.5)
L_time = runtime_optimal_chunk_size(512, 0.5, 0.5, 4, h100.intensity)
L_search = brute_force_argmin(lambda L: theoretical_runtime(big, params, h100, L), chunk_candidates(None, 8192))
print(f"\nFLOP-optimal chunk     {L_flop:7.2f}")
print(f"runtime-optimal chunk  {L_time:7.2f}  (search over integers: {L_search})")
