"""
Checking the backward pass
==========================

The chunkwise and tiled backward passes are compared against central
finite differences of the forward pass.  For the exponential gate the
normalizer is treated as a constant, which is what the analytic backward
pass assumes.
"""

import numpy as np

from tfla import BlockConfig, Dims, Rng, chunkwise_backward, chunkwise_forward, make_inputs, tfla_backward, tfla_forward
from tfla.gradcheck import compare, fd_gradients

dims = Dims(T=16, L=4, d_qk=4, d_hv=4)
x = make_inputs(dims, Rng(0))
dH = np.random.default_rng(1).standard_normal(x.v.shape)
blocks = BlockConfig(4, 2, 2, 2)

for variant in ("sig", "exp"):
    numeric = fd_gradients(x, variant, dH, step=1e-6)

    _, states, stats = chunkwise_forward(x, dims, variant)
    chunk = chunkwise_backward(x, dims, variant, dH, (states, stats)).as_dict()

    _, t_states, t_stats = tfla_forward(x, dims, blocks, variant)
    tiled = tfla_backward(x, dims, blocks, variant, dH, (t_states, t_stats)).as_dict()

    print(f"\n{variant} input gate, relative error against finite differences")
    print("          " + "  ".join(f"{k:>8s}" for k in numeric))
    for name, grads in (("chunkwise", chunk), ("tiled", tiled)):
        errs = compare(grads, numeric)
        print(f"{name:10s}" + "  ".join(f"{errs[k]:8.1e}" for k in numeric))

# %%
# Gradients flow into the gates too.  A forget gate early in the sequence
# influences every later output, so its gradient is usually the largest.
print("\n|d f_pre| by time step:", np.round(np.abs(chunk["d_fpre"][0, 0]), 3))
