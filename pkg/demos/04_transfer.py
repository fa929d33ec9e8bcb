"""
How much signal passes through a cell
=====================================

Hold the input and forget gate pre-activations fixed for the whole
sequence and compare the size of the outputs with the size of the values.
Small input gates suppress the signal; the RMS norm that follows the cell
rescales what is left, unless the signal falls below its epsilon.
"""

import numpy as np

from tfla import Dims, transfer_scan

dims = Dims(T=256, d_qk=64, d_hv=64)
i_values = np.linspace(-12, 8, 6)
f_values = np.linspace(-5, 12, 6)


def show(title, table):
    print(f"\n{title}")
    print("  i \\ f " + " ".join(f"{f:6.1f}" for f in f_values))
    for i, row in zip(i_values, table):
        print(f"{i:7.1f} " + " ".join(f"{g:6.3f}" for g in row))


exp_grid = transfer_scan("exp", "default", 1e-6, i_values=i_values, f_values=f_values, dims=dims)
sig_grid = transfer_scan("sig", "ones", 1e-6, i_values=i_values, f_values=f_values, dims=dims)

show("exponential input gate, gain before the norm", exp_grid.G_before)
show("exponential input gate, gain after the norm", exp_grid.G_after)
show("sigmoid input gate, gain after the norm", sig_grid.G_after)
print("\nmean |exp - sig| after the norm:", f"{np.mean(np.abs(exp_grid.G_after - sig_grid.G_after)):.4f}")

# %%
# A larger epsilon swallows more of the weak signal, moving the point where
# the output recovers towards larger input gates.
fine = np.linspace(-14, 0, 29)
print("\n      eps   first i with gain >= 0.5 (f = 4)")
for eps in (1e-8, 1e-6, 1e-4, 1e-2):
    g = transfer_scan("sig", "ones", eps, i_values=fine, f_values=[4.0], dims=dims).G_after[:, 0]
    print(f"{eps:9.0e}   {fine[np.argmax(g >= 0.5)]:6.1f}")
