"""
How many bits does running layer-norm statistics need?
======================================================

Mean and variance are accumulated one element at a time with a reciprocal
table of 2**nu / i and inputs scaled by s. This sweeps both knobs and
reports the relative error of the resulting mean and standard deviation.
"""

import numpy as np

from systolic_vit.oracles import trend_sequences, welford_fixed_error

seqs = trend_sequences(count=200)
nus = [2, 4, 6, 8, 10, 12]
scales = [1, 4, 16, 32, 128]

grid = np.array([[welford_fixed_error(nu, s, seqs) for s in scales] for nu in nus])

print("relative error of (mean, std); rows nu, columns s")
print("        " + "".join(f"{s:>10d}" for s in scales))
for nu, row in zip(nus, grid):
    print(f"nu={nu:<4d}" + "".join(f"{v:10.2e}" for v in row))

base = grid[nus.index(6), scales.index(32)]
print(f"\nnu=6, s=32 gives {base:.2e}; past that, refining one knob alone stops helping")
