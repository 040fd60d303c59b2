"""
Integer-only attention, one head at a time
==========================================

A toy sequence of 8 tokens with 12 channels and 3 heads goes through the
3-bit pipeline: host quantizer, integer QKV projection, layer norm by
threshold comparison, shift-based softmax, weighted sum. The result is
compared with a float model that uses the same (dequantized) weights.
"""

import numpy as np

from systolic_vit.msa_func import PRESETS, float_reference_msa, make_params, msa_forward, random_input

dims = PRESETS["toy"]
params = make_params(dims, seed=0)
z = random_input(dims, seed=0)

res = msa_forward(z, params)

# every activation on the accelerator is a 3-bit code
print("input codes (first 3 tokens):")
print(res.z3b.codes[:3])

head = res.heads[0]
print("\nQ after layer norm, head 0:")
print(head.q.codes)
print("\nattention codes, head 0 (unsigned; scaled by the step each row sums to about 1):")
print(head.a.codes)
print("row sums x step:", np.round(head.a.codes.sum(axis=1) * head.a.step_global, 2))

# the host adds the projection and the residual in floating point
ref = float_reference_msa(z, params)
err = np.abs(res.output - ref)
print(f"\nMSA output error vs float model: max {err.max():.3f}, mean {err.mean():.3f}")
print(f"output magnitude for scale: mean |ref| = {np.abs(ref).mean():.3f}")
