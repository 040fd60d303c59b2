"""
Watching the array: trace events against the closed forms
=========================================================

The cycle-level model runs all three heads of the toy workload through one
set of arrays. Heads enter one pitch apart; the trace records when inputs
enter, weights latch and the first output row completes.
"""

from systolic_vit import analytics as an
from systolic_vit.msa_func import PRESETS, make_params, quantize_tensor, random_input, sa_head
from systolic_vit.sim import ArrayConfig, HazardError, build_sa_pipeline, run_msa

dims = PRESETS["toy"]
params = make_params(dims, seed=1)
z3b = quantize_tensor(random_input(dims, 1), params.z_step, dims.bits)
cfg = ArrayConfig.for_dims(dims)

acc = build_sa_pipeline(dims, cfg, params)
outs, trace = run_msa(acc, z3b)
print(f"{acc.pe_count} MAC PEs, final cycle {trace.final_cycle}")

for e in trace.events:
    if e.unit.startswith("h0.") or e.unit.startswith("link"):
        print(f"{e.cycle:5d}  {e.unit:14s} {e.kind}")

t = an.TimingInputs(dims)
s = trace.summary
print("\n                 simulated  closed form")
print(f"single head      {s['sa_latency_cycles']:9d}  {an.sa_latency(t):11d}")
print(f"pitch            {s['pitch_cycles']:9d}  {an.pitch(t)[0]:11d}  ({an.pitch(t)[1]})")
print(f"all heads + I/O  {s['msa_latency_cycles']:9d}  {an.msa_latency(t):11d}")

same = all((o.codes == sa_head(z3b, params, g).sa.codes).all() for g, o in enumerate(outs))
print("\noutput codes equal the functional model:", same)

# squeeze heads closer than the input port allows
try:
    run_msa(build_sa_pipeline(dims, cfg, params, pitch_override=s["pitch_cycles"] - 1), z3b)
except HazardError as e:
    print("pitch - 1:", e)
