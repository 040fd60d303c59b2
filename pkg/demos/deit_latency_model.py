"""
Latency budget for DeiT-sized attention
=======================================

Closed-form cycle counts for the three DeiT sizes at 400 MHz with a 64-bit
link, then the link width swept until compute becomes the bottleneck.
"""

from systolic_vit import analytics as an
from systolic_vit.msa_func import PRESETS

print(f"{'model':8s}{'1 head':>8s}{'comm':>7s}{'pitch':>7s}{'MSA':>8s}{'us':>8s}{'layer':>8s}")
for name in ("deit-t", "deit-s", "deit-b"):
    t = an.TimingInputs(PRESETS[name])
    msa = an.msa_latency(t)
    print(
        f"{name:8s}{an.sa_latency(t):8d}{an.comm_cycles(t):7d}{an.pitch(t)[0]:7d}"
        f"{msa:8d}{msa * t.clock_ns / 1000:8.2f}{an.layer_cycles(t):8d}"
    )

rep = an.full_model_latency(an.TimingInputs(PRESETS["deit-s"]), layers=12)
print(f"\nDeiT-S, 12 layers: {rep.model_cycles} cycles, {rep.latency_us:.1f} us, {rep.tokens_per_s:,.0f} tokens/s")

print("\nlink width sweep, DeiT-S")
for bus in (16, 32, 64, 128, 256, None):
    t = an.TimingInputs(PRESETS["deit-s"], bus_bits=bus)
    p, binding = an.pitch(t)
    try:
        msa = str(an.msa_latency(t))
    except an.AnalyticsError:
        msa = "link too slow"
    label = "inf" if bus is None else bus
    print(f"  {label!s:>4} bit/cycle  pitch {p:5d} ({binding:13s})  MSA {msa}")

# multipliers built from LUTs cost a few cycles, once per head
for name in ("deit-t", "deit-s", "deit-b"):
    print(f"{name}: DSP-free adds {an.dsp_free_extra_latency(PRESETS[name])} cycles")

bw, oi = an.bandwidth_and_intensity(an.TimingInputs(PRESETS["deit-s"]), 13568, 3.125)
print(f"\n{bw} GB/s link; 13568 GOP/s over 3.125 GB/s is {oi:.0f} OP/byte")
