"""Closed-form performance model of the pipelined attention accelerator.

All cycle counts are exact integers. ``bus_bits=None`` stands for an unbounded
link (communication-free case).
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

from .msa_func import ModelDims
from .sim.config import DSP_FREE_STAGES, StageLatencies

GB = 1024 * 10**6  # 1 GB = 1024 MB of 10^6 bytes, so 64 bit at 400 MHz is 3.125 GB/s
SA_CONSTANT = 24


class AnalyticsError(ValueError):
    pass


@dataclass(frozen=True)
class TimingInputs:
    dims: ModelDims
    mul_cycles: int = 1
    bus_bits: int | None = 64
    clock_ns: float = 2.5

    def __post_init__(self):
        if self.mul_cycles < 1:
            raise AnalyticsError("mul_cycles must be >= 1")
        if self.bus_bits is not None and self.bus_bits <= 0:
            raise AnalyticsError("bus_bits must be positive")
        if self.clock_ns <= 0:
            raise AnalyticsError("clock_ns must be positive")

    @property
    def clock_hz(self) -> float:
        return 1e9 / self.clock_ns


@dataclass
class AnalyticReport:
    sa_latency_cycles: int
    msa_latency_cycles: int
    pitch_cycles: int
    comm_cycles: int
    layer_cycles: int
    model_cycles: int
    latency_us: float
    tokens_per_s: float
    bandwidth_GBps: float
    op_per_byte: float
    normalized_power: float

    def as_record(self) -> dict:
        return asdict(self)


def _check_heads(d: ModelDims) -> None:
    if d.embed_dim % d.heads:
        raise AnalyticsError("embed_dim must be divisible by heads")


def sa_latency(t: TimingInputs) -> int:
    """Single-head latency from the first input code to the first output row."""
    dm = t.dims
    _check_heads(dm)
    mul = t.mul_cycles
    dh = dm.head_dim
    return dm.embed_dim + 3 * dh + dh * (mul + 1) + 3 * dm.n_tokens + 5 * mul + SA_CONSTANT


def sa_latency_stages(dims: ModelDims, stages: StageLatencies) -> int:
    """Same latency with a separate multiplier latency per stage."""
    _check_heads(dims)
    dh = dims.head_dim
    return dims.embed_dim + 3 * dh + dh * (stages.agg + 1) + 3 * dims.n_tokens + stages.post_mac_sum + SA_CONSTANT


def dsp_free_extra_latency(dims: ModelDims, stages: StageLatencies = DSP_FREE_STAGES) -> int:
    """Extra single-head cycles of LUT multipliers over one-cycle DSP multipliers."""
    return sa_latency_stages(dims, stages) - sa_latency_stages(dims, StageLatencies.uniform(1))


def comm_cycles(t: TimingInputs) -> int:
    """Cycles to move one sequence of 3-bit codes over the bus (0 if unbounded)."""
    if t.bus_bits is None:
        return 0
    return math.ceil(t.dims.bits * t.dims.n_tokens * t.dims.embed_dim / t.bus_bits)


def comm_per_head(t: TimingInputs) -> int:
    return math.ceil(comm_cycles(t) / t.dims.heads)


def pitch(t: TimingInputs) -> tuple[int, str]:
    """Interval between heads entering the array, and which term binds."""
    dm = t.dims
    _check_heads(dm)
    terms = {
        "input": dm.n_tokens + dm.embed_dim,
        "weight_hold": dm.head_dim + 2 * dm.n_tokens,
        "communication": comm_per_head(t),
    }
    binding = max(terms, key=lambda k: (terms[k], k == "communication"))
    return terms[binding], binding


def msa_latency(t: TimingInputs) -> int:
    """Input transfer, all heads pipelined, output transfer."""
    l1 = sa_latency(t)
    p, _ = pitch(t)
    comm = comm_cycles(t)
    if comm > l1 + (t.dims.heads - 1) * p:
        raise AnalyticsError(
            f"communication ({comm} cycles) cannot overlap the previous block's compute ({l1 + (t.dims.heads - 1) * p})"
        )
    return l1 + (t.dims.heads - 1) * p + 2 * comm


def mlp_cycles(dims: ModelDims) -> int:
    return (dims.mlp_ratio + 2) * dims.embed_dim + dims.n_tokens


def projection_cycles(dims: ModelDims) -> int:
    return 2 * dims.embed_dim + dims.n_tokens


def sa_pipelined(t: TimingInputs) -> int:
    """All heads back to back at the per-head communication interval."""
    return sa_latency(t) + (t.dims.heads - 1) * (comm_cycles(t) // t.dims.heads)


def layer_cycles(t: TimingInputs) -> int:
    return 4 * comm_cycles(t) + sa_pipelined(t) + projection_cycles(t.dims) + mlp_cycles(t.dims)


def bandwidth_GBps(t: TimingInputs) -> float:
    if t.bus_bits is None:
        return math.inf
    return t.bus_bits / 8 * t.clock_hz / GB


def bandwidth_and_intensity(t: TimingInputs, total_ops: float, total_bytes: float) -> tuple[float, float]:
    if total_ops < 0 or total_bytes <= 0:
        raise AnalyticsError("ops must be non-negative and bytes positive")
    return bandwidth_GBps(t), total_ops / total_bytes


def normalized_power(ops: float, bitwidth: int) -> float:
    """Power proxy: operations weighted by (bitwidth / 8)^2."""
    if bitwidth < 1:
        raise AnalyticsError("bitwidth must be >= 1")
    return ops * (bitwidth / 8) ** 2


def dennard_normalize(throughput: float, power_eff: float, alpha: float) -> tuple[float, float]:
    """Scale figures from a node alpha times denser back to the reference node."""
    if alpha <= 0:
        raise AnalyticsError("alpha must be positive")
    return throughput / alpha**2, power_eff / alpha


def roofline_point(t: TimingInputs, intensity: float, peak_ops: float) -> float:
    """Attainable GOP/s: the lower of compute peak and intensity x bandwidth."""
    if intensity < 0:
        raise AnalyticsError("intensity must be non-negative")
    bw = bandwidth_GBps(t)
    if math.isinf(intensity) or math.isinf(bw):
        return peak_ops if intensity > 0 else 0.0
    return min(peak_ops, intensity * bw)


def msa_ops(dims: ModelDims) -> int:
    """Multiply-accumulates of one MSA block counted as two operations each."""
    n, d, dh, h = dims.n_tokens, dims.embed_dim, dims.head_dim, dims.heads
    macs = h * (3 * n * d * dh + 2 * n * n * dh)
    return 2 * macs


def full_model_latency(t: TimingInputs, layers: int, peak_ops: float | None = None) -> AnalyticReport:
    if layers < 1:
        raise AnalyticsError("layers must be >= 1")
    p, _ = pitch(t)
    comm = comm_cycles(t)
    layer = layer_cycles(t)
    model = layers * layer
    msa = msa_latency(t)
    ops = msa_ops(t.dims)
    bytes_moved = 2 * comm * (t.bus_bits or 0) / 8
    return AnalyticReport(
        sa_latency_cycles=sa_latency(t),
        msa_latency_cycles=msa,
        pitch_cycles=p,
        comm_cycles=comm,
        layer_cycles=layer,
        model_cycles=model,
        latency_us=model * t.clock_ns / 1000,
        tokens_per_s=t.clock_hz / p,
        bandwidth_GBps=bandwidth_GBps(t),
        op_per_byte=ops / bytes_moved if bytes_moved else math.inf,
        normalized_power=normalized_power(ops, t.dims.bits),
    )


@dataclass(frozen=True)
class ReferenceRow:
    """Published figures of other accelerators, shipped for report context only."""

    name: str
    device: str
    node: str
    model: str
    precision: str
    freq_mhz: float
    power_w: float | None
    throughput_gops: float | None


REFERENCE_ROWS = (
    ReferenceRow("Zhang", "ZCU9EG", "16nm", "ViT-S", "FP8", 300, 21.4, 1150),
    ReferenceRow("Calabash", "VU9P", "16nm", "BERT", "INT16", 243, 12.9, 880),
    ReferenceRow("HG-PIPE", "ZCU102", "16nm", "DeiT-T", "FP4", 375, 21.9, 1974),
)
