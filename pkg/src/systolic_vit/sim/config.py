"""Array configuration: multiplier latencies, register stages, PE budget."""

from __future__ import annotations

from dataclasses import dataclass, field, fields

from ..msa_func import ModelDims


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class StageLatencies:
    """Cycles taken by each multiplier in the pipeline.

    ``agg`` is the multiplier inside every Welford aggregation PE; the other
    five sit in the post-MAC scale, NormQ first stage, softmax pre-scale,
    ScaleQ and the output quantizer.
    """

    agg: int
    scale: int
    normq: int
    exp_scale: int
    scaleq: int
    out_quant: int

    def __post_init__(self):
        for f in fields(self):
            if getattr(self, f.name) < 1:
                raise ConfigError(f"stage latency {f.name} must be >= 1")

    @classmethod
    def uniform(cls, mul: int) -> "StageLatencies":
        return cls(mul, mul, mul, mul, mul, mul)

    @property
    def post_mac_sum(self) -> int:
        return self.scale + self.normq + self.exp_scale + self.scaleq + self.out_quant


# LUT multipliers without DSP blocks: two cycles everywhere except the wide
# NormQ product, which needs four
DSP_FREE_STAGES = StageLatencies(agg=2, scale=2, normq=4, exp_scale=2, scaleq=2, out_quant=2)


@dataclass(frozen=True)
class RegisterStages:
    """Boundary registers between units on the single-head critical path.

    ``k_reorder`` and ``av_in`` are whole links and must be at least one
    cycle; the rest are extra stages on top of a unit's own latency.
    """

    qkv_out: int = 2
    ln_in: int = 1
    ln_turn: int = 1
    normq_out: int = 1
    k_reorder: int = 2
    a_out: int = 2
    softmax_in: int = 1
    softmax_turn: int = 1
    scaleq_out: int = 1
    av_in: int = 1
    av_out: int = 2

    def __post_init__(self):
        for f in fields(self):
            if getattr(self, f.name) < 0:
                raise ConfigError(f"register stage {f.name} must be >= 0")
        if self.k_reorder < 1 or self.av_in < 1:
            raise ConfigError("k_reorder and av_in links need at least one register")

    @property
    def total(self) -> int:
        return sum(getattr(self, f.name) for f in fields(self))


@dataclass(frozen=True)
class ArrayConfig:
    """Hardware template.

    ``rows`` x ``cols`` bounds every 2-D MAC array; ``mul_cycles`` is the
    uniform multiplier latency of the DSP variant. The DSP-free variant takes
    its per-stage latencies from ``dsp_free_stages``. ``bus_bits_per_cycle``
    of ``None`` models an unbounded link.
    """

    rows: int
    cols: int
    mul_cycles: int = 1
    bus_bits_per_cycle: int | None = 64
    clock_ns: float = 2.5
    variant: str = "dsp"
    exp_depth: int = 4
    latch_settle: int = 2
    registers: RegisterStages = field(default_factory=RegisterStages)
    dsp_free_stages: StageLatencies = DSP_FREE_STAGES

    def __post_init__(self):
        if self.mul_cycles < 1:
            raise ConfigError("mul_cycles must be >= 1")
        if self.bus_bits_per_cycle is not None and self.bus_bits_per_cycle <= 0:
            raise ConfigError("bus_bits_per_cycle must be positive")
        if self.variant not in ("dsp", "dsp_free"):
            raise ConfigError(f"unknown variant {self.variant!r}")
        if self.rows < 1 or self.cols < 1:
            raise ConfigError("array template must be at least 1x1")
        if self.exp_depth < 1 or self.latch_settle < 1:
            raise ConfigError("exp_depth and latch_settle must be >= 1")
        if self.clock_ns <= 0:
            raise ConfigError("clock_ns must be positive")

    @property
    def stages(self) -> StageLatencies:
        if self.variant == "dsp_free":
            return self.dsp_free_stages
        return StageLatencies.uniform(self.mul_cycles)

    @classmethod
    def for_dims(cls, dims: ModelDims, **kw) -> "ArrayConfig":
        """Smallest template that holds every array for these dimensions."""
        dh, n, d = dims.head_dim, dims.n_tokens, dims.embed_dim
        return cls(rows=max(d, dh, n), cols=max(dh, n), **kw)


def pe_total(dims: ModelDims) -> int:
    """MAC PEs: three d x d_h projection arrays plus the two attention arrays."""
    return 3 * dims.embed_dim * dims.head_dim + 2 * dims.head_dim * dims.n_tokens
