"""Golden functional model of the integerized self-attention block.

The integer path mirrors what the accelerator computes: 3-bit codes go into
exact integer matmuls, and every real-valued step size is folded either into a
fixed-point post-MAC multiplier or into precomputed comparator thresholds.
``float_reference_msa`` is the full-precision oracle used to measure the
quantization error of that path.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction
from functools import cached_property

import numpy as np

from .quantarith import (
    FixedPointParams,
    NormQParams,
    code_range,
    exp_approx,
    normq,
    quantize_linear,
    reciprocal_table,
    round_half_up,
    scale_quantize,
    shift_round,
    signed_thresholds,
    softmax_step_table,
    threshold_quantize,
    welford_update_fixed,
    WelfordState,
)


class ShapeError(ValueError):
    pass


@dataclass(frozen=True)
class ModelDims:
    n_tokens: int
    embed_dim: int
    heads: int
    mlp_ratio: int = 4
    bits: int = 3

    def __post_init__(self):
        if min(self.n_tokens, self.embed_dim, self.heads, self.mlp_ratio, self.bits) < 1:
            raise ValueError("all dimensions must be >= 1")
        if self.embed_dim % self.heads:
            raise ValueError(f"embed_dim {self.embed_dim} not divisible by heads {self.heads}")

    @property
    def head_dim(self) -> int:
        return self.embed_dim // self.heads


PRESETS = {
    "deit-t": ModelDims(198, 192, 3),
    "deit-s": ModelDims(198, 384, 6),
    "deit-b": ModelDims(198, 768, 12),
    "toy": ModelDims(8, 12, 3),
}


@dataclass
class QuantTensor:
    """Integer codes plus the step sizes that dequantize them.

    Activations carry one global step, static weights a step per output
    channel (column). Exactly one of the two is set.
    """

    codes: np.ndarray
    bits: int = 3
    signed: bool = True
    step_global: float | None = None
    step_channels: np.ndarray | None = None

    def __post_init__(self):
        self.codes = np.asarray(self.codes, dtype=np.int64)
        if self.codes.ndim != 2:
            raise ShapeError("codes must be 2-D")
        if (self.step_global is None) == (self.step_channels is None):
            raise ValueError("exactly one of step_global / step_channels must be set")
        if self.step_channels is not None:
            self.step_channels = np.asarray(self.step_channels, dtype=float)
            if self.step_channels.shape != (self.codes.shape[1],):
                raise ShapeError("step_channels must have one entry per column")
        lo, hi = code_range(self.bits, self.signed)
        if self.codes.size and (self.codes.min() < lo or self.codes.max() > hi):
            raise ValueError(f"codes outside [{lo}, {hi}]")

    @property
    def shape(self) -> tuple[int, int]:
        return self.codes.shape

    def steps(self) -> np.ndarray:
        """Step per column (broadcast of the global step if needed)."""
        if self.step_channels is not None:
            return self.step_channels
        return np.full(self.codes.shape[1], self.step_global)

    def dequantize(self) -> np.ndarray:
        return self.codes * self.steps()[None, :]


def quantize_tensor(x: np.ndarray, step: float, bits: int = 3, signed: bool = True) -> QuantTensor:
    """Host-side quantizer producing a globally stepped activation tensor."""
    x = np.asarray(x, dtype=float)
    codes = np.vectorize(lambda v: quantize_linear(float(v), step, bits, signed), otypes=[np.int64])(x)
    return QuantTensor(codes, bits, signed, step_global=step)


# ---------------------------------------------------------------------------
# parameters


@dataclass
class HeadParams:
    """Real-valued parameters of one attention head."""

    u_q: QuantTensor
    u_k: QuantTensor
    u_v: QuantTensor
    bias_q: np.ndarray
    bias_k: np.ndarray
    bias_v: np.ndarray
    gamma_q: np.ndarray
    beta_q: np.ndarray
    gamma_k: np.ndarray
    beta_k: np.ndarray
    step_q: float  # step of the normalized, quantized Q
    step_k: float
    step_v: float
    step_a: float
    step_sa: float


@dataclass
class HeadFixed:
    """Integer constants the hardware holds for one head (its parameter bank)."""

    weights_q: np.ndarray
    weights_k: np.ndarray
    weights_v: np.ndarray
    mult_q: list[int]
    mult_k: list[int]
    mult_v: list[int]
    bias_q: list[int]
    bias_k: list[int]
    bias_v: list[int]
    normq_q: NormQParams
    normq_k: NormQParams
    thresh_v: list[int]
    mult_att: int
    softmax_table: list[int]
    thresh_sa: list[int]


@dataclass
class SaParams:
    """Parameter bank for all heads plus the shared activation step."""

    dims: ModelDims
    heads: list[HeadParams]
    z_step: float
    u_msa: QuantTensor
    fp: FixedPointParams = field(default_factory=FixedPointParams)
    softmax_scale: float | None = None  # defaults to 1/sqrt(head_dim)

    def __post_init__(self):
        d, dh = self.dims.embed_dim, self.dims.head_dim
        if len(self.heads) != self.dims.heads:
            raise ShapeError(f"expected {self.dims.heads} heads, got {len(self.heads)}")
        for h in self.heads:
            for u in (h.u_q, h.u_k, h.u_v):
                if u.shape != (d, dh):
                    raise ShapeError(f"head weight shape {u.shape} != {(d, dh)}")
        if self.u_msa.shape != (d, d):
            raise ShapeError("u_msa must be d x d")

    @property
    def scale(self) -> float:
        return self.softmax_scale if self.softmax_scale is not None else 1.0 / math.sqrt(self.dims.head_dim)

    @cached_property
    def fixed(self) -> list[HeadFixed]:
        return [self._fix(h) for h in self.heads]

    @cached_property
    def recip(self) -> list[int]:
        return reciprocal_table(self.fp.nu_exp, self.dims.head_dim)

    def _fix(self, h: HeadParams) -> HeadFixed:
        fp, bits = self.fp, self.dims.bits
        ms, fb, tf = fp.mult_frac_bits, fp.frac_bits, fp.thresh_frac_bits
        lo, _ = code_range(bits, True)

        def mults(u):
            return [round_half_up(self.z_step * s * (1 << (fb + ms))) for s in u.step_channels]

        def biases(b):
            return [round_half_up(float(v) * (1 << fb)) for v in b]

        # x >= t for integer x is x >= ceil(t); keeps threshold decisions exact
        thresh_v = [math.ceil(t * (1 << fb)) for t in signed_thresholds(h.step_v, bits)]
        sa_unit = Fraction(h.step_a) * Fraction(h.step_v)
        thresh_sa = [math.ceil(t / sa_unit) for t in signed_thresholds(h.step_sa, bits)]
        mult_att = round_half_up(h.step_q * h.step_k * self.scale * fp.exp_prescale * (1 << ms))
        return HeadFixed(
            weights_q=h.u_q.codes,
            weights_k=h.u_k.codes,
            weights_v=h.u_v.codes,
            mult_q=mults(h.u_q),
            mult_k=mults(h.u_k),
            mult_v=mults(h.u_v),
            bias_q=biases(h.bias_q),
            bias_k=biases(h.bias_k),
            bias_v=biases(h.bias_v),
            normq_q=NormQParams.build(h.gamma_q, h.beta_q, h.step_q, bits, tf),
            normq_k=NormQParams.build(h.gamma_k, h.beta_k, h.step_k, bits, tf),
            thresh_v=thresh_v,
            mult_att=mult_att,
            softmax_table=softmax_step_table(h.step_a, bits, tf),
            thresh_sa=thresh_sa,
        )

    def max_abs_post_mac(self) -> int:
        """Worst-case |post-MAC value| feeding the normalization units."""
        lo, hi = code_range(self.dims.bits, True)
        acc = hi * hi * self.dims.embed_dim
        worst = 0
        for hf in self.fixed:
            for m, b in ((hf.mult_q, hf.bias_q), (hf.mult_k, hf.bias_k)):
                worst = max(worst, max(abs(shift_round(acc * mi, self.fp.mult_frac_bits)) + abs(bi) for mi, bi in zip(m, b)))
        return worst

    def validate(self) -> None:
        """Configuration-time overflow check for accumulators and statistics."""
        lo, hi = code_range(self.dims.bits, True)
        _, uhi = code_range(self.dims.bits, False)
        worst_mac = max(hi * hi * self.dims.embed_dim, uhi * hi * self.dims.n_tokens)
        if worst_mac >= 1 << (self.fp.acc_bits - 1):
            raise OverflowError(f"MAC accumulator overflow: {worst_mac} needs more than {self.fp.acc_bits} bits")
        self.fp.check_welford_range(self.max_abs_post_mac(), self.dims.head_dim)


def make_params(
    dims: ModelDims,
    seed: int = 0,
    fp: FixedPointParams | None = None,
    step_a: float | None = None,
) -> SaParams:
    """Seeded synthetic parameters with step sizes sized to the code range."""
    rng = np.random.default_rng(seed)
    fp = fp or FixedPointParams()
    d, dh, bits = dims.embed_dim, dims.head_dim, dims.bits
    _, hi = code_range(bits, True)
    _, uhi = code_range(bits, False)
    span = 3.0 / hi
    # activation clip range widens with bit width (about 1.5 sigma at 3 bits, 4 at 8)
    act = span * (1.0 + (bits - 3) / 3.0)

    def weight(rows, cols):
        codes = rng.integers(-hi, hi + 1, size=(rows, cols))
        steps = rng.uniform(0.5, 1.5, size=cols) / (2.0 * math.sqrt(rows)) * span
        return QuantTensor(codes, bits, True, step_channels=steps)

    heads = []
    for _ in range(dims.heads):
        heads.append(
            HeadParams(
                u_q=weight(d, dh),
                u_k=weight(d, dh),
                u_v=weight(d, dh),
                bias_q=rng.normal(0, 0.1, dh),
                bias_k=rng.normal(0, 0.1, dh),
                bias_v=rng.normal(0, 0.1, dh),
                gamma_q=rng.uniform(0.5, 1.5, dh),
                beta_q=rng.normal(0, 0.2, dh),
                gamma_k=rng.uniform(0.5, 1.5, dh),
                beta_k=rng.normal(0, 0.2, dh),
                step_q=0.5 * act,
                step_k=0.5 * act,
                step_v=0.5 * act,
                step_a=step_a if step_a is not None else min(1.0 / uhi, 2.0 / dims.n_tokens),
                step_sa=0.25 * act,
            )
        )
    return SaParams(dims, heads, z_step=0.5 * act, u_msa=weight(d, d), fp=fp)


# ---------------------------------------------------------------------------
# per-element kernels shared with the simulator


def post_mac_affine(acc: int, mult: int, bias: int, fp: FixedPointParams) -> int:
    """Scale + bias unit: fixed-point value with ``frac_bits`` of fraction."""
    return shift_round(int(acc) * mult, fp.mult_frac_bits) + bias


def layernorm_quantize_row(xs, nq: NormQParams, fp: FixedPointParams, recip=None) -> list[int]:
    """Running statistics over one row followed by NormQ on every element."""
    st = WelfordState()
    for x in xs:
        st = welford_update_fixed(st, x, fp, recip)
    return [normq(fp.prescale * x, st.mean, st.m2, nq, channel=c, count=st.count) for c, x in enumerate(xs)]


def softmax_quantize_row(accs, mult_att: int, table, fp: FixedPointParams) -> list[int]:
    """Scale + exp per element, row sum, then ScaleQ against the sum."""
    e = [exp_approx(shift_round(int(a) * mult_att, fp.mult_frac_bits), fp) for a in accs]
    total = 0
    for v in e:  # left-to-right systolic order
        total += v
    return [scale_quantize(v, total, table, fp.thresh_frac_bits) for v in e]


# ---------------------------------------------------------------------------
# operations


def _check_int(a: np.ndarray) -> np.ndarray:
    if not np.issubdtype(a.dtype, np.integer):
        raise TypeError("integer path received non-integer data")
    return a


@dataclass
class Projection:
    acc_q: np.ndarray
    acc_k: np.ndarray
    acc_v: np.ndarray
    dequant_q: np.ndarray  # z_step * per-channel weight step
    dequant_k: np.ndarray
    dequant_v: np.ndarray


def qkv_project(z3b: QuantTensor, params: SaParams, head: int) -> Projection:
    """Integer QKV projection; dequantization factors are carried, not applied."""
    d = params.dims.embed_dim
    if z3b.shape[1] != d:
        raise ShapeError(f"input has {z3b.shape[1]} channels, expected {d}")
    z = _check_int(z3b.codes)
    h = params.heads[head]
    zs = z3b.step_global if z3b.step_global is not None else params.z_step
    return Projection(
        _check_int(z @ h.u_q.codes),
        _check_int(z @ h.u_k.codes),
        _check_int(z @ h.u_v.codes),
        zs * h.u_q.step_channels,
        zs * h.u_k.step_channels,
        zs * h.u_v.step_channels,
    )


def layernorm_quantize_rows(acc: np.ndarray, mult, bias, nq: NormQParams, params: SaParams, step: float) -> QuantTensor:
    fp = params.fp
    if acc.shape[1] != nq.channels:
        raise ShapeError("row length must equal head_dim")
    out = np.empty(acc.shape, dtype=np.int64)
    for t, row in enumerate(_check_int(acc)):
        xs = [post_mac_affine(a, m, b, fp) for a, m, b in zip(row, mult, bias)]
        out[t] = layernorm_quantize_row(xs, nq, fp, params.recip)
    return QuantTensor(out, params.dims.bits, True, step_global=step)


def value_quantize(acc: np.ndarray, hf: HeadFixed, params: SaParams, step: float) -> QuantTensor:
    fp = params.fp
    lo, _ = code_range(params.dims.bits, True)
    out = np.empty(acc.shape, dtype=np.int64)
    for t, row in enumerate(_check_int(acc)):
        for c, a in enumerate(row):
            out[t, c] = threshold_quantize(post_mac_affine(a, hf.mult_v[c], hf.bias_v[c], fp), hf.thresh_v, lo)
    return QuantTensor(out, params.dims.bits, True, step_global=step)


def attention_scores(q3b: QuantTensor, k3b: QuantTensor, params: SaParams, head: int) -> QuantTensor:
    if q3b.shape[1] != k3b.shape[1]:
        raise ShapeError("Q and K must share head_dim")
    hf = params.fixed[head]
    acc = _check_int(q3b.codes @ k3b.codes.T)
    rows = [softmax_quantize_row(r, hf.mult_att, hf.softmax_table, params.fp) for r in acc]
    return QuantTensor(np.array(rows, dtype=np.int64), params.dims.bits, False, step_global=params.heads[head].step_a)


def weighted_value(a3b: QuantTensor, v3b: QuantTensor, params: SaParams, head: int) -> QuantTensor:
    if a3b.shape[1] != v3b.shape[0]:
        raise ShapeError(f"A {a3b.shape} and V {v3b.shape} do not chain")
    hf = params.fixed[head]
    lo, _ = code_range(params.dims.bits, True)
    acc = _check_int(a3b.codes @ v3b.codes)
    out = np.vectorize(lambda a: threshold_quantize(int(a), hf.thresh_sa, lo), otypes=[np.int64])(acc)
    return QuantTensor(out, params.dims.bits, True, step_global=params.heads[head].step_sa)


@dataclass
class HeadResult:
    q: QuantTensor
    k: QuantTensor
    v: QuantTensor
    a: QuantTensor
    sa: QuantTensor


def sa_head(z3b: QuantTensor, params: SaParams, head: int) -> HeadResult:
    h, hf = params.heads[head], params.fixed[head]
    proj = qkv_project(z3b, params, head)
    q = layernorm_quantize_rows(proj.acc_q, hf.mult_q, hf.bias_q, hf.normq_q, params, h.step_q)
    k = layernorm_quantize_rows(proj.acc_k, hf.mult_k, hf.bias_k, hf.normq_k, params, h.step_k)
    v = value_quantize(proj.acc_v, hf, params, h.step_v)
    a = attention_scores(q, k, params, head)
    return HeadResult(q, k, v, a, weighted_value(a, v, params, head))


def msa_host_side(sa_heads: list[QuantTensor], u_msa: QuantTensor, z_full: np.ndarray, heads: int | None = None) -> np.ndarray:
    """Concatenate head outputs, integer projection, dequantize, add residual."""
    if heads is not None and len(sa_heads) != heads:
        raise ShapeError(f"missing head output: got {len(sa_heads)} of {heads}")
    if not sa_heads:
        raise ShapeError("missing head output")
    steps = {t.step_global for t in sa_heads}
    if len(steps) != 1:
        raise ValueError("head outputs must share one global step")
    cat = np.concatenate([_check_int(t.codes) for t in sa_heads], axis=1)
    if cat.shape[1] != u_msa.shape[0]:
        raise ShapeError("concatenated width does not match u_msa")
    acc = _check_int(cat @ u_msa.codes)
    return acc * (steps.pop() * u_msa.step_channels)[None, :] + np.asarray(z_full, dtype=float)


@dataclass
class MsaResult:
    z3b: QuantTensor
    heads: list[HeadResult]
    output: np.ndarray

    @property
    def sa(self) -> list[QuantTensor]:
        return [h.sa for h in self.heads]


def msa_forward(z_full: np.ndarray, params: SaParams) -> MsaResult:
    """Host quantizer, all heads through the integer path, host-side projection."""
    z_full = np.asarray(z_full, dtype=float)
    n, d = params.dims.n_tokens, params.dims.embed_dim
    if z_full.shape != (n, d):
        raise ShapeError(f"input shape {z_full.shape} != {(n, d)}")
    z3b = quantize_tensor(z_full, params.z_step, params.dims.bits)
    heads = [sa_head(z3b, params, i) for i in range(params.dims.heads)]
    out = msa_host_side([r.sa for r in heads], params.u_msa, z_full, params.dims.heads)
    return MsaResult(z3b, heads, out)


# ---------------------------------------------------------------------------
# full-precision oracle


def _layernorm(x: np.ndarray, gamma, beta) -> np.ndarray:
    mu = x.mean(axis=1, keepdims=True)
    std = np.broadcast_to(np.sqrt(x.var(axis=1, keepdims=True)), x.shape)
    # a constant row normalizes to zero, leaving beta
    norm = np.divide(x - mu, std, out=np.zeros_like(x, dtype=float), where=std > 0)
    return gamma * norm + beta


def softmax(x: np.ndarray) -> np.ndarray:
    e = np.exp(x - x.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def float_reference_msa(z: np.ndarray, params: SaParams, return_heads: bool = False):
    """Real-arithmetic MSA with true exp and true layer norm.

    Uses the dequantized weights (the model's real parameters) but no
    activation quantization anywhere.
    """
    z = np.asarray(z, dtype=float)
    outs = []
    for h in params.heads:
        q = _layernorm(z @ h.u_q.dequantize() + h.bias_q, h.gamma_q, h.beta_q)
        k = _layernorm(z @ h.u_k.dequantize() + h.bias_k, h.gamma_k, h.beta_k)
        v = z @ h.u_v.dequantize() + h.bias_v
        a = softmax(q @ k.T * params.scale)
        outs.append(a @ v)
    out = np.concatenate(outs, axis=1) @ params.u_msa.dequantize() + z
    return (out, outs) if return_heads else out


def random_input(dims: ModelDims, seed: int = 0) -> np.ndarray:
    return np.random.default_rng(seed).normal(0.0, 1.0, size=(dims.n_tokens, dims.embed_dim))
