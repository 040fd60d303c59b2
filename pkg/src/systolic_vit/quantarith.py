"""Bit-exact fixed-point kernels used by both the golden model and the simulator.

Every function here works on Python integers (arbitrary precision) and checks
its own width limits, so the same code path can be shared by the functional
model and the per-PE simulator without any floating-point leakage.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from fractions import Fraction
from typing import Sequence

import numpy as np

log = logging.getLogger(__name__)

LOG2E = math.log2(math.e)


class QuantArithError(ValueError):
    """Raised on invalid arguments to a fixed-point kernel."""


class StatisticsOverflow(OverflowError):
    pass


# ---------------------------------------------------------------------------
# rounding helpers


def round_half_up(x) -> int:
    """Round to nearest integer, ties toward +inf. Works for float and Fraction."""
    return math.floor(x + Fraction(1, 2)) if isinstance(x, Fraction) else math.floor(x + 0.5)


def div_round_half_up(num: int, den: int) -> int:
    """round_half_up(num / den) in pure integer arithmetic (den > 0)."""
    if den <= 0:
        raise QuantArithError("denominator must be positive")
    return (2 * num + den) // (2 * den)


def shift_round(value: int, shift: int) -> int:
    """Arithmetic right shift by ``shift`` bits with round-half-up."""
    if shift <= 0:
        return value << -shift
    return (value + (1 << (shift - 1))) >> shift


def fits_signed(value: int, bits: int) -> bool:
    lim = 1 << (bits - 1)
    return -lim <= value < lim


def code_range(bits: int, signed: bool) -> tuple[int, int]:
    """Inclusive code range. Signed codes use the symmetric range."""
    if bits < 1:
        raise QuantArithError("bits must be >= 1")
    if signed:
        hi = (1 << (bits - 1)) - 1
        return -hi, hi
    return 0, (1 << bits) - 1


# ---------------------------------------------------------------------------
# parameters


@dataclass(frozen=True)
class FixedPointParams:
    """Fixed-point formats shared by the normalization, exponential and quantizer units.

    ``nu_exp`` and ``prescale`` are the Welford reciprocal numerator exponent and
    the input prescale factor. ``frac_bits`` is the fraction width of post-MAC
    values, ``thresh_frac_bits`` the fraction width of precomputed thresholds.
    """

    nu_exp: int = 6
    prescale: int = 32
    exp_prescale: int = 1024
    acc_bits: int = 32
    stat_bits: int = 48
    frac_bits: int = 4
    thresh_frac_bits: int = 16
    exp_out_shift: int = 16
    log2e_frac_bits: int = 16
    mult_frac_bits: int = 16

    def __post_init__(self):
        if self.nu_exp < 0:
            raise QuantArithError("nu_exp must be >= 0")
        if self.prescale < 1:
            raise QuantArithError("prescale must be >= 1")
        if self.exp_prescale < 1 or self.exp_prescale & (self.exp_prescale - 1):
            raise QuantArithError("exp_prescale must be a power of two")
        if self.acc_bits < 2 or self.stat_bits < 2:
            raise QuantArithError("accumulator widths must be >= 2")
        if min(self.frac_bits, self.thresh_frac_bits, self.exp_out_shift, self.log2e_frac_bits, self.mult_frac_bits) < 0:
            raise QuantArithError("fraction widths must be >= 0")

    @property
    def exp_frac_bits(self) -> int:
        return self.exp_prescale.bit_length() - 1

    def check_welford_range(self, max_abs_input: int, channels: int) -> None:
        """Reject configurations whose Welford state could exceed ``stat_bits``.

        Inputs bounded by ``max_abs_input`` give |s*x - mean| <= 2*s*X and a
        sum of squared deviations <= n * (s*X)**2.
        """
        sx = self.prescale * max_abs_input
        worst = max(2 * sx * (1 << self.nu_exp), channels * sx * sx, (2 * sx) ** 2)
        if not fits_signed(worst, self.stat_bits):
            raise StatisticsOverflow(
                f"statistics overflow: worst-case magnitude {worst} needs more than "
                f"{self.stat_bits} bits (prescale={self.prescale}, nu_exp={self.nu_exp}, "
                f"max |x|={max_abs_input}, channels={channels})"
            )


# ---------------------------------------------------------------------------
# quantizers


def quantize_linear(x: float, step: float, bits: int = 3, signed: bool = True) -> int:
    """Uniform quantizer: clamp(round_half_up(x / step)) into the code range."""
    if step <= 0:
        raise QuantArithError("step must be positive")
    if not math.isfinite(x):
        raise QuantArithError("non-finite input")
    lo, hi = code_range(bits, signed)
    return min(hi, max(lo, round_half_up(x / step)))


def comparator_quantize(x: int, step: int, bits: int = 3) -> int:
    """Unsigned quantizer built from 2**bits - 1 parallel comparators.

    Threshold i sits at (i + 1/2) * step; comparing ``2*x >= (2*i + 1)*step``
    keeps everything integral. A value on a threshold counts as passing it,
    which reproduces round-half-up.
    """
    if step <= 0:
        raise QuantArithError("step must be positive")
    n = (1 << bits) - 1
    return sum(1 for i in range(n) if 2 * x >= (2 * i + 1) * step)


def signed_thresholds(step: Fraction | float, bits: int = 3) -> list:
    """Real thresholds (k - 1/2)*step between consecutive signed codes."""
    lo, hi = code_range(bits, True)
    return [(Fraction(2 * k - 1, 2)) * Fraction(step) for k in range(lo + 1, hi + 1)]


def threshold_quantize(x: int, thresholds: Sequence[int], base: int) -> int:
    """Count thresholds that ``x`` reaches and offset by ``base`` (lowest code)."""
    return base + sum(1 for t in thresholds if x >= t)


def scale_quantize(x: int, scale: int, step_table: Sequence[int], table_frac_bits: int = 16) -> int:
    """Dynamically scaled quantizer: count j with x >= scale * table[j].

    ``step_table`` holds fixed-point thresholds with ``table_frac_bits`` of
    fraction, so the comparison is ``x << frac >= scale * table[j]``. There is
    no division anywhere on this path.
    """
    if scale <= 0:
        raise QuantArithError("non-positive scale")
    lhs = x << table_frac_bits
    return sum(1 for t in step_table if lhs >= scale * t)


def softmax_step_table(step: float, bits: int = 3, frac_bits: int = 16) -> list[int]:
    """Fixed-point thresholds (i + 1/2)*step for an unsigned softmax quantizer."""
    n = (1 << bits) - 1
    return [round_half_up(Fraction(2 * i + 1, 2) * Fraction(step) * (1 << frac_bits)) for i in range(n)]


# ---------------------------------------------------------------------------
# exponential


def log2e_constant(fp: FixedPointParams) -> int:
    return round_half_up(LOG2E * (1 << fp.log2e_frac_bits))


def exp2_approx(p: int, fp: FixedPointParams) -> int:
    """Approximate 2**(p / exp_prescale) scaled by 2**exp_out_shift / 2.

    The integer part of ``p`` drives a barrel shift. The fraction ``r`` in
    [0, 1) goes through the first-order unit: setting the integer bit gives
    1 + r and a one-bit right shift halves it, so the mantissa is (1 + r)/2,
    i.e. ``2**(r - 1)`` matched at both ends of the interval. The constant
    factor 1/2 cancels in softmax.
    """
    fb = fp.exp_frac_bits
    ip = p >> fb
    frac = p & ((1 << fb) - 1)
    mant = ((1 << fb) | frac) >> 1  # bit overwrite, then 1-bit right shift
    shift = ip + fp.exp_out_shift - fb
    if shift >= 0:
        out = mant << shift
        cap = (1 << (fp.acc_bits - 1)) - 1
        if out > cap:
            log.warning("exp_approx saturated at shift %d", shift)
            return cap
        return out
    return mant >> -shift


def exp_approx(x: int, fp: FixedPointParams) -> int:
    """Shift-based exponential of ``x / exp_prescale``.

    ``x`` is multiplied by a fixed-point log2(e), the product is rounded back
    to ``exp_prescale`` resolution and handed to :func:`exp2_approx`.
    """
    p = shift_round(x * log2e_constant(fp), fp.log2e_frac_bits)
    return exp2_approx(p, fp)


def exp_approx_value(x: float, fp: FixedPointParams) -> float:
    """Real-valued view of :func:`exp_approx` (approximates e**x, scale undone)."""
    u = round_half_up(x * fp.exp_prescale)
    return 2.0 * exp_approx(u, fp) / (1 << fp.exp_out_shift)


# ---------------------------------------------------------------------------
# running statistics


@dataclass
class WelfordState:
    count: int = 0
    mean: float | int = 0
    m2: float | int = 0

    def __post_init__(self):
        if self.count == 0 and (self.mean != 0 or self.m2 != 0):
            raise QuantArithError("empty WelfordState must have zero mean and m2")


def welford_update(state: WelfordState, x: float) -> WelfordState:
    """Real-valued Welford step; returns a new state."""
    i = state.count + 1
    delta = x - state.mean
    mean = state.mean + delta / i
    m2 = state.m2 + delta * (x - mean)
    return WelfordState(i, mean, m2)


def reciprocal_table(nu_exp: int, max_i: int) -> list[int]:
    """Entry i holds round_half_up(2**nu / i); index 0 is unused and set to 0."""
    if max_i < 1:
        raise QuantArithError("max_i must be >= 1")
    num = 1 << nu_exp
    return [0] + [div_round_half_up(num, i) for i in range(1, max_i + 1)]


def welford_update_fixed(
    state: WelfordState, x: int, fp: FixedPointParams, table: Sequence[int] | None = None
) -> WelfordState:
    """Fixed-point Welford step on the prescaled input ``s * x``.

    mean_i = mean_{i-1} + ((round(2**nu / i) * (s*x - mean_{i-1})) >> nu)
    m2_i   = m2_{i-1} + (s*x - mean_{i-1}) * (s*x - mean_i)

    The stored mean carries a factor ``s`` and m2 a factor ``s**2``.
    """
    i = state.count + 1
    recip = table[i] if table is not None else div_round_half_up(1 << fp.nu_exp, i)
    sx = fp.prescale * x
    d_prev = sx - state.mean
    mean = state.mean + shift_round(recip * d_prev, fp.nu_exp)
    m2 = state.m2 + d_prev * (sx - mean)
    for v in (mean, m2):
        if not fits_signed(v, fp.stat_bits):
            raise StatisticsOverflow(f"statistics overflow: {v} exceeds {fp.stat_bits} bits")
    return WelfordState(i, mean, m2)


def welford_fixed_row(xs: Sequence[int], fp: FixedPointParams, table: Sequence[int] | None = None) -> WelfordState:
    st = WelfordState()
    for x in xs:
        st = welford_update_fixed(st, int(x), fp, table)
    return st


# ---------------------------------------------------------------------------
# division-free layer-norm quantizer


class DegenerateGamma(QuantArithError):
    pass


@dataclass(frozen=True)
class NormQParams:
    """Per-channel thresholds for the division-free normalization quantizer.

    For channel c and output threshold t_j the normalized-domain threshold is
    L = (t_j - beta_c) / gamma_c. ``sq_thresh`` stores L**2 with
    ``frac_bits`` of fraction; only the sign of L is needed beyond that.
    Codes are signed, ``base`` is the lowest code.
    """

    sq_thresh: np.ndarray  # (channels, n_thresh) int
    lin_sign: np.ndarray  # (channels, n_thresh) sign of L in {-1, 0, 1}
    gamma_neg: np.ndarray  # (channels,) bool
    base: int
    frac_bits: int

    @property
    def channels(self) -> int:
        return self.sq_thresh.shape[0]

    @classmethod
    def build(cls, gamma, beta, step: float, bits: int = 3, frac_bits: int = 16) -> "NormQParams":
        gamma = np.atleast_1d(np.asarray(gamma, dtype=object))
        beta = np.atleast_1d(np.asarray(beta, dtype=object))
        if gamma.shape != beta.shape:
            raise QuantArithError("gamma and beta must have the same shape")
        thresholds = signed_thresholds(step, bits)
        ch, nt = len(gamma), len(thresholds)
        sq = np.zeros((ch, nt), dtype=object)
        sign = np.zeros((ch, nt), dtype=np.int8)
        for c in range(ch):
            g = Fraction(gamma[c])
            if g == 0:
                raise DegenerateGamma("degenerate gamma")
            for j, t in enumerate(thresholds):
                lin = (t - Fraction(beta[c])) / g
                sign[c, j] = (lin > 0) - (lin < 0)
                sq[c, j] = round_half_up(lin * lin * (1 << frac_bits))
        lo, _ = code_range(bits, True)
        neg = np.array([Fraction(g) < 0 for g in gamma], dtype=bool)
        return cls(sq, sign, neg, lo, frac_bits)


def normq(x: int, mean: int, var: int, params: NormQParams, channel: int = 0, count: int = 1) -> int:
    """Quantize gamma*(x - mean)/sigma + beta without division or square root.

    ``var`` is the variance numerator so that sigma**2 = var / count, and
    ``x``/``mean`` share one fixed-point scale whose square matches ``var``.
    Stage 1 compares (x - mean)**2 * count against L**2 * var per threshold;
    stage 2 resolves the result with the signs of (x - mean) and L:

        L <= 0, dev > 0   -> pass
        L >  0, dev <= 0  -> fail
        L >  0, dev > 0   -> pass iff dev**2 >= L**2 sigma**2
        L <= 0, dev <= 0  -> pass iff dev**2 <= L**2 sigma**2

    A negative gamma flips the inequality, handled by negating dev and L.
    """
    if var < 0:
        raise QuantArithError("variance must be non-negative")
    flip = bool(params.gamma_neg[channel])
    dev = mean - x if flip else x - mean
    lhs = (dev * dev * count) << params.frac_bits
    dev_pos = dev > 0
    code = params.base
    for j in range(params.sq_thresh.shape[1]):
        sign = int(params.lin_sign[channel, j])
        lin_pos = (-sign if flip else sign) > 0
        rhs = params.sq_thresh[channel, j] * var
        if lin_pos:
            ok = dev_pos and lhs >= rhs
        else:
            ok = dev_pos or lhs <= rhs
        code += ok
    return code
