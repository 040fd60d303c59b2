import math
import random
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from systolic_vit.oracles import NU_AXIS, S_AXIS, non_increasing, trend_sequences, welford_fixed_error, welford_trend_grid
from systolic_vit.quantarith import (
    DegenerateGamma,
    FixedPointParams,
    NormQParams,
    QuantArithError,
    StatisticsOverflow,
    WelfordState,
    comparator_quantize,
    exp2_approx,
    exp_approx,
    exp_approx_value,
    normq,
    quantize_linear,
    reciprocal_table,
    round_half_up,
    scale_quantize,
    signed_thresholds,
    softmax_step_table,
    welford_fixed_row,
    welford_update,
    welford_update_fixed,
)

FP = FixedPointParams()

# Frozen from a dense sweep over [-8, 0] at 1/4096 resolution (measured
# 0.062372); the mantissa alone contributes max (1+r)/2**r - 1 = 0.0615.
EXP_EPS_STAR = 0.06238


def test_round_half_up_ties():
    assert round_half_up(2.5) == 3
    assert round_half_up(-2.5) == -2
    assert round_half_up(Fraction(-5, 2)) == -2


@pytest.mark.parametrize(
    "x,step,signed,expected",
    [(0, 0.5, True, 0), (1.3, 0.5, False, 3), (100, 0.5, True, 3), (-100, 0.5, True, -3), (-0.75, 0.5, True, -1)],
)
def test_quantize_linear_examples(x, step, signed, expected):
    assert quantize_linear(x, step, 3, signed) == expected


def test_quantize_linear_errors():
    with pytest.raises(QuantArithError, match="non-finite"):
        quantize_linear(float("nan"), 1.0)
    with pytest.raises(QuantArithError):
        quantize_linear(1.0, 0.0)


def brute_nearest(x, step, lo, hi):
    # enumerate codes, pick the closest; ties resolved toward the larger code
    best = None
    for c in range(lo, hi + 1):
        err = abs(Fraction(x) - c * Fraction(step))
        if best is None or err <= best[0]:
            best = (err, c)
    return best[1]


def test_quantize_linear_matches_enumeration():
    rng = random.Random(3)
    for _ in range(2000):
        step = Fraction(rng.randint(1, 40), 8)
        x = Fraction(rng.randint(-400, 400), 16)
        assert quantize_linear(x, step, 3, True) == brute_nearest(x, step, -3, 3)
        assert quantize_linear(x, step, 3, False) == brute_nearest(x, step, 0, 7)


def test_comparator_examples():
    assert comparator_quantize(0, 4) == 0
    # tie on the third threshold: round-half-up counts the threshold as passed
    assert comparator_quantize(10, 4) == 3
    assert comparator_quantize(9, 4) == 2


def test_comparator_equivalence_grid():
    for step in (1, 2, 3, 4, 7, 16):
        for x in range(-10, 8 * step + 10):
            assert comparator_quantize(x, step) == quantize_linear(Fraction(x), Fraction(step), 3, False)


def test_scale_quantize_above_all():
    table = softmax_step_table(1 / 7)
    scale = 12345
    assert scale_quantize((scale * table[6] >> 16) + 1, scale, table) == 7


def test_scale_quantize_single_token():
    table = softmax_step_table(1 / 7)
    e0 = exp_approx(0, FP)
    assert scale_quantize(e0, e0, table) == quantize_linear(1.0, 1 / 7, 3, False) == 7


def test_scale_quantize_rejects_nonpositive_scale():
    with pytest.raises(QuantArithError, match="non-positive scale"):
        scale_quantize(1, 0, [1])


def test_scale_quantize_matches_softmax_oracle():
    # dyadic step makes thresholds exact; compare against exact rational softmax
    rng = random.Random(7)
    step = Fraction(1, 8)
    table = softmax_step_table(step)
    checked = 0
    for _ in range(300):
        e = [rng.randint(1, 1 << 20) for _ in range(8)]
        s = sum(e)
        for v in e:
            expected = quantize_linear(Fraction(v, s), step, 3, False)
            assert scale_quantize(v, s, table) == expected
            checked += 1
    assert checked == 2400


def test_scale_quantize_has_no_division():
    import inspect

    from systolic_vit import quantarith

    src = inspect.getsource(quantarith.scale_quantize).split('"""')[2]
    assert "/" not in src and "divmod" not in src


# -- exponential -----------------------------------------------------------


def test_exp_zero():
    # log2 domain 0 -> shift 0, mantissa (1 + 0)/2
    assert exp_approx(0, FP) == (1 << FP.exp_out_shift) // 2
    assert exp_approx_value(0.0, FP) == 1.0


def test_exp_monotone_dense_grid():
    xs = range(-8 * FP.exp_prescale, 1)
    vals = [exp_approx(x, FP) for x in xs]
    assert all(a <= b for a, b in zip(vals, vals[1:]))


def test_exp_approx_max_relative_error():
    worst = 0.0
    for k in range(-8 * 4096, 1):
        x = k / 4096
        worst = max(worst, abs(exp_approx_value(x, FP) / math.exp(x) - 1))
    assert worst <= EXP_EPS_STAR
    assert worst > 0.05  # the first-order mantissa is genuinely lossy


@given(st.integers(min_value=-12 * 1024, max_value=4 * 1024))
def test_exp2_shift_linearity(p):
    # one more unit in the log2 domain doubles the output when no bits are lost
    if (p >> 10) + FP.exp_out_shift - 10 >= 0:
        assert exp2_approx(p + 1024, FP) == 2 * exp2_approx(p, FP)


def test_exp_saturates():
    fp = FixedPointParams(acc_bits=20)
    assert exp_approx(20 * 1024, fp) == (1 << 19) - 1


# -- Welford ---------------------------------------------------------------


def run_real(xs):
    st_ = WelfordState()
    for x in xs:
        st_ = welford_update(st_, x)
    return st_


def test_welford_constant():
    s = run_real([2.5, 2.5, 2.5])
    assert s.mean == 2.5 and s.m2 == 0


def test_welford_1234():
    s = run_real([1, 2, 3, 4])
    assert s.mean == 2.5 and s.m2 == 5 and s.m2 / s.count == 1.25


def test_welford_matches_two_pass():
    rng = np.random.default_rng(11)
    for _ in range(10_000):
        xs = rng.normal(rng.uniform(-5, 5), rng.uniform(0.1, 3), size=rng.integers(2, 40))
        s = run_real(xs.tolist())
        mean = xs.sum() / len(xs)
        var = ((xs - mean) ** 2).sum() / len(xs)
        assert abs(s.mean - mean) <= 1e-9 * max(1.0, abs(mean))
        assert abs(s.m2 / s.count - var) <= 1e-9 * max(1.0, var)


def test_welford_state_invariant():
    with pytest.raises(QuantArithError):
        WelfordState(0, 1.0, 0.0)


def test_reciprocal_table():
    t = reciprocal_table(6, 64)
    assert t[1] == 64 and t[2] == 32 and t[3] == 21 and t[64] == 1
    t0 = reciprocal_table(0, 16)
    assert t0[1] == 1 and set(t0[2:]) <= {0, 1}
    with pytest.raises(QuantArithError):
        reciprocal_table(6, 0)


def test_welford_fixed_first_update_exact():
    s = welford_update_fixed(WelfordState(), 13, FP)
    assert s.mean == FP.prescale * 13 and s.m2 == 0


@given(st.integers(-500, 500), st.integers(1, 64), st.integers(0, 12), st.sampled_from([1, 2, 8, 32, 128]))
def test_welford_fixed_constant_zero_m2(x, n, nu, s):
    fp = FixedPointParams(nu_exp=nu, prescale=s)
    st_ = welford_fixed_row([x] * n, fp)
    assert st_.m2 == 0 and st_.mean == s * x


@given(st.lists(st.integers(-300, 300), min_size=1, max_size=64), st.integers(0, 10), st.sampled_from([1, 4, 32]))
def test_welford_fixed_m2_nonnegative(xs, nu, s):
    st_ = WelfordState()
    fp = FixedPointParams(nu_exp=nu, prescale=s)
    for x in xs:
        st_ = welford_update_fixed(st_, x, fp)
        assert st_.m2 >= 0


def test_welford_fixed_overflow():
    fp = FixedPointParams(stat_bits=20)
    with pytest.raises(StatisticsOverflow, match="statistics overflow"):
        welford_fixed_row([1000, -1000, 1000], fp)
    with pytest.raises(StatisticsOverflow):
        fp.check_welford_range(1000, 64)
    FixedPointParams().check_welford_range(1000, 64)


def test_welford_fixed_converges_to_real():
    seqs = trend_sequences(count=200)
    assert welford_fixed_error(12, 128, seqs) < 1e-3
    assert welford_fixed_error(6, 32, seqs) < 2e-2


# -- NormQ -----------------------------------------------------------------


def real_ln_quant(dev, sigma, gamma, beta, step):
    y = Fraction(gamma) * Fraction(dev) / Fraction(sigma) + Fraction(beta)
    return quantize_linear(y, Fraction(step), 3, True)


@pytest.mark.parametrize(
    "gamma,beta,step",
    [
        (Fraction(1), Fraction(0), Fraction(1, 2)),
        (Fraction(1, 4), Fraction(1, 4), Fraction(1, 2)),
        (Fraction(2), Fraction(-3, 8), Fraction(1, 4)),
        (Fraction(-1, 2), Fraction(1, 8), Fraction(1, 4)),
        (Fraction(-2), Fraction(-1), Fraction(1)),
        (Fraction(1, 2), Fraction(2), Fraction(1, 2)),  # every threshold below beta
    ],
)
def test_normq_exhaustive_grid(gamma, beta, step):
    p = NormQParams.build([gamma], [beta], step, frac_bits=16)
    K = 24
    for sigma in range(1, K + 1):
        for dev in range(-K, K + 1):
            assert normq(dev, 0, sigma * sigma, p) == real_ln_quant(dev, sigma, gamma, beta, step), (dev, sigma)


def test_normq_count_scaling():
    # var given as numerator m2 with sigma**2 = m2 / count
    p = NormQParams.build([Fraction(1)], [Fraction(0)], Fraction(1, 2))
    for dev in range(-20, 21):
        assert normq(dev, 0, 9 * 5, p, count=5) == real_ln_quant(dev, 3, 1, 0, Fraction(1, 2))


def test_normq_mean_gives_middle_code():
    p = NormQParams.build([Fraction(1)], [Fraction(0)], Fraction(1, 2))
    assert normq(7, 7, 100, p) == 0


def test_normq_zero_variance_uses_sign_logic():
    p = NormQParams.build([Fraction(1)], [Fraction(1, 2)], Fraction(1, 2))
    # normalized value is beta itself when x == mean
    assert normq(5, 5, 0, p) == quantize_linear(Fraction(1, 2), Fraction(1, 2), 3, True)


def test_normq_negative_gamma_mirrors():
    g, b, step = Fraction(3, 2), Fraction(1, 4), Fraction(1, 2)
    pp = NormQParams.build([g], [b], step)
    pn = NormQParams.build([-g], [b], step)
    for dev in range(-20, 21):
        assert normq(-dev, 0, 16, pn) == normq(dev, 0, 16, pp)


def test_normq_degenerate_gamma():
    with pytest.raises(DegenerateGamma, match="degenerate gamma"):
        NormQParams.build([0], [0], 0.5)


def test_normq_params_thresholds_consistent():
    p = NormQParams.build([Fraction(3, 5)], [Fraction(1, 3)], 0.4, frac_bits=20)
    ths = signed_thresholds(0.4)
    for j, t in enumerate(ths):
        lin = (t - Fraction(1, 3)) / Fraction(3, 5)
        assert abs(p.sq_thresh[0, j] - lin * lin * (1 << 20)) <= Fraction(1, 2)
        assert p.lin_sign[0, j] == (lin > 0) - (lin < 0)
    assert all(a < b for a, b in zip(ths, ths[1:]))


def test_normq_non_dyadic_params_off_boundary():
    # rounded squared thresholds may only disagree right at a decision boundary
    rng = random.Random(1)
    for _ in range(20):
        g = Fraction(rng.choice([-1, 1]) * rng.randint(1, 40), rng.randint(1, 40))
        b = Fraction(rng.randint(-20, 20), rng.randint(1, 20))
        step = Fraction(rng.randint(1, 20), 16)
        p = NormQParams.build([g], [b], step, frac_bits=24)
        for sigma in range(1, 12):
            for dev in range(-30, 31):
                y = g * dev / sigma + b
                near = any(abs(y - t) < Fraction(1, 1000) for t in signed_thresholds(step))
                if not near:
                    assert normq(dev, 0, sigma * sigma, p) == real_ln_quant(dev, sigma, g, b, step)


def test_welford_fixed_error_trend():
    grid = welford_trend_grid(1000)
    for s in S_AXIS:
        assert non_increasing([grid[nu, s] for nu in NU_AXIS]), s
    for nu in NU_AXIS:
        assert non_increasing([grid[nu, s] for s in S_AXIS]), nu
    # the baseline (nu=6, s=32) is far better than the coarse corner
    assert grid[6, 32] < grid[2, 1] / 10
    assert grid[12, 32] < grid[6, 32] / 10
