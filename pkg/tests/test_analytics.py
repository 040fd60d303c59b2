import math

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from systolic_vit import analytics as an
from systolic_vit.msa_func import PRESETS, ModelDims

S = an.TimingInputs(PRESETS["deit-s"])
T = an.TimingInputs(PRESETS["deit-t"])
B = an.TimingInputs(PRESETS["deit-b"])


def test_sa_latency_values():
    assert an.sa_latency(S) == 1327
    assert an.sa_latency(T) == 1135
    with pytest.raises(an.AnalyticsError):
        an.TimingInputs(PRESETS["deit-s"], mul_cycles=0)


def test_comm_cycles():
    assert an.comm_cycles(S) == 3564 and an.comm_per_head(S) == 594
    assert an.comm_cycles(T) == 1782
    assert an.comm_cycles(B) == 7128
    assert an.comm_cycles(an.TimingInputs(PRESETS["deit-s"], bus_bits=None)) == 0


def test_pitch():
    assert an.pitch(S) == (594, "communication")
    assert an.pitch(an.TimingInputs(PRESETS["deit-s"], bus_bits=None)) == (582, "input")
    tiny = an.TimingInputs(ModelDims(1, 4, 4))
    assert an.pitch(tiny) == (5, "input")


def test_msa_latency():
    assert an.msa_latency(S) == 11425
    assert round(11425 * S.clock_ns / 1000, 2) == 28.56
    one = an.TimingInputs(ModelDims(198, 64, 1))
    assert an.msa_latency(one) == an.sa_latency(one) + 2 * an.comm_cycles(one)


def test_msa_overlap_precondition():
    # a narrow bus makes the transfer longer than the compute it must hide behind
    with pytest.raises(an.AnalyticsError, match="overlap"):
        an.msa_latency(an.TimingInputs(ModelDims(4, 48, 1), bus_bits=1))


def test_layer_composition():
    dims = PRESETS["deit-s"]
    assert an.mlp_cycles(dims) == 2502
    assert an.projection_cycles(dims) == 966
    assert an.sa_pipelined(S) == 4297
    assert an.layer_cycles(S) == 4 * 3564 + (4297 + 966) + 2502 == 22021
    rep = an.full_model_latency(S, 12)
    assert rep.model_cycles == 264252 and round(rep.model_cycles / 1000, 1) == 264.3
    assert round(rep.latency_us, 1) == 660.6
    assert an.mlp_cycles(PRESETS["deit-t"]) == 1350
    assert an.mlp_cycles(PRESETS["deit-b"]) == 4806


def test_report_invariants():
    rep = an.full_model_latency(S, 12)
    assert rep.latency_us == pytest.approx(rep.model_cycles * 2.5 / 1000)
    assert all(v >= 0 for v in rep.as_record().values())
    assert rep.tokens_per_s == pytest.approx(400e6 / 594)
    with pytest.raises(an.AnalyticsError):
        an.full_model_latency(S, 0)


def test_bandwidth_and_intensity():
    bw, oi = an.bandwidth_and_intensity(S, 13568, 3.125)
    assert bw == 3.125
    assert abs(oi - 4342) <= 1
    assert an.bandwidth_and_intensity(S, 0, 1.0)[1] == 0


def test_normalized_power():
    assert an.normalized_power(100, 8) == 100
    assert an.normalized_power(1, 3) == 0.140625
    assert an.normalized_power(7, 16) == 4 * an.normalized_power(7, 8)


def test_dennard():
    assert an.dennard_normalize(10.0, 3.0, 1.0) == (10.0, 3.0)
    assert an.dennard_normalize(8.0, 4.0, 2.0) == (2.0, 2.0)
    with pytest.raises(an.AnalyticsError):
        an.dennard_normalize(1, 1, 0)


@given(st.floats(0.1, 10), st.floats(0.1, 10))
def test_dennard_composes(a, b):
    x = an.dennard_normalize(*an.dennard_normalize(50.0, 7.0, a), b)
    y = an.dennard_normalize(50.0, 7.0, a * b)
    assert x == pytest.approx(y, rel=1e-12)


def test_roofline():
    assert an.roofline_point(S, math.inf, 42515) == 42515
    assert an.roofline_point(S, 0, 42515) == 0
    assert an.roofline_point(S, 4342, 1e9) == pytest.approx(4342 * 3.125)
    # bandwidth-bound below the ridge point
    assert an.roofline_point(S, 100, 42515) == pytest.approx(312.5)


def test_dsp_free_extra():
    assert an.dsp_free_extra_latency(PRESETS["deit-s"]) == 71 == 1 * 64 + 4 * 1 + 1 * 3


@settings(max_examples=200)
@given(st.integers(1, 64), st.integers(1, 8), st.integers(1, 16), st.sampled_from([8, 16, 32, 64, 128, None]))
def test_pitch_monotone(n, dh, h, bus):
    dims = ModelDims(n, dh * h, h)
    p = an.pitch(an.TimingInputs(dims, bus_bits=bus))[0]
    if bus is not None:
        assert an.pitch(an.TimingInputs(dims, bus_bits=bus * 2))[0] <= p
        assert an.pitch(an.TimingInputs(dims, bus_bits=None))[0] <= p


@settings(max_examples=200)
@given(st.integers(1, 64), st.integers(1, 64), st.integers(1, 8), st.sampled_from([8, 64, None]))
def test_comm_term_non_increasing_in_heads(n, d, h, bus):
    a = an.comm_per_head(an.TimingInputs(ModelDims(n, d * h * (h + 1), h), bus_bits=bus))
    b = an.comm_per_head(an.TimingInputs(ModelDims(n, d * h * (h + 1), h + 1), bus_bits=bus))
    assert b <= a


def test_msa_non_decreasing_in_heads_at_fixed_pitch():
    # head_dim and pitch fixed (input term binds); only the pipelining term grows
    lat = [an.msa_latency(an.TimingInputs(ModelDims(16, 8 * h, h), bus_bits=None)) for h in range(1, 6)]
    assert lat == sorted(lat)


@given(st.integers(1, 40))
def test_full_model_linear_in_layers(layers):
    assert an.full_model_latency(S, layers).model_cycles == layers * an.full_model_latency(S, 1).model_cycles


def test_reference_rows_static():
    assert len(an.REFERENCE_ROWS) >= 3
    assert all(r.node == "16nm" for r in an.REFERENCE_ROWS)
