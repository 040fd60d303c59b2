import csv
import io
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from systolic_vit import cli
from systolic_vit.msa_func import QuantTensor
from systolic_vit.quantarith import code_range
from systolic_vit.sim import CycleTrace


def run(*argv):
    buf = io.StringIO()
    rc = cli.run(list(argv), stdout=buf)
    return rc, buf.getvalue()


def kv(text):
    return dict(line.split("=", 1) for line in text.splitlines() if "=" in line)


# -- tensor file -----------------------------------------------------------


@settings(max_examples=60)
@given(
    st.integers(1, 8),
    st.booleans(),
    st.integers(1, 6),
    st.integers(1, 6),
    st.booleans(),
    st.integers(0, 2**32 - 1),
)
def test_tensor_roundtrip(bits, signed, rows, cols, per_channel, seed):
    rng = np.random.default_rng(seed)
    lo, hi = code_range(bits, signed)
    codes = rng.integers(lo, hi + 1, size=(rows, cols))
    if per_channel:
        t = QuantTensor(codes, bits, signed, step_channels=rng.uniform(0.01, 2, cols))
    else:
        t = QuantTensor(codes, bits, signed, step_global=float(rng.uniform(0.01, 2)))
    back = cli.decode_tensor(cli.encode_tensor(t))
    assert np.array_equal(back.codes, t.codes)
    assert (back.bits, back.signed, back.step_global) == (t.bits, t.signed, t.step_global)
    if per_channel:
        assert np.array_equal(back.step_channels, t.step_channels)


def test_tensor_byte_layout():
    t = QuantTensor(np.array([[-3, 2, 0]]), 3, True, step_global=0.25)
    data = cli.encode_tensor(t)
    assert data[:4] == b"QT01"
    assert data[4:6] == bytes([3, 1])
    assert struct.unpack_from("<II", data, 6) == (1, 3)
    assert data[14] == 0
    (n,) = struct.unpack_from("<I", data, 15)
    assert data[19 : 19 + n] == b"0.25"
    assert data[19 + n :] == bytes([0xFD, 2, 0])


def _corrupt(offset, value):
    data = bytearray(cli.encode_tensor(QuantTensor(np.zeros((2, 2), int), 3, True, step_global=0.5)))
    data[offset] = value
    return bytes(data)


@pytest.mark.parametrize(
    "data,field",
    [
        (b"QT01", "header"),
        (_corrupt(3, ord("2")), "magic"),
        (_corrupt(4, 9), "bits"),
        (_corrupt(5, 2), "signedness"),
        (_corrupt(14, 7), "step_kind"),
        (_corrupt(19, ord("x")), "step_values"),
        (_corrupt(-1, 5), "payload"),
        (cli.encode_tensor(QuantTensor(np.zeros((2, 2), int), 3, True, step_global=0.5))[:-1], "payload"),
    ],
)
def test_corrupt_tensor_names_field(data, field):
    with pytest.raises(cli.TensorFileError) as e:
        cli.decode_tensor(data)
    assert e.value.field == field and repr(field) in str(e.value)


# -- config ----------------------------------------------------------------


def test_parse_kv():
    assert cli.parse_kv("a = 1  # note\n\n# c\nb=x y\n") == {"a": "1", "b": "x y"}
    with pytest.raises(cli.ConfigError, match="line 2"):
        cli.parse_kv("a=1\nnot a pair\n")


def test_build_config():
    cfg = cli.build_config({"preset": "deit-s", "bus_bits": "inf", "nu_exp": "8", "seed": "4", "sweep.MUL": "1,2"})
    assert cfg.dims.embed_dim == 384 and cfg.array.bus_bits_per_cycle is None
    assert cfg.fixedpoint.nu_exp == 8 and cfg.seed == 4
    assert cfg.sweep_values == {"MUL": [1, 2]}
    assert cfg.array.rows == 384 and cfg.array.cols == 198


@pytest.mark.parametrize(
    "overrides",
    [{"heads": "5"}, {"colour": "red"}, {"preset": "deit-xl"}, {"mul_cycles": "0"}, {"seed": "x"}, {"fault": "z:0:1"}, {"nu_exp": "-1"}],
)
def test_config_rejects(overrides):
    with pytest.raises(cli.ConfigError):
        cli.build_config(overrides)


def test_exit_codes(tmp_path):
    assert run("func", "--set", "heads=5", "--out", str(tmp_path))[0] == cli.EXIT_CONFIG
    # accumulators too narrow for the MAC worst case: rejected before compute
    assert run("func", "--set", "acc_bits=6", "--out", str(tmp_path))[0] == cli.EXIT_CONFIG
    assert run("func", "--config", str(tmp_path / "missing.cfg"))[0] == cli.EXIT_IO
    (tmp_path / "bad.qt").write_bytes(b"QT02" + bytes(30))
    assert run("func", "--set", f"input={tmp_path / 'bad.qt'}", "--out", str(tmp_path))[0] == cli.EXIT_IO
    assert not (tmp_path / "summary.txt").exists()


def test_config_file_and_cli_precedence(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text("preset = toy\ntokens = 6\nseed = 1\nout = %s\n" % (tmp_path / "a"))
    rc, out = run("func", "--config", str(path), "--seed", "2")
    assert rc == 0 and kv(out)["tokens"] == "6" and kv(out)["seed"] == "2"
    rc, out = run("analyze", "--config", str(path), "--preset", "deit-s")
    assert rc == 0 and kv(out)["tokens"] == "198"


# -- func ------------------------------------------------------------------


def test_func_byte_identical(tmp_path):
    for d in ("a", "b"):
        assert run("func", "--preset", "toy", "--seed", "3", "--out", str(tmp_path / d))[0] == 0
    files = sorted(p.name for p in (tmp_path / "a").iterdir())
    assert files == ["head0.qt", "head1.qt", "head2.qt", "input.qt", "msa_output.csv", "summary.txt"]
    for f in files:
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()


def test_func_from_input_tensor(tmp_path):
    run("func", "--seed", "5", "--out", str(tmp_path / "a"))
    run("func", "--seed", "5", "--set", f"input={tmp_path / 'a' / 'input.qt'}", "--out", str(tmp_path / "b"))
    for g in range(3):
        assert (tmp_path / "a" / f"head{g}.qt").read_bytes() == (tmp_path / "b" / f"head{g}.qt").read_bytes()


def test_func_deit_s_six_heads(tmp_path):
    rc, out = run("func", "--preset", "deit-s", "--out", str(tmp_path))
    assert rc == 0 and kv(out)["heads_written"] == "6"
    for g in range(6):
        t = cli.read_tensor(tmp_path / f"head{g}.qt")
        assert t.shape == (198, 64) and t.bits == 3
    assert np.loadtxt(tmp_path / "msa_output.csv", delimiter=",").shape == (198, 384)


# -- sim / analyze ---------------------------------------------------------


def test_sim_trace_and_summary(tmp_path):
    rc, out = run("sim", "--preset", "toy", "--seed", "2", "--out", str(tmp_path))
    s = kv(out)
    assert rc == 0 and s["matches_analytics"] == "1"
    assert s["sa_latency_cycles"] == s["analytic_sa_latency_cycles"] == "85"
    assert s["msa_latency_cycles"] == s["analytic_msa_latency_cycles"]
    text = (tmp_path / "trace.tsv").read_text()
    assert all(len(line.split("\t")) == 3 for line in text.splitlines())
    tr = CycleTrace.from_tsv(text)
    cycles = [e.cycle for e in tr.events]
    assert cycles == sorted(cycles) and tr.per_unit_monotone()
    # simulator head outputs equal the functional run
    run("func", "--preset", "toy", "--seed", "2", "--out", str(tmp_path / "f"))
    for g in range(3):
        assert (tmp_path / f"head{g}.qt").read_bytes() == (tmp_path / "f" / f"head{g}.qt").read_bytes()


def test_sim_analytic_deit_s(tmp_path):
    rc, out = run("sim", "--preset", "deit-s", "--set", "sim_mode=analytic", "--out", str(tmp_path))
    s = kv(out)
    assert rc == 0 and s["msa_latency_cycles"] == "11425" and s["sa_latency_cycles"] == "1327"
    assert (tmp_path / "summary.txt").read_text() == out


def test_analyze_deit_s(tmp_path):
    rc, out = run("analyze", "--preset", "deit-s", "--out", str(tmp_path))
    s = kv(out)
    assert rc == 0
    assert (s["layer_cycles"], s["model_cycles"], s["pitch_binding"]) == ("22021", "264252", "communication")
    assert s["bandwidth_GBps"] == "3.125" and s["dsp_free_extra_cycles"] == "71"


# -- verify ----------------------------------------------------------------


def test_verify_default_passes(tmp_path):
    rc, out = run("verify", "--out", str(tmp_path))
    assert rc == 0, out
    names = [line.split()[1].rstrip(":") for line in out.splitlines()]
    assert names[:3] == ["golden_vs_sim", "analytics_vs_trace", "dsp_vs_dsp_free"]
    assert len(names) == 7 and all(line.startswith("PASS") for line in out.splitlines())
    assert kv((tmp_path / "verify.txt").read_text())["result"] == "PASS"


@pytest.mark.parametrize("fault", ["q:0:1", "k:2:-1", "softmax:1:1"])
def test_verify_detects_triangular_delay_fault(tmp_path, fault):
    rc, out = run("verify", "--set", f"fault={fault}", "--set", "oracles=off", "--out", str(tmp_path))
    assert rc == cli.EXIT_VERIFY
    assert "FAIL golden_vs_sim" in out and "triangular delay misaligned" in out


def test_verify_other_dims(tmp_path):
    rc, out = run("verify", "--set", "tokens=5", "--set", "embed_dim=8", "--set", "heads=2", "--set", "mul_cycles=2",
                  "--set", "bus_bits=inf", "--set", "oracles=off", "--out", str(tmp_path))
    assert rc == 0, out


# -- sweep -----------------------------------------------------------------


def sweep_rows(*argv):
    rc, out = run("sweep", *argv)
    assert rc == 0
    return list(csv.DictReader(io.StringIO(out)))


def test_sweep_nu_trend(tmp_path):
    rows = sweep_rows("--axes", "nu_exp", "--out", str(tmp_path))
    assert [int(r["nu_exp"]) for r in rows] == list(range(2, 11))
    for col in ("stats_rel_error", "ln_code_mismatch"):
        vals = [float(r[col]) for r in rows]
        assert all(b <= a for a, b in zip(vals, vals[1:])), col
    assert (tmp_path / "sweep.csv").exists()


def test_sweep_single_point_matches_func(tmp_path):
    rows = sweep_rows("--axes", "nu_exp", "--set", "sweep.nu_exp=6", "--seed", "7", "--out", str(tmp_path))
    _, out = run("func", "--seed", "7", "--out", str(tmp_path / "f"))
    s = kv(out)
    assert len(rows) == 1
    for col in ("max_abs_error", "mean_abs_error", "stats_rel_error", "ln_code_mismatch"):
        assert rows[0][col] == s[col]


def test_sweep_sorted_and_parallel_stable(tmp_path):
    args = ["--axes", "prescale,nu_exp", "--set", "sweep.prescale=8,1,4", "--set", "sweep.nu_exp=5,3", "--out", str(tmp_path)]
    a = run("sweep", *args, "--set", "workers=1")[1]
    b = run("sweep", *args, "--set", "workers=4")[1]
    assert a == b
    keys = [(int(r["prescale"]), int(r["nu_exp"])) for r in csv.DictReader(io.StringIO(a))]
    assert keys == sorted(keys) and len(keys) == 6


def test_sweep_heads_and_mul(tmp_path):
    rows = sweep_rows("--axes", "H,MUL", "--set", "sweep.MUL=1,4", "--out", str(tmp_path))
    assert {int(r["H"]) for r in rows} == {1, 2, 3, 4, 6, 12}
    for r in rows:
        assert int(r["sa_latency_cycles"]) > 0
    assert run("sweep", "--axes", "H", "--set", "sweep.H=5", "--out", str(tmp_path))[0] == cli.EXIT_CONFIG
    assert run("sweep", "--axes", "warp", "--out", str(tmp_path))[0] == cli.EXIT_CONFIG


def test_sweep_bus_plateau_deit_s(tmp_path):
    rows = sweep_rows("--preset", "deit-s", "--axes", "bus_bits", "--out", str(tmp_path))
    pitch = [int(r["pitch_cycles"]) for r in rows]
    assert pitch == sorted(pitch, reverse=True)
    assert pitch[-1] == 582 and pitch.count(582) >= 3
    by_bus = {r["bus_bits"]: r for r in rows}
    assert by_bus["64"]["pitch_cycles"] == "594" and by_bus["64"]["msa_latency_cycles"] == "11425"
    assert by_bus["inf"]["pitch_binding"] == "input"
