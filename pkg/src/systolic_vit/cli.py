"""Command line driver.

    systolic-vit func    --config run.cfg --out out/
    systolic-vit sim     --preset toy --seed 3
    systolic-vit verify  --preset toy
    systolic-vit analyze --preset deit-s
    systolic-vit sweep   --preset toy --axes nu_exp,prescale

Configs are flat ``key = value`` text; ``--set key=value`` overrides single
keys. Exit status: 0 ok, 1 verification failed, 2 bad configuration,
3 file or I/O error.
"""

from __future__ import annotations

import argparse
import csv
import io
import itertools
import math
import struct
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import analytics as an
from . import oracles
from .msa_func import (
    PRESETS,
    ModelDims,
    QuantTensor,
    SaParams,
    ShapeError,
    float_reference_msa,
    make_params,
    msa_forward,
    post_mac_affine,
    qkv_project,
    quantize_tensor,
    random_input,
)
from .quantarith import FixedPointParams, QuantArithError, code_range, quantize_linear, welford_fixed_row
from .sim import (
    ArrayConfig,
    ConfigError,
    SimulationError,
    StageLatencies,
    build_sa_pipeline,
    run_msa,
)

EXIT_OK, EXIT_VERIFY, EXIT_CONFIG, EXIT_IO = 0, 1, 2, 3

# ---------------------------------------------------------------------------
# tensor file

MAGIC = b"QT01"
# magic, bits, signed, rows, cols, step kind, step text length
_HEADER = struct.Struct("<4sBBIIBI")
STEP_GLOBAL, STEP_CHANNEL = 0, 1


class TensorFileError(ValueError):
    def __init__(self, field_name: str, message: str):
        super().__init__(f"tensor file field {field_name!r}: {message}")
        self.field = field_name


def encode_tensor(t: QuantTensor) -> bytes:
    rows, cols = t.shape
    if not 1 <= t.bits <= 8:
        raise TensorFileError("bits", f"{t.bits} does not fit one byte per code")
    if t.step_global is not None:
        kind, steps = STEP_GLOBAL, [t.step_global]
    else:
        kind, steps = STEP_CHANNEL, list(t.step_channels)
    text = " ".join(repr(float(s)) for s in steps).encode("ascii")
    head = _HEADER.pack(MAGIC, t.bits, int(t.signed), rows, cols, kind, len(text))
    payload = t.codes.astype(np.int8 if t.signed else np.uint8).tobytes(order="C")
    return head + text + payload


def decode_tensor(data: bytes) -> QuantTensor:
    if len(data) < _HEADER.size:
        raise TensorFileError("header", f"{len(data)} bytes, need at least {_HEADER.size}")
    magic, bits, signed, rows, cols, kind, text_len = _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise TensorFileError("magic", f"expected {MAGIC!r}, got {magic!r}")
    if not 1 <= bits <= 8:
        raise TensorFileError("bits", f"{bits} outside 1..8")
    if signed not in (0, 1):
        raise TensorFileError("signedness", f"{signed} is not 0 or 1")
    if kind not in (STEP_GLOBAL, STEP_CHANNEL):
        raise TensorFileError("step_kind", f"unknown kind {kind}")
    off = _HEADER.size
    raw = data[off : off + text_len]
    if len(raw) != text_len:
        raise TensorFileError("step_values", "truncated")
    try:
        steps = [float(s) for s in raw.decode("ascii").split()]
    except (UnicodeDecodeError, ValueError) as e:
        raise TensorFileError("step_values", f"not decimal text ({e})") from None
    want = 1 if kind == STEP_GLOBAL else cols
    if len(steps) != want:
        raise TensorFileError("step_values", f"{len(steps)} values, expected {want}")
    if not all(math.isfinite(s) and s > 0 for s in steps):
        raise TensorFileError("step_values", "steps must be finite and positive")
    payload = data[off + text_len :]
    if len(payload) != rows * cols:
        raise TensorFileError("payload", f"{len(payload)} bytes, expected rows*cols = {rows * cols}")
    codes = np.frombuffer(payload, dtype=np.int8 if signed else np.uint8).astype(np.int64).reshape(rows, cols)
    lo, hi = code_range(bits, bool(signed))
    if codes.size and (codes.min() < lo or codes.max() > hi):
        raise TensorFileError("payload", f"codes outside [{lo}, {hi}]")
    if kind == STEP_GLOBAL:
        return QuantTensor(codes, bits, bool(signed), step_global=steps[0])
    return QuantTensor(codes, bits, bool(signed), step_channels=np.array(steps))


def write_tensor(path: Path, t: QuantTensor) -> None:
    Path(path).write_bytes(encode_tensor(t))


def read_tensor(path: Path) -> QuantTensor:
    return decode_tensor(Path(path).read_bytes())


# ---------------------------------------------------------------------------
# configuration

AXES = ("nu_exp", "prescale", "bus_bits", "H", "MUL")
_FP_KEYS = {f.name for f in fields(FixedPointParams)}


@dataclass
class RunConfig:
    dims: ModelDims
    array: ArrayConfig
    fixedpoint: FixedPointParams = field(default_factory=FixedPointParams)
    seed: int = 0
    mode: str = "func"
    out_dir: Path = Path("out")
    preset: str | None = "toy"
    unrolled: bool = False
    sim_mode: str = "cycle"
    layers: int = 12
    input_path: Path | None = None
    fault: dict | None = None
    oracles: str = "full"
    sweep_values: dict = field(default_factory=dict)
    workers: int = 4


def parse_kv(text: str) -> dict[str, str]:
    """Flat ``key = value`` lines; ``#`` starts a comment."""
    out = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"config line {n}: expected 'key = value'")
        k, v = (s.strip() for s in line.split("=", 1))
        if not k:
            raise ConfigError(f"config line {n}: empty key")
        out[k] = v
    return out


def _int(key: str, v: str) -> int:
    try:
        return int(v)
    except ValueError:
        raise ConfigError(f"{key}: expected an integer, got {v!r}") from None


def _bus(key: str, v: str) -> int | None:
    return None if v.lower() in ("inf", "none", "unbounded") else _int(key, v)


def _bool(key: str, v: str) -> bool:
    if v.lower() in ("1", "true", "yes", "on"):
        return True
    if v.lower() in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"{key}: expected a boolean, got {v!r}")


def _fault(v: str) -> dict:
    """``stage:column:extra`` entries separated by commas, e.g. ``q:0:1``."""
    out: dict = {}
    for item in filter(None, (s.strip() for s in v.split(","))):
        parts = item.split(":")
        if len(parts) != 3 or parts[0] not in ("q", "k", "softmax"):
            raise ConfigError(f"fault: bad entry {item!r}, expected stage:column:extra with stage q, k or softmax")
        out.setdefault(parts[0], {})[_int("fault", parts[1])] = _int("fault", parts[2])
    return out


def _axis_values(axis: str, v: str) -> list:
    vals = [s.strip() for s in v.split(",") if s.strip()]
    if not vals:
        raise ConfigError(f"sweep.{axis}: empty value list")
    if axis == "bus_bits":
        return [_bus(axis, s) for s in vals]
    return [_int(axis, s) for s in vals]


def build_config(kv: dict[str, str]) -> RunConfig:
    kv = dict(kv)
    preset = kv.pop("preset", "toy")
    if preset not in PRESETS:
        raise ConfigError(f"unknown preset {preset!r}; choose from {', '.join(PRESETS)}")
    base = PRESETS[preset]
    dim_keys = {"tokens": "n_tokens", "embed_dim": "embed_dim", "heads": "heads", "mlp_ratio": "mlp_ratio", "bits": "bits"}
    dkw = {f.name: getattr(base, f.name) for f in fields(ModelDims)}
    for k, name in dim_keys.items():
        if k in kv:
            dkw[name] = _int(k, kv.pop(k))
    try:
        dims = ModelDims(**dkw)
    except ValueError as e:
        raise ConfigError(f"dimensions: {e}") from None
    if dkw["bits"] > 8:
        raise ConfigError("bits: tensor files hold at most 8-bit codes")

    fkw = {k: _int(k, kv.pop(k)) for k in list(kv) if k in _FP_KEYS}
    try:
        fp = FixedPointParams(**fkw)
    except QuantArithError as e:
        raise ConfigError(f"fixed point: {e}") from None

    akw: dict = {}
    if "mul_cycles" in kv:
        akw["mul_cycles"] = _int("mul_cycles", kv.pop("mul_cycles"))
    if "bus_bits" in kv:
        akw["bus_bits_per_cycle"] = _bus("bus_bits", kv.pop("bus_bits"))
    if "clock_ns" in kv:
        v = kv.pop("clock_ns")
        try:
            akw["clock_ns"] = float(v)
        except ValueError:
            raise ConfigError(f"clock_ns: expected a number, got {v!r}") from None
    if "variant" in kv:
        akw["variant"] = kv.pop("variant")
    rows = kv.pop("array_rows", None)
    cols = kv.pop("array_cols", None)
    array = ArrayConfig.for_dims(dims, **akw)
    if rows is not None or cols is not None:
        array = replace(
            array,
            rows=_int("array_rows", rows) if rows is not None else array.rows,
            cols=_int("array_cols", cols) if cols is not None else array.cols,
        )

    cfg = RunConfig(dims, array, fp, preset=preset)
    if "seed" in kv:
        cfg.seed = _int("seed", kv.pop("seed"))
    if "mode" in kv:
        cfg.mode = kv.pop("mode")
    if "out" in kv:
        cfg.out_dir = Path(kv.pop("out"))
    if "unrolled" in kv:
        cfg.unrolled = _bool("unrolled", kv.pop("unrolled"))
    if "sim_mode" in kv:
        cfg.sim_mode = kv.pop("sim_mode")
        if cfg.sim_mode not in ("cycle", "analytic"):
            raise ConfigError(f"sim_mode must be cycle or analytic, got {cfg.sim_mode!r}")
    if "layers" in kv:
        cfg.layers = _int("layers", kv.pop("layers"))
        if cfg.layers < 1:
            raise ConfigError("layers must be >= 1")
    if "input" in kv:
        cfg.input_path = Path(kv.pop("input"))
    if "fault" in kv:
        cfg.fault = _fault(kv.pop("fault")) or None
    if "oracles" in kv:
        cfg.oracles = kv.pop("oracles")
        if cfg.oracles not in ("full", "quick", "off"):
            raise ConfigError("oracles must be full, quick or off")
    if "workers" in kv:
        cfg.workers = max(1, _int("workers", kv.pop("workers")))
    for k in [k for k in kv if k.startswith("sweep.")]:
        axis = k[len("sweep.") :]
        if axis not in AXES:
            raise ConfigError(f"unknown sweep axis {axis!r}; choose from {', '.join(AXES)}")
        cfg.sweep_values[axis] = _axis_values(axis, kv.pop(k))
    if cfg.mode not in ("func", "sim", "verify", "analyze", "sweep"):
        raise ConfigError(f"unknown mode {cfg.mode!r}")
    if kv:
        raise ConfigError(f"unknown config keys: {', '.join(sorted(kv))}")
    return cfg


def load_config(path: Path | None = None, overrides: dict[str, str] | None = None) -> RunConfig:
    kv = parse_kv(Path(path).read_text()) if path is not None else {}
    kv.update(overrides or {})
    return build_config(kv)


def validated_params(cfg: RunConfig, dims: ModelDims | None = None, fp: FixedPointParams | None = None) -> SaParams:
    """Synthetic parameters, rejected before any compute if an accumulator could overflow."""
    params = make_params(dims or cfg.dims, seed=cfg.seed, fp=fp or cfg.fixedpoint)
    try:
        params.validate()
    except OverflowError as e:
        raise ConfigError(str(e)) from None
    return params


def timing_inputs(cfg: RunConfig) -> an.TimingInputs:
    a = cfg.array
    return an.TimingInputs(cfg.dims, a.mul_cycles, a.bus_bits_per_cycle, a.clock_ns)


# ---------------------------------------------------------------------------
# reports


def _fmt(v) -> str:
    if isinstance(v, bool):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, (list, tuple)):
        return " ".join(_fmt(x) for x in v)
    if v is None:
        return ""
    return str(v)


def format_summary(record: dict) -> str:
    return "".join(f"{k}={_fmt(v)}\n" for k, v in record.items())


def _write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)


def _input(cfg: RunConfig, params: SaParams) -> tuple[np.ndarray, QuantTensor, SaParams]:
    """Real input, its codes, and parameters whose activation step matches the codes."""
    if cfg.input_path is None:
        z = random_input(cfg.dims, cfg.seed)
        return z, quantize_tensor(z, params.z_step, cfg.dims.bits), params
    t = read_tensor(cfg.input_path)
    if t.shape != (cfg.dims.n_tokens, cfg.dims.embed_dim) or t.step_global is None or not t.signed:
        raise ConfigError(
            f"input tensor must be signed {cfg.dims.n_tokens}x{cfg.dims.embed_dim} with a global step, got {t.shape}"
        )
    if t.bits != cfg.dims.bits:
        raise ConfigError(f"input tensor has {t.bits}-bit codes, config says {cfg.dims.bits}")
    params = replace(params, z_step=t.step_global)
    return t.dequantize(), t, params


def numeric_metrics(params: SaParams, z: np.ndarray) -> tuple[dict, object]:
    """End-to-end error against the float model plus layer-norm statistics quality."""
    res = msa_forward(z, params)
    err = np.abs(res.output - float_reference_msa(z, params))
    fp, s = params.fp, params.fp.prescale
    stat_errs, mismatches, total = [], 0, 0
    for g, (h, hf) in enumerate(zip(params.heads, params.fixed)):
        proj = qkv_project(res.z3b, params, g)
        for acc, mult, bias, gamma, beta, step, codes in (
            (proj.acc_q, hf.mult_q, hf.bias_q, h.gamma_q, h.beta_q, h.step_q, res.heads[g].q.codes),
            (proj.acc_k, hf.mult_k, hf.bias_k, h.gamma_k, h.beta_k, h.step_k, res.heads[g].k.codes),
        ):
            for t, row in enumerate(acc):
                xs = [post_mac_affine(a, m, b, fp) for a, m, b in zip(row, mult, bias)]
                arr = np.array(xs, dtype=float)
                mean, std = arr.mean(), arr.std()
                if std > 0:
                    st = welford_fixed_row(xs, fp, params.recip)
                    stat_errs.append(abs(st.mean / s - mean) / std + abs(math.sqrt(st.m2 / st.count) / s - std) / std)
                    y = gamma * (arr - mean) / std + beta
                else:
                    y = np.asarray(beta, dtype=float)
                exact = [quantize_linear(float(v), step) for v in y]
                mismatches += int(np.count_nonzero(np.array(exact) != codes[t]))
                total += len(exact)
    metrics = {
        "max_abs_error": float(err.max()),
        "mean_abs_error": float(err.mean()),
        "stats_rel_error": float(np.mean(stat_errs)) if stat_errs else 0.0,
        "ln_code_mismatch": mismatches / total,
    }
    return metrics, res


def _dims_record(cfg: RunConfig) -> dict:
    d = cfg.dims
    return {
        "preset": cfg.preset,
        "tokens": d.n_tokens,
        "embed_dim": d.embed_dim,
        "heads": d.heads,
        "bits": d.bits,
        "seed": cfg.seed,
        "nu_exp": cfg.fixedpoint.nu_exp,
        "prescale": cfg.fixedpoint.prescale,
    }


# ---------------------------------------------------------------------------
# commands


def cmd_run_func(cfg: RunConfig) -> dict:
    params = validated_params(cfg)
    z, z3b, params = _input(cfg, params)
    metrics, res = numeric_metrics(params, z)
    out = cfg.out_dir
    out.mkdir(parents=True, exist_ok=True)
    write_tensor(out / "input.qt", z3b)
    for g, h in enumerate(res.heads):
        write_tensor(out / f"head{g}.qt", h.sa)
    buf = io.StringIO()
    np.savetxt(buf, res.output, fmt="%.17g", delimiter=",")
    _write(out / "msa_output.csv", buf.getvalue())
    summary = {"mode": "func", **_dims_record(cfg), "heads_written": len(res.heads), **metrics}
    _write(out / "summary.txt", format_summary(summary))
    return summary


def cmd_analyze(cfg: RunConfig) -> dict:
    t = timing_inputs(cfg)
    rep = an.full_model_latency(t, cfg.layers)
    p, binding = an.pitch(t)
    a = cfg.array
    summary = {
        "mode": "analyze",
        **_dims_record(cfg),
        "mul_cycles": a.mul_cycles,
        "bus_bits": a.bus_bits_per_cycle if a.bus_bits_per_cycle is not None else "inf",
        "layers": cfg.layers,
        **rep.as_record(),
        "msa_latency_us": rep.msa_latency_cycles * t.clock_ns / 1000,
        "pitch_binding": binding,
        "comm_per_head_cycles": an.comm_per_head(t),
        "sa_pipelined_cycles": an.sa_pipelined(t),
        "projection_cycles": an.projection_cycles(cfg.dims),
        "mlp_cycles": an.mlp_cycles(cfg.dims),
        "dsp_free_extra_cycles": an.dsp_free_extra_latency(cfg.dims, a.dsp_free_stages),
    }
    return summary


def _analytic_expectations(cfg: RunConfig) -> dict:
    """Closed-form values for the same build the simulator runs."""
    t = timing_inputs(cfg)
    stages = cfg.array.stages
    l1 = an.sa_latency_stages(cfg.dims, stages)
    p, _ = an.pitch(t)
    comm = an.comm_cycles(t)
    exp = {"sa_latency_cycles": l1, "pitch_cycles": p}
    if comm <= l1 + (cfg.dims.heads - 1) * p:
        exp["msa_latency_cycles"] = l1 + (cfg.dims.heads - 1) * p + 2 * comm
    return exp


def _simulate(cfg: RunConfig, params: SaParams, z3b: QuantTensor, array: ArrayConfig | None = None, fault=None):
    acc = build_sa_pipeline(cfg.dims, array or cfg.array, params, unrolled=cfg.unrolled, tri_skew=fault)
    return run_msa(acc, z3b)


def cmd_run_sim(cfg: RunConfig) -> dict:
    if cfg.sim_mode == "analytic":
        summary = cmd_analyze(cfg)
        summary["mode"] = "sim"
        summary["sim_mode"] = "analytic"
        _write(cfg.out_dir / "summary.txt", format_summary(summary))
        return summary
    params = validated_params(cfg)
    _, z3b, params = _input(cfg, params)
    outputs, trace = _simulate(cfg, params, z3b, fault=cfg.fault)
    out = cfg.out_dir
    out.mkdir(parents=True, exist_ok=True)
    for g, t in enumerate(outputs):
        write_tensor(out / f"head{g}.qt", t)
    _write(out / "trace.tsv", trace.to_tsv())
    summary = {"mode": "sim", "sim_mode": "cycle", "preset": cfg.preset, "seed": cfg.seed, **trace.summary}
    summary["bandwidth_GBps"] = an.bandwidth_GBps(timing_inputs(cfg))
    expected = _analytic_expectations(cfg) if not cfg.unrolled else {}
    for k, v in expected.items():
        summary[f"analytic_{k}"] = v
    if cfg.dims.heads == 1:
        expected.pop("pitch_cycles", None)
    summary["matches_analytics"] = all(trace.summary[k] == v for k, v in expected.items()) if expected else ""
    _write(out / "summary.txt", format_summary(summary))
    return summary


@dataclass
class Check:
    name: str
    ok: bool
    detail: str = ""


def cmd_verify(cfg: RunConfig) -> tuple[bool, list[Check]]:
    checks: list[Check] = []
    params = validated_params(cfg)
    z, z3b, params = _input(cfg, params)
    golden = [h.sa.codes for h in msa_forward(z, params).heads]
    dsp = replace(cfg.array, variant="dsp")
    dsp_cfg = replace(cfg, array=dsp)

    sim_out = trace = None
    try:
        sim_out, trace = _simulate(dsp_cfg, params, z3b, dsp, cfg.fault)
    except SimulationError as e:
        checks.append(Check("golden_vs_sim", False, f"{type(e).__name__}: {e}"))
    if sim_out is not None:
        bad = sum(int(np.count_nonzero(s.codes != g)) for s, g in zip(sim_out, golden))
        checks.append(Check("golden_vs_sim", bad == 0, f"{bad} mismatched codes over {cfg.dims.heads} heads"))

        expected = _analytic_expectations(dsp_cfg)
        if cfg.dims.heads == 1:
            expected.pop("pitch_cycles")
        diffs = [f"{k} sim={trace.summary[k]} analytic={v}" for k, v in expected.items() if trace.summary[k] != v]
        checks.append(Check("analytics_vs_trace", not diffs, "; ".join(diffs) or ", ".join(f"{k}={v}" for k, v in expected.items())))

        free = replace(cfg.array, variant="dsp_free")
        try:
            free_out, free_trace = _simulate(replace(cfg, array=free), params, z3b, free, cfg.fault)
        except SimulationError as e:
            checks.append(Check("dsp_vs_dsp_free", False, f"{type(e).__name__}: {e}"))
        else:
            bad = sum(int(np.count_nonzero(a.codes != b.codes)) for a, b in zip(free_out, sim_out))
            extra = free_trace.summary["sa_latency_cycles"] - trace.summary["sa_latency_cycles"]
            want = an.sa_latency_stages(cfg.dims, free.stages) - an.sa_latency_stages(cfg.dims, StageLatencies.uniform(dsp.mul_cycles))
            checks.append(
                Check("dsp_vs_dsp_free", bad == 0 and extra == want, f"{bad} mismatched codes, extra latency {extra} (analytic {want})")
            )
    if cfg.oracles != "off":
        for r in oracles.run_all(quick=cfg.oracles == "quick"):
            checks.append(Check(r.name, r.ok, f"{r.checked} points, {r.mismatches} mismatches {r.detail}".strip()))
    ok = all(c.ok for c in checks)
    record = {"mode": "verify", **_dims_record(cfg)}
    for c in checks:
        record[c.name] = "PASS" if c.ok else "FAIL"
        record[f"{c.name}.detail"] = c.detail
    record["result"] = "PASS" if ok else "FAIL"
    _write(cfg.out_dir / "verify.txt", format_summary(record))
    return ok, checks


SWEEP_COLUMNS = (
    "nu_exp",
    "prescale",
    "bus_bits",
    "H",
    "MUL",
    "tokens",
    "embed_dim",
    "sa_latency_cycles",
    "pitch_cycles",
    "pitch_binding",
    "msa_latency_cycles",
    "msa_latency_us",
    "max_abs_error",
    "mean_abs_error",
    "stats_rel_error",
    "ln_code_mismatch",
)


def default_axis_values(cfg: RunConfig, axis: str) -> list:
    if axis == "nu_exp":
        return list(range(2, 11))
    if axis == "prescale":
        return [1, 2, 4, 8, 16, 32, 64, 128]
    if axis == "bus_bits":
        return [8, 16, 32, 64, 128, 256, 512, None]
    if axis == "H":
        return [h for h in range(1, 17) if cfg.dims.embed_dim % h == 0]
    return [1, 2, 4]


def parse_axes(text: str) -> list[str]:
    axes = [a.strip() for a in text.split(",") if a.strip()]
    for a in axes:
        if a not in AXES:
            raise ConfigError(f"unknown sweep axis {a!r}; choose from {', '.join(AXES)}")
    if len(set(axes)) != len(axes):
        raise ConfigError("sweep axes repeat")
    return axes


def _point(cfg: RunConfig, values: dict) -> RunConfig:
    fp = cfg.fixedpoint
    dims = cfg.dims
    array = cfg.array
    if "nu_exp" in values or "prescale" in values:
        try:
            fp = replace(fp, nu_exp=values.get("nu_exp", fp.nu_exp), prescale=values.get("prescale", fp.prescale))
        except QuantArithError as e:
            raise ConfigError(f"sweep point {values}: {e}") from None
    if "H" in values:
        try:
            dims = replace(dims, heads=values["H"])
        except ValueError as e:
            raise ConfigError(f"sweep point {values}: {e}") from None
    if "bus_bits" in values:
        array = replace(array, bus_bits_per_cycle=values["bus_bits"])
    if "MUL" in values:
        if values["MUL"] < 1:
            raise ConfigError("MUL must be >= 1")
        array = replace(array, mul_cycles=values["MUL"])
    return replace(cfg, dims=dims, fixedpoint=fp, array=array)


def cmd_sweep(cfg: RunConfig, axes: list[str]) -> list[dict]:
    if not axes:
        raise ConfigError("sweep needs at least one axis (--axes)")
    grids = [cfg.sweep_values.get(a) or default_axis_values(cfg, a) for a in axes]
    points = []
    for combo in itertools.product(*grids):
        values = dict(zip(axes, combo))
        pc = _point(cfg, values)
        points.append((values, pc))

    # numerics depend only on dims, fixed point and seed; share them across timing axes
    numeric: dict = {}
    for _, pc in points:
        numeric.setdefault((pc.dims, pc.fixedpoint), pc)
    for pc in numeric.values():
        validated_params(pc)  # reject the whole grid before any compute

    def run(pc: RunConfig) -> dict:
        params = validated_params(pc)
        z, _, params = _input(pc, params)
        return numeric_metrics(params, z)[0]

    with ThreadPoolExecutor(max_workers=cfg.workers) as pool:
        metrics = dict(zip(numeric, pool.map(run, numeric.values())))

    rows = []
    for values, pc in points:
        t = timing_inputs(pc)
        p, binding = an.pitch(t)
        try:
            msa = an.msa_latency(t)
        except an.AnalyticsError:
            msa = None
        row = {
            "nu_exp": pc.fixedpoint.nu_exp,
            "prescale": pc.fixedpoint.prescale,
            "bus_bits": pc.array.bus_bits_per_cycle if pc.array.bus_bits_per_cycle is not None else "inf",
            "H": pc.dims.heads,
            "MUL": pc.array.mul_cycles,
            "tokens": pc.dims.n_tokens,
            "embed_dim": pc.dims.embed_dim,
            "sa_latency_cycles": an.sa_latency(t),
            "pitch_cycles": p,
            "pitch_binding": binding,
            "msa_latency_cycles": msa,
            "msa_latency_us": msa * t.clock_ns / 1000 if msa is not None else None,
            **metrics[(pc.dims, pc.fixedpoint)],
        }
        key = tuple(math.inf if values[a] is None else values[a] for a in axes)
        rows.append((key, row))
    rows.sort(key=lambda kr: kr[0])
    return [r for _, r in rows]


def format_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SWEEP_COLUMNS)
    for r in rows:
        w.writerow([_fmt(r[c]) for c in SWEEP_COLUMNS])
    return buf.getvalue()


# ---------------------------------------------------------------------------
# entry point


def _parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="systolic-vit", description="Low-bit ViT attention accelerator model")
    sub = ap.add_subparsers(dest="command", required=True)
    for name in ("func", "sim", "verify", "analyze", "sweep"):
        p = sub.add_parser(name)
        p.add_argument("--config", type=Path, help="flat key = value config file")
        p.add_argument("--seed", type=int)
        p.add_argument("--out", type=Path, help="output directory")
        p.add_argument("--preset", choices=sorted(PRESETS))
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override one config key")
        if name == "sweep":
            p.add_argument("--axes", required=True, help=f"comma-separated subset of {','.join(AXES)}")
    return ap


def run(argv: list[str] | None = None, stdout=None) -> int:
    stdout = stdout or sys.stdout
    args = _parser().parse_args(argv)
    try:
        overrides = {"mode": args.command}
        if args.preset is not None:
            overrides["preset"] = args.preset
        if args.seed is not None:
            overrides["seed"] = str(args.seed)
        if args.out is not None:
            overrides["out"] = str(args.out)
        for item in args.set:
            if "=" not in item:
                raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
            k, v = item.split("=", 1)
            overrides[k.strip()] = v.strip()
        base = parse_kv(args.config.read_text()) if args.config is not None else {}
        # a preset on the command line replaces dimension keys from the file
        if args.preset is not None:
            for k in ("tokens", "embed_dim", "heads", "mlp_ratio"):
                base.pop(k, None)
        cfg = build_config({**base, **overrides})

        if args.command == "func":
            stdout.write(format_summary(cmd_run_func(cfg)))
        elif args.command == "sim":
            stdout.write(format_summary(cmd_run_sim(cfg)))
        elif args.command == "analyze":
            summary = cmd_analyze(cfg)
            _write(cfg.out_dir / "summary.txt", format_summary(summary))
            stdout.write(format_summary(summary))
        elif args.command == "verify":
            ok, checks = cmd_verify(cfg)
            for c in checks:
                stdout.write(f"{'PASS' if c.ok else 'FAIL'} {c.name}: {c.detail}\n")
            return EXIT_OK if ok else EXIT_VERIFY
        else:
            text = format_csv(cmd_sweep(cfg, parse_axes(args.axes)))
            _write(cfg.out_dir / "sweep.csv", text)
            stdout.write(text)
        return EXIT_OK
    except SimulationError as e:
        print(f"simulation failed: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_VERIFY
    except (TensorFileError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_IO
    except (ConfigError, an.AnalyticsError, QuantArithError, ShapeError, OverflowError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
