"""Cycle-accurate model of the self-attention pipeline and the multi-head scheduler.

One ``SaUnit`` is the hardware for a single attention head: Q/K/V projection
arrays, post-MAC scale units, Welford aggregation chains with triangular
delays and NormQ, the K weight loader feeding the QK^T array, the softmax
post-MAC / aggregation / ScaleQ path, and the V weight loader feeding the AV
array. The per-element arithmetic calls the same kernels as the golden model,
so any output difference is a timing or wiring bug.

Timing of a job (one head of one input sequence) is fixed by the structure:
the only control decisions are the job start cycles, the broadcast latch
enables (fired when a chain is full) and the release of the Q and V FIFOs,
which follow the K latch by offsets computed here at build time.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..msa_func import ModelDims, QuantTensor, SaParams, ShapeError, post_mac_affine
from ..quantarith import (
    WelfordState,
    code_range,
    exp_approx,
    normq,
    scale_quantize,
    shift_round,
    threshold_quantize,
    welford_update_fixed,
)
from .config import ArrayConfig, ConfigError, pe_total
from .trace import CycleTrace
from .units import (
    AlignmentError,
    Fifo,
    HazardError,
    MacArray,
    Pipe,
    SimulationError,
    TriangularDelay,
    WeightLoader,
)


class ResourceError(ConfigError):
    pass


@dataclass
class Job:
    jid: int
    seq: int
    head: int
    unit: int
    start: int
    label: str


@dataclass
class Timing:
    """Structural timing derived from the configuration (cycles)."""

    port_window: int  # input port occupancy per job, including the head switch
    hold_window: int  # latch hold needed by the QK^T / AV arrays per job
    comm: int  # ideal link cycles for one sequence (3-bit codes, fractional packing)
    comm_packed: int  # whole-word packing
    k_to_a: int  # K latch enable to first QK^T MAC
    k_to_v_release: int  # K latch enable to the first V chain push
    ln_tri_base: int
    sm_tri_base: int


def _ceil_div(a: int, b: int) -> int:
    return -(-a // b)


def link_cycles(bits_total: int, bus: int | None) -> int:
    return 0 if bus is None else _ceil_div(bits_total, bus)


def packed_cycles(codes: int, bits: int, bus: int | None) -> int:
    if bus is None:
        return 0
    per_word = bus // bits
    if per_word == 0:
        raise ConfigError(f"bus of {bus} bits cannot carry a {bits}-bit code")
    return _ceil_div(codes, per_word)


def derive_timing(dims: ModelDims, cfg: ArrayConfig) -> Timing:
    n, d, dh = dims.n_tokens, dims.embed_dim, dims.head_dim
    st, rg, e = cfg.stages, cfg.registers, cfg.exp_depth
    w = st.agg + 1
    # QK^T array busy from the first Q row entering until the last MAC, plus
    # the enable and settle cycles of the next latch
    hold = (n - 1) + (dh - 1) + (n - 1) + 1 + cfg.latch_settle
    a_to_y0 = dh + rg.a_out + st.exp_scale + e + rg.softmax_in + n + 2 + rg.softmax_turn + st.scaleq + rg.scaleq_out + rg.av_in
    k_to_a = cfg.latch_settle
    # V chain must be full exactly when the first A code reaches the AV array
    k_to_v_release = k_to_a + a_to_y0 - cfg.latch_settle - n
    bits = 3 * n * d if dims.bits == 3 else dims.bits * n * d
    return Timing(
        port_window=n + d,
        hold_window=hold,
        comm=link_cycles(bits, cfg.bus_bits_per_cycle),
        comm_packed=packed_cycles(n * d, dims.bits, cfg.bus_bits_per_cycle),
        k_to_a=k_to_a,
        k_to_v_release=k_to_v_release,
        ln_tri_base=dh * (w - 1) + rg.ln_turn + 2,
        sm_tri_base=rg.softmax_turn + 2,
    )


class _Counter:
    __slots__ = ("n",)

    def __init__(self):
        self.n = 0


class _CPipe(Pipe):
    """Pipe that keeps a shared count of items in flight (for idle skipping)."""

    __slots__ = ("ctr",)

    def __init__(self, name, latency, ctr):
        super().__init__(name, latency)
        self.ctr = ctr

    def push(self, cycle, item):
        super().push(cycle, item)
        self.ctr.n += 1

    def pop(self, cycle):
        item = super().pop(cycle)
        if item is not None:
            self.ctr.n -= 1
        return item


class _LnPath:
    """Post-MAC scale, Welford chain, triangular delay and NormQ for Q or K."""

    def __init__(self, name, unit: "SaUnit", which: str):
        cfg, dh = unit.cfg, unit.dh
        st, rg = cfg.stages, cfg.registers
        self.name, self.unit, self.which = name, unit, which
        self.w = st.agg + 1
        mk = unit._pipe
        self.mac_out = [mk(f"{name}.mac_out[{j}]", 1 + rg.qkv_out) for j in range(dh)]
        self.post = [mk(f"{name}.post[{j}]", st.scale + 1 + rg.ln_in) for j in range(dh)]
        self.skew = [None] + [mk(f"{name}.skew[{j}]", j * (self.w - 1)) for j in range(1, dh)]
        self.pe = [mk(f"{name}.welford[{j}]", self.w) for j in range(dh)]
        self.turn = mk(f"{name}.turn", 1 + rg.ln_turn)
        self.back = [mk(f"{name}.back[{j}]", 1) for j in range(dh)]
        self.tri = TriangularDelay(f"{name}.tri", dh, unit.timing.ln_tri_base, skew=unit.tri_skew.get(which, {}))
        for j, line in enumerate(self.tri.lines):
            self.tri.lines[j] = mk(line.name, line.latency)
        self.nq = [mk(f"{name}.normq[{j}]", st.normq + 1 + rg.normq_out) for j in range(dh)]

    def step(self, c: int, emit):
        u, fp, dh = self.unit, self.unit.fp, self.unit.dh
        for j in range(dh):
            item = self.mac_out[j].pop(c)
            if item is not None:
                jid, tok, acc = item
                hf = u.fixed_for(jid)
                mult, bias = (hf.mult_q, hf.bias_q) if self.which == "q" else (hf.mult_k, hf.bias_k)
                self.post[j].push(c, (jid, tok, post_mac_affine(acc, mult[j], bias[j], fp)))
        elem0 = None
        for j in range(dh):
            item = self.post[j].pop(c)
            if item is not None:
                self.tri.lines[j].push(c, item)
                if j == 0:
                    elem0 = item
                else:
                    self.skew[j].push(c, item)
        for j in range(dh):
            elem = elem0 if j == 0 else self.skew[j].pop(c)
            left = None if j == 0 else self.pe[j - 1].pop(c)
            if j and (elem is None) != (left is None):
                raise AlignmentError(f"{self.name}: Welford PE {j} got element {elem} but state {left} at cycle {c}")
            if elem is None:
                continue
            jid, tok, x = elem
            if left is None:
                st = WelfordState()
            else:
                ljid, ltok, st = left
                if (ljid, ltok) != (jid, tok):
                    raise AlignmentError(f"{self.name}: Welford PE {j} mixes tokens at cycle {c}")
            self.pe[j].push(c, (jid, tok, welford_update_fixed(st, x, fp, u.recip)))
        final = self.pe[dh - 1].pop(c)
        if final is not None:
            if final[1] == 0:
                emit(c, final[0], f"ln_{self.which}", "agg_done")
            self.turn.push(c, final)
        arriving = self.turn.pop(c)
        for j in range(dh - 1, -1, -1):
            stats = arriving if j == dh - 1 else self.back[j].pop(c)
            elem = self.tri.lines[j].pop(c)
            if (stats is None) != (elem is None):
                raise AlignmentError(
                    f"{self.name}: column {j} at cycle {c}: element {'present' if elem else 'missing'}, "
                    f"aggregate {'present' if stats else 'missing'} (triangular delay misaligned)"
                )
            if stats is None:
                continue
            if (stats[0], stats[1]) != (elem[0], elem[1]):
                raise AlignmentError(f"{self.name}: column {j} pairs token {elem[:2]} with aggregate of {stats[:2]}")
            if j:
                self.back[j - 1].push(c, stats)
            jid, tok, x = elem
            hf = u.fixed_for(jid)
            nq = hf.normq_q if self.which == "q" else hf.normq_k
            st = stats[2]
            code = normq(fp.prescale * x, st.mean, st.m2, nq, channel=j, count=st.count)
            self.nq[j].push(c, (jid, tok, code))


class SaUnit:
    """Hardware for one attention head with a bank of per-head parameters."""

    def __init__(self, name: str, dims: ModelDims, cfg: ArrayConfig, params: SaParams, bank: list[int], timing: Timing, tri_skew=None):
        self.name, self.dims, self.cfg, self.params = name, dims, cfg, params
        self.fp = params.fp
        self.recip = params.recip
        self.bank = bank
        self.timing = timing
        self.tri_skew = tri_skew or {}
        self.n, self.d, self.dh = dims.n_tokens, dims.embed_dim, dims.head_dim
        self.lo, _ = code_range(dims.bits, True)
        self.ctr = _Counter()
        self.job_head: dict[int, int] = {}
        n, d, dh = self.n, self.d, self.dh
        st, rg = cfg.stages, cfg.registers
        acc_bits = self.fp.acc_bits

        self.w_bank = {p: np.stack([getattr(params.fixed[h], f"weights_{p}") for h in bank]) for p in "qkv"}
        self._bank_index = np.zeros(0, dtype=np.int64)
        ii, jj = np.meshgrid(np.arange(d), np.arange(dh), indexing="ij")
        self._ij = (ii, jj)
        self.qkv = {p: MacArray(f"{name}.{p}_array", d, dh, acc_bits, self._bank_weights(p)) for p in "qkv"}
        self.ln = {p: _LnPath(f"{name}.ln_{p}", self, p) for p in "qk"}
        mk = self._pipe
        self.v_mac_out = [mk(f"{name}.v.mac_out[{j}]", 1 + rg.qkv_out) for j in range(dh)]
        self.v_post = [mk(f"{name}.v.post[{j}]", st.scale + 1) for j in range(dh)]
        self.v_quant = [mk(f"{name}.v.quant[{j}]", 1) for j in range(dh)]
        depth = n * (2 + max(1, timing.hold_window // max(1, n)))
        self.q_fifo = [Fifo(f"{name}.q_fifo[{r}]", depth) for r in range(dh)]
        self.v_fifo = [Fifo(f"{name}.v_fifo[{c}]", depth) for c in range(dh)]
        self.k_reorder = [mk(f"{name}.k_reorder[{j}]", rg.k_reorder) for j in range(dh)]
        # QK^T array: row r carries channel dh-1-r, column j holds key n-1-j
        self.k_loader = WeightLoader(f"{name}.k_loader", dh, n, cfg.latch_settle)
        self.v_loader = WeightLoader(f"{name}.v_loader", dh, n, cfg.latch_settle, far_entry=True)
        self.a_array = MacArray(f"{name}.qk_array", dh, n, acc_bits, self._latched(self.k_loader, transpose=False))
        self.av_array = MacArray(f"{name}.av_array", n, dh, acc_bits, self._latched(self.v_loader, transpose=True))
        self.a_out = [mk(f"{name}.a_out[{j}]", 1 + rg.a_out) for j in range(n)]
        self.exp = [mk(f"{name}.exp[{j}]", st.exp_scale + cfg.exp_depth + rg.softmax_in) for j in range(n)]
        self.sum_pe = [mk(f"{name}.sum[{j}]", 1) for j in range(n)]
        self.sm_turn = mk(f"{name}.sm_turn", 1 + rg.softmax_turn)
        self.sm_back = [mk(f"{name}.sm_back[{j}]", 1) for j in range(n)]
        self.sm_tri = TriangularDelay(f"{name}.sm_tri", n, timing.sm_tri_base, skew=self.tri_skew.get("softmax", {}))
        for j, line in enumerate(self.sm_tri.lines):
            self.sm_tri.lines[j] = mk(line.name, line.latency)
        self.scaleq = [mk(f"{name}.scaleq[{j}]", st.scaleq + 1 + rg.scaleq_out) for j in range(n)]
        self.av_in = [mk(f"{name}.av_in[{r}]", rg.av_in) for r in range(n)]
        self.av_out = [mk(f"{name}.av_out[{c}]", 1 + rg.av_out) for c in range(dh)]
        self.av_quant = [mk(f"{name}.av_quant[{c}]", st.out_quant) for c in range(dh)]
        self.q_windows: list[tuple[int, int]] = []  # (jid, first release cycle)
        self.v_windows: list[tuple[int, int]] = []

    # -- wiring helpers ----------------------------------------------------
    def _pipe(self, name, latency):
        return _CPipe(name, latency, self.ctr)

    def fixed_for(self, jid: int):
        return self.params.fixed[self.job_head[jid]]

    def register_job(self, job: Job) -> None:
        if job.head not in self.bank:
            raise SimulationError(f"{self.name} has no parameters for head {job.head}")
        self.job_head[job.jid] = job.head
        if job.jid >= len(self._bank_index):
            grown = np.zeros(job.jid + 1, dtype=np.int64)
            grown[: len(self._bank_index)] = self._bank_index
            self._bank_index = grown
        self._bank_index[job.jid] = self.bank.index(job.head)

    def _bank_weights(self, p):
        def fn(cycle, tags, valid):
            idx = self._bank_index[np.where(valid, tags, 0)]
            return self.w_bank[p][idx, self._ij[0], self._ij[1]]

        return fn

    def _latched(self, loader: WeightLoader, transpose: bool):
        def fn(cycle, tags, valid):
            if not loader.usable(cycle):
                raise HazardError(f"{loader.name}: weight hazard, array used during latch enable at cycle {cycle}")
            if (tags[valid] != loader.latch_tag).any():
                raise HazardError(f"{loader.name}: weight-tag hazard at cycle {cycle}, latch holds job {loader.latch_tag}")
            return loader.latch.T if transpose else loader.latch

        return fn

    @property
    def pe_count(self) -> int:
        return sum(a.pe_count for a in (*self.qkv.values(), self.a_array, self.av_array))

    def idle(self) -> bool:
        arrays = (*self.qkv.values(), self.a_array, self.av_array)
        return (
            self.ctr.n == 0
            and all(a.in_flight == 0 for a in arrays)
            and not self.q_windows
            and not self.v_windows
            and not any(len(f) for f in self.q_fifo + self.v_fifo)
        )

    # -- one clock -----------------------------------------------------------
    def step(self, c: int, x_in, emit, collect) -> None:
        n, dh, fp, tm = self.n, self.dh, self.fp, self.timing
        # latch enables read chain state committed in earlier cycles
        if self.k_loader.full:
            jid = self.k_loader.enable(c)
            emit(c, jid, "k_loader", "weight_latch")
            self.q_windows.append((jid, c + tm.k_to_a))
            self.v_windows.append((jid, c + tm.k_to_v_release))
        if self.v_loader.full:
            jid = self.v_loader.enable(c)
            emit(c, jid, "v_loader", "weight_latch")

        # projection arrays
        for p in "qkv":
            outs = self.qkv[p].step(c, x_in)
            sink = self.v_mac_out if p == "v" else self.ln[p].mac_out
            for j, val, jid, tok in outs:
                sink[j].push(c, (jid, tok, val))
        for p in "qk":
            self.ln[p].step(c, emit)

        # V: scale + bias, quantize, park in the FIFO
        for j in range(dh):
            item = self.v_mac_out[j].pop(c)
            if item is not None:
                jid, tok, acc = item
                hf = self.fixed_for(jid)
                self.v_post[j].push(c, (jid, tok, post_mac_affine(acc, hf.mult_v[j], hf.bias_v[j], fp)))
            item = self.v_post[j].pop(c)
            if item is not None:
                jid, tok, x = item
                self.v_quant[j].push(c, (jid, tok, threshold_quantize(x, self.fixed_for(jid).thresh_v, self.lo)))
            item = self.v_quant[j].pop(c)
            if item is not None:
                self.v_fifo[j].push(((item[0], item[1]), item[2]))

        # Q codes wait for the K latch; K codes go through the reorder link
        qln, kln = self.ln["q"], self.ln["k"]
        for j in range(dh):
            item = qln.nq[j].pop(c)
            if item is not None:
                self.q_fifo[dh - 1 - j].push(((item[0], item[1]), item[2]))
            item = kln.nq[j].pop(c)
            if item is not None:
                self.k_reorder[j].push(c, item)
            item = self.k_reorder[j].pop(c)
            if item is not None:
                self.k_loader.push(dh - 1 - j, item[2], item[0])

        # V chain pushes, one token per cycle, released by the static schedule
        for jid, t0 in list(self.v_windows):
            s = c - t0
            if 0 <= s < n:
                for col in range(dh):
                    self.v_loader.push(col, self.v_fifo[col].pop((jid, s), c), jid)
            if s >= n - 1:
                self.v_windows.remove((jid, t0))

        # QK^T array input: row r gets token t = c - T_A - r
        a_in = None
        for jid, t_a in list(self.q_windows):
            k = c - t_a
            if k < 0:
                continue
            if a_in is None:
                a_in = (np.zeros(dh, np.int64), np.zeros(dh, bool), np.zeros(dh, np.int64), np.zeros(dh, np.int64))
            for r in range(max(0, k - n + 1), min(dh, k + 1)):
                t = k - r
                if a_in[1][r]:
                    raise HazardError(f"{self.name}: two jobs on QK^T row {r} at cycle {c}")
                a_in[0][r] = self.q_fifo[r].pop((jid, t), c)
                a_in[1][r], a_in[2][r], a_in[3][r] = True, jid, t
            if k >= n + dh - 2:
                self.q_windows.remove((jid, t_a))
        for j, val, jid, tok in self.a_array.step(c, a_in):
            self.a_out[j].push(c, (jid, tok, val))

        # softmax: scale + exp, sum aggregation, backward path, ScaleQ
        for j in range(n):
            item = self.a_out[j].pop(c)
            if item is not None:
                jid, tok, acc = item
                e = exp_approx(shift_round(acc * self.fixed_for(jid).mult_att, fp.mult_frac_bits), fp)
                self.exp[j].push(c, (jid, tok, e))
        for j in range(n):
            elem = self.exp[j].pop(c)
            left = None if j == 0 else self.sum_pe[j - 1].pop(c)
            if j and (elem is None) != (left is None):
                raise AlignmentError(f"{self.name}: sum PE {j} misaligned at cycle {c}")
            if elem is None:
                continue
            total = elem[2] if left is None else left[2] + elem[2]
            if left is not None and left[:2] != elem[:2]:
                raise AlignmentError(f"{self.name}: sum PE {j} mixes tokens at cycle {c}")
            self.sm_tri.lines[j].push(c, elem)
            self.sum_pe[j].push(c, (elem[0], elem[1], total))
        final = self.sum_pe[n - 1].pop(c)
        if final is not None:
            if final[1] == 0:
                emit(c, final[0], "softmax", "agg_done")
            self.sm_turn.push(c, final)
        arriving = self.sm_turn.pop(c)
        for j in range(n - 1, -1, -1):
            total = arriving if j == n - 1 else self.sm_back[j].pop(c)
            elem = self.sm_tri.lines[j].pop(c)
            if (total is None) != (elem is None):
                raise AlignmentError(
                    f"{self.name}.softmax: column {j} at cycle {c}: element {'present' if elem else 'missing'}, "
                    f"row sum {'present' if total else 'missing'} (triangular delay misaligned)"
                )
            if total is None:
                continue
            if total[:2] != elem[:2]:
                raise AlignmentError(f"{self.name}.softmax: column {j} pairs {elem[:2]} with sum of {total[:2]}")
            if j:
                self.sm_back[j - 1].push(c, total)
            jid, tok, e = elem
            code = scale_quantize(e, total[2], self.fixed_for(jid).softmax_table, fp.thresh_frac_bits)
            self.scaleq[j].push(c, (jid, tok, code))
        for j in range(n):
            item = self.scaleq[j].pop(c)
            if item is not None:
                self.av_in[n - 1 - j].push(c, item)

        # AV array: row r holds V of key r, A code for key r enters row r
        av_in = None
        for r in range(n):
            item = self.av_in[r].pop(c)
            if item is not None:
                if av_in is None:
                    av_in = (np.zeros(n, np.int64), np.zeros(n, bool), np.zeros(n, np.int64), np.zeros(n, np.int64))
                av_in[0][r], av_in[1][r], av_in[2][r], av_in[3][r] = item[2], True, item[0], item[1]
        for col, val, jid, tok in self.av_array.step(c, av_in):
            self.av_out[col].push(c, (jid, tok, val))
        for col in range(dh):
            item = self.av_out[col].pop(c)
            if item is not None:
                jid, tok, acc = item
                self.av_quant[col].push(c, (jid, tok, threshold_quantize(acc, self.fixed_for(jid).thresh_sa, self.lo)))
            item = self.av_quant[col].pop(c)
            if item is not None:
                collect(c - 1, item[0], item[1], col, item[2])

    # -- structure ---------------------------------------------------------------
    def netlist(self):
        """Inter-PE edges as ``(src, dst, kind)`` with grid coordinates.

        Kinds: ``neighbor`` (must be Manhattan-adjacent), ``fifo`` (declared
        queue or register link endpoints) and ``enable`` (the latch broadcast).
        """
        edges = []
        for arr in (*self.qkv.values(), self.a_array, self.av_array):
            for i in range(arr.rows):
                for j in range(arr.cols):
                    if j + 1 < arr.cols:
                        edges.append(((arr.name, i, j), (arr.name, i, j + 1), "neighbor"))
                    if i + 1 < arr.rows:
                        edges.append(((arr.name, i, j), (arr.name, i + 1, j), "neighbor"))
        for wl in (self.k_loader, self.v_loader):
            for lane in range(wl.lanes):
                for k in range(wl.length - 1):
                    edges.append(((wl.name, lane, k), (wl.name, lane, k + 1), "neighbor"))
                for k in range(wl.length):
                    edges.append(((wl.name + ".ctl", 0, 0), (wl.name, lane, k), "enable"))
        for p in "qk":
            ln = self.ln[p]
            for j in range(self.dh - 1):
                edges.append(((ln.name + ".welford", 0, j), (ln.name + ".welford", 0, j + 1), "neighbor"))
                edges.append(((ln.name + ".back", 0, j + 1), (ln.name + ".back", 0, j), "neighbor"))
        for j in range(self.n - 1):
            edges.append(((self.name + ".sum", 0, j), (self.name + ".sum", 0, j + 1), "neighbor"))
            edges.append(((self.name + ".sm_back", 0, j + 1), (self.name + ".sm_back", 0, j), "neighbor"))
        for r in range(self.dh):
            edges.append(((self.name + ".q_fifo", r, 0), (self.a_array.name, r, 0), "fifo"))
        return edges


def check_locality(edges) -> None:
    """Raise if any data edge is neither adjacent nor a declared FIFO."""
    for src, dst, kind in edges:
        if kind == "enable":
            continue
        if kind == "fifo":
            continue
        if kind != "neighbor":
            raise SimulationError(f"undeclared edge kind {kind!r} from {src} to {dst}")
        if src[0] != dst[0] or abs(src[1] - dst[1]) + abs(src[2] - dst[2]) != 1:
            raise SimulationError(f"non-local edge {src} -> {dst}")


@dataclass
class Accelerator:
    dims: ModelDims
    cfg: ArrayConfig
    params: SaParams
    units: list[SaUnit]
    timing: Timing
    unrolled: bool = False
    pitch_override: int | None = None
    cycle: int = 0
    jobs: list[Job] = field(default_factory=list)
    trace: CycleTrace = field(default_factory=CycleTrace)
    inputs: list[np.ndarray] = field(default_factory=list)
    arrivals: list[int] = field(default_factory=list)
    results: dict = field(default_factory=dict)
    produced: dict = field(default_factory=dict)

    @property
    def pe_count(self) -> int:
        return sum(u.pe_count for u in self.units)

    @property
    def pitch(self) -> int:
        """Job-to-job interval on one unit from the structural windows."""
        if self.pitch_override is not None:
            return self.pitch_override
        t = self.timing
        share = t.comm if self.unrolled else _ceil_div(t.comm, self.dims.heads)
        return max(t.port_window, t.hold_window, share)

    def _label(self, jid: int) -> str:
        return self.jobs[jid].label

    def emit(self, cycle: int, jid: int, unit: str, kind: str) -> None:
        self.trace.add(cycle, f"{self._label(jid)}.{unit}", kind)

    def collect(self, cycle: int, jid: int, tok: int, col: int, code: int) -> None:
        codes, seen = self.results[jid]
        if seen[tok, col]:
            raise SimulationError(f"duplicate output for job {jid} token {tok} column {col}")
        codes[tok, col] = code
        seen[tok, col] = True
        self.produced[jid].append((cycle, tok, col))
        count = len(self.produced[jid])
        if count == 1:
            self.emit(cycle, jid, "out", "output_first")
        if tok == 0 and seen[0].all():
            self.emit(cycle, jid, "out", "first_row_done")
        if count == seen.size:
            self.emit(cycle, jid, "out", "output_last")

    def schedule(self, n_seq: int) -> None:
        comm, p, h = self.timing.comm, self.pitch, self.dims.heads
        self.jobs = []
        for s in range(n_seq):
            for g in range(h):
                if self.unrolled:
                    unit, start = g, comm + s * p
                else:
                    unit, start = 0, comm + (s * h + g) * p
                label = f"h{g}" if n_seq == 1 else f"s{s}.h{g}"
                job = Job(len(self.jobs), s, g, unit, start, label)
                self.jobs.append(job)
                self.units[unit].register_job(job)
        self.arrivals = [(s + 1) * comm for s in range(n_seq)]

    def port_input(self, unit_idx: int, c: int):
        """Skewed z codes for the projection arrays of one unit this cycle."""
        n, d = self.dims.n_tokens, self.dims.embed_dim
        vals = None
        for job in self._active[unit_idx]:
            k = c - job.start
            if k < 0 or k > n + d - 2:
                continue
            if vals is None:
                vals = (np.zeros(d, np.int64), np.zeros(d, bool), np.zeros(d, np.int64), np.zeros(d, np.int64))
            z = self.inputs[job.seq]
            i_lo, i_hi = max(0, k - n + 1), min(d - 1, k)
            rows = np.arange(i_lo, i_hi + 1)
            if vals[1][rows].any():
                raise HazardError(f"port overlap on unit {unit_idx} at cycle {c}")
            toks = k - rows
            vals[0][rows] = z[toks, rows]
            vals[1][rows] = True
            vals[2][rows] = job.jid
            vals[3][rows] = toks
        return vals

    def _check_schedule(self) -> None:
        by_unit: dict[int, list[Job]] = {}
        for job in self.jobs:
            by_unit.setdefault(job.unit, []).append(job)
            if job.start < self.arrivals[job.seq]:
                raise HazardError(
                    f"input not ready: {job.label} starts at {job.start}, sequence arrives at {self.arrivals[job.seq]}"
                )
        for jobs in by_unit.values():
            jobs.sort(key=lambda j: j.start)
            for a, b in zip(jobs, jobs[1:]):
                if b.start - a.start < self.timing.port_window:
                    raise HazardError(
                        f"port overlap: {b.label} starts {b.start - a.start} cycles after {a.label}, "
                        f"port window plus head switch is {self.timing.port_window}"
                    )

    def step(self) -> "Accelerator":
        c = self.cycle
        for idx, unit in enumerate(self.units):
            unit.step(c, self.port_input(idx, c), self.emit, self.collect)
        self.cycle += 1
        return self

    def done(self) -> bool:
        return all(len(self.produced[j.jid]) == self.dims.n_tokens * self.dims.head_dim for j in self.jobs)


def build_sa_pipeline(
    dims: ModelDims,
    cfg: ArrayConfig,
    params: SaParams,
    unrolled: bool = False,
    pitch_override: int | None = None,
    tri_skew: dict | None = None,
) -> Accelerator:
    """Instantiate the accelerator; one SA unit, or one per head when ``unrolled``.

    ``tri_skew`` maps ``"q"``, ``"k"`` or ``"softmax"`` to ``{column: extra}``
    and perturbs triangular-delay depths (mutation hook for verification).
    """
    if params.dims != dims:
        raise ShapeError("parameters were generated for different dimensions")
    params.validate()
    n, d, dh = dims.n_tokens, dims.embed_dim, dims.head_dim
    for name, (r, c) in {"projection": (d, dh), "qk": (dh, n), "av": (n, dh)}.items():
        if r > cfg.rows or c > cfg.cols:
            raise ResourceError(
                f"resource model violation: {name} array needs {r}x{c} PEs, template is {cfg.rows}x{cfg.cols}; "
                f"total MAC PEs required {pe_total(dims)}"
            )
    timing = derive_timing(dims, cfg)
    if unrolled:
        units = [SaUnit(f"u{g}", dims, cfg, params, [g], timing, tri_skew) for g in range(dims.heads)]
    else:
        units = [SaUnit("u0", dims, cfg, params, list(range(dims.heads)), timing, tri_skew)]
    acc = Accelerator(dims, cfg, params, units, timing, unrolled, pitch_override)
    if not unrolled and acc.pe_count != pe_total(dims):
        raise ResourceError(f"resource model violation: built {acc.pe_count} PEs, expected {pe_total(dims)}")
    return acc


def step(acc: Accelerator) -> Accelerator:
    """Advance the accelerator by one clock cycle."""
    return acc.step()


@dataclass
class SimResult:
    outputs: list[QuantTensor]  # per head, first sequence
    trace: CycleTrace
    all_outputs: dict  # (seq, head) -> QuantTensor


def _run(acc: Accelerator, inputs: list[QuantTensor], max_cycles: int | None = None) -> SimResult:
    dims = acc.dims
    n, d, dh = dims.n_tokens, dims.embed_dim, dims.head_dim
    for z in inputs:
        if z.shape != (n, d):
            raise ShapeError(f"input shape {z.shape} != {(n, d)}")
        if z.bits != dims.bits or not z.signed:
            raise ShapeError("input codes must be signed with the configured bit width")
    acc.inputs = [np.asarray(z.codes, dtype=np.int64) for z in inputs]
    acc.trace = CycleTrace()
    acc.schedule(len(inputs))
    acc._check_schedule()
    acc.results = {j.jid: (np.zeros((n, dh), np.int64), np.zeros((n, dh), bool)) for j in acc.jobs}
    acc.produced = {j.jid: [] for j in acc.jobs}
    tm = acc.timing

    for s in range(len(inputs)):
        acc.trace.add(s * tm.comm, f"link_in.s{s}" if len(inputs) > 1 else "link_in", "input_first")
        acc.trace.add(max(s * tm.comm, (s + 1) * tm.comm - 1), f"link_in.s{s}" if len(inputs) > 1 else "link_in", "input_last")
    jobs_by_unit: dict[int, list[Job]] = {}
    for job in acc.jobs:
        jobs_by_unit.setdefault(job.unit, []).append(job)
        acc.emit(job.start, job.jid, "port", "input_first")
        acc.emit(job.start + n + d - 2, job.jid, "port", "input_last")
    for jobs in jobs_by_unit.values():
        for a, b in zip(jobs, jobs[1:]):
            acc.emit(a.start + n + d - 1, a.jid, "port", "head_switch")

    acc._active = {i: [] for i in range(len(acc.units))}
    pending = sorted(acc.jobs, key=lambda j: j.start)
    limit = max_cycles or (max(j.start for j in acc.jobs) + 50 * (n + d + dh) + 1000)
    acc.cycle = 0
    while not acc.done():
        c = acc.cycle
        if c > limit:
            raise SimulationError(f"simulation did not finish within {limit} cycles")
        while pending and pending[0].start <= c:
            acc._active[pending[0].unit].append(pending.pop(0))
        for lst in acc._active.values():
            lst[:] = [j for j in lst if c - j.start <= n + d - 2]
        if pending and not any(acc._active.values()) and all(u.idle() for u in acc.units):
            acc.cycle = pending[0].start  # nothing in flight: skip ahead
            continue
        acc.step()

    outputs = {}
    for job in acc.jobs:
        codes, _ = acc.results[job.jid]
        outputs[(job.seq, job.head)] = QuantTensor(codes.copy(), dims.bits, True, step_global=acc.params.heads[job.head].step_sa)
    _summarize(acc, len(inputs))
    acc.trace.finalize()
    return SimResult([outputs[(0, g)] for g in range(dims.heads)], acc.trace, outputs)


def _output_link(acc: Accelerator, seq: int, start: int) -> int:
    """Cycle after the last output bit leaves, for a cut-through output link.

    Codes go out head by head, row by row; the link idles while the next code
    has not been produced yet.
    """
    bus = acc.cfg.bus_bits_per_cycle
    bits = acc.dims.bits
    stream = []
    for job in acc.jobs:
        if job.seq != seq:
            continue
        prod = {(t, col): cyc for cyc, t, col in acc.produced[job.jid]}
        stream.extend(prod[(t, col)] for t in range(acc.dims.n_tokens) for col in range(acc.dims.head_dim))
    if bus is None:
        return max(start, max(stream) + 1)
    c, budget, k = start, 0, 0
    while k < len(stream):
        budget += bus
        while k < len(stream) and stream[k] < c and budget >= bits:
            budget -= bits
            k += 1
        if k < len(stream) and stream[k] >= c:
            budget = min(budget, bus)
        c += 1
    return c


def _summarize(acc: Accelerator, n_seq: int) -> None:
    tr, tm, dims = acc.trace, acc.timing, acc.dims
    first = {j.jid: tr.first(f"{j.label}.port", "input_first") for j in acc.jobs}
    row = {j.jid: tr.first(f"{j.label}.out", "first_row_done") for j in acc.jobs}
    j0 = acc.jobs[0]
    sa_latency = row[j0.jid] - first[j0.jid] + 1
    unit0 = [j for j in acc.jobs if j.unit == 0]
    pitches = {first[b.jid] - first[a.jid] for a, b in zip(unit0, unit0[1:])}
    seq0 = [j for j in acc.jobs if j.seq == 0]
    last = max(seq0, key=lambda j: row[j.jid])
    link_start = row[last.jid] + 1
    # output transfer opens when the final head's first row is complete and
    # occupies the link for the ideal transfer time
    msa_latency = link_start + tm.comm
    tr.add(link_start, "link_out", "output_first")
    tr.add(max(link_start, msa_latency - 1), "link_out", "output_last")
    drain = _output_link(acc, 0, link_start)
    bits_seq = dims.bits * dims.n_tokens * dims.embed_dim
    seq_starts = sorted({min(first[j.jid] for j in acc.jobs if j.seq == s) for s in range(n_seq)})
    seq_interval = (seq_starts[1] - seq_starts[0]) if len(seq_starts) > 1 else None
    cfg = acc.cfg
    acc.trace.summary = {
        "tokens": dims.n_tokens,
        "embed_dim": dims.embed_dim,
        "heads": dims.heads,
        "variant": cfg.variant,
        "mul_cycles": cfg.mul_cycles,
        "bus_bits": cfg.bus_bits_per_cycle if cfg.bus_bits_per_cycle is not None else "inf",
        "sa_latency_cycles": sa_latency,
        "pitch_cycles": pitches.pop() if len(pitches) == 1 else (sorted(pitches) if pitches else acc.pitch),
        "msa_latency_cycles": msa_latency,
        "msa_latency_us": round(msa_latency * cfg.clock_ns / 1000, 4),
        "output_drain_cycle": drain,
        "comm_cycles_ideal": tm.comm,
        "comm_cycles_packed": tm.comm_packed,
        "sequence_interval_cycles": seq_interval if seq_interval is not None else "",
        "input_bits_per_cycle": round(bits_seq / seq_interval, 6) if seq_interval else "",
        "pe_count": acc.pe_count,
        "final_cycle": acc.cycle,
    }
    acc.trace.final_cycle = acc.cycle


def run_msa(acc: Accelerator, z3b: QuantTensor) -> tuple[list[QuantTensor], CycleTrace]:
    """All heads of one input sequence; returns per-head SA codes and the trace."""
    res = _run(acc, [z3b])
    return res.outputs, res.trace


def run_stream(acc: Accelerator, inputs: list[QuantTensor]) -> SimResult:
    """Several input sequences back to back over the same link."""
    return _run(acc, list(inputs))


def run_dsp_free(acc: Accelerator, z3b: QuantTensor) -> tuple[list[QuantTensor], CycleTrace]:
    if acc.cfg.variant != "dsp_free":
        raise ConfigError("run_dsp_free needs an accelerator built with variant='dsp_free'")
    return run_msa(acc, z3b)
