"""Clocked building blocks.

Every unit reads state committed in an earlier cycle and writes state that
becomes visible in a later one, so the order in which units are stepped within
a cycle never matters (two-phase update).
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field

import numpy as np


class SimulationError(RuntimeError):
    pass


class HazardError(SimulationError):
    """A scheduling or structural hazard detected while stepping."""


class AlignmentError(SimulationError):
    pass


class PrematureLatch(SimulationError):
    pass


class AccumulatorOverflow(SimulationError, OverflowError):
    pass


class Pipe:
    """Fixed-latency register pipeline between two units.

    An item pushed in cycle ``c`` is visible to the consumer in cycle
    ``c + latency``. The consumer polls every cycle; an item that is not taken
    in its cycle means the consumer was not ready, which a fixed-latency
    pipeline cannot absorb.
    """

    __slots__ = ("name", "latency", "_q")

    def __init__(self, name: str, latency: int):
        if latency < 1:
            raise ValueError(f"pipe {name}: latency must be >= 1")
        self.name = name
        self.latency = latency
        self._q: deque = deque()

    def push(self, cycle: int, item) -> None:
        ready = cycle + self.latency
        if self._q and self._q[-1][0] >= ready:
            raise HazardError(f"{self.name}: two items in one slot at cycle {ready}")
        self._q.append((ready, item))

    def pop(self, cycle: int):
        q = self._q
        if not q:
            return None
        ready = q[0][0]
        if ready == cycle:
            return q.popleft()[1]
        if ready < cycle:
            raise HazardError(f"{self.name}: item ready at {ready} not consumed (now {cycle})")
        return None

    def __len__(self) -> int:
        return len(self._q)


class Fifo:
    """Elastic queue released by the static schedule; bounded depth."""

    def __init__(self, name: str, depth: int):
        self.name = name
        self.depth = depth
        self._q: deque = deque()
        self.max_occupancy = 0

    def push(self, item) -> None:
        if len(self._q) >= self.depth:
            raise HazardError(f"{self.name}: FIFO overflow (depth {self.depth})")
        self._q.append(item)
        self.max_occupancy = max(self.max_occupancy, len(self._q))

    def pop(self, expect_tag, cycle: int):
        if not self._q:
            raise HazardError(f"{self.name}: data not ready at cycle {cycle}, expected {expect_tag}")
        tag, value = self._q[0]
        if tag != expect_tag:
            raise HazardError(f"{self.name}: expected {expect_tag} at cycle {cycle}, head holds {tag}")
        self._q.popleft()
        return value

    def __len__(self) -> int:
        return len(self._q)


def triangular_delay(values, column: int):
    """Delay a timed sequence ``[(cycle, value), ...]`` by ``column`` cycles."""
    if column < 0:
        raise ValueError("column must be >= 0")
    return [(c + column, v) for c, v in values]


@dataclass
class TriangularDelay:
    """Per-column delay lines whose depths follow an arithmetic sequence.

    Column ``j`` is ``k = cols - 1 - j`` hops from the turn-around end of the
    backward aggregation path and is delayed ``base + step * k`` cycles.
    """

    name: str
    cols: int
    base: int
    step: int = 2
    skew: dict = field(default_factory=dict)  # column -> extra cycles (test hook)

    def __post_init__(self):
        self.lines = [Pipe(f"{self.name}[{j}]", self.depth(j)) for j in range(self.cols)]

    def depth(self, j: int) -> int:
        return self.base + self.step * (self.cols - 1 - j) + self.skew.get(j, 0)


@dataclass
class PeState:
    """View of one MAC PE: latched weight, x register and partial sum."""

    held_weight: int
    x_reg: int
    partial_sum: int


class MacArray:
    """Weight-stationary MAC array at PE granularity.

    In each cycle PE (i, j) takes x from its left neighbour (or the row input
    at j = 0) and the partial sum from the PE above, computes
    ``sum = x * w + sum_above`` and registers both. Every x carries a tag and a
    token index so weights can be selected per tag and the skew can be checked.
    """

    def __init__(self, name: str, rows: int, cols: int, acc_bits: int, weight_fn):
        self.name = name
        self.rows, self.cols = rows, cols
        self.limit = 1 << (acc_bits - 1)
        self.weight_fn = weight_fn
        self.x = np.zeros((rows, cols), dtype=np.int64)
        self.xv = np.zeros((rows, cols), dtype=bool)
        self.xtag = np.zeros((rows, cols), dtype=np.int64)
        self.xtok = np.zeros((rows, cols), dtype=np.int64)
        self.ps = np.zeros((rows, cols), dtype=np.int64)
        self.pv = np.zeros((rows, cols), dtype=bool)
        self.in_flight = 0
        self.macs = 0

    @property
    def pe_count(self) -> int:
        return self.rows * self.cols

    def pe(self, i: int, j: int, weights: np.ndarray) -> PeState:
        return PeState(int(weights[i, j]), int(self.x[i, j]), int(self.ps[i, j]))

    def step(self, cycle: int, inp=None):
        """Advance one cycle; ``inp`` is (values, valid, tags, tokens) per row.

        Returns bottom-row outputs computed this cycle as a list of
        ``(col, value, tag, token)``.
        """
        if inp is None and self.in_flight == 0:
            return []
        rows = self.rows
        x_in = np.empty_like(self.x)
        v_in = np.empty_like(self.xv)
        t_in = np.empty_like(self.xtag)
        k_in = np.empty_like(self.xtok)
        x_in[:, 1:], v_in[:, 1:] = self.x[:, :-1], self.xv[:, :-1]
        t_in[:, 1:], k_in[:, 1:] = self.xtag[:, :-1], self.xtok[:, :-1]
        if inp is None:
            x_in[:, 0], v_in[:, 0], t_in[:, 0], k_in[:, 0] = 0, False, 0, 0
        else:
            x_in[:, 0], v_in[:, 0], t_in[:, 0], k_in[:, 0] = inp
        # psum from above belongs to the same token as the x arriving here
        if rows > 1 and not np.array_equal(self.pv[:-1], v_in[1:]):
            raise HazardError(f"{self.name}: x/psum skew broken at cycle {cycle}")
        new_ps = np.zeros_like(self.ps)
        active = v_in.any()
        if active:
            w = self.weight_fn(cycle, t_in, v_in)
            new_ps = np.where(v_in, x_in * w, 0)
            new_ps[1:] += np.where(self.pv[:-1], self.ps[:-1], 0)
            if np.abs(new_ps).max(initial=0) >= self.limit:
                raise AccumulatorOverflow(f"{self.name}: accumulator overflow at cycle {cycle}")
            self.macs += int(v_in.sum())
        out = []
        bottom = v_in[rows - 1]
        if bottom.any():
            for j in np.flatnonzero(bottom):
                out.append((int(j), int(new_ps[rows - 1, j]), int(t_in[rows - 1, j]), int(k_in[rows - 1, j])))
        self.x, self.xv, self.xtag, self.xtok = x_in, v_in, t_in, k_in
        self.ps, self.pv = new_ps, v_in.copy()
        self.in_flight = int(v_in.sum())
        return out


class WeightLoader:
    """Shift chains feeding a bank of latches under one broadcast enable.

    Each lane is a shift register of ``length`` entries that shifts only when a
    value is pushed. ``enable`` copies every chain into the latches at once;
    the latches are transparent during the enable cycle and settle over
    ``settle`` cycles, so the array may not use them in that window.
    ``far_entry`` wires chain position k to PE index ``length - 1 - k`` (the
    chain enters from the far edge of the array).
    """

    def __init__(self, name: str, lanes: int, length: int, settle: int = 2, far_entry: bool = False):
        self.name = name
        self.lanes, self.length = lanes, length
        self.settle = settle
        self.far_entry = far_entry
        self.chain = np.zeros((lanes, length), dtype=np.int64)
        self.count = np.zeros(lanes, dtype=np.int64)
        self.chain_tag = np.full(lanes, -1, dtype=np.int64)
        self.latch = np.zeros((lanes, length), dtype=np.int64)
        self.latch_tag = -1
        self.blocked_until = -1  # last cycle of the enable/settle window
        self.blocked_from = -1
        self.enables: list[tuple[int, int]] = []

    def push(self, lane: int, value: int, tag: int) -> None:
        if self.count[lane] and self.chain_tag[lane] != tag:
            raise HazardError(f"{self.name}: lane {lane} mixes tags {self.chain_tag[lane]} and {tag}")
        if self.count[lane] >= self.length:
            raise HazardError(f"{self.name}: lane {lane} overrun before enable")
        self.chain[lane, 1:] = self.chain[lane, :-1].copy()
        self.chain[lane, 0] = value
        self.count[lane] += 1
        self.chain_tag[lane] = tag

    @property
    def full(self) -> bool:
        return bool((self.count == self.length).all()) and len(set(self.chain_tag.tolist())) == 1

    def enable(self, cycle: int) -> int:
        if not (self.count == self.length).all():
            raise PrematureLatch(f"{self.name}: premature latch at cycle {cycle} (chain holds {int(self.count.min())} of {self.length})")
        snap = self.chain[:, ::-1] if self.far_entry else self.chain
        self.latch = snap.copy()
        self.latch_tag = int(self.chain_tag[0])
        self.count[:] = 0
        self.blocked_from, self.blocked_until = cycle, cycle + self.settle - 1
        self.enables.append((cycle, self.latch_tag))
        return self.latch_tag

    def usable(self, cycle: int) -> bool:
        return not (self.blocked_from <= cycle <= self.blocked_until)


def load_weights(wl: WeightLoader, stream, enable_at: int) -> WeightLoader:
    """Shift ``stream`` into lane 0 one value per cycle from cycle 0, enable at ``enable_at``.

    Returns the loader after the enable; raises ``PrematureLatch`` if the
    enable comes before the chain is full.
    """
    stream = list(stream)
    if len(stream) != wl.length:
        raise ValueError(f"stream length {len(stream)} != chain length {wl.length}")
    tag = wl.latch_tag + 1
    for cycle, v in enumerate(stream):
        if cycle >= enable_at:
            break
        for lane in range(wl.lanes):
            wl.push(lane, v, tag)
    wl.enable(enable_at)
    return wl
