"""Cycle trace: timing events plus a summary record."""

from __future__ import annotations

from dataclasses import dataclass, field

KINDS = (
    "input_first",
    "input_last",
    "weight_latch",
    "agg_done",
    "output_first",
    "first_row_done",
    "output_last",
    "head_switch",
)


@dataclass(frozen=True, order=True)
class TraceEvent:
    cycle: int
    unit: str
    kind: str

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown event kind {self.kind!r}")


@dataclass
class CycleTrace:
    events: list[TraceEvent] = field(default_factory=list)
    final_cycle: int = 0
    summary: dict = field(default_factory=dict)

    def add(self, cycle: int, unit: str, kind: str) -> None:
        self.events.append(TraceEvent(cycle, unit, kind))

    def finalize(self) -> None:
        self.events.sort()

    def find(self, unit: str, kind: str) -> list[int]:
        return [e.cycle for e in self.events if e.unit == unit and e.kind == kind]

    def first(self, unit: str, kind: str) -> int:
        hits = self.find(unit, kind)
        if not hits:
            raise KeyError(f"no {kind} event for {unit}")
        return hits[0]

    def per_unit_monotone(self) -> bool:
        last: dict[str, int] = {}
        for e in self.events:
            if e.cycle < last.get(e.unit, e.cycle):
                return False
            last[e.unit] = e.cycle
        return True

    def to_tsv(self) -> str:
        return "".join(f"{e.cycle}\t{e.unit}\t{e.kind}\n" for e in self.events)

    def summary_text(self) -> str:
        return "".join(f"{k}={v}\n" for k, v in self.summary.items())

    @classmethod
    def from_tsv(cls, text: str) -> "CycleTrace":
        tr = cls()
        for n, line in enumerate(text.splitlines(), 1):
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise ValueError(f"trace line {n}: expected 3 tab-separated fields")
            tr.add(int(parts[0]), parts[1], parts[2])
        tr.finalize()
        return tr
