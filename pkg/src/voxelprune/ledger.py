"""Exact multiply-add accounting, with auxiliary ops tracked separately.

Sorts and gathers never enter the FLOPs total; they are kept in their own
column because they cost latency but no multiply-adds.
"""
from __future__ import annotations

from dataclasses import dataclass, field


@dataclass
class ConvEvent:
    layer: str
    n_pairs: int
    c_in: int
    c_out: int

    @property
    def flops(self) -> int:
        return 2 * self.c_in * self.c_out * self.n_pairs


@dataclass
class AuxEvent:
    layer: str
    kind: str  # "sort" | "gather"
    count: int


@dataclass
class FlopsLedger:
    conv_events: list = field(default_factory=list)
    aux_events: list = field(default_factory=list)

    def charge_conv(self, layer: str, n_pairs: int, c_in: int, c_out: int) -> None:
        self.conv_events.append(ConvEvent(layer, n_pairs, c_in, c_out))

    def charge_aux(self, layer: str, kind: str, count: int) -> None:
        self.aux_events.append(AuxEvent(layer, kind, count))

    def flops_by_layer(self) -> dict[str, int]:
        out: dict[str, int] = {}
        for ev in self.conv_events:
            out[ev.layer] = out.get(ev.layer, 0) + ev.flops
        return out

    def aux_by_layer(self) -> dict[str, int]:
        out: dict[str, int] = {}
        for ev in self.aux_events:
            out[ev.layer] = out.get(ev.layer, 0) + ev.count
        return out

    @property
    def total_flops(self) -> int:
        return sum(ev.flops for ev in self.conv_events)

    @property
    def total_aux(self) -> int:
        return sum(ev.count for ev in self.aux_events)
