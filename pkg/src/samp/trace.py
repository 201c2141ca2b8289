"""Execution tracing: GEMM call counters and quantization dataflow events.

A trace is activated with the ``trace_ops`` context manager and collected
through a ContextVar, so concurrent inference calls in different threads or
tasks never observe each other's events.  When no trace is active, emitting
is a no-op; kernels stay pure.
"""

from __future__ import annotations

import contextlib
from contextvars import ContextVar
from dataclasses import dataclass, field


@dataclass(frozen=True)
class GemmEvent:
    kind: str  # "f32" or "i8"
    m: int
    k: int
    n: int
    batch: int = 1  # number of independent (m,k,n) products in a batched call
    tag: str = ""

    @property
    def bytes_moved(self) -> int:
        elem_in = 4 if self.kind == "f32" else 1
        per = elem_in * (self.m * self.k + self.k * self.n) + 4 * self.m * self.n
        return self.batch * per


@dataclass(frozen=True)
class QuantEvent:
    op: str  # "quantize" | "dequantize" | "requantize"
    site: str


@dataclass(frozen=True)
class BoundaryEvent:
    """Dtype of the activation handed across a layer boundary."""

    layer: int
    edge: str  # "enter" | "exit"
    dtype: str  # "f32" | "i8"


@dataclass
class OpTrace:
    gemms: list[GemmEvent] = field(default_factory=list)
    quant_events: list[QuantEvent] = field(default_factory=list)
    boundaries: list[BoundaryEvent] = field(default_factory=list)

    def gemm_count(self, kind: str) -> int:
        return sum(1 for g in self.gemms if g.kind == kind)

    def gemm_bytes(self, kind: str | None = None) -> int:
        return sum(g.bytes_moved for g in self.gemms if kind is None or g.kind == kind)

    def quant_count(self, op: str, site: str | None = None) -> int:
        return sum(
            1
            for q in self.quant_events
            if q.op == op and (site is None or q.site == site)
        )

    def sites(self, op: str) -> list[str]:
        return [q.site for q in self.quant_events if q.op == op]


_ACTIVE: ContextVar[OpTrace | None] = ContextVar("samp_op_trace", default=None)


@contextlib.contextmanager
def trace_ops():
    """Collect kernel events emitted while the context is active."""
    trace = OpTrace()
    token = _ACTIVE.set(trace)
    try:
        yield trace
    finally:
        _ACTIVE.reset(token)


def emit_gemm(kind: str, m: int, k: int, n: int, batch: int = 1, tag: str = "") -> None:
    trace = _ACTIVE.get()
    if trace is not None:
        trace.gemms.append(GemmEvent(kind, m, k, n, batch, tag))


def emit_quant(op: str, site: str) -> None:
    trace = _ACTIVE.get()
    if trace is not None:
        trace.quant_events.append(QuantEvent(op, site))


def emit_boundary(layer: int, edge: str, dtype: str) -> None:
    trace = _ACTIVE.get()
    if trace is not None:
        trace.boundaries.append(BoundaryEvent(layer, edge, dtype))
