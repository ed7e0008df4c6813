"""Synaptic-operation (SOp) accounting, activation density and the L1 sparsity loss.

One SOp is one multiply-accumulate.  In sparse mode a conv is charged only for
the MACs triggered by nonzero input entries; taps that land in zero padding or
on zero activations cost nothing.  Bias additions and sigmoid evaluations are
not synaptic and are never counted.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .autograd import Tensor, abs_, add, conv_output_size, scale, sum_


class EmptyLedgerError(ValueError):
    """Raised when a report is requested from a ledger with no layers."""


def _coverage(size: int, k: int, stride: int, padding: int) -> np.ndarray:
    """Number of output positions that each input index along one axis feeds."""
    out = conv_output_size(size, k, stride, padding)
    idx = np.arange(size)[:, None] + padding - stride * np.arange(out)[None, :]
    return ((idx >= 0) & (idx < k)).sum(axis=1).astype(np.int64)


def count_conv_sop(
    x: np.ndarray | Tensor,
    kernel_shape: Sequence[int],
    stride: int = 1,
    padding: int = 0,
    sparse: bool = True,
) -> int:
    """Exact MAC count of an NCHW conv with kernel ``[Cout, Cin, kH, kW]``."""
    arr = x.data if isinstance(x, Tensor) else np.asarray(x)
    n, cin, h, w = arr.shape
    cout, _, kh, kw = kernel_shape
    if not sparse:
        ho = conv_output_size(h, kh, stride, padding)
        wo = conv_output_size(w, kw, stride, padding)
        return int(ho * wo * cout * cin * kh * kw * n)
    active = np.count_nonzero(arr, axis=(0, 1)).astype(np.int64)  # H, W
    rows = _coverage(h, kh, stride, padding)
    cols = _coverage(w, kw, stride, padding)
    return int(rows @ active @ cols) * int(cout)


def density(t: np.ndarray | Tensor) -> float:
    arr = t.data if isinstance(t, Tensor) else np.asarray(t)
    if arr.size == 0:
        return 0.0
    return np.count_nonzero(arr) / arr.size


@dataclass
class LayerRecord:
    name: str
    sop: int = 0
    sop_threshold: int = 0
    nonzero: int = 0
    total: int = 0
    steps: int = 0

    @property
    def density(self) -> float:
        return self.nonzero / self.total if self.total else 0.0

    def merged(self, other: "LayerRecord") -> "LayerRecord":
        return LayerRecord(
            self.name,
            self.sop + other.sop,
            self.sop_threshold + other.sop_threshold,
            self.nonzero + other.nonzero,
            self.total + other.total,
            self.steps + other.steps,
        )


@dataclass
class SOpLedger:
    """Per-layer accumulators of SOp and activation counts.

    ``mode="dense"`` charges every conv at its dense cost regardless of the
    per-call ``sparse`` flag; accounting never touches the numerics.
    """

    mode: str = "sparse"
    records: dict[str, LayerRecord] = field(default_factory=dict)

    def __post_init__(self):
        if self.mode not in ("sparse", "dense"):
            raise ValueError(f"ledger mode must be 'sparse' or 'dense', got {self.mode!r}")

    def _rec(self, layer: str) -> LayerRecord:
        rec = self.records.get(layer)
        if rec is None:
            rec = self.records[layer] = LayerRecord(layer)
        return rec

    def add_conv(self, layer, x, kernel_shape, stride=1, padding=0, sparse=True, threshold_path=False) -> int:
        sop = count_conv_sop(x, kernel_shape, stride, padding, sparse and self.mode == "sparse")
        rec = self._rec(layer)
        rec.sop += sop
        if threshold_path:
            rec.sop_threshold += sop
        return sop

    def add_activation(self, layer: str, values) -> None:
        arr = values.data if isinstance(values, Tensor) else np.asarray(values)
        rec = self._rec(layer)
        rec.nonzero += int(np.count_nonzero(arr))
        rec.total += int(arr.size)
        rec.steps += 1

    @property
    def layers(self) -> list[str]:
        return list(self.records)

    @property
    def total_sop(self) -> int:
        return sum(r.sop for r in self.records.values())

    def merge(self, other: "SOpLedger") -> "SOpLedger":
        out = SOpLedger(self.mode)
        for src in (self, other):
            for name, rec in src.records.items():
                prev = out.records.get(name)
                out.records[name] = LayerRecord(name).merged(rec) if prev is None else prev.merged(rec)
        return out

    def mean_density(self, layers: Iterable[str] | None = None) -> float:
        names = self.layers if layers is None else [n for n in layers if n in self.records]
        names = [n for n in names if self.records[n].total]
        if not names:
            return 0.0
        return float(np.mean([self.records[n].density for n in names]))


@dataclass(frozen=True)
class ReportRow:
    layer: str
    density: float
    sop: int
    gsop: float
    sop_threshold: int = 0


def density_report(ledger: SOpLedger) -> list[ReportRow]:
    """One row per layer in recording order, then a ``TOTAL`` row.

    The totals row sums SOp and pools the activation counts.
    """
    if not ledger.records:
        raise EmptyLedgerError("density report requested from an empty ledger")
    rows = [ReportRow(r.name, r.density, r.sop, r.sop / 1e9, r.sop_threshold) for r in ledger.records.values()]
    nz = sum(r.nonzero for r in ledger.records.values())
    tot = sum(r.total for r in ledger.records.values())
    sop = sum(r.sop for r in rows)
    rows.append(
        ReportRow("TOTAL", nz / tot if tot else 0.0, sop, sop / 1e9, sum(r.sop_threshold for r in rows))
    )
    return rows


def report_csv(rows: Sequence[ReportRow]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["layer", "density", "sop", "gsop"])
    for r in rows:
        writer.writerow([r.layer, repr(float(r.density)), r.sop, repr(float(r.gsop))])
    return buf.getvalue()


def threshold_breakdown_csv(rows: Sequence[ReportRow]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["layer", "sop", "sop_threshold", "sop_main"])
    for r in rows:
        writer.writerow([r.layer, r.sop, r.sop_threshold, r.sop - r.sop_threshold])
    return buf.getvalue()


def sparsity_loss(activations: Sequence[Tensor], beta: float, n: int, t: int) -> Tensor:
    """``beta / (n t)`` times the summed L1 norm of every activation map."""
    if beta < 0:
        raise ValueError(f"beta must be >= 0, got {beta}")
    if not activations:
        return Tensor(np.array(0.0))
    total = None
    for a in activations:
        term = sum_(abs_(a))
        total = term if total is None else add(total, term)
    return scale(total, beta / (n * t))
