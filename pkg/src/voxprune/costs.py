"""Analytical FLOP and activation-memory accounting."""

from __future__ import annotations

import csv
import io
from dataclasses import asdict, dataclass, field
from typing import Optional

from .errors import ShapeError

BYTES_PER_VALUE = 4
STAGES = ("3d", "2d", "predictor")


@dataclass
class LayerCost:
    name: str
    stage: str
    c_in: int
    c_out: int
    pairs: int
    flops: int
    n_out: int
    act_bytes: int
    rulebook_bytes: int = 0
    dense_pre: Optional[float] = None
    dense_post: Optional[float] = None


@dataclass
class CostLedger:
    """Per-layer costs in execution order.

    FLOPs count two per multiply-accumulate over rulebook pairs only, and
    activation size is stored elements times channels times four bytes.
    """

    layers: list = field(default_factory=list)
    track_rulebook: bool = False

    def add(self, entry: LayerCost) -> LayerCost:
        if entry.stage not in STAGES:
            raise ShapeError(f"unknown stage {entry.stage!r}")
        if entry.flops < 0 or entry.act_bytes < 0 or entry.pairs < 0:
            raise ShapeError("cost entries must be non-negative")
        if any(e.name == entry.name for e in self.layers):
            raise ShapeError(f"duplicate layer name {entry.name!r}")
        self.layers.append(entry)
        return entry

    def record_conv(self, name, stage, kernel, rulebook, out) -> LayerCost:
        pairs = rulebook.total_pairs
        return self.add(
            LayerCost(
                name=name,
                stage=stage,
                c_in=kernel.c_in,
                c_out=kernel.c_out,
                pairs=pairs,
                flops=2 * kernel.c_in * kernel.c_out * pairs,
                n_out=len(out),
                act_bytes=len(out) * out.channels * BYTES_PER_VALUE,
                rulebook_bytes=rulebook.nbytes if self.track_rulebook else 0,
            )
        )

    def record_dense(self, name, stage, c_in, c_out, n_sites, taps, out_channels=None) -> LayerCost:
        """Cost of a dense layer evaluated at ``n_sites`` outputs with ``taps`` inputs each."""
        pairs = n_sites * taps
        return self.add(
            LayerCost(
                name=name,
                stage=stage,
                c_in=c_in,
                c_out=c_out,
                pairs=pairs,
                flops=2 * c_in * c_out * pairs,
                n_out=n_sites,
                act_bytes=n_sites * (c_out if out_channels is None else out_channels) * BYTES_PER_VALUE,
            )
        )

    def annotate(self, name, dense_pre=None, dense_post=None):
        entry = self[name]
        if dense_pre is not None:
            entry.dense_pre = float(dense_pre)
        if dense_post is not None:
            entry.dense_post = float(dense_post)

    def __getitem__(self, name) -> LayerCost:
        for e in self.layers:
            if e.name == name:
                return e
        raise KeyError(name)

    def total(self, key: str = "flops", stage: Optional[str] = None) -> int:
        return sum(getattr(e, key) for e in self.layers if stage is None or e.stage == stage)

    def totals(self) -> dict:
        out = {}
        for stage in STAGES:
            out[stage] = {k: self.total(k, stage) for k in ("flops", "act_bytes", "pairs", "rulebook_bytes")}
        out["all"] = {k: self.total(k) for k in ("flops", "act_bytes", "pairs", "rulebook_bytes")}
        return out

    def to_rows(self) -> list:
        return [asdict(e) for e in self.layers]

    def to_csv(self) -> str:
        buf = io.StringIO()
        cols = list(LayerCost.__dataclass_fields__)
        w = csv.DictWriter(buf, fieldnames=cols, lineterminator="\n")
        w.writeheader()
        for row in self.to_rows():
            w.writerow({k: _fmt(v) for k, v in row.items()})
        return buf.getvalue()


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return v


def _ratio(base, opt):
    """``base / opt``; 1.0 when both are zero and inf when only ``opt`` is."""
    if opt == 0:
        return float("inf") if base > 0 else 1.0
    return base / opt


@dataclass
class CostReport:
    rows: list
    totals: dict

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["layer", "stage", "flops_base", "flops_opt", "flops_ratio", "mem_base", "mem_opt", "mem_ratio"])
        for r in self.rows + self.totals:
            w.writerow([r["layer"], r["stage"], r["flops_base"], r["flops_opt"], repr(r["flops_ratio"]),
                        r["mem_base"], r["mem_opt"], repr(r["mem_ratio"])])
        return buf.getvalue()

    def to_text(self) -> str:
        lines = [f"{'layer':<16}{'stage':<11}{'FLOPs opt':>11}{'Mem. opt':>11}"]
        for r in self.rows:
            lines.append(f"{r['layer']:<16}{r['stage']:<11}{r['flops_ratio']:>10.3f}x{r['mem_ratio']:>10.3f}x")
        lines.append("")
        for r in self.totals:
            lines.append(f"{r['layer']:<27}{r['flops_ratio']:>10.3f}x{r['mem_ratio']:>10.3f}x")
        return "\n".join(lines) + "\n"


def _backbone(ledger):
    return [e for e in ledger.layers if e.stage != "predictor"]


def report_costs(ledger: CostLedger, baseline: CostLedger) -> CostReport:
    """Baseline-over-optimized ratios per layer and per stage.

    Backbone layers must match one to one. Predictor layers are overhead of
    the optimized run; they enter the ``predictor`` and ``all`` totals only.
    """
    opt, base = _backbone(ledger), _backbone(baseline)
    if [(e.name, e.stage) for e in opt] != [(e.name, e.stage) for e in base]:
        raise ShapeError("ledgers have different layer structure")
    rows = []
    for e, b in zip(opt, base):
        rows.append(_row(e.name, e.stage, b.flops, e.flops, b.act_bytes, e.act_bytes))
    totals = []
    for stage in STAGES + ("all",):
        st = None if stage == "all" else stage
        if st is not None and not any(e.stage == st for e in ledger.layers + baseline.layers):
            continue
        totals.append(_row(f"total_{stage}", stage, baseline.total("flops", st), ledger.total("flops", st),
                           baseline.total("act_bytes", st), ledger.total("act_bytes", st)))
    return CostReport(rows, totals)


def _row(name, stage, fb, fo, mb, mo):
    return {"layer": name, "stage": stage, "flops_base": fb, "flops_opt": fo, "flops_ratio": _ratio(fb, fo),
            "mem_base": mb, "mem_opt": mo, "mem_ratio": _ratio(mb, mo)}
