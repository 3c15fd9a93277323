"""Run reports (CSV/JSON) and vector plot output.

Serialization is deterministic: floats are written with ``repr`` so two
runs with the same seed produce byte-identical files except for the
timing column, and JSON reports round-trip losslessly.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

__all__ = [
    "StageRecord",
    "RunReport",
    "ProgressLog",
    "emit_report",
    "parse_report",
    "emit_plot",
    "axis_range",
]

_CSV_COLUMNS = ("stage", "flops", "params", "rank1", "map", "seconds")


@dataclass
class StageRecord:
    stage: str
    flops: int
    params: int
    rank1: float
    map: float
    seconds: float = 0.0


@dataclass
class RunReport:
    """Per-stage accuracy and complexity of one experiment run."""

    stages: list = field(default_factory=list)
    config: dict = field(default_factory=dict)
    seed: int = 0

    def add(self, record: StageRecord) -> None:
        self.stages.append(record)

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(_CSV_COLUMNS)
        for rec in self.stages:
            writer.writerow([rec.stage, rec.flops, rec.params,
                             repr(float(rec.rank1)), repr(float(rec.map)),
                             repr(float(rec.seconds))])
        return buf.getvalue()

    def to_json(self) -> str:
        doc = {
            "seed": self.seed,
            "config": self.config,
            "stages": [asdict(rec) for rec in self.stages],
        }
        return json.dumps(doc, sort_keys=True, indent=2) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "RunReport":
        doc = json.loads(text)
        report = cls(config=doc.get("config", {}), seed=doc.get("seed", 0))
        for rec in doc["stages"]:
            report.add(StageRecord(**rec))
        return report

    def strip_timing(self) -> "RunReport":
        """Copy with zeroed wall-time fields, for determinism comparisons."""
        out = RunReport(config=self.config, seed=self.seed)
        for rec in self.stages:
            out.add(StageRecord(rec.stage, rec.flops, rec.params, rec.rank1, rec.map, 0.0))
        return out


def emit_report(report: RunReport, path: str, fmt: str = "csv") -> None:
    if fmt == "csv":
        text = report.to_csv()
    elif fmt == "json":
        text = report.to_json()
    else:
        raise ValueError(f"unknown report format '{fmt}'")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(text)


def parse_report(text: str) -> RunReport:
    return RunReport.from_json(text)


class ProgressLog:
    """Append-style CSV log of per-iteration pruning progress."""

    COLUMNS = ("iteration", "pruned_channels", "flops", "params", "rank1", "map", "loss")

    def __init__(self):
        self.rows: list = []

    def append(self, iteration, pruned_channels, flops, params, rank1, map_, loss) -> None:
        self.rows.append((iteration, pruned_channels, flops, params, rank1, map_, loss))

    def extend_from_records(self, records: Sequence[dict]) -> None:
        for rec in records:
            self.append(rec["stage"], rec["pruned_channels"], rec["flops"], rec["params"],
                        rec["rank1"], rec["map"], rec["loss"])

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(self.COLUMNS)
        for row in self.rows:
            writer.writerow([row[0], row[1], row[2], row[3],
                             repr(float(row[4])), repr(float(row[5])), repr(float(row[6]))])
        return buf.getvalue()

    def write(self, path: str) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self.to_csv())


# ---------------------------------------------------------------------------
# plotting


def axis_range(lo: float, hi: float, margin: float = 0.05) -> tuple:
    """Data range extended by a fractional margin on both sides."""
    if hi < lo:
        lo, hi = hi, lo
    span = hi - lo
    if span == 0.0:
        span = abs(hi) if hi != 0 else 1.0
    return lo - margin * span, hi + margin * span


def emit_plot(series: dict, path: str, xlabel: str = "x", ylabel: str = "y",
              width: int = 640, height: int = 420) -> None:
    """Write a line/scatter chart of one or more point series as SVG.

    ``series`` maps a legend label to a list of (x, y) points. All points
    must be finite; axes cover the pooled data with a 5 percent margin.
    """
    if not series or all(len(pts) == 0 for pts in series.values()):
        raise ValueError("nothing to plot")
    for label, pts in series.items():
        for x, y in pts:
            if not (math.isfinite(x) and math.isfinite(y)):
                raise ValueError(f"series '{label}' contains a non-finite point ({x}, {y})")
    xs = [x for pts in series.values() for x, _ in pts]
    ys = [y for pts in series.values() for _, y in pts]
    x0, x1 = axis_range(min(xs), max(xs))
    y0, y1 = axis_range(min(ys), max(ys))
    pad = 54

    def sx(x):
        return pad + (x - x0) / (x1 - x0) * (width - 2 * pad)

    def sy(y):
        return height - pad - (y - y0) / (y1 - y0) * (height - 2 * pad)

    colors = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"]
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}" data-xmin="{x0!r}" data-xmax="{x1!r}" '
        f'data-ymin="{y0!r}" data-ymax="{y1!r}">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
        f'<line x1="{pad}" y1="{height - pad}" x2="{width - pad}" y2="{height - pad}" '
        'stroke="black"/>',
        f'<line x1="{pad}" y1="{pad}" x2="{pad}" y2="{height - pad}" stroke="black"/>',
        f'<text x="{width / 2:.1f}" y="{height - 12}" text-anchor="middle" '
        f'font-size="13">{xlabel}</text>',
        f'<text x="16" y="{height / 2:.1f}" text-anchor="middle" font-size="13" '
        f'transform="rotate(-90 16 {height / 2:.1f})">{ylabel}</text>',
    ]
    for i, (label, pts) in enumerate(sorted(series.items())):
        color = colors[i % len(colors)]
        ordered = sorted(pts)
        if len(ordered) > 1:
            path_d = " ".join(f"{sx(x):.2f},{sy(y):.2f}" for x, y in ordered)
            parts.append(f'<polyline points="{path_d}" fill="none" stroke="{color}" '
                         'stroke-width="1.5"/>')
        for x, y in ordered:
            parts.append(f'<circle cx="{sx(x):.2f}" cy="{sy(y):.2f}" r="3.5" fill="{color}"/>')
        parts.append(f'<text class="legend" x="{width - pad + 4}" y="{pad + 16 * i}" '
                     f'font-size="12" fill="{color}" text-anchor="end">{label}</text>')
    parts.append("</svg>")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(parts) + "\n")
