"""Per-request traces and aggregate QoS statistics for scenario runs."""

from __future__ import annotations

import csv
import io
import json
import statistics
from dataclasses import dataclass, field
from pathlib import Path

CSV_COLUMNS = ("index", "t_remote_ms", "t_local_ms", "winner", "q_after", "action")


class EmptyInput(ValueError):
    pass


def compute_sd(times: list[float]) -> float:
    """Population standard deviation: sqrt(sum((t - mean)^2) / N)."""
    if not times:
        raise EmptyInput("no serving times")
    return statistics.pstdev(times)


def _percentile(sorted_times: list[float], p: int) -> float:
    if len(sorted_times) == 1:
        return sorted_times[0]
    cuts = statistics.quantiles(sorted_times, n=100, method="inclusive")
    return cuts[p - 1]


@dataclass
class RequestRecord:
    index: int
    t_remote_ms: float | None
    t_local_ms: float | None
    winner: str
    q_after: float
    action: str | None
    serving_ms: float = 0.0      # caller-observed latency (drives aggregates)
    within_t_max: bool = True

    def csv_row(self) -> list[str]:
        return [
            str(self.index),
            _num(self.t_remote_ms),
            _num(self.t_local_ms),
            self.winner,
            _num(self.q_after),
            self.action or "",
        ]


def _num(value) -> str:
    if value is None:
        return ""
    return repr(round(float(value), 6))


@dataclass
class MetricsReport:
    records: list[RequestRecord] = field(default_factory=list)
    aggregates: dict = field(default_factory=dict)

    def finalize(self) -> None:
        """Compute aggregates over the completed serving times t_1..t_N."""
        times = [r.serving_ms for r in self.records]
        if not times:
            self.aggregates = {}
            return
        ordered = sorted(times)
        self.aggregates = {
            "count": len(times),
            "mean_ms": round(statistics.fmean(times), 6),
            "sd_ms": round(compute_sd(times), 6),
            "p50": round(_percentile(ordered, 50), 6),
            "p95": round(_percentile(ordered, 95), 6),
            "p99": round(_percentile(ordered, 99), 6),
            "fraction_within_t_max": round(
                sum(1 for r in self.records if r.within_t_max) / len(self.records), 6),
        }

    def to_csv(self) -> str:
        out = io.StringIO()
        writer = csv.writer(out, lineterminator="\n")
        writer.writerow(CSV_COLUMNS)
        for record in sorted(self.records, key=lambda r: r.index):
            writer.writerow(record.csv_row())
        return out.getvalue()


def emit_report(report: MetricsReport, out_dir: str | Path) -> tuple[Path, Path]:
    """Write trace.csv and aggregates.json; returns their paths."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    trace = out / "trace.csv"
    aggregates = out / "aggregates.json"
    trace.write_text(report.to_csv(), encoding="utf-8")
    aggregates.write_text(json.dumps(report.aggregates, sort_keys=True, indent=2) + "\n",
                          encoding="utf-8")
    return trace, aggregates
