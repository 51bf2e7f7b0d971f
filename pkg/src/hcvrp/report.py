"""Run reports: per-instance rows, per-method aggregates and optional plots."""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

from .env import Solution
from .instances import Instance


@dataclass(frozen=True)
class Row:
    instance: int
    method: str
    objective: float
    gap: float  # relative to the best objective found in this run for the instance
    time: float  # wall seconds


@dataclass(frozen=True)
class Aggregate:
    method: str
    count: int
    mean_objective: float
    mean_gap: float
    mean_time: float


@dataclass
class RunReport:
    rows: list[Row]
    aggregate: list[Aggregate]
    provenance: dict = field(default_factory=dict)

    def to_records(self) -> list[dict]:
        out = [{"kind": "row", **asdict(r)} for r in self.rows]
        out += [{"kind": "aggregate", **asdict(a)} for a in self.aggregate]
        out.append({"kind": "provenance", **self.provenance})
        return out

    def write_jsonl(self, path: str | Path) -> None:
        with open(path, "w") as fh:
            for record in self.to_records():
                fh.write(json.dumps(record, sort_keys=True) + "\n")

    def table(self) -> str:
        header = f"{'method':<24}{'count':>7}{'objective':>12}{'gap':>10}{'time (s)':>11}"
        lines = [header, "-" * len(header)]
        for a in self.aggregate:
            lines.append(f"{a.method:<24}{a.count:>7}{a.mean_objective:>12.4f}"
                         f"{a.mean_gap * 100:>9.2f}%{a.mean_time:>11.4f}")
        return "\n".join(lines)


def build_report(results: dict[str, Sequence[tuple[float, float]]],
                 provenance: dict | None = None) -> RunReport:
    """``results`` maps a method name to per-instance (objective, seconds) pairs."""
    methods = list(results)
    counts = {len(v) for v in results.values()}
    if len(counts) > 1:
        raise ValueError("every method must cover the same instances")
    count = counts.pop() if counts else 0
    best = [min(results[m][i][0] for m in methods) for i in range(count)]
    rows = []
    for m in methods:
        for i, (obj, secs) in enumerate(results[m]):
            gap = obj / best[i] - 1 if best[i] > 0 else (0.0 if obj == best[i] else math.inf)
            rows.append(Row(i, m, obj, max(gap, 0.0), secs))
    return RunReport(rows, aggregate(rows, methods), dict(provenance or {}))


def aggregate(rows: Sequence[Row], methods: Sequence[str]) -> list[Aggregate]:
    out = []
    for m in methods:
        mine = [r for r in rows if r.method == m]
        k = len(mine)
        out.append(Aggregate(m, k,
                             math.fsum(r.objective for r in mine) / k if k else math.nan,
                             math.fsum(r.gap for r in mine) / k if k else math.nan,
                             math.fsum(r.time for r in mine) / k if k else math.nan))
    return out


def plot_report(report: RunReport, path: str | Path) -> None:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(6, 4))
    for a in report.aggregate:
        ax.scatter([a.mean_time], [a.mean_objective], label=a.method)
    ax.set_xlabel("mean wall time per instance (s)")
    ax.set_ylabel("mean objective")
    ax.set_xscale("symlog", linthresh=1e-3)
    ax.legend(fontsize="small")
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)


def plot_routes(instance: Instance, solution: Solution, path: str | Path, title: str = "") -> None:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(5, 5))
    xy = instance.coords
    ax.scatter(xy[1:, 0], xy[1:, 1], s=12, c="k")
    ax.scatter(xy[:1, 0], xy[:1, 1], s=60, marker="s", c="r")
    for v, route in enumerate(solution.routes):
        if len(route) > 2:
            pts = xy[list(route)]
            ax.plot(pts[:, 0], pts[:, 1], lw=1.2, label=f"vehicle {v + 1}")
    ax.set_title(title or f"objective {solution.objective_value:.4f}")
    ax.set_aspect("equal")
    ax.legend(fontsize="small")
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
