"""Report emission: delimited files, JSON, markdown tables, and figures."""

from __future__ import annotations

import csv
import json
from pathlib import Path

from .errors import IoFailure
from .experiment import Report
from .runtime import Trace

QUERY_FIELDS = (
    "query_id", "app_id", "app", "arrival_ms", "finish_ms", "latency_ms",
    "graph_build_ms", "queueing_ms", "execution_ms", "communication_ms",
)
TRACE_FIELDS = ("timestamp_ms", "query_id", "node_id", "kind", "engine", "event")


def emit_report(report: Report, fmt: str, outdir: str | Path) -> list[Path]:
    """Write the report in one format; returns the created files."""
    outdir = Path(outdir)
    try:
        outdir.mkdir(parents=True, exist_ok=True)
        if fmt == "csv":
            return [_write_queries_csv(report, outdir / "queries.csv")]
        if fmt == "json":
            path = outdir / "report.json"
            path.write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n")
            return [path]
        if fmt == "md-table":
            path = outdir / "report.md"
            path.write_text(render_md(report))
            return [path]
    except OSError as exc:
        raise IoFailure(f"cannot write report: {exc}") from exc
    raise IoFailure(f"unknown report format {fmt!r}")


def _write_queries_csv(report: Report, path: Path) -> Path:
    with path.open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=QUERY_FIELDS)
        w.writeheader()
        for row in report.rows:
            w.writerow({k: row.get(k) for k in QUERY_FIELDS})
    return path


def write_trace_csv(trace: Trace, path: str | Path) -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(TRACE_FIELDS)
        for e in trace.events:
            w.writerow(e)
    return path


def render_md(report: Report) -> str:
    """Markdown summary mirroring a per-app comparison layout."""
    cfg = report.config
    lines = [
        f"# Report: {cfg.get('name', 'exp')}",
        "",
        f"mode: `{cfg.get('mode')}`  scheduler: `{cfg.get('scheduler')}`  "
        f"seed: {cfg.get('seed')}  queries: {report.overall.get('count', 0)}",
        "",
        "| app | count | mean (ms) | p50 | p95 | p99 | build | queue | exec | comm |",
        "|---|---|---|---|---|---|---|---|---|---|",
    ]
    entries = list(report.per_app.items()) + [("overall", report.overall)]
    for app, agg in entries:
        lines.append(
            "| {} | {} | {:.1f} | {:.1f} | {:.1f} | {:.1f} | {:.2f} | {:.1f} | {:.1f} | {:.1f} |".format(
                app, agg.get("count", 0), agg.get("mean_ms", 0.0), agg.get("p50_ms", 0.0),
                agg.get("p95_ms", 0.0), agg.get("p99_ms", 0.0),
                agg.get("mean_graph_build_ms", 0.0), agg.get("mean_queueing_ms", 0.0),
                agg.get("mean_execution_ms", 0.0), agg.get("mean_communication_ms", 0.0),
            )
        )
    if report.utilization:
        lines += ["", "| engine | utilization |", "|---|---|"]
        lines += [f"| {eid} | {u:.3f} |" for eid, u in sorted(report.utilization.items())]
    lines.append("")
    return "\n".join(lines)


def render_speedup_md(rows: list[dict]) -> str:
    lines = [
        "| app | baseline mean (ms) | candidate mean (ms) | speedup |",
        "|---|---|---|---|",
    ]
    for r in rows:
        lines.append(
            f"| {r['app_id']} | {r['baseline_mean_ms']:.1f} | "
            f"{r['candidate_mean_ms']:.1f} | {r['speedup']:.2f}x |"
        )
    lines.append("")
    return "\n".join(lines)


def _matplotlib():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    return plt


def render_latency_figure(report: Report, path: str | Path) -> Path:
    """Per-app latency CDF rendered alongside the delimited output."""
    plt = _matplotlib()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig, ax = plt.subplots(figsize=(6, 4))
    apps = sorted({r["app_id"] for r in report.rows})
    for app in apps:
        lats = sorted(r["latency_ms"] for r in report.rows if r["app_id"] == app)
        ys = [(i + 1) / len(lats) for i in range(len(lats))]
        ax.step(lats, ys, where="post", label=app)
    ax.set_xlabel("end-to-end latency (ms)")
    ax.set_ylabel("fraction of queries")
    ax.set_title(f"{report.config.get('name', 'exp')}: latency distribution")
    ax.grid(alpha=0.3)
    if apps:
        ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def render_sweep_figure(results: list[tuple[dict, Report]], path: str | Path) -> Path:
    """Mean latency versus arrival rate, one line per (mode, scheduler)."""
    plt = _matplotlib()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    series: dict[tuple[str, str], list[tuple[float, float]]] = {}
    for meta, report in results:
        key = (meta["mode"], meta["scheduler"])
        series.setdefault(key, []).append((meta["rate_qps"], report.overall.get("mean_ms", 0.0)))
    fig, ax = plt.subplots(figsize=(6, 4))
    for (mode, sched), pts in sorted(series.items()):
        pts.sort()
        ax.plot([p[0] for p in pts], [p[1] for p in pts], marker="o", label=f"{mode}/{sched}")
    ax.set_xlabel("arrival rate (queries/s)")
    ax.set_ylabel("mean end-to-end latency (ms)")
    ax.grid(alpha=0.3)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def write_sweep_csv(results: list[tuple[dict, Report]], path: str | Path) -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["rate_qps", "mode", "scheduler", "app_id", "count",
                    "mean_ms", "p50_ms", "p95_ms", "p99_ms"])
        for meta, report in results:
            entries = list(report.per_app.items()) + [("overall", report.overall)]
            for app, agg in entries:
                w.writerow([
                    meta["rate_qps"], meta["mode"], meta["scheduler"], app,
                    agg.get("count", 0), round(agg.get("mean_ms", 0), 3),
                    round(agg.get("p50_ms", 0), 3), round(agg.get("p95_ms", 0), 3),
                    round(agg.get("p99_ms", 0), 3),
                ])
    return path
