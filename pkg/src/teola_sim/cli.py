"""Command-line interface: experiment runs, sweeps, graph tools, report tools."""

from __future__ import annotations

import json
import os
import sys
from pathlib import Path

import click

from . import report as report_mod
from .engines import load_profiles
from .errors import ConfigParse, TeolaError
from .experiment import (
    ExperimentConfig,
    Report,
    run_experiment,
    speedup_table,
    sweep as run_sweep,
    pass_set,
)
from .graph import diff_graphs, is_isomorphic, parse_graph, serialize_graph
from .optimizer import compile_query, OptimizerCache
from .workflow import QueryConfig, WorkflowTemplate
from .workloads import AppKind, build_app_template

OUTPUT_DIR_ENV = "TEOLA_SIM_OUTPUT_DIR"


def _out_dir(cfg_dir: str | None, name: str) -> Path:
    base = os.environ.get(OUTPUT_DIR_ENV) or cfg_dir or "out"
    return Path(base) / name


def _fail(exc: TeolaError) -> None:
    click.echo(f"error: {exc}", err=True)
    sys.exit(exc.exit_code)


@click.group()
def main():
    """Workflow orchestration and scheduling simulator."""


@main.command()
@click.option("-c", "--config", "config_path", required=True, type=click.Path())
@click.option("--out", "out_override", default=None, help="output directory override")
def run(config_path, out_override):
    """Run one experiment and write trace, report, and figures."""
    try:
        cfg = ExperimentConfig.load(config_path)
        report, trace = run_experiment(cfg)
    except TeolaError as exc:
        _fail(exc)
        return
    outdir = Path(out_override) if out_override else _out_dir(cfg.output_dir, cfg.name)
    outdir.mkdir(parents=True, exist_ok=True)
    report_mod.write_trace_csv(trace, outdir / "trace.csv")
    for fmt in ("csv", "json", "md-table"):
        report_mod.emit_report(report, fmt, outdir)
    report_mod.render_latency_figure(report, outdir / "figures" / "latency_cdf.png")
    click.echo(f"mean latency {report.overall['mean_ms']:.1f} ms over "
               f"{report.overall['count']} queries -> {outdir}")


@main.command()
@click.option("-c", "--config", "config_path", required=True, type=click.Path())
@click.option("--rates", required=True, help="comma-separated arrival rates, e.g. 1,2,4")
@click.option("--modes", default=None, help="comma-separated modes")
@click.option("--schedulers", default=None, help="comma-separated schedulers")
@click.option("--out", "out_override", default=None)
def sweep(config_path, rates, modes, schedulers, out_override):
    """Run a rate x mode x scheduler grid and write comparison outputs."""
    try:
        cfg = ExperimentConfig.load(config_path)
        rate_list = [float(r) for r in rates.split(",") if r]
        mode_list = modes.split(",") if modes else None
        sched_list = schedulers.split(",") if schedulers else None
        results = run_sweep(cfg, rate_list, mode_list, sched_list)
    except (TeolaError, ValueError) as exc:
        if isinstance(exc, TeolaError):
            _fail(exc)
        else:
            _fail(ConfigParse(str(exc)))
        return
    outdir = Path(out_override) if out_override else _out_dir(cfg.output_dir, f"{cfg.name}-sweep")
    outdir.mkdir(parents=True, exist_ok=True)
    report_mod.write_sweep_csv(results, outdir / "sweep.csv")
    report_mod.render_sweep_figure(results, outdir / "figures" / "latency_vs_rate.png")
    lines = ["| rate | mode | scheduler | mean (ms) | p95 (ms) |", "|---|---|---|---|---|"]
    for meta, rep in results:
        lines.append(f"| {meta['rate_qps']} | {meta['mode']} | {meta['scheduler']} | "
                     f"{rep.overall['mean_ms']:.1f} | {rep.overall['p95_ms']:.1f} |")
    (outdir / "sweep.md").write_text("\n".join(lines) + "\n")
    click.echo(f"{len(results)} runs -> {outdir}")


@main.group()
def graph():
    """Build and compare execution graphs."""


@graph.command("build")
@click.option("--template", "template_ref", required=True,
              help="built-in app name or template JSON path")
@click.option("--config", "config_path", default=None, type=click.Path(),
              help="query config JSON path")
@click.option("--profiles", "profiles_ref", default="default")
@click.option("--passes", "passes_arg", default="all",
              help="comma-separated pass names, 'all', or 'none'")
@click.option("--out", "out_path", required=True, type=click.Path())
def graph_build(template_ref, config_path, profiles_ref, passes_arg, out_path):
    """Compile a template + query config into a canonical e-graph file."""
    try:
        if Path(template_ref).exists():
            template = WorkflowTemplate.loads(Path(template_ref).read_text())
        else:
            template = build_app_template(AppKind.parse(template_ref))
        config = (QueryConfig.loads(Path(config_path).read_text())
                  if config_path else QueryConfig())
        profiles = load_profiles(profiles_ref)
        if passes_arg in ("all", "none"):
            passes = pass_set(passes_arg)
        else:
            passes = pass_set([p for p in passes_arg.split(",") if p])
        egraph = compile_query(template, config, profiles, frozenset(passes), OptimizerCache())
    except TeolaError as exc:
        _fail(exc)
        return
    Path(out_path).write_text(serialize_graph(egraph))
    click.echo(f"{len(egraph.nodes)} nodes, {len(egraph.edges)} edges -> {out_path}")


@graph.command("diff")
@click.argument("path_a", type=click.Path(exists=True))
@click.argument("path_b", type=click.Path(exists=True))
def graph_diff(path_a, path_b):
    """Report isomorphism or a structural diff of two graph files."""
    try:
        a = parse_graph(Path(path_a).read_text())
        b = parse_graph(Path(path_b).read_text())
    except (ValueError, KeyError) as exc:
        _fail(ConfigParse(f"cannot parse graph file: {exc}"))
        return
    if is_isomorphic(a, b):
        click.echo("isomorphic")
        return
    for line in diff_graphs(a, b):
        click.echo(line)
    sys.exit(1)


@main.group("report")
def report_group():
    """Compare and summarize saved reports."""


@report_group.command("compare")
@click.argument("baseline", type=click.Path(exists=True))
@click.argument("candidate", type=click.Path(exists=True))
@click.option("--out", "out_path", default=None, type=click.Path())
def report_compare(baseline, candidate, out_path):
    """Speedup table of candidate over baseline (ratio of mean latencies)."""
    try:
        base = Report.load(baseline)
        cand = Report.load(candidate)
    except (ValueError, KeyError) as exc:
        _fail(ConfigParse(f"cannot parse report: {exc}"))
        return
    rows = speedup_table(base, cand)
    text = report_mod.render_speedup_md(rows)
    if out_path:
        Path(out_path).write_text(text)
    click.echo(text)


if __name__ == "__main__":
    main()
