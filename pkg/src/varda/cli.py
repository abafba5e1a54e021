"""Command-line interface: run experiments, verify models, dense oracles."""

from __future__ import annotations

import json
from pathlib import Path

import click
import numpy as np

from .driver import (ROUTES, ExperimentConfig, emit_report, oracle_run,
                     run_twin, tgn_run, verify_model)


def _load_config(config_file, seed, route, max_inner, outer) -> ExperimentConfig:
    cfg = ExperimentConfig.from_file(config_file)
    if seed is not None:
        cfg.seed = seed
    if route is not None:
        cfg.route = route
    if max_inner is not None:
        cfg.max_inner = max_inner
    if outer is not None:
        cfg.outer = outer
    return cfg


seed_option = click.option("--seed", type=int, default=None,
                           help="Override the experiment RNG seed.")
out_option = click.option("--out", type=click.Path(file_okay=False),
                          default="varda-out", show_default=True,
                          help="Output directory for reports.")
route_option = click.option("--route", type=click.Choice(ROUTES), default=None,
                            help="Override the inner solver route.")
max_inner_option = click.option("--max-inner", type=int, default=None,
                                help="Override the inner iteration budget.")
outer_option = click.option("--outer", type=int, default=None,
                            help="Override the outer iteration count.")


@click.group()
def main():
    """Matrix-free variational data assimilation toolkit."""


@main.command()
@click.argument("config_file", type=click.Path(exists=True, dir_okay=False))
@seed_option
@out_option
@route_option
@max_inner_option
@outer_option
def run(config_file, seed, out, route, max_inner, outer):
    """Run the configured twin experiment and write JSON/CSV reports."""
    cfg = _load_config(config_file, seed, route, max_inner, outer)
    twin = run_twin(cfg)
    x, diag = tgn_run(twin.setup, cfg.tgn_config())
    diag["background_error"] = twin.background_error
    diag["analysis_error"] = twin.analysis_error(x)
    json_path, csv_path = emit_report(diag, out, cfg)
    click.echo(f"route {cfg.route}: cost {diag['outers'][0]['cost_before']:.6g} "
               f"-> {diag['final_cost']:.6g} over {len(diag['outers'])} outer / "
               f"{diag['total_inner_iterations']} inner iterations")
    click.echo(f"initial-condition error: background {diag['background_error']:.6g}, "
               f"analysis {diag['analysis_error']:.6g}")
    click.echo(f"wrote {json_path} and {csv_path}")
    if diag.get("halted_on_breakdown"):
        click.echo("warning: inner solver breakdown halted the outer loop", err=True)


@main.command()
@click.argument("config_file", type=click.Path(exists=True, dir_okay=False),
                required=False)
@seed_option
def verify(config_file, seed):
    """TLM/adjoint/gradient consistency checks for the configured model."""
    cfg = (ExperimentConfig.from_file(config_file) if config_file
           else ExperimentConfig())
    results = verify_model(cfg, seed)
    checks = [
        ("adjoint identity", results["adjoint_max_relative_error"],
         results["adjoint_max_relative_error"] <= 1e-12),
        ("Taylor slope", results["taylor_slope"],
         results["taylor_slope"] is None
         or abs(results["taylor_slope"] - 2.0) <= 0.1),
        ("gradient vs finite differences", results["gradient_fd_relative_error"],
         results["gradient_fd_relative_error"] <= 1e-6),
    ]
    failed = False
    for name, value, ok in checks:
        status = "PASS" if ok else "FAIL"
        click.echo(f"{status}  {name}: {value}")
        failed = failed or not ok
    if failed:
        raise SystemExit(1)


@main.command()
@click.argument("config_file", type=click.Path(exists=True, dir_okay=False))
@seed_option
@out_option
@outer_option
def oracle(config_file, seed, out, outer):
    """Dense-solve Gauss-Newton reference for small instances."""
    cfg = _load_config(config_file, seed, None, None, outer)
    twin = run_twin(cfg)
    x, diag = oracle_run(twin.setup, cfg.outer)
    summary = {
        "config": cfg.to_dict(),
        "costs": diag["costs"],
        "final_gradient_norm": diag["final_gradient_norm"],
        "background_error": twin.background_error,
        "analysis_error": twin.analysis_error(x),
        "analysis_initial_state": [float(v) for v in np.atleast_2d(
            np.asarray(x).reshape(-1, cfg.n))[0]],
    }
    out_dir = Path(out)
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / "oracle.json"
    path.write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n",
                    encoding="utf-8")
    click.echo(f"dense reference: cost {diag['costs'][0]:.6g} -> {diag['costs'][-1]:.6g}; "
               f"error {twin.background_error:.6g} -> {twin.analysis_error(x):.6g}")
    click.echo(f"wrote {path}")


if __name__ == "__main__":
    main()
