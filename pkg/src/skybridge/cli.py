"""Command line: serve the portal, deploy packages, fetch stubs, run scenarios."""

from __future__ import annotations

import json
import sys
from dataclasses import replace
from pathlib import Path

import click
import httpx

from .harness.metrics import emit_report
from .harness.scenario import load_scenario, run_scenario
from .portal.app import PortalConfig, create_app, load_config


@click.group()
def main() -> None:
    """Cloud service wrapping with QoS-aware client failover."""


@main.command()
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False),
              default=None, help="Portal config JSON (listen address, token, "
                                 "SLA dictionary, node pool).")
def serve(config_path: str | None) -> None:
    """Run the portal (REST + WebSocket endpoint)."""
    import uvicorn

    config = load_config(config_path) if config_path else PortalConfig()
    app = create_app(config)
    uvicorn.run(app, host=config.host, port=config.port, log_level="info")


def _auth_headers(token: str) -> dict:
    return {"Authorization": f"Bearer {token}"} if token else {}


@main.command()
@click.argument("manifest", type=click.Path(exists=True, dir_okay=False))
@click.option("--portal", default="http://127.0.0.1:8008", show_default=True)
@click.option("--replace", is_flag=True, help="Replace an existing deployment.")
@click.option("--token", default="", help="Bearer token, if the portal requires one.")
def deploy(manifest: str, portal: str, replace: bool, token: str) -> None:
    """Deploy a package manifest to a running portal."""
    body = Path(manifest).read_bytes()
    response = httpx.post(f"{portal}/packages", params={"replace": replace},
                          content=body, headers=_auth_headers(token), timeout=30)
    if response.status_code >= 400:
        click.echo(f"deploy failed ({response.status_code}): {response.text}", err=True)
        sys.exit(1)
    click.echo(response.text)


@main.group()
def stub() -> None:
    """Stub repository operations."""


@stub.command("fetch")
@click.argument("service")
@click.option("--portal", default="http://127.0.0.1:8008", show_default=True)
@click.option("--out", "out_path", type=click.Path(dir_okay=False), default=None,
              help="Write the descriptor here instead of stdout.")
@click.option("--token", default="")
def stub_fetch(service: str, portal: str, out_path: str | None, token: str) -> None:
    """Download the stub descriptor for a deployed service."""
    response = httpx.get(f"{portal}/stubs/{service}", headers=_auth_headers(token),
                         timeout=30)
    if response.status_code >= 400:
        click.echo(f"fetch failed ({response.status_code}): {response.text}", err=True)
        sys.exit(1)
    if out_path:
        Path(out_path).write_bytes(response.content)
        click.echo(f"wrote {out_path}")
    else:
        click.echo(response.text)


@main.command("run-scenario")
@click.argument("scenario_file", type=click.Path(exists=True, dir_okay=False))
@click.option("--seed", type=int, default=None, help="Override the scenario seed.")
@click.option("--out", "out_dir", type=click.Path(file_okay=False), required=True)
@click.option("--realtime", is_flag=True,
              help="Map modeled delays onto wall-clock waits.")
def run_scenario_cmd(scenario_file: str, seed: int | None, out_dir: str,
                     realtime: bool) -> None:
    """Run a scenario and write trace.csv + aggregates.json."""
    scenario = load_scenario(scenario_file)
    if seed is not None:
        scenario = replace(scenario, seed=seed)
    report = run_scenario(scenario, realtime=realtime)
    trace, aggregates = emit_report(report, out_dir)
    click.echo(f"trace: {trace}")
    click.echo(f"aggregates: {aggregates}")
    click.echo(json.dumps(report.aggregates, sort_keys=True, indent=2))


@main.command()
@click.argument("run_dir", type=click.Path(exists=True, file_okay=False))
def report(run_dir: str) -> None:
    """Summarize a previous scenario run directory."""
    aggregates_path = Path(run_dir) / "aggregates.json"
    trace_path = Path(run_dir) / "trace.csv"
    if not aggregates_path.exists():
        click.echo(f"no aggregates.json under {run_dir}", err=True)
        sys.exit(1)
    aggregates = json.loads(aggregates_path.read_text(encoding="utf-8"))
    click.echo(json.dumps(aggregates, sort_keys=True, indent=2))
    if trace_path.exists():
        lines = trace_path.read_text(encoding="utf-8").splitlines()
        actions = [ln for ln in lines[1:] if ln.rstrip(",").endswith(("start_local", "stop_local"))]
        click.echo(f"requests: {len(lines) - 1}; local start/stop events: {len(actions)}")


if __name__ == "__main__":
    main()
