"""Command-line front door: a thin client over the HTTP service.

By default every command talks to the FastAPI app in-process through an
ASGI transport, so no server or daemon is involved; pass --server URL to
drive a remote instance instead. Exit codes: 0 success, 1 stage failure,
2 invalid configuration or arguments.
"""

from __future__ import annotations

import asyncio
import json
import sys
from typing import Optional

import click
import httpx

EXIT_OK = 0
EXIT_STAGE_FAILURE = 1
EXIT_BAD_CONFIG = 2


def _request(
    server: Optional[str], method: str, path: str, payload: Optional[dict] = None
) -> httpx.Response:
    """One request against a remote server or the in-process app.

    ASGITransport only speaks the async interface, so the in-process path
    runs a throwaway event loop per command.
    """
    if server:
        with httpx.Client(base_url=server, timeout=None) as client:
            return client.request(method, path, json=payload)

    from .service import app

    async def go() -> httpx.Response:
        transport = httpx.ASGITransport(app=app)
        async with httpx.AsyncClient(
            transport=transport, base_url="http://peerwatch.local", timeout=None
        ) as client:
            return await client.request(method, path, json=payload)

    return asyncio.run(go())


def _load_config_file(path: Optional[str]) -> Optional[dict]:
    if path is None:
        return None
    try:
        with open(path) as fh:
            return json.load(fh)
    except FileNotFoundError:
        click.echo(f"config file not found: {path}", err=True)
        sys.exit(EXIT_BAD_CONFIG)
    except json.JSONDecodeError as e:
        click.echo(f"config file is not valid JSON: {e}", err=True)
        sys.exit(EXIT_BAD_CONFIG)


def _post(server: Optional[str], path: str, payload: dict) -> dict:
    try:
        response = _request(server, "POST", path, payload)
    except httpx.HTTPError as e:
        click.echo(f"request failed: {e}", err=True)
        sys.exit(EXIT_STAGE_FAILURE)
    if response.status_code in (400, 422):
        click.echo(f"invalid configuration: {response.json().get('detail')}", err=True)
        sys.exit(EXIT_BAD_CONFIG)
    if response.status_code >= 300:
        detail = response.json().get("detail", response.text)
        click.echo(f"error: {detail}", err=True)
        sys.exit(EXIT_STAGE_FAILURE)
    return response.json()


def _stage_command(stage: str, config: Optional[str], out: str, seed: Optional[int], server: Optional[str]) -> None:
    body = _load_config_file(config)
    if body is None:
        click.echo("--config PATH is required", err=True)
        sys.exit(EXIT_BAD_CONFIG)
    payload = {"config": body, "out_dir": out}
    if seed is not None:
        payload["seed"] = seed
    result = _post(server, f"/{stage}", payload)
    click.echo(json.dumps(result, indent=2))


def _common_options(fn):
    fn = click.option("--config", type=str, default=None, help="JSON experiment config")(fn)
    fn = click.option("--out", type=str, required=True, help="experiment directory")(fn)
    fn = click.option("--seed", type=int, default=None, help="override the experiment seed")(fn)
    fn = click.option("--server", type=str, default=None, help="remote service URL")(fn)
    return fn


@click.group()
def main() -> None:
    """Simulate gossip/discovery attacks and detect them from event traces."""


@main.command()
@_common_options
def simulate(config, out, seed, server) -> None:
    """Generate trace/discovery CSVs and a manifest."""
    _stage_command("simulate", config, out, seed, server)


@main.command()
@_common_options
def prepare(config, out, seed, server) -> None:
    """Bin, scale or tokenize, window, and split the simulated records."""
    _stage_command("prepare", config, out, seed, server)


@main.command()
@_common_options
def train(config, out, seed, server) -> None:
    """Train the forecaster on the prepared windows."""
    _stage_command("train", config, out, seed, server)


@main.command()
@_common_options
def detect(config, out, seed, server) -> None:
    """Score evaluation windows and write verdicts plus record labels."""
    _stage_command("detect", config, out, seed, server)


@main.command()
@_common_options
def evaluate(config, out, seed, server) -> None:
    """Compare predicted labels to ground truth and render the report."""
    _stage_command("evaluate", config, out, seed, server)


@main.command(name="run-experiment")
@click.argument("preset", required=False)
@_common_options
def run_experiment(
    preset: Optional[str],
    config: Optional[str],
    out: str,
    seed: Optional[int],
    server: Optional[str],
) -> None:
    """Run all stages for PRESET or for --config, writing into --out."""
    body = _load_config_file(config)
    if (preset is None) == (body is None):
        click.echo("give exactly one of PRESET or --config", err=True)
        sys.exit(EXIT_BAD_CONFIG)
    payload: dict = {"out_dir": out}
    if preset is not None:
        payload["preset"] = preset
    else:
        payload["config"] = body
    if seed is not None:
        payload["seed"] = seed
    result = _post(server, "/experiments/run", payload)
    click.echo(json.dumps(result, indent=2))


@main.command()
@click.option("--server", type=str, default=None, help="remote service URL")
def presets(server: Optional[str]) -> None:
    """List the built-in experiment presets."""
    try:
        response = _request(server, "GET", "/presets")
    except httpx.HTTPError as e:
        click.echo(f"request failed: {e}", err=True)
        sys.exit(EXIT_STAGE_FAILURE)
    if response.status_code >= 300:
        click.echo(f"error: {response.text}", err=True)
        sys.exit(EXIT_STAGE_FAILURE)
    click.echo(json.dumps(response.json(), indent=2))


@main.command()
@click.option("--host", default="127.0.0.1", show_default=True)
@click.option("--port", default=8000, show_default=True, type=int)
def serve(host: str, port: int) -> None:
    """Run the HTTP service under uvicorn (only when explicitly asked)."""
    import uvicorn

    from .service import app

    uvicorn.run(app, host=host, port=port)


if __name__ == "__main__":
    main()
