"""Thin command-line client for the validation service.

Every subcommand builds a request, posts it to the service (an in-process
application instance by default, or a remote base URL via --server), and
writes the returned CSV/JSON artifacts.  Exit codes: 0 all checks passed,
1 configuration error, 2 bound failure or gating refusal, 3 internal
error.

Seed resolution: --seed flag, then the QSDE_SEED environment variable,
then the config file, then the documented default.
"""

from __future__ import annotations

import json
import os
import sys
from pathlib import Path

import click

from .prng import DEFAULT_SEED, DEFAULT_STREAM
from .reporting import json_text

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_BOUND = 2
EXIT_INTERNAL = 3


class ServiceClient:
    """Posts to a remote server when given a base URL, otherwise drives the
    application in-process through the ASGI test transport."""

    def __init__(self, server: str | None = None):
        if server:
            import httpx
            self._client = httpx.Client(base_url=server, timeout=600.0)
        else:
            from fastapi.testclient import TestClient

            from .service import app
            self._client = TestClient(app)

    def post(self, path: str, payload: dict):
        resp = self._client.post(path, json=payload)
        try:
            body = resp.json()
        except Exception:
            body = {"detail": {"category": "internal", "message": resp.text}}
        return resp.status_code, body

    def get(self, path: str):
        resp = self._client.get(path)
        return resp.status_code, resp.json()


def _load_config(path: str | None) -> dict:
    if not path:
        return {}
    try:
        return json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise click.ClickException(f"cannot read config {path}: {exc}")


def _resolve_seed(flag_seed, flag_stream, config: dict):
    seed = flag_seed
    if seed is None:
        env = os.environ.get("QSDE_SEED")
        if env is not None:
            try:
                seed = int(env)
            except ValueError:
                raise click.ClickException(f"QSDE_SEED must be an integer, got {env!r}")
    if seed is None:
        seed = config.get("seed", DEFAULT_SEED)
    stream = flag_stream if flag_stream is not None else config.get(
        "stream_id", DEFAULT_STREAM)
    return int(seed), int(stream)


def _fail_from_response(status: int, body: dict) -> int:
    detail = body.get("detail", {})
    if isinstance(detail, dict):
        category = detail.get("category", "internal")
        message = detail.get("message", str(body))
    else:
        category, message = "config", str(detail)
    click.echo(f"error ({category}): {message}", err=True)
    if category == "config":
        return EXIT_CONFIG
    if category == "bound":
        return EXIT_BOUND
    return EXIT_INTERNAL


def _dispatch(ctx, path: str, payload: dict, out: str | None,
              csv_key: str = "csv") -> None:
    client: ServiceClient = ctx.obj["client"]
    status, body = client.post(path, payload)
    if status != 200:
        sys.exit(_fail_from_response(status, body))
    if out and csv_key in body and body[csv_key] is not None:
        Path(out).write_text(body[csv_key])
    shown = {k: v for k, v in body.items() if k != csv_key}
    click.echo(json_text(shown), nl=False)
    sys.exit(EXIT_OK if body.get("passed", True) else EXIT_BOUND)


@click.group()
@click.option("--server", default=None, help="remote service base URL "
              "(default: run the service in-process)")
@click.option("--config", "config_path", default=None,
              help="JSON config file; flags override its values")
@click.option("--seed", type=int, default=None)
@click.option("--stream-id", type=int, default=None)
@click.pass_context
def main(ctx, server, config_path, seed, stream_id):
    """Bound-validation suite for amplitude-encoded linear-SDE solvers."""
    config = _load_config(config_path)
    srv = server or config.get("server")
    resolved_seed, resolved_stream = _resolve_seed(seed, stream_id, config)
    ctx.ensure_object(dict)
    ctx.obj["client"] = ServiceClient(srv)
    ctx.obj["config"] = config
    ctx.obj["seed"] = resolved_seed
    ctx.obj["stream_id"] = resolved_stream


def _base_payload(ctx, model: str) -> dict:
    payload = {"model": model, "seed": ctx.obj["seed"],
               "stream_id": ctx.obj["stream_id"]}
    problem = ctx.obj["config"].get("problem")
    if problem is not None:
        payload["problem"] = problem
    return payload


@main.command("validate-bounds")
@click.option("--model", default="ou")
@click.option("--samples", type=int, default=33)
@click.option("--out", default=None)
@click.pass_context
def validate_bounds_cmd(ctx, model, samples, out):
    payload = _base_payload(ctx, model)
    payload["samples"] = samples
    _dispatch(ctx, "/validate-bounds", payload, out)


@main.command("dyson-error")
@click.option("--model", default="ou")
@click.option("--eps", multiple=True, type=float, default=(1e-2,))
@click.option("--k-offset", type=int, default=0,
              help="shift the chosen series order (negative control)")
@click.option("--out", default=None)
@click.pass_context
def dyson_error_cmd(ctx, model, eps, k_offset, out):
    payload = _base_payload(ctx, model)
    payload.update({"eps": list(eps), "k_offset": k_offset})
    _dispatch(ctx, "/dyson-error", payload, out)


@main.command("covariance-error")
@click.option("--model", default="ou")
@click.option("--eps", multiple=True, type=float, default=(1e-1,))
@click.option("--k-offset", type=int, default=0)
@click.option("--out", default=None)
@click.pass_context
def covariance_error_cmd(ctx, model, eps, k_offset, out):
    payload = _base_payload(ctx, model)
    payload.update({"eps": list(eps), "k_offset": k_offset})
    _dispatch(ctx, "/covariance-error", payload, out)


@main.command("history")
@click.option("--model", default="ou")
@click.option("--eps", type=float, default=0.1)
@click.option("--padded/--no-padded", default=False)
@click.option("--R", "padding", type=int, default=0)
@click.option("--sample", type=int, default=1)
@click.option("--qlss-mode", type=click.Choice(["honest", "adversarial"]),
              default="honest")
@click.option("--sqrt-mode", type=click.Choice(["honest", "adversarial"]),
              default="honest")
@click.option("--out", default=None, help="CSV of per-step deviations")
@click.pass_context
def history_cmd(ctx, model, eps, padded, padding, sample, qlss_mode, sqrt_mode, out):
    payload = _base_payload(ctx, model)
    payload.update({"eps": eps, "padded": padded, "R": padding,
                    "sample": sample, "qlss_mode": qlss_mode,
                    "sqrt_mode": sqrt_mode})
    _dispatch(ctx, "/history", payload, out)


@main.command("em-convergence")
@click.option("--model", default="ou")
@click.option("--r-list", default="8,16,32,64,128")
@click.option("--paths", type=int, default=200)
@click.option("--out", default=None)
@click.pass_context
def em_convergence_cmd(ctx, model, r_list, paths, out):
    payload = _base_payload(ctx, model)
    try:
        rs = [int(v) for v in r_list.split(",") if v]
    except ValueError:
        raise click.ClickException(f"bad --r-list {r_list!r}")
    payload.update({"r_list": rs, "paths": paths})
    _dispatch(ctx, "/em-convergence", payload, out)


@main.command("estimate")
@click.option("--algorithm", type=click.Choice(["multi", "terminal", "em"]),
              default="multi")
@click.option("--model", default="ou")
@click.option("--observable", required=True,
              help="JSON file or inline JSON: {d, entries:[{idx:[..], val}]}")
@click.option("--eps", type=float, default=None)
@click.option("--eps-prime-target", type=float, default=None)
@click.option("--delta", type=float, default=0.2)
@click.option("--repeats", type=int, default=1)
@click.option("--oe-mode", type=click.Choice(["exact", "shot"]), default="shot")
@click.option("--out", default=None, help="write the full report JSON here")
@click.pass_context
def estimate_cmd(ctx, algorithm, model, observable, eps, eps_prime_target,
                 delta, repeats, oe_mode, out):
    try:
        is_file = Path(observable).is_file()
    except OSError:
        is_file = False
    if is_file:
        obs = json.loads(Path(observable).read_text())
    else:
        try:
            obs = json.loads(observable)
        except json.JSONDecodeError:
            raise click.ClickException(
                f"--observable is neither a file nor valid JSON: {observable!r}")
    payload = _base_payload(ctx, model)
    payload.update({"algorithm": algorithm, "observable": obs, "eps": eps,
                    "eps_prime_target": eps_prime_target, "delta": delta,
                    "repeats": repeats, "oe_mode": oe_mode})
    client: ServiceClient = ctx.obj["client"]
    status, body = client.post("/estimate", payload)
    if status != 200:
        sys.exit(_fail_from_response(status, body))
    if out:
        Path(out).write_text(json_text(body))
    click.echo(json_text(body), nl=False)
    sys.exit(EXIT_OK if body.get("passed", True) else EXIT_BOUND)


@main.command("check-khintchine")
@click.option("--kmax", type=int, default=3)
@click.option("--lmax", type=int, default=5)
@click.option("--out", default=None)
@click.pass_context
def check_khintchine_cmd(ctx, kmax, lmax, out):
    _dispatch(ctx, "/check-khintchine", {"kmax": kmax, "lmax": lmax}, out)


@main.command("report")
@click.option("--model", default="ou")
@click.option("--out", default=None, help="write the report JSON here")
@click.pass_context
def report_cmd(ctx, model, out):
    payload = _base_payload(ctx, model)
    client: ServiceClient = ctx.obj["client"]
    status, body = client.post("/report", payload)
    if status != 200:
        sys.exit(_fail_from_response(status, body))
    if out:
        Path(out).write_text(json_text(body))
    click.echo(json_text(body), nl=False)
    sys.exit(EXIT_OK if body.get("passed", True) else EXIT_BOUND)


@main.command("serve")
@click.option("--host", default="127.0.0.1")
@click.option("--port", type=int, default=8000)
def serve_cmd(host, port):
    """Run the validation service."""
    import uvicorn

    from .service import app
    uvicorn.run(app, host=host, port=port)


if __name__ == "__main__":
    main()
