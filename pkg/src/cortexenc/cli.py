"""Command-line entry point.

The CLI is a thin client over the HTTP service: every subcommand posts a
StageRequest, either to a remote server (--server / CORTEXENC_SERVER) or to
the app mounted in-process, so CLI and service runs are literally the same
code path. On success the stage manifest is printed to stdout; on failure an
error JSON goes to stderr and the exit code is non-zero.
"""

from __future__ import annotations

import argparse
import asyncio
import json
import os
import sys
from pathlib import Path

import httpx

from . import __version__
from .pipeline import STAGES


def _env_threads() -> int | None:
    raw = os.environ.get("CORTEXENC_THREADS")
    if raw is None:
        return None
    try:
        return int(raw)
    except ValueError:
        raise SystemExit(f"CORTEXENC_THREADS={raw!r} is not an integer")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cortexenc",
        description="representation building, brain alignment, encoding, and group stats",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, metavar="<subcommand>")

    for stage in sorted(STAGES):
        p = sub.add_parser(stage, help=f"run the {stage} stage")
        p.add_argument("--config", required=True, help="path to the stage's JSON config")
        p.add_argument("--out", default=".", help="output directory (default: cwd)")
        p.add_argument("--threads", type=int, default=None,
                       help="worker threads (default: CORTEXENC_THREADS or 1)")
        p.add_argument("--seed", type=int, default=None,
                       help="override the config's random seed")
        p.add_argument("--server", default=None,
                       help="base URL of a running service (default: CORTEXENC_SERVER, "
                            "else run in-process)")

    serve = sub.add_parser("serve", help="start the HTTP service")
    serve.add_argument("--host", default="127.0.0.1")
    serve.add_argument("--port", type=int, default=8000)
    return parser


def _post_stage(server: str | None, stage: str, payload: dict) -> httpx.Response:
    if server:
        with httpx.Client(base_url=server, timeout=None) as client:
            return client.post(f"/stages/{stage}", json=payload)

    from .service import app  # imported lazily so --help stays fast

    async def go() -> httpx.Response:
        transport = httpx.ASGITransport(app=app)
        async with httpx.AsyncClient(transport=transport, base_url="http://cortexenc.local",
                                     timeout=None) as client:
            return await client.post(f"/stages/{stage}", json=payload)

    return asyncio.run(go())


def _fail(exc_type: str, message: str) -> int:
    print(json.dumps({"error": {"type": exc_type, "message": message}}), file=sys.stderr)
    return 1


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)

    if args.command == "serve":
        import uvicorn

        from .service import app

        uvicorn.run(app, host=args.host, port=args.port)
        return 0

    try:
        config = json.loads(Path(args.config).read_text(encoding="utf-8"))
    except OSError as e:
        return _fail(type(e).__name__, f"cannot read config {args.config}: {e}")
    except json.JSONDecodeError as e:
        return _fail("FormatError", f"{args.config} is not valid JSON: {e}")
    if not isinstance(config, dict):
        return _fail("SchemaError", f"{args.config}: top level must be a JSON object")

    payload = {
        "config": config,
        "out_dir": args.out,
        "threads": args.threads if args.threads is not None else _env_threads(),
        "seed": args.seed,
    }
    server = args.server or os.environ.get("CORTEXENC_SERVER")
    try:
        resp = _post_stage(server, args.command, payload)
    except httpx.HTTPError as e:
        return _fail(type(e).__name__, f"cannot reach {server}: {e}")

    body = resp.json()
    if resp.status_code != 200:
        err = body.get("error", {"type": "HTTPError", "message": str(body)})
        print(json.dumps({"error": err}), file=sys.stderr)
        return 1
    print(json.dumps(body, indent=2, sort_keys=True))
    return 0


if __name__ == "__main__":
    sys.exit(main())
