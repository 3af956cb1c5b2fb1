"""Command line launcher: build a backend, prove it scores, then serve."""

from __future__ import annotations

import argparse
import os
import sys

from .app import create_app
from .backends import BackendError, BridgeConfig, build_backend

TOKEN_ENV_VAR = "COAT_BRIDGE_TOKEN"


def parse_args(argv: list[str] | None = None) -> BridgeConfig:
    parser = argparse.ArgumentParser(
        prog="coat-bridge",
        description="Serve per-token log-likelihoods of a language model "
        "over POST /score and GET /health.",
    )
    parser.add_argument(
        "--model",
        required=True,
        help="model identifier; use stub:<table.json> to replay a frozen table",
    )
    parser.add_argument("--device", default="cpu", help="device hint for the model")
    parser.add_argument("--host", default="127.0.0.1")
    parser.add_argument("--port", type=int, default=8900)
    parser.add_argument("--max-concurrency", type=int, default=4)
    args = parser.parse_args(argv)
    return BridgeConfig(
        model=args.model,
        device=args.device,
        host=args.host,
        port=args.port,
        max_concurrency=args.max_concurrency,
        token=os.environ.get(TOKEN_ENV_VAR),
    )


def serve(config: BridgeConfig) -> None:
    """Load, self-check, and run until interrupted. A backend that cannot
    produce teacher-forced log-likelihoods aborts before the port opens."""
    import uvicorn

    backend = build_backend(config)
    backend.self_check()
    app = create_app(config, backend)
    uvicorn.run(app, host=config.host, port=config.port)


def main(argv: list[str] | None = None) -> int:
    config = parse_args(argv)
    try:
        serve(config)
    except BackendError as exc:
        print(f"refusing to start: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
