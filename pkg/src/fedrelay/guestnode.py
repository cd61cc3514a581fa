"""Standalone guest node process: dials a worker's loopback guest listener
and runs the pull/push client loop until the run finishes."""

from __future__ import annotations

import argparse
import json
import sys

from .guestfl import AppConfig
from .sockets import run_guest_node_socket


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(prog="fedrelay-guestnode")
    parser.add_argument("--site", required=True)
    parser.add_argument("--host", default="127.0.0.1")
    parser.add_argument("--port", type=int, required=True)
    group = parser.add_mutually_exclusive_group(required=True)
    group.add_argument("--app-json", help="app config as an inline JSON string")
    group.add_argument("--app-file", help="path to app.json")
    args = parser.parse_args(argv)
    if args.app_json:
        cfg = AppConfig.from_dict(json.loads(args.app_json))
    else:
        cfg = AppConfig.load(args.app_file)
    run_guest_node_socket(args.site, cfg, args.host, args.port)
    return 0


if __name__ == "__main__":
    sys.exit(main())
