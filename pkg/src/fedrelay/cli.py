"""Operator CLI: run a scenario end-to-end, submit/inspect jobs on a
running system, export metrics.

Exit codes are a stable contract:
    0  job FINISHED
    2  bad input (missing/invalid bundle or config)
    3  never schedulable
    4  job ABORTED or FAILED
    5  unknown job id
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .guestfl import AppConfig
from .runtime import JobSpec, JobStatus
from .system import ScenarioConfig, SimSystem
from .tracking import export_csv

log = logging.getLogger("fedrelay.cli")

EXIT_OK = 0
EXIT_BAD_INPUT = 2
EXIT_UNSCHEDULABLE = 3
EXIT_ABORTED = 4
EXIT_UNKNOWN_ID = 5

_ERROR_EXIT = {
    "NeverSchedulable": EXIT_UNSCHEDULABLE,
    "UnknownJob": EXIT_UNKNOWN_ID,
    "DuplicateJobId": EXIT_BAD_INPUT,
    "UnknownApp": EXIT_BAD_INPUT,
    "ValueError": EXIT_BAD_INPUT,
}


class BundleError(Exception):
    pass


def load_job_bundle(job_path: str | Path) -> tuple[JobSpec, dict | None]:
    job_path = Path(job_path)
    job_file = job_path / "job.json"
    if not job_file.exists():
        raise BundleError(f"{job_file} not found")
    try:
        spec = JobSpec.from_dict(json.loads(job_file.read_text(encoding="utf-8")))
    except (ValueError, KeyError, json.JSONDecodeError) as exc:
        raise BundleError(f"invalid job.json: {exc}") from exc
    app = None
    app_file = job_path / "app.json"
    if app_file.exists():
        try:
            app = json.loads(app_file.read_text(encoding="utf-8"))
            AppConfig.from_dict(app)  # schema check
        except (ValueError, KeyError, json.JSONDecodeError) as exc:
            raise BundleError(f"invalid app.json: {exc}") from exc
    return spec, app


def load_scenario(path: str | Path) -> ScenarioConfig:
    path = Path(path)
    if path.is_dir():
        path = path / "scenario.json"
    if not path.exists():
        raise BundleError(f"{path} not found")
    try:
        return ScenarioConfig.load(path)
    except (ValueError, KeyError, json.JSONDecodeError) as exc:
        raise BundleError(f"invalid scenario: {exc}") from exc


def status_exit_code(status: JobStatus) -> int:
    return EXIT_OK if status.state.name == "FINISHED" else EXIT_ABORTED


def _print_event(event: dict, out) -> None:
    arrow = f"{event['from']} -> {event['to']}" if event["from"] else event["to"]
    reason = f"  ({event['reason']})" if event.get("reason") else ""
    print(f"[t={event['t_ms']}ms] {event['job_id']}: {arrow}{reason}", file=out)


def _run_in_sim(
    scenario: ScenarioConfig,
    spec: JobSpec,
    app: dict | None,
    run_root: str | None,
    out,
    max_ms: int = 600_000,
) -> int:
    system = SimSystem(scenario, run_root=run_root).boot()
    system.watch_events(lambda e: _print_event(e, out))
    try:
        system.submit(spec, app)
    except Exception as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=out)
        return _ERROR_EXIT.get(type(exc).__name__, EXIT_BAD_INPUT)
    status = system.run_until_terminal(spec.job_id, max_ms=max_ms)
    if not status.terminal:
        print(f"error: job {spec.job_id} did not reach a terminal state", file=out)
        return EXIT_ABORTED
    print(f"job {spec.job_id}: {status.state.name}", file=out)
    if status.failure_reason:
        print(f"reason: {status.failure_reason}", file=out)
    return status_exit_code(status)


# -- subcommands ----------------------------------------------------------------


def cmd_run(args, out) -> int:
    project = Path(args.project_path)
    try:
        scenario = load_scenario(args.config or project)
        spec, app = load_job_bundle(project)
    except BundleError as exc:
        print(f"error: {exc}", file=out)
        return EXIT_BAD_INPUT
    if args.mode == "sockets":
        from .sockets import run_project_sockets

        return run_project_sockets(scenario, spec, app, args.run_root, out)
    return _run_in_sim(scenario, spec, app, args.run_root, out)


def cmd_submit(args, out) -> int:
    try:
        spec, app = load_job_bundle(args.job_path)
    except BundleError as exc:
        print(f"error: {exc}", file=out)
        return EXIT_BAD_INPUT
    if args.host:  # control plane of a separately running system
        from .sockets import ControlClient

        client = ControlClient(args.host, args.port)
        try:
            return client.submit_and_stream(spec, app, out)
        finally:
            client.close()
    try:
        scenario = load_scenario(args.config)
    except BundleError as exc:
        print(f"error: {exc}", file=out)
        return EXIT_BAD_INPUT
    return _run_in_sim(scenario, spec, app, args.run_root, out)


def cmd_status(args, out) -> int:
    from .sockets import ControlClient

    client = ControlClient(args.host, args.port)
    try:
        status = client.status(args.job_id)
    except Exception as exc:
        print(f"error: {_error_type(exc)}: {exc}", file=out)
        return _ERROR_EXIT.get(_error_type(exc), EXIT_UNKNOWN_ID)
    finally:
        client.close()
    print(json.dumps(status.to_dict(), indent=2), file=out)
    return EXIT_OK


def cmd_abort(args, out) -> int:
    from .sockets import ControlClient

    client = ControlClient(args.host, args.port)
    try:
        status = client.abort(args.job_id, args.reason)
    except Exception as exc:
        print(f"error: {_error_type(exc)}: {exc}", file=out)
        return _ERROR_EXIT.get(_error_type(exc), EXIT_UNKNOWN_ID)
    finally:
        client.close()
    print(f"job {status.job_id}: {status.state.name}", file=out)
    return EXIT_OK


def cmd_export(args, out) -> int:
    run_root = Path(args.run_root)
    if not (run_root / args.job_id).exists():
        print(f"error: no run directory for job {args.job_id}", file=out)
        return EXIT_UNKNOWN_ID
    out_path = args.out or f"metrics_{args.tag}.csv"
    path = export_csv(run_root, args.job_id, args.tag, out_path)
    print(f"wrote {path}", file=out)
    return EXIT_OK


def cmd_serve(args, out) -> int:
    try:
        scenario = load_scenario(args.config)
    except BundleError as exc:
        print(f"error: {exc}", file=out)
        return EXIT_BAD_INPUT
    from .sockets import SocketSystem

    system = SocketSystem(scenario, run_root=args.run_root)
    system.start(args.host or "127.0.0.1", args.port)
    print(f"serving on {args.host or '127.0.0.1'}:{system.port}", file=out)
    try:
        system.wait()
    except KeyboardInterrupt:
        pass
    finally:
        system.shutdown()
    return EXIT_OK


def _error_type(exc: Exception) -> str:
    return getattr(exc, "remote_type", type(exc).__name__)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fedrelay")
    parser.add_argument("--log-level", default="WARNING")
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="run a whole project in one process")
    p_run.add_argument("project_path")
    p_run.add_argument("--config", help="scenario.json (defaults to <project>/scenario.json)")
    p_run.add_argument("--mode", choices=["sim", "sockets"], default="sim")
    p_run.add_argument("--run-root", default=None)
    p_run.set_defaults(fn=cmd_run)

    p_sub = sub.add_parser("submit", help="submit a job bundle")
    p_sub.add_argument("job_path")
    p_sub.add_argument("--config", help="scenario.json for self-hosted sim submit")
    p_sub.add_argument("--host", default=None, help="control host of a running system")
    p_sub.add_argument("--port", type=int, default=7700)
    p_sub.add_argument("--run-root", default=None)
    p_sub.set_defaults(fn=cmd_submit)

    p_status = sub.add_parser("status", help="query one job")
    p_status.add_argument("job_id")
    p_status.add_argument("--host", default="127.0.0.1")
    p_status.add_argument("--port", type=int, default=7700)
    p_status.set_defaults(fn=cmd_status)

    p_abort = sub.add_parser("abort", help="abort one job")
    p_abort.add_argument("job_id")
    p_abort.add_argument("--reason", default="operator abort")
    p_abort.add_argument("--host", default="127.0.0.1")
    p_abort.add_argument("--port", type=int, default=7700)
    p_abort.set_defaults(fn=cmd_abort)

    p_export = sub.add_parser("export", help="export one metric tag as CSV")
    p_export.add_argument("job_id")
    p_export.add_argument("tag")
    p_export.add_argument("--run-root", default="runs")
    p_export.add_argument("--out", default=None)
    p_export.set_defaults(fn=cmd_export)

    p_serve = sub.add_parser("serve", help="host a system over sockets")
    p_serve.add_argument("--config", required=True)
    p_serve.add_argument("--host", default="127.0.0.1")
    p_serve.add_argument("--port", type=int, default=7700)
    p_serve.add_argument("--run-root", default=None)
    p_serve.set_defaults(fn=cmd_serve)

    return parser


def main(argv: list[str] | None = None, out=None) -> int:
    out = out or sys.stdout
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=getattr(logging, args.log_level.upper(), logging.WARNING))
    return args.fn(args, out)


if __name__ == "__main__":
    sys.exit(main())
