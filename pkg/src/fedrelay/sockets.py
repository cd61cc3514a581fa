"""Socket transport: the framed wire protocol over real TCP.

One listening endpoint on the server host carries every site's control and
job traffic; site agents open a single connection each and multiplex their
workers over it, so the relay topology matches the simulator's star.  The
same control processes and worker classes run here on the wall clock,
driven by small ticker threads.  Guest nodes may run in-process, as a
socket-client thread, or as a separate process dialing the worker's
loopback guest listener.
"""

from __future__ import annotations

import json
import socket
import subprocess
import sys
import threading
import time
from pathlib import Path
from typing import Callable

from .guestfl import AppConfig, GuestNode
from .reliable import ReliableConfig, ReliableMessenger, wait_for_call
from .runtime import (
    ClientControlProcess,
    JobRecord,
    JobSpec,
    JobStatus,
    ServerControlProcess,
    heartbeat_envelope,
)
from .system import ClientWorker, ScenarioConfig, ServerWorker
from .tracking import MetricSink
from .wire import (
    Envelope,
    FrameReader,
    IdSource,
    MessageKind,
    SiteAddress,
    Truncated,
    decode_envelope,
    encode_envelope,
    frame_payload,
    unframe_payload,
)

TICK_S = 0.002


def wall_clock_ms() -> int:
    return int(time.monotonic() * 1000)


class RemoteJobError(Exception):
    def __init__(self, remote_type: str, message: str):
        super().__init__(message)
        self.remote_type = remote_type


class FrameConn:
    """One TCP connection carrying whole frames; writes are locked."""

    def __init__(self, sock: socket.socket, on_env: Callable[[Envelope], None], name: str = ""):
        self.sock = sock
        self.name = name
        self.on_env = on_env
        self._wlock = threading.Lock()
        self._reader = threading.Thread(target=self._read_loop, daemon=True)
        self.closed = False

    def start(self) -> None:
        self._reader.start()

    def send_env(self, env: Envelope) -> bool:
        if self.closed:
            return False
        try:
            with self._wlock:
                self.sock.sendall(encode_envelope(env))
            return True
        except OSError:
            self.close()
            return False

    def send_frame(self, frame: bytes) -> bool:
        if self.closed:
            return False
        try:
            with self._wlock:
                self.sock.sendall(frame)
            return True
        except OSError:
            self.close()
            return False

    def _read_loop(self) -> None:
        reader = FrameReader()
        try:
            while not self.closed:
                data = self.sock.recv(65536)
                if not data:
                    break
                for frame in reader.feed(data):
                    try:
                        env = decode_envelope(frame)
                    except Exception:
                        continue  # corrupt frame; drop
                    self.on_env(env)
        except OSError:
            pass
        finally:
            self.close()

    def close(self) -> None:
        if self.closed:
            return
        self.closed = True
        try:
            self.sock.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        self.sock.close()


class _Ticker:
    def __init__(self, fn: Callable[[int], None]):
        self._fn = fn
        self._stop = threading.Event()
        self._thread = threading.Thread(target=self._loop, daemon=True)

    def start(self) -> None:
        self._thread.start()

    def _loop(self) -> None:
        while not self._stop.is_set():
            self._fn(wall_clock_ms())
            self._stop.wait(TICK_S)

    def stop(self) -> None:
        self._stop.set()


class _Services:
    """What the worker classes expect from their hosting system."""

    def __init__(self, scenario: ScenarioConfig, run_root: Path):
        self.scenario = scenario
        self.run_root = run_root
        self.ids = IdSource()
        self.clock = wall_clock_ms
        self._file_lock = threading.Lock()

    def write_bridge_entry(self, job_id: str, site: str, entry: dict) -> None:
        path = self.run_root / job_id / site / "bridge.jsonl"
        path.parent.mkdir(parents=True, exist_ok=True)
        record = {"t_ms": self.clock(), **entry}
        with self._file_lock, open(path, "a", encoding="utf-8") as fh:
            fh.write(json.dumps(record, sort_keys=True) + "\n")


def _recv_framed(sock: socket.socket, buf: bytes) -> tuple[bytes, bytes]:
    """Read one payload-framed body; returns (body, remaining buffer)."""
    while True:
        try:
            body, end = unframe_payload(buf)
            return body, buf[end:]
        except Truncated:
            data = sock.recv(65536)
            if not data:
                raise ConnectionError("peer closed mid-frame")
            buf += data


class ServerAgent:
    """Server host over TCP: hub, SCP, metric sink, server workers."""

    def __init__(self, scenario: ScenarioConfig, run_root: str | Path | None = None):
        self.scenario = scenario
        self.run_root = Path(run_root if run_root is not None else scenario.run_root)
        self.run_root.mkdir(parents=True, exist_ok=True)
        self.system = _Services(scenario, self.run_root)
        self.site = "server"
        self.lock = threading.RLock()
        self.conns_by_site: dict[str, FrameConn] = {}
        self.workers: dict[str, ServerWorker] = {}
        self.events: list[dict] = []
        self.dropped = 0
        self.scp_messenger = ReliableMessenger(
            SiteAddress("server"),
            self.send_env,
            wall_clock_ms,
            self.system.ids,
            config=ReliableConfig.from_dict(scenario.reliable),
        )
        self.sink = MetricSink(self.run_root, wall_clock_ms, self.send_env, self.system.ids)
        self.scp = ServerControlProcess(
            self.scp_messenger,
            wall_clock_ms,
            sites={name: slots for name, slots in scenario.sites},
            apps=scenario.apps,
            heartbeat_ms=scenario.heartbeat_ms,
            allow_direct=False,  # sockets mode relays everything through the hub
            reliable_defaults=ReliableConfig.from_dict(scenario.reliable),
            on_event=self._on_event,
            server_worker_factory=self._spawn_server_worker,
            on_job_terminal=self._on_terminal,
        )
        self._listener: socket.socket | None = None
        self._ticker = _Ticker(self.on_tick)
        self.port: int | None = None
        self._stopping = False

    def _spawn_server_worker(self, record: JobRecord) -> "SocketServerWorker":
        worker = SocketServerWorker(self, record)
        self.workers[record.spec.job_id] = worker
        return worker

    def _on_event(self, job_id: str, frm: str, to: str, reason: str, t_ms: int) -> None:
        event = {"t_ms": t_ms, "job_id": job_id, "from": frm, "to": to, "reason": reason}
        self.events.append(event)
        if to == "SUBMITTED":
            self.sink.register_job(job_id)
        path = self.run_root / job_id
        path.mkdir(parents=True, exist_ok=True)
        with open(path / "events.jsonl", "a", encoding="utf-8") as fh:
            fh.write(json.dumps(event, sort_keys=True) + "\n")

    def _on_terminal(self, record: JobRecord) -> None:
        self.sink.mark_terminal(record.spec.job_id)
        worker = self.workers.pop(record.spec.job_id, None)
        if record.history is None and worker is not None:
            record.history = worker.capture_history()
        if record.history is not None:
            from .guestfl import write_history

            write_history(self.run_root / record.spec.job_id / "history.json", record.history)

    # -- transport -----------------------------------------------------------

    def start(self, host: str = "127.0.0.1", port: int = 0) -> None:
        self._listener = socket.create_server((host, port))
        self.port = self._listener.getsockname()[1]
        threading.Thread(target=self._accept_loop, daemon=True).start()
        self._ticker.start()

    def _accept_loop(self) -> None:
        while not self._stopping:
            try:
                sock, _addr = self._listener.accept()
            except OSError:
                return
            sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            conn = FrameConn(sock, lambda env: None)
            conn.on_env = lambda env, c=conn: self._inbound(env, c)
            conn.start()

    def _inbound(self, env: Envelope, conn: FrameConn) -> None:
        self.conns_by_site[env.src.site] = conn
        with self.lock:
            self.handle_env(env)

    def send_env(self, env: Envelope) -> bool:
        if env.dst.site == "server":
            with self.lock:
                self.handle_env(env)
            return True
        conn = self.conns_by_site.get(env.dst.site)
        return conn is not None and conn.send_env(env)

    def handle_env(self, env: Envelope) -> None:
        if env.dst.site != "server":  # relay between sites
            conn = self.conns_by_site.get(env.dst.site)
            if conn is None or not conn.send_env(env):
                self.dropped += 1
            return
        if env.kind == MessageKind.HEARTBEAT:
            self.scp.on_heartbeat(env.src.site)
            return
        if env.kind == MessageKind.METRIC:
            self.sink.handle(env)
            return
        if env.dst.worker:
            worker = self.workers.get(env.dst.worker)
            if worker is None:
                self.dropped += 1
                return
            worker.messenger.on_frame(env)
            return
        self.scp_messenger.on_frame(env)

    def on_tick(self, now_ms: int) -> None:
        with self.lock:
            self.scp.on_tick(now_ms)
            self.scp_messenger.on_tick(now_ms)
            for worker in list(self.workers.values()):
                worker.on_tick(now_ms)

    def shutdown(self) -> None:
        self._stopping = True
        self._ticker.stop()
        if self._listener is not None:
            self._listener.close()
        for conn in list(self.conns_by_site.values()):
            conn.close()


class SocketServerWorker(ServerWorker):
    """ServerWorker whose guest link may sit behind a loopback listener."""

    def __init__(self, agent: ServerAgent, record: JobRecord):
        self._exec_lock = threading.Lock()
        self._link_listener: socket.socket | None = None
        self._link_conns: dict[int, socket.socket] = {}
        self.link_port: int | None = None
        super().__init__(agent, record)
        self.messenger.serve(
            self.lgc.handle_forward,
            kind=MessageKind.GUEST_FWD,
            executor=self._forward_executor,
        )
        if record.spec.bridge.get("link_mode") == "socket":
            self._start_link_listener()

    def _forward_executor(self, msg_id: str, payload: bytes, complete) -> None:
        # off the reader thread: guest-link I/O must not block the agent
        def work():
            try:
                with self._exec_lock:
                    result = self.lgc.handle_forward(payload)
            except Exception as exc:
                complete(f"{type(exc).__name__}: {exc}".encode(), ok=False)
            else:
                complete(result, ok=True)

        threading.Thread(target=work, daemon=True).start()

    def _start_link_listener(self) -> None:
        self._link_listener = socket.create_server(("127.0.0.1", 0))
        self.link_port = self._link_listener.getsockname()[1]

        def serve_conn(sock: socket.socket) -> None:
            buf = b""
            try:
                while True:
                    body, buf = _recv_framed(sock, buf)
                    response = self.link.handle(body)
                    sock.sendall(frame_payload(response))
            except (OSError, ConnectionError):
                pass
            finally:
                sock.close()

        def accept_loop() -> None:
            while not self.stopped:
                try:
                    sock, _ = self._link_listener.accept()
                except OSError:
                    return
                threading.Thread(target=serve_conn, args=(sock,), daemon=True).start()

        threading.Thread(target=accept_loop, daemon=True).start()

    def _link_request(self, stream_id: int, body: bytes) -> bytes:
        if self._link_listener is None:
            return self.link.handle(body)
        conn = self._link_conns.get(stream_id)
        if conn is None:
            conn = socket.create_connection(("127.0.0.1", self.link_port))
            conn.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            self._link_conns[stream_id] = conn
        conn.sendall(frame_payload(body))
        response, _rest = _recv_framed(conn, b"")
        return response

    def stop(self, reason: str) -> None:
        super().stop(reason)
        if self._link_listener is not None:
            self._link_listener.close()
        for conn in self._link_conns.values():
            conn.close()


class SiteAgent:
    """One client host over TCP: a single connection, the CCP, its workers."""

    def __init__(
        self,
        site: str,
        scenario: ScenarioConfig,
        host: str,
        port: int,
        run_root: str | Path | None = None,
    ):
        self.site = site
        self.scenario = scenario
        root = Path(run_root if run_root is not None else scenario.run_root)
        self.system = _Services(scenario, root)
        self.lock = threading.RLock()
        sock = socket.create_connection((host, port))
        sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        self.conn = FrameConn(sock, self._inbound, name=site)
        self.ccp_messenger = ReliableMessenger(
            SiteAddress(site), self.send_env, wall_clock_ms, self.system.ids
        )
        self.ccp = ClientControlProcess(
            site,
            self.ccp_messenger,
            wall_clock_ms,
            self._spawn_worker,
            heartbeat_ms=scenario.heartbeat_ms,
            send_heartbeat=self._heartbeat,
        )
        self._ticker = _Ticker(self.on_tick)
        self.conn.start()
        self._ticker.start()

    def _spawn_worker(self, site: str, deploy: dict) -> "SocketClientWorker":
        return SocketClientWorker(self, deploy)

    def _heartbeat(self) -> None:
        self.conn.send_env(heartbeat_envelope(self.system.ids, self.site))

    def _inbound(self, env: Envelope) -> None:
        with self.lock:
            self.handle_env(env)

    def send_env(self, env: Envelope) -> bool:
        if env.dst.site == self.site:
            with self.lock:
                self.handle_env(env)
            return True
        return self.conn.send_env(env)

    def handle_env(self, env: Envelope) -> None:
        if env.dst.worker:
            worker = self.ccp.workers.get(env.dst.worker)
            if worker is None:
                return
            handled = worker.messenger.on_frame(env)
            if not handled and env.kind == MessageKind.ACK and worker.writer is not None:
                worker.writer.on_ack(env)
            return
        self.ccp_messenger.on_frame(env)

    def on_tick(self, now_ms: int) -> None:
        with self.lock:
            self.ccp.on_tick(now_ms)
            self.ccp_messenger.on_tick(now_ms)
            for worker in list(self.ccp.workers.values()):
                worker.on_tick(now_ms)

    def shutdown(self) -> None:
        self._ticker.stop()
        with self.lock:
            self.ccp.stop_all()
        self.conn.close()


class SocketClientWorker(ClientWorker):
    """ClientWorker with an optional loopback listener for external guest
    nodes (thread or separate process)."""

    def __init__(self, agent: SiteAgent, deploy: dict):
        self.bridge_cfg = dict(deploy["spec"].get("bridge", {}))
        self._guest_listener: socket.socket | None = None
        self._guest_proc: subprocess.Popen | None = None
        self.lgs_port: int | None = None
        super().__init__(agent, deploy)

    def _handle_control(self, payload: bytes) -> bytes:
        obj = json.loads(payload.decode("utf-8"))
        mode = self.bridge_cfg.get("node_mode", "inproc")
        if obj.get("event") != "run" or self.state != "spawned" or mode == "inproc":
            return super()._handle_control(payload)
        self.state = "running"
        self.lgs.set_running(True)
        self._start_guest_listener()
        if mode == "thread":
            threading.Thread(target=self._run_node_socket, daemon=True).start()
        elif mode == "subprocess":
            self._spawn_node_subprocess()
        else:
            raise ValueError(f"unknown guest node_mode {mode!r}")
        return b'{"ok":true}'

    # -- the LGS socket front-end (loopback only) ------------------------------

    def _start_guest_listener(self) -> None:
        self._guest_listener = socket.create_server(("127.0.0.1", int(self.bridge_cfg.get("lgs_port", 0))))
        self.lgs_port = self._guest_listener.getsockname()[1]

        def serve_conn(sock: socket.socket) -> None:
            with self.node.lock:
                try:
                    stream = self.lgs.connect()
                except Exception:
                    sock.close()
                    return
            buf = b""
            clean_end = False
            try:
                while True:
                    try:
                        body, buf = _recv_framed(sock, buf)
                    except ConnectionError:
                        clean_end = True
                        break
                    done = threading.Event()
                    box: dict = {}

                    def on_reply(reply_body: bytes, _d=done, _b=box) -> None:
                        _b["reply"] = reply_body
                        _d.set()

                    def on_error(kind: str, detail: str, _d=done, _b=box) -> None:
                        _b["error"] = (kind, detail)
                        _d.set()

                    with self.node.lock:
                        stream.request(body, on_reply, on_error)
                    done.wait(300.0)
                    if "reply" not in box:
                        if "error" in box:
                            with self.node.lock:
                                if self.state == "running":
                                    self._fail(*box["error"])
                        return
                    sock.sendall(frame_payload(box["reply"]))
            except OSError:
                pass
            finally:
                stream.close()
                sock.close()
                if clean_end:
                    with self.node.lock:
                        if self.state == "running":
                            # clean disconnect = the guest session ended
                            self.guest.finished = True
                            self._finish()

        def accept_loop() -> None:
            while self.state == "running":
                try:
                    sock, _ = self._guest_listener.accept()
                except OSError:
                    return
                sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
                threading.Thread(target=serve_conn, args=(sock,), daemon=True).start()

        threading.Thread(target=accept_loop, daemon=True).start()

    def _run_node_socket(self) -> None:
        run_guest_node_socket(self.site, self.app_cfg, "127.0.0.1", self.lgs_port)

    def _spawn_node_subprocess(self) -> None:
        self._guest_proc = subprocess.Popen(
            [
                sys.executable,
                "-m",
                "fedrelay.guestnode",
                "--site",
                self.site,
                "--host",
                "127.0.0.1",
                "--port",
                str(self.lgs_port),
                "--app-json",
                json.dumps(self._deploy_app),
            ],
        )

    def stop(self, reason: str) -> None:
        super().stop(reason)
        if self._guest_listener is not None:
            self._guest_listener.close()
        if self._guest_proc is not None and self._guest_proc.poll() is None:
            self._guest_proc.terminate()


def run_guest_node_socket(site: str, app_cfg: AppConfig, host: str, port: int) -> None:
    """Blocking guest node loop over a framed TCP connection; used both by
    thread deployment and by the ``fedrelay.guestnode`` subprocess entry."""
    node = GuestNode(site, app_cfg)
    conn = socket.create_connection((host, port))
    conn.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
    buf = b""

    def exchange(body: bytes) -> bytes:
        nonlocal buf
        conn.sendall(frame_payload(body))
        response, rest = _recv_framed(conn, buf)
        buf = rest
        return response

    try:
        while not node.finished:
            task_body = exchange(node.pull_body())
            push = node.handle_task(task_body)
            if push is not None:
                exchange(push)
            elif not node.finished:
                time.sleep(0.005)  # "none": try again shortly
    finally:
        conn.close()


class ControlClient:
    """CLI-side control plane over one TCP connection."""

    def __init__(self, host: str, port: int, timeout_s: float = 30.0):
        self.timeout_s = timeout_s
        sock = socket.create_connection((host, port), timeout=10.0)
        sock.settimeout(None)
        sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        self.messenger = ReliableMessenger(
            SiteAddress("opclient"),
            lambda env: self.conn.send_env(env),
            wall_clock_ms,
            IdSource(),
            config=ReliableConfig(retry_ms=200, query_ms=400, send_deadline_ms=10_000),
        )
        self.conn = FrameConn(sock, self.messenger.on_frame, name="opclient")
        self.conn.start()
        self._ticker = _Ticker(self.messenger.on_tick)
        self._ticker.start()

    def _call(self, kind: MessageKind, job_id: str, payload: dict) -> dict:
        call = self.messenger.call(
            SiteAddress("server"), json.dumps(payload).encode(), kind=kind, job_id=job_id
        )
        wait_for_call(call, self.timeout_s)
        obj = json.loads(call.result_or_raise().decode("utf-8"))
        if "error" in obj:
            raise RemoteJobError(obj["error"]["type"], obj["error"]["message"])
        return obj

    def submit(self, spec: JobSpec, app: dict | None) -> JobStatus:
        obj = self._call(MessageKind.SUBMIT, spec.job_id, {"spec": spec.to_dict(), "app": app})
        return JobStatus.from_dict(obj["status"])

    def status(self, job_id: str) -> JobStatus:
        obj = self._call(MessageKind.STATUS, job_id, {"job_id": job_id})
        return JobStatus.from_dict(obj["status"])

    def abort(self, job_id: str, reason: str = "operator abort") -> JobStatus:
        obj = self._call(MessageKind.ABORT, job_id, {"job_id": job_id, "reason": reason})
        return JobStatus.from_dict(obj["status"])

    def submit_and_stream(self, spec: JobSpec, app: dict | None, out, max_s: float = 600.0) -> int:
        from .cli import EXIT_ABORTED, EXIT_BAD_INPUT, _ERROR_EXIT, status_exit_code

        try:
            status = self.submit(spec, app)
        except RemoteJobError as exc:
            print(f"error: {exc.remote_type}: {exc}", file=out)
            return _ERROR_EXIT.get(exc.remote_type, EXIT_BAD_INPUT)
        print(f"job {spec.job_id}: {status.state.name}", file=out)
        last = status.state
        deadline = time.monotonic() + max_s
        while not status.terminal and time.monotonic() < deadline:
            time.sleep(0.05)
            status = self.status(spec.job_id)
            if status.state != last:
                print(f"job {spec.job_id}: {last.name} -> {status.state.name}", file=out)
                last = status.state
        if not status.terminal:
            print("error: timed out waiting for a terminal state", file=out)
            return EXIT_ABORTED
        if status.failure_reason:
            print(f"reason: {status.failure_reason}", file=out)
        return status_exit_code(status)

    def close(self) -> None:
        self._ticker.stop()
        self.conn.close()


class SocketSystem:
    """Self-hosted sockets deployment: server agent plus all site agents in
    one process, every inter-site hop over real loopback TCP."""

    def __init__(self, scenario: ScenarioConfig, run_root: str | Path | None = None):
        self.scenario = scenario
        self.run_root = run_root
        self.server = ServerAgent(scenario, run_root)
        self.sites: list[SiteAgent] = []
        self._done = threading.Event()

    @property
    def port(self) -> int | None:
        return self.server.port

    def start(self, host: str = "127.0.0.1", port: int = 0) -> "SocketSystem":
        self.server.start(host, port)
        for name, _slots in self.scenario.sites:
            self.sites.append(
                SiteAgent(name, self.scenario, host, self.server.port, self.run_root)
            )
        return self

    def wait(self) -> None:
        self._done.wait()

    def shutdown(self) -> None:
        self._done.set()
        for agent in self.sites:
            agent.shutdown()
        self.server.shutdown()


def run_project_sockets(
    scenario: ScenarioConfig, spec: JobSpec, app: dict | None, run_root, out
) -> int:
    system = SocketSystem(scenario, run_root).start()
    try:
        client = ControlClient("127.0.0.1", system.port)
        try:
            return client.submit_and_stream(spec, app, out)
        finally:
            client.close()
    finally:
        system.shutdown()
