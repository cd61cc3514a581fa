"""Single-process simulator: fabric, control processes, and job workers
driven on simulated time.

The server host node owns the SCP, the per-job server workers, and the
metric sink; each client host node owns its CCP and client workers.  All
inter-site traffic crosses the fabric through the site's single link to the
server host (a star), except job networks deployed with direct messaging,
which get scoped client-to-client links.  Every run artifact lands under
``<run_root>/<job_id>/``.
"""

from __future__ import annotations

import base64
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

from . import bridge as bridgemod
from .guestfl import AppConfig, GuestNode, LinkApp
from .netsim import Fabric, LinkPolicy, UnknownLink, derive_direction_seed
from .reliable import ReliableConfig, ReliableMessenger
from .runtime import (
    ClientControlProcess,
    JobRecord,
    JobSpec,
    JobState,
    JobStatus,
    NotAMember,
    ServerControlProcess,
    UnknownJob,
    heartbeat_envelope,
    worker_event,
)
from .simloop import SimLoop
from .tracking import MetricSink, MetricsWriter
from .wire import Envelope, IdSource, MessageKind, SiteAddress, encode_envelope

POLL_MS = 10
SERVER = SiteAddress("server")


@dataclass
class ScenarioConfig:
    sites: list[tuple[str, int]]
    links: dict[str, dict] = field(default_factory=dict)
    messaging: str = "relay"
    allow_direct: bool = True
    apps: dict[str, dict] = field(default_factory=dict)
    seed: int = 0
    run_root: str = "runs"
    reliable: dict = field(default_factory=dict)
    heartbeat_ms: int = 1000

    def validate(self) -> None:
        names = [name for name, _ in self.sites]
        if len(set(names)) != len(names):
            raise ValueError("site names must be unique")
        if "server" in names:
            raise ValueError('"server" is reserved for the server host')
        if not names:
            raise ValueError("at least one site required")
        for _, slots in self.sites:
            if slots < 1:
                raise ValueError("site slots must be >= 1")

    @classmethod
    def from_dict(cls, obj: dict) -> "ScenarioConfig":
        cfg = cls(
            sites=[(str(s["name"]), int(s.get("slots", 1))) for s in obj.get("sites", [])],
            links={str(k): dict(v) for k, v in obj.get("links", {}).items()},
            messaging=str(obj.get("messaging", "relay")),
            allow_direct=bool(obj.get("allow_direct", True)),
            apps={str(k): dict(v) for k, v in obj.get("apps", {}).items()},
            seed=int(obj.get("seed", 0)),
            run_root=str(obj.get("run_root", "runs")),
            reliable=dict(obj.get("reliable", {})),
            heartbeat_ms=int(obj.get("heartbeat_ms", 1000)),
        )
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path: str | Path) -> "ScenarioConfig":
        with open(path, "r", encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))

    def link_policy(self, site: str) -> LinkPolicy:
        entry = dict(self.links.get(site, self.links.get("default", {})))
        entry.pop("partition_at_ms", None)
        entry.pop("restore_at_ms", None)
        if "seed" not in entry:
            entry["seed"] = derive_direction_seed(self.seed, SiteAddress(site), SERVER)
        return LinkPolicy.from_dict(entry)

    def partition_schedule(self, site: str) -> tuple[int | None, int | None]:
        entry = self.links.get(site, self.links.get("default", {}))
        return entry.get("partition_at_ms"), entry.get("restore_at_ms")


class ClientWorker:
    """Isolated per-job context on one site: LGS + in-process guest node."""

    def __init__(self, node: "ClientNode", deploy: dict):
        self.node = node
        self.system = node.system
        spec = deploy["spec"]
        self.job_id = spec["job_id"]
        self.site = node.site
        self.address = SiteAddress(self.site, self.job_id)
        cfg = ReliableConfig.from_dict(deploy.get("reliable"))
        self.messenger = ReliableMessenger(
            self.address, self._send_env, self.system.clock, self.system.ids, cfg
        )
        self.messenger.serve(self._handle_control, kind=MessageKind.REQUEST)
        self.app_cfg = AppConfig.from_dict(deploy["app"])
        self._deploy_app = deploy["app"]  # raw dict, for external guest nodes
        self.writer = None
        if self.app_cfg.tracking:
            self.writer = MetricsWriter(
                self.job_id,
                self.site,
                self.address,
                self._send_env,
                self.system.ids,
                self.system.clock,
            )
        self.guest = GuestNode(self.site, self.app_cfg, writer=self.writer)
        self.lgs = bridgemod.LocalGuestServer(self._forward, self._transcribe)
        self.stream: bridgemod.GuestStream | None = None
        self.state = "spawned"
        self._next_pull_t: int | None = None
        self._done_sent = False
        self._send_ready()

    # -- transport ----------------------------------------------------------

    def _send_env(self, env: Envelope) -> bool:
        return self.node.send_env(env)

    def _transcribe(self, entry: dict) -> None:
        self.system.write_bridge_entry(self.job_id, self.site, entry)

    # -- lifecycle ----------------------------------------------------------

    def _send_ready(self) -> None:
        call = self.messenger.call(
            SERVER,
            worker_event("worker_ready", self.site, self.job_id),
            kind=MessageKind.REQUEST,
            job_id=self.job_id,
        )
        call.subscribe(self._on_ready_reply)

    def _on_ready_reply(self, call) -> None:
        if call.exception() is not None and self.state == "spawned":
            self._fail(call.exception().reason, str(call.exception()))

    def _handle_control(self, payload: bytes) -> bytes:
        obj = json.loads(payload.decode("utf-8"))
        if obj.get("event") == "run" and self.state == "spawned":
            self.state = "running"
            self.lgs.set_running(True)
            self.stream = self.lgs.connect()
            self._issue_pull()
        return b'{"ok":true}'

    def _issue_pull(self) -> None:
        if self.state != "running":
            return
        self._next_pull_t = None
        self.stream.request(self.guest.pull_body(), self._on_task, self._on_stream_error)

    def _on_task(self, body: bytes) -> None:
        if self.state != "running":
            return
        push = self.guest.handle_task(body)
        if push is not None:
            self.stream.request(push, self._on_push_reply, self._on_stream_error)
        elif self.guest.finished:
            self._finish()
        else:
            self._next_pull_t = self.system.clock() + POLL_MS

    def _on_push_reply(self, body: bytes) -> None:
        if self.state != "running":
            return
        if self.guest.finished:
            self._finish()
        else:
            self._issue_pull()

    def _forward(self, msg, on_reply, on_error) -> None:
        call = self.messenger.call(
            SiteAddress("server", self.job_id),
            bridgemod.encode_guest_payload(msg),
            kind=MessageKind.GUEST_FWD,
            job_id=self.job_id,
        )

        def _finished(c):
            exc = c.exception()
            if exc is not None:
                on_error(exc.reason, str(exc))
                return
            on_reply(bridgemod.decode_guest_payload(c.result, bridgemod.Direction.TO_NODE))

        call.subscribe(_finished)

    def _on_stream_error(self, kind: str, detail: str) -> None:
        if self.state != "running":
            return  # being stopped; the abort path already owns the job
        self._fail(kind, detail)

    def _fail(self, kind: str, detail: str) -> None:
        self.state = "failed"
        self.lgs.close_all()
        self.messenger.call(
            SERVER,
            worker_event(
                "worker_failed",
                self.site,
                self.job_id,
                kind=kind,
                reason=f"{kind}: {detail}",
            ),
            kind=MessageKind.REQUEST,
            job_id=self.job_id,
        )

    def _finish(self) -> None:
        self.state = "draining"
        if self.writer is not None:
            self.writer.flush()

    def stop(self, reason: str) -> None:
        self.state = "stopped"
        self.lgs.close_all()
        self.messenger.fail_all("Aborted", reason)
        if self.writer is not None:
            self.writer.stop()

    # -- timers --------------------------------------------------------------

    def on_tick(self, now_ms: int) -> None:
        self.messenger.on_tick(now_ms)
        if self.writer is not None:
            self.writer.on_tick(now_ms)
        if self.state == "running" and self._next_pull_t is not None and now_ms >= self._next_pull_t:
            self._issue_pull()
        if self.state == "draining" and not self._done_sent:
            if self.writer is None or self.writer.drained:
                self._done_sent = True
                self.state = "finishing"
                call = self.messenger.call(
                    SERVER,
                    worker_event("worker_done", self.site, self.job_id),
                    kind=MessageKind.REQUEST,
                    job_id=self.job_id,
                )
                call.subscribe(self._on_done_reply)

    def _on_done_reply(self, call) -> None:
        if self.state == "finishing":
            self.state = "done"  # the CCP reaps done workers

    def next_deadline_ms(self) -> int | None:
        deadlines = [self.messenger.next_deadline_ms()]
        if self.writer is not None:
            deadlines.append(self.writer.next_deadline_ms())
        deadlines.append(self._next_pull_t)
        if self.state == "draining" and not self._done_sent:
            deadlines.append(self.system.clock() + 1)
        return min((d for d in deadlines if d is not None), default=None)


class ServerWorker:
    """Per-job context on the server host: LGC + the guest link app."""

    def __init__(self, node: "ServerNode", record: JobRecord):
        self.node = node
        self.system = node.system
        self.job_id = record.spec.job_id
        self.address = SiteAddress("server", self.job_id)
        cfg = ReliableConfig.from_dict(
            {**self.system.scenario.reliable, **record.spec.reliable}
        )
        self.messenger = ReliableMessenger(
            self.address, node.send_env, self.system.clock, self.system.ids, cfg
        )
        self.link = LinkApp(AppConfig.from_dict(record.app), record.participants)
        self.lgc = bridgemod.LocalGuestClient(self._link_request)
        self.messenger.serve(self.lgc.handle_forward, kind=MessageKind.GUEST_FWD)
        self.started = False
        self.stopped = False
        self._reported = False

    def _link_request(self, stream_id: int, body: bytes) -> bytes:
        return self.link.handle(body)

    def start(self) -> None:
        self.started = True

    def stop(self, reason: str) -> None:
        self.stopped = True
        self.messenger.fail_all("Aborted", reason)

    def capture_history(self) -> list[dict]:
        return list(self.link.history)

    def on_tick(self, now_ms: int) -> None:
        self.messenger.on_tick(now_ms)
        if self.started and not self.stopped and not self._reported:
            if self.link.failed:
                self._reported = True
                self.messenger.call(
                    SERVER,
                    worker_event(
                        "worker_failed",
                        "server",
                        self.job_id,
                        kind="GuestFault",
                        reason=self.link.failed,
                        history=self.link.history,
                    ),
                    kind=MessageKind.REQUEST,
                    job_id=self.job_id,
                )
            elif self.link.finished:
                self._reported = True
                self.messenger.call(
                    SERVER,
                    worker_event(
                        "worker_done", "server", self.job_id, history=self.link.history
                    ),
                    kind=MessageKind.REQUEST,
                    job_id=self.job_id,
                )

    def next_deadline_ms(self) -> int | None:
        deadlines = [self.messenger.next_deadline_ms()]
        if self.started and not self.stopped and not self._reported:
            if self.link.finished or self.link.failed:
                deadlines.append(self.system.clock())
        return min((d for d in deadlines if d is not None), default=None)


class ClientNode:
    """One client host: fabric endpoint, CCP, and that site's job workers."""

    def __init__(self, system: "SimSystem", site: str):
        self.system = system
        self.site = site
        self.host = SiteAddress(site)
        self.ccp_messenger = ReliableMessenger(
            self.host, self.send_env, system.clock, system.ids
        )
        self.ccp = ClientControlProcess(
            site,
            self.ccp_messenger,
            system.clock,
            self._spawn_worker,
            heartbeat_ms=system.scenario.heartbeat_ms,
            send_heartbeat=self._heartbeat,
        )
        self.direct_jobs: set[str] = set()

    def _spawn_worker(self, site: str, deploy: dict) -> ClientWorker:
        if deploy["spec"].get("messaging") == "direct":
            self.direct_jobs.add(deploy["spec"]["job_id"])
        return ClientWorker(self, deploy)

    def _heartbeat(self) -> None:
        env = heartbeat_envelope(self.system.ids, self.site)
        self._send_frame(SERVER, encode_envelope(env))

    def _send_frame(self, dst_host: SiteAddress, frame: bytes) -> bool:
        try:
            self.system.fabric.send(self.host, dst_host, frame)
        except UnknownLink:
            return False
        return True

    def send_env(self, env: Envelope) -> bool:
        if env.dst.site == self.site:
            self.handle_env(env)
            return True
        frame = encode_envelope(env)
        if (
            env.dst.site != "server"
            and env.job_id in self.direct_jobs
            and self.system.fabric.link_between(self.host, SiteAddress(env.dst.site))
        ):
            return self._send_frame(SiteAddress(env.dst.site), frame)
        return self._send_frame(SERVER, frame)  # relay via the server host

    def handle_env(self, env: Envelope) -> None:
        if env.dst.worker:
            worker = self.ccp.workers.get(env.dst.worker)
            if worker is None:
                self.system.late_frames += 1
                return
            handled = worker.messenger.on_frame(env)
            if not handled and env.kind == MessageKind.ACK and worker.writer is not None:
                worker.writer.on_ack(env)
            return
        self.ccp_messenger.on_frame(env)

    def on_tick(self, now_ms: int) -> None:
        self.ccp.on_tick(now_ms)
        self.ccp_messenger.on_tick(now_ms)
        for worker in list(self.ccp.workers.values()):
            worker.on_tick(now_ms)

    def next_deadline_ms(self) -> int | None:
        deadlines = [self.ccp.next_deadline_ms(), self.ccp_messenger.next_deadline_ms()]
        deadlines.extend(w.next_deadline_ms() for w in self.ccp.workers.values())
        return min((d for d in deadlines if d is not None), default=None)


class ServerNode:
    """The server host: SCP, relay, metric sink, and server-side workers."""

    def __init__(self, system: "SimSystem"):
        self.system = system
        self.host = SERVER
        self.scp_messenger = ReliableMessenger(
            self.host,
            self.send_env,
            system.clock,
            system.ids,
            config=ReliableConfig.from_dict(system.scenario.reliable),
        )
        self.sink = MetricSink(
            system.run_root, system.clock, self.send_env, system.ids
        )
        self.workers: dict[str, ServerWorker] = {}
        self.scp = ServerControlProcess(
            self.scp_messenger,
            system.clock,
            sites={name: slots for name, slots in system.scenario.sites},
            apps=system.scenario.apps,
            heartbeat_ms=system.scenario.heartbeat_ms,
            allow_direct=system.scenario.allow_direct,
            reliable_defaults=ReliableConfig.from_dict(system.scenario.reliable),
            on_event=system._on_job_event,
            server_worker_factory=self._spawn_server_worker,
            on_direct_links=system._create_direct_links,
            on_job_terminal=system._on_job_terminal,
        )

    def _spawn_server_worker(self, record: JobRecord) -> ServerWorker:
        worker = ServerWorker(self, record)
        self.workers[record.spec.job_id] = worker
        return worker

    def send_env(self, env: Envelope) -> bool:
        if env.dst.site == "server":
            self.handle_env(env)
            return True
        try:
            self.system.fabric.send(self.host, SiteAddress(env.dst.site), encode_envelope(env))
        except UnknownLink:
            return False
        return True

    def handle_env(self, env: Envelope) -> None:
        if env.dst.site != "server":
            self._relay(env)
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
                self.system.late_frames += 1
                return
            worker.messenger.on_frame(env)
            return
        self.scp_messenger.on_frame(env)

    def _relay(self, env: Envelope) -> None:
        # worker-to-worker job traffic is only relayed for running jobs
        if env.dst.worker and env.src.worker:
            record = self.scp.jobs.get(env.job_id)
            if record is None or record.state != JobState.RUNNING:
                self.system.dropped += 1
                return
        try:
            self.system.fabric.send(
                self.host, SiteAddress(env.dst.site), encode_envelope(env)
            )
        except UnknownLink:
            self.system.dropped += 1

    def on_tick(self, now_ms: int) -> None:
        self.scp.on_tick(now_ms)
        self.scp_messenger.on_tick(now_ms)
        for worker in list(self.workers.values()):
            worker.on_tick(now_ms)

    def next_deadline_ms(self) -> int | None:
        deadlines = [self.scp.next_deadline_ms(), self.scp_messenger.next_deadline_ms()]
        deadlines.extend(w.next_deadline_ms() for w in self.workers.values())
        return min((d for d in deadlines if d is not None), default=None)


class SimSystem:
    """Boots and drives one whole scenario in-process."""

    def __init__(self, scenario: ScenarioConfig, run_root: str | Path | None = None):
        scenario.validate()
        self.scenario = scenario
        self.run_root = Path(run_root if run_root is not None else scenario.run_root)
        self.fabric = Fabric()
        self.loop = SimLoop(self.fabric)
        self.ids = IdSource(seed=scenario.seed, namespace="system")
        self.clock = lambda: self.loop.now
        self.events: list[dict] = []
        self.dropped = 0  # relay rejections: wrong state or unroutable
        self.late_frames = 0  # stragglers for already-reaped workers
        self._event_watchers: list[Callable[[dict], None]] = []
        self.server = ServerNode(self)
        self.clients: dict[str, ClientNode] = {}
        self._booted = False

    # -- boot ------------------------------------------------------------------

    def boot(self) -> "SimSystem":
        if self._booted:
            return self
        self._booted = True
        self.run_root.mkdir(parents=True, exist_ok=True)
        self.loop.attach(SERVER, self.server.handle_env)
        self.loop.add_ticker(self.server)
        for name, _slots in self.scenario.sites:
            node = ClientNode(self, name)
            self.clients[name] = node
            self.loop.attach(node.host, node.handle_env)
            self.loop.add_ticker(node)
            link = self.fabric.connect(node.host, SERVER, self.scenario.link_policy(name))
            at, restore = self.scenario.partition_schedule(name)
            if at is not None:
                self.loop.call_at(int(at), lambda l=link: l.set_partitioned(True))
            if restore is not None:
                self.loop.call_at(int(restore), lambda l=link: l.set_partitioned(False))
        self.loop.pump()
        return self

    # -- control plane (in-process surface) -------------------------------------

    def submit(self, spec: JobSpec, app: dict | None = None) -> JobStatus:
        return self.server.scp.submit(spec, app)

    def status(self, job_id: str) -> JobStatus:
        return self.server.scp.monitor(job_id)

    def list_jobs(self) -> list[JobStatus]:
        return self.server.scp.list_jobs()

    def abort(self, job_id: str, reason: str = "operator abort") -> JobStatus:
        return self.server.scp.abort(job_id, reason)

    def run_until_terminal(self, job_id: str, max_ms: int = 600_000) -> JobStatus:
        self.loop.run_until(lambda: self.status(job_id).terminal, max_ms)
        return self.status(job_id)

    def run_until_all_terminal(self, max_ms: int = 600_000) -> list[JobStatus]:
        self.loop.run_until(
            lambda: all(s.terminal for s in self.list_jobs()), max_ms
        )
        return self.list_jobs()

    # -- spec op surface ---------------------------------------------------------

    def route(self, env: Envelope) -> None:
        """Deliver one envelope within its job network (relay or direct)."""
        record = self.server.scp.jobs.get(env.job_id)
        if record is None or record.state != JobState.RUNNING:
            raise UnknownJob(f"no running job {env.job_id!r}")
        members = {SiteAddress(s, env.job_id) for s in record.participants}
        members.add(SiteAddress("server", env.job_id))
        if env.src not in members or env.dst not in members:
            raise NotAMember(f"{env.src} -> {env.dst} outside job {env.job_id}")
        if env.src.site == "server":
            self.server.send_env(env)
        else:
            self.clients[env.src.site].send_env(env)

    # -- artifacts ----------------------------------------------------------------

    def job_dir(self, job_id: str) -> Path:
        path = self.run_root / job_id
        path.mkdir(parents=True, exist_ok=True)
        return path

    def watch_events(self, fn: Callable[[dict], None]) -> None:
        self._event_watchers.append(fn)

    def _on_job_event(self, job_id: str, frm: str, to: str, reason: str, t_ms: int) -> None:
        event = {"t_ms": t_ms, "job_id": job_id, "from": frm, "to": to, "reason": reason}
        self.events.append(event)
        if to == "SUBMITTED":
            self.server.sink.register_job(job_id)
        with open(self.job_dir(job_id) / "events.jsonl", "a", encoding="utf-8") as fh:
            fh.write(json.dumps(event, sort_keys=True) + "\n")
        for fn in self._event_watchers:
            fn(event)

    def _on_job_terminal(self, record: JobRecord) -> None:
        self.server.sink.mark_terminal(record.spec.job_id)
        self.server.workers.pop(record.spec.job_id, None)
        if record.history is None:
            worker = self.server.workers.get(record.spec.job_id)
            if worker is not None:
                record.history = worker.capture_history()
        if record.history is not None:
            from .guestfl import write_history

            write_history(self.job_dir(record.spec.job_id) / "history.json", record.history)
        for site in record.participants:
            link = self.fabric.link_between(
                SiteAddress(site), SiteAddress("server")
            )
            # control links persist; only job-scoped direct links go away
        self._close_direct_links(record)

    def _create_direct_links(self, record: JobRecord) -> None:
        sites = record.participants
        for i, a in enumerate(sites):
            for b in sites[i + 1 :]:
                if self.fabric.link_between(SiteAddress(a), SiteAddress(b)) is None:
                    policy_entry = dict(self.scenario.links.get("direct", {}))
                    if "seed" not in policy_entry:
                        policy_entry["seed"] = derive_direction_seed(
                            self.scenario.seed, SiteAddress(a), SiteAddress(b)
                        )
                    self.fabric.connect(
                        SiteAddress(a), SiteAddress(b), LinkPolicy.from_dict(policy_entry)
                    )

    def _close_direct_links(self, record: JobRecord) -> None:
        if record.spec.messaging != "direct":
            return
        for i, a in enumerate(record.participants):
            for b in record.participants[i + 1 :]:
                link = self.fabric.link_between(SiteAddress(a), SiteAddress(b))
                if link is not None:
                    link.close()
        for site in record.participants:
            node = self.clients.get(site)
            if node is not None:
                node.direct_jobs.discard(record.spec.job_id)

    def write_bridge_entry(self, job_id: str, site: str, entry: dict) -> None:
        path = self.job_dir(job_id) / site / "bridge.jsonl"
        path.parent.mkdir(parents=True, exist_ok=True)
        record = {"t_ms": self.clock(), **entry}
        with open(path, "a", encoding="utf-8") as fh:
            fh.write(json.dumps(record, sort_keys=True) + "\n")

    def history_path(self, job_id: str) -> Path:
        return self.run_root / job_id / "history.json"

    def read_history(self, job_id: str) -> list[dict] | None:
        path = self.history_path(job_id)
        if not path.exists():
            return None
        return json.loads(path.read_text())
