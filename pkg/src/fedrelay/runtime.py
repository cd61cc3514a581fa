"""Multi-job runtime: a Server Control Process schedules, deploys, monitors
and aborts jobs across per-site Client Control Processes.

Per-job workers spawned by the CCPs form the job network; with relay
messaging every worker-to-worker envelope travels through the server host,
with direct messaging sites may link directly when the scenario allows it.
The scheduler is FIFO with integer slot accounting per site; heartbeats
from the CCPs drive liveness, and three missed heartbeats take a site
offline and abort its running jobs.

This module is transport-agnostic: it holds the control state machines and
talks to the world through injected messengers, clocks and factories.  The
sim harness in ``system`` and the socket harness in ``sockets`` wire it up.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable

from .reliable import ReliableCall, ReliableConfig, ReliableMessenger
from .wire import Envelope, MessageKind, SiteAddress, ZERO_ID

SERVER_WORKER_KEY = "server"
SCHED_TICK_MS = 10

_JOB_ID_RE = re.compile(r"^[A-Za-z0-9_.-]{1,64}$")


class JobError(Exception):
    pass


class DuplicateJobId(JobError):
    pass


class UnknownApp(JobError):
    pass


class NeverSchedulable(JobError):
    pass


class UnknownJob(JobError):
    pass


class NotAMember(JobError):
    pass


class JobState(Enum):
    SUBMITTED = "SUBMITTED"
    SCHEDULED = "SCHEDULED"
    DEPLOYED = "DEPLOYED"
    RUNNING = "RUNNING"
    FINISHED = "FINISHED"
    ABORTED = "ABORTED"
    FAILED = "FAILED"


TERMINAL_STATES = frozenset({JobState.FINISHED, JobState.ABORTED, JobState.FAILED})


@dataclass
class JobSpec:
    job_id: str
    app_ref: str
    min_sites: int = 1
    site_filter: list[str] | None = None
    resources: dict[str, int] = field(default_factory=dict)
    messaging: str = "relay"
    reliable: dict = field(default_factory=dict)
    seed: int = 0
    bridge: dict = field(default_factory=dict)  # lgs/link endpoints, node_mode

    def validate(self) -> None:
        if not _JOB_ID_RE.match(self.job_id):
            raise ValueError(f"job_id {self.job_id!r} must match [A-Za-z0-9_.-]{{1,64}}")
        if self.min_sites < 1:
            raise ValueError("min_sites must be >= 1")
        if self.messaging not in ("relay", "direct"):
            raise ValueError(f"messaging must be relay or direct, not {self.messaging!r}")
        for site, slots in self.resources.items():
            if slots < 1:
                raise ValueError(f"resources[{site}] must be >= 1")

    def slots_needed(self, site: str) -> int:
        return self.resources.get(site, 1)

    def to_dict(self) -> dict:
        return {
            "job_id": self.job_id,
            "app_ref": self.app_ref,
            "min_sites": self.min_sites,
            "site_filter": self.site_filter,
            "resources": self.resources,
            "messaging": self.messaging,
            "reliable": self.reliable,
            "seed": self.seed,
            "bridge": self.bridge,
        }

    @classmethod
    def from_dict(cls, obj: dict) -> "JobSpec":
        spec = cls(
            job_id=str(obj["job_id"]),
            app_ref=str(obj["app_ref"]),
            min_sites=int(obj.get("min_sites", 1)),
            site_filter=list(obj["site_filter"]) if obj.get("site_filter") else None,
            resources={k: int(v) for k, v in obj.get("resources", {}).items()},
            messaging=str(obj.get("messaging", "relay")),
            reliable=dict(obj.get("reliable", {})),
            seed=int(obj.get("seed", 0)),
            bridge=dict(obj.get("bridge", {})),
        )
        spec.validate()
        return spec


@dataclass
class JobStatus:
    job_id: str
    state: JobState
    per_site: dict[str, str] = field(default_factory=dict)
    started_t: int | None = None
    ended_t: int | None = None
    failure_reason: str | None = None

    @property
    def terminal(self) -> bool:
        return self.state in TERMINAL_STATES

    def to_dict(self) -> dict:
        return {
            "job_id": self.job_id,
            "state": self.state.name,
            "per_site": dict(self.per_site),
            "started_t": self.started_t,
            "ended_t": self.ended_t,
            "failure_reason": self.failure_reason,
        }

    @classmethod
    def from_dict(cls, obj: dict) -> "JobStatus":
        return cls(
            job_id=obj["job_id"],
            state=JobState[obj["state"]],
            per_site=dict(obj.get("per_site", {})),
            started_t=obj.get("started_t"),
            ended_t=obj.get("ended_t"),
            failure_reason=obj.get("failure_reason"),
        )


@dataclass
class JobRecord:
    spec: JobSpec
    app: dict
    state: JobState = JobState.SUBMITTED
    participants: list[str] = field(default_factory=list)
    worker_states: dict[str, str] = field(default_factory=dict)
    submitted_t: int = 0
    started_t: int | None = None
    ended_t: int | None = None
    failure_reason: str | None = None
    deploy_calls: dict[str, ReliableCall] = field(default_factory=dict)
    history: list[dict] | None = None

    def status(self) -> JobStatus:
        return JobStatus(
            job_id=self.spec.job_id,
            state=self.state,
            per_site=dict(self.worker_states),
            started_t=self.started_t,
            ended_t=self.ended_t,
            failure_reason=self.failure_reason,
        )


# event payloads carried by worker -> SCP control requests
def worker_event(event: str, site: str, job_id: str, **extra) -> bytes:
    return json.dumps(
        {"event": event, "site": site, "job_id": job_id, **extra}, sort_keys=True
    ).encode()


class ServerControlProcess:
    """The scheduler and relay owner on the server host."""

    def __init__(
        self,
        messenger: ReliableMessenger,
        clock: Callable[[], int],
        sites: dict[str, int],
        apps: dict[str, dict],
        *,
        heartbeat_ms: int = 1000,
        allow_direct: bool = False,
        reliable_defaults: ReliableConfig | None = None,
        on_event: Callable[[str, str, str, str, int], None] | None = None,
        server_worker_factory: Callable[[JobRecord], object] | None = None,
        on_direct_links: Callable[[JobRecord], None] | None = None,
        on_job_terminal: Callable[[JobRecord], None] | None = None,
    ):
        self.messenger = messenger
        self.clock = clock
        self.site_slots = dict(sites)
        self.apps = dict(apps)
        self.heartbeat_ms = heartbeat_ms
        self.allow_direct = allow_direct
        self.reliable_defaults = reliable_defaults or ReliableConfig()
        self.on_event = on_event or (lambda *a: None)
        self.server_worker_factory = server_worker_factory
        self.on_direct_links = on_direct_links or (lambda record: None)
        self.on_job_terminal = on_job_terminal or (lambda record: None)

        self.jobs: dict[str, JobRecord] = {}
        self.queue: list[str] = []  # FIFO of job_ids awaiting admission
        self.free_slots: dict[str, int] = dict(sites)
        self.last_heartbeat: dict[str, int] = {}
        self.online: dict[str, bool] = {name: False for name in sites}
        self.server_workers: dict[str, object] = {}
        self._next_tick = 0

        messenger.serve(self._handle_submit, kind=MessageKind.SUBMIT)
        messenger.serve(self._handle_status, kind=MessageKind.STATUS)
        messenger.serve(self._handle_abort, kind=MessageKind.ABORT)
        messenger.serve(self._handle_worker_event, kind=MessageKind.REQUEST)

    # -- public API -----------------------------------------------------------

    def submit(self, spec: JobSpec, app: dict | None = None) -> JobStatus:
        spec.validate()
        live = self.jobs.get(spec.job_id)
        if live is not None and live.state not in TERMINAL_STATES:
            raise DuplicateJobId(f"job {spec.job_id} is live")
        if app is not None:
            self.apps.setdefault(spec.app_ref, app)
        if spec.app_ref not in self.apps:
            raise UnknownApp(f"app {spec.app_ref!r} is not registered")
        eligible = self._eligible_sites(spec)
        if len(eligible) < spec.min_sites:
            raise NeverSchedulable(
                f"{len(eligible)} eligible sites < min_sites={spec.min_sites}"
            )
        record = JobRecord(
            spec=spec, app=self.apps[spec.app_ref], submitted_t=self.clock()
        )
        self.jobs[spec.job_id] = record
        self.queue.append(spec.job_id)
        self._event(record, "", JobState.SUBMITTED, "submitted")
        return record.status()

    def monitor(self, job_id: str) -> JobStatus:
        record = self.jobs.get(job_id)
        if record is None:
            raise UnknownJob(job_id)
        return record.status()

    def list_jobs(self) -> list[JobStatus]:
        return [record.status() for record in self.jobs.values()]

    def abort(self, job_id: str, reason: str = "operator abort") -> JobStatus:
        record = self.jobs.get(job_id)
        if record is None:
            raise UnknownJob(job_id)
        if record.state in TERMINAL_STATES:
            return record.status()  # idempotent
        self._terminate(record, JobState.ABORTED, reason)
        return record.status()

    # -- control-plane handlers ------------------------------------------------

    def _handle_submit(self, payload: bytes) -> bytes:
        try:
            obj = json.loads(payload.decode("utf-8"))
            spec = JobSpec.from_dict(obj["spec"])
            status = self.submit(spec, app=obj.get("app"))
            return json.dumps({"status": status.to_dict()}).encode()
        except (JobError, ValueError, KeyError) as exc:
            return _error_payload(exc)

    def _handle_status(self, payload: bytes) -> bytes:
        try:
            obj = json.loads(payload.decode("utf-8"))
            return json.dumps({"status": self.monitor(obj["job_id"]).to_dict()}).encode()
        except (JobError, ValueError, KeyError) as exc:
            return _error_payload(exc)

    def _handle_abort(self, payload: bytes) -> bytes:
        try:
            obj = json.loads(payload.decode("utf-8"))
            status = self.abort(obj["job_id"], obj.get("reason", "operator abort"))
            return json.dumps({"status": status.to_dict()}).encode()
        except (JobError, ValueError, KeyError) as exc:
            return _error_payload(exc)

    def _handle_worker_event(self, payload: bytes) -> bytes:
        obj = json.loads(payload.decode("utf-8"))
        event = obj.get("event")
        job_id = obj.get("job_id")
        site = obj.get("site", "")
        record = self.jobs.get(job_id)
        if record is None or record.state in TERMINAL_STATES:
            return b'{"ok":false}'
        if event == "worker_ready":
            self._worker_ready(record, site)
        elif event == "worker_done":
            if obj.get("history") is not None:
                record.history = obj["history"]
            self._worker_done(record, site)
        elif event == "worker_failed":
            self._worker_failed(record, site, obj.get("kind", ""), obj.get("reason", ""))
        return b'{"ok":true}'

    def on_heartbeat(self, site: str) -> None:
        if site in self.site_slots:
            self.last_heartbeat[site] = self.clock()
            self.online[site] = True

    # -- scheduling --------------------------------------------------------------

    def _eligible_sites(self, spec: JobSpec) -> list[str]:
        known = set(self.site_slots)
        if spec.site_filter is not None:
            known &= set(spec.site_filter)
        return sorted(known)

    def on_tick(self, now_ms: int) -> None:
        if now_ms < self._next_tick:
            return
        self._next_tick = now_ms + SCHED_TICK_MS
        self._check_liveness(now_ms)
        self._schedule_pass(now_ms)

    def next_deadline_ms(self) -> int | None:
        return self._next_tick

    def _check_liveness(self, now_ms: int) -> None:
        for site in self.site_slots:
            if not self.online.get(site):
                continue
            last = self.last_heartbeat.get(site, 0)
            if now_ms - last > 3 * self.heartbeat_ms:
                self.online[site] = False
                for record in list(self.jobs.values()):
                    if record.state in TERMINAL_STATES:
                        continue
                    if site in record.participants:
                        self._terminate(
                            record,
                            JobState.ABORTED,
                            f"site {site} offline (3 missed heartbeats)",
                        )

    def _schedule_pass(self, now_ms: int) -> None:
        # strict FIFO: the head job blocks the queue until admissible
        while self.queue:
            record = self.jobs[self.queue[0]]
            if record.state in TERMINAL_STATES:
                self.queue.pop(0)
                continue
            if record.state == JobState.SUBMITTED:
                record.state = JobState.SCHEDULED
                self._event(record, "SUBMITTED", JobState.SCHEDULED, "queued for resources")
            qualifying = [
                site
                for site in self._eligible_sites(record.spec)
                if self.online.get(site)
                and self.free_slots[site] >= record.spec.slots_needed(site)
            ]
            if len(qualifying) < record.spec.min_sites:
                return  # head of line waits
            self.queue.pop(0)
            self._admit(record, qualifying)

    def _admit(self, record: JobRecord, participants: list[str]) -> None:
        record.participants = sorted(participants)
        for site in record.participants:
            self.free_slots[site] -= record.spec.slots_needed(site)
            record.worker_states[site] = "deploying"
        record.worker_states[SERVER_WORKER_KEY] = "ready"
        if record.spec.messaging == "direct" and self.allow_direct:
            self.on_direct_links(record)
        if self.server_worker_factory is not None:
            self.server_workers[record.spec.job_id] = self.server_worker_factory(record)
        cfg = ReliableConfig.from_dict({**_cfg_dict(self.reliable_defaults), **record.spec.reliable})
        payload = json.dumps(
            {
                "spec": record.spec.to_dict(),
                "app": record.app,
                "participants": record.participants,
                "reliable": _cfg_dict(cfg),
            },
            sort_keys=True,
        ).encode()
        for site in record.participants:
            call = self.messenger.call(
                SiteAddress(site),
                payload,
                kind=MessageKind.DEPLOY,
                job_id=record.spec.job_id,
                cfg=cfg,
            )
            record.deploy_calls[site] = call
            call.subscribe(lambda c, r=record, s=site: self._deploy_finished(r, s, c))

    def _deploy_finished(self, record: JobRecord, site: str, call: ReliableCall) -> None:
        if record.state in TERMINAL_STATES:
            return
        exc = call.exception()
        if exc is not None:
            self._terminate(
                record,
                JobState.ABORTED,
                f"DEPLOY to {site} failed: {exc.reason}: {exc}",
            )
            return
        if record.worker_states.get(site) == "deploying":
            record.worker_states[site] = "spawned"
        if record.state == JobState.SCHEDULED and all(
            c.finished for c in record.deploy_calls.values()
        ):
            record.state = JobState.DEPLOYED
            self._event(record, "SCHEDULED", JobState.DEPLOYED, "all workers spawned")
            self._maybe_start(record)

    def _worker_ready(self, record: JobRecord, site: str) -> None:
        record.worker_states[site] = "ready"
        self._maybe_start(record)

    def _maybe_start(self, record: JobRecord) -> None:
        # barrier: every deploy acknowledged and every client worker ready
        if record.state != JobState.DEPLOYED:
            return
        if not all(record.worker_states.get(s) == "ready" for s in record.participants):
            return
        record.state = JobState.RUNNING
        record.started_t = self.clock()
        for s in record.participants:
            record.worker_states[s] = "running"
        record.worker_states[SERVER_WORKER_KEY] = "running"
        self._event(record, "DEPLOYED", JobState.RUNNING, "worker barrier complete")
        worker = self.server_workers.get(record.spec.job_id)
        if worker is not None:
            worker.start()
        cfg = ReliableConfig.from_dict(
            {**_cfg_dict(self.reliable_defaults), **record.spec.reliable}
        )
        for s in record.participants:
            self.messenger.call(
                SiteAddress(s, record.spec.job_id),
                b'{"event":"run"}',
                kind=MessageKind.REQUEST,
                job_id=record.spec.job_id,
                cfg=cfg,
            )

    def _worker_done(self, record: JobRecord, site: str) -> None:
        record.worker_states[site] = "done"
        keys = record.participants + [SERVER_WORKER_KEY]
        if all(record.worker_states.get(k) == "done" for k in keys):
            self._terminate(record, JobState.FINISHED, "")

    def _worker_failed(self, record: JobRecord, site: str, kind: str, reason: str) -> None:
        detail = f"worker {site}: {reason}"
        if kind in ("SendTimeout", "ResultTimeout", "Aborted"):
            self._terminate(record, JobState.ABORTED, detail)
        else:
            self._terminate(record, JobState.FAILED, detail)

    # -- teardown -------------------------------------------------------------

    def _terminate(self, record: JobRecord, state: JobState, reason: str) -> None:
        if record.state in TERMINAL_STATES:
            return
        prev = record.state.name
        record.state = state
        record.ended_t = self.clock()
        if record.started_t is None:
            record.started_t = record.ended_t
        record.failure_reason = reason or None
        if record.spec.job_id in self.queue:
            self.queue.remove(record.spec.job_id)
        for site in record.participants:
            self.free_slots[site] += record.spec.slots_needed(site)
            if record.worker_states.get(site) not in ("done",):
                record.worker_states[site] = "stopped"
        worker = self.server_workers.pop(record.spec.job_id, None)
        if worker is not None:
            worker.stop(reason)
        self.messenger.fail_matching(
            lambda c: c.job_id == record.spec.job_id and c.kind != MessageKind.ABORT,
            "Aborted",
            reason,
        )
        if state != JobState.FINISHED and record.participants:
            stop_payload = json.dumps(
                {"job_id": record.spec.job_id, "reason": reason}, sort_keys=True
            ).encode()
            for site in record.participants:
                self.messenger.call(
                    SiteAddress(site),
                    stop_payload,
                    kind=MessageKind.ABORT,
                    job_id=record.spec.job_id,
                )
        self._event(record, prev, state, reason)
        self.on_job_terminal(record)

    def _event(self, record: JobRecord, from_state: str, to_state: JobState, reason: str) -> None:
        self.on_event(record.spec.job_id, from_state, to_state.name, reason, self.clock())


class ClientControlProcess:
    """Per-site agent: spawns and stops job workers, emits heartbeats."""

    def __init__(
        self,
        site: str,
        messenger: ReliableMessenger,
        clock: Callable[[], int],
        worker_factory: Callable[[str, dict], object],
        *,
        heartbeat_ms: int = 1000,
        send_heartbeat: Callable[[], None],
    ):
        self.site = site
        self.messenger = messenger
        self.clock = clock
        self.worker_factory = worker_factory
        self.heartbeat_ms = heartbeat_ms
        self.send_heartbeat = send_heartbeat
        self.workers: dict[str, object] = {}
        self._next_heartbeat = 0
        messenger.serve(self._handle_deploy, kind=MessageKind.DEPLOY)
        messenger.serve(self._handle_abort, kind=MessageKind.ABORT)

    def _handle_deploy(self, payload: bytes) -> bytes:
        obj = json.loads(payload.decode("utf-8"))
        job_id = obj["spec"]["job_id"]
        if job_id not in self.workers:  # dedup guard; reliable layer already dedups
            self.workers[job_id] = self.worker_factory(self.site, obj)
        return b'{"ok":true}'

    def _handle_abort(self, payload: bytes) -> bytes:
        obj = json.loads(payload.decode("utf-8"))
        worker = self.workers.pop(obj["job_id"], None)
        if worker is not None:
            worker.stop(obj.get("reason", ""))
        return b'{"ok":true}'

    def stop_all(self, reason: str = "shutdown") -> None:
        for worker in self.workers.values():
            worker.stop(reason)
        self.workers.clear()

    def on_tick(self, now_ms: int) -> None:
        if now_ms >= self._next_heartbeat:
            self._next_heartbeat = now_ms + self.heartbeat_ms
            self.send_heartbeat()
        done = [
            job_id
            for job_id, worker in self.workers.items()
            if getattr(worker, "state", None) == "done"
        ]
        for job_id in done:
            self.workers.pop(job_id, None)

    def next_deadline_ms(self) -> int | None:
        return self._next_heartbeat


def _cfg_dict(cfg: ReliableConfig) -> dict:
    return {
        "retry_ms": cfg.retry_ms,
        "query_ms": cfg.query_ms,
        "send_deadline_ms": cfg.send_deadline_ms,
        "result_deadline_ms": cfg.result_deadline_ms,
    }


def _error_payload(exc: Exception) -> bytes:
    return json.dumps(
        {"error": {"type": type(exc).__name__, "message": str(exc)}}
    ).encode()


def heartbeat_envelope(ids, site: str) -> Envelope:
    return Envelope(
        msg_id=ids.next(),
        correlation_id=ZERO_ID,
        job_id="",
        src=SiteAddress(site),
        dst=SiteAddress("server"),
        kind=MessageKind.HEARTBEAT,
        attempt=1,
        payload=b"",
    )
