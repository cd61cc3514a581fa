"""Reliable request/response messaging.

A requester re-sends its request (same msg_id, incremented attempt) on a
fixed interval until the responder acknowledges receipt or the send
deadline elapses.  Once acknowledged it waits for the result, polling with
QUERY messages, and completes on whichever arrives first: the responder's
pushed response or a query response carrying the result.  Responders
deduplicate on msg_id so handlers execute exactly once per request, and
retain finished results for a retention window so late queries and
duplicate requests can be answered without re-execution.

Every call is job-scoped: ACK/QUERY/RESPONSE envelopes inherit the call's
job_id, and the wire format only allows empty job_id on control kinds.
"""

from __future__ import annotations

import base64
import json
import threading
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable

from .wire import (
    ZERO_ID,
    Envelope,
    IdSource,
    MessageKind,
    SiteAddress,
)

REQUEST_KINDS = frozenset(
    {
        MessageKind.REQUEST,
        MessageKind.SUBMIT,
        MessageKind.STATUS,
        MessageKind.ABORT,
        MessageKind.DEPLOY,
        MessageKind.GUEST_FWD,
    }
)

_RESPONSE_FOR = {kind: MessageKind.RESPONSE for kind in REQUEST_KINDS}
_RESPONSE_FOR[MessageKind.GUEST_FWD] = MessageKind.GUEST_RET

DEFAULT_RETENTION_MS = 5 * 60 * 1000


class ReliableFailure(Exception):
    reason = "Failure"


class SendTimeout(ReliableFailure):
    reason = "SendTimeout"


class ResultTimeout(ReliableFailure):
    reason = "ResultTimeout"


class PeerFault(ReliableFailure):
    reason = "PeerFault"


class Aborted(ReliableFailure):
    reason = "Aborted"


_FAILURES = {cls.reason: cls for cls in (SendTimeout, ResultTimeout, PeerFault, Aborted)}


class CallState(Enum):
    SENDING = "SENDING"
    AWAITING = "AWAITING"
    DONE = "DONE"
    FAILED = "FAILED"


@dataclass
class ReliableConfig:
    retry_ms: int = 250
    query_ms: int = 500
    send_deadline_ms: int = 30_000
    result_deadline_ms: int = 600_000

    def validate(self) -> None:
        for name in ("retry_ms", "query_ms", "send_deadline_ms", "result_deadline_ms"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")

    @classmethod
    def from_dict(cls, obj: dict | None) -> "ReliableConfig":
        cfg = cls()
        if obj:
            for name in ("retry_ms", "query_ms", "send_deadline_ms", "result_deadline_ms"):
                if name in obj:
                    setattr(cfg, name, int(obj[name]))
        cfg.validate()
        return cfg


class ReliableCall:
    """Requester-side state machine for one exchange."""

    def __init__(
        self,
        msg_id: str,
        dst: SiteAddress,
        payload: bytes,
        kind: MessageKind,
        job_id: str,
        cfg: ReliableConfig,
        now_ms: int,
    ):
        self.msg_id = msg_id
        self.dst = dst
        self.payload = payload
        self.kind = kind
        self.job_id = job_id
        self.cfg = cfg
        self.state = CallState.SENDING
        self.attempt = 0
        self.first_send_t = now_ms
        self.send_deadline_t = now_ms + cfg.send_deadline_ms
        self.next_attempt_t = now_ms
        self.awaiting_t: int | None = None
        self.result_deadline_t: int | None = None
        self.next_query_t: int | None = None
        self.result: bytes | None = None
        self.ok = False
        self.failure: str | None = None
        self.failure_detail: str = ""
        self._waiters: list[Callable[[ReliableCall], None]] = []

    @property
    def finished(self) -> bool:
        return self.state in (CallState.DONE, CallState.FAILED)

    @property
    def completed_via(self) -> str | None:
        return getattr(self, "_via", None)

    def subscribe(self, callback: Callable[[ReliableCall], None]) -> None:
        if self.finished:
            callback(self)
        else:
            self._waiters.append(callback)

    def exception(self) -> ReliableFailure | None:
        if self.state == CallState.FAILED:
            exc_cls = _FAILURES.get(self.failure or "", ReliableFailure)
            return exc_cls(self.failure_detail or self.failure)
        if self.state == CallState.DONE and not self.ok:
            detail = (self.result or b"").decode("utf-8", "replace")
            return PeerFault(detail)
        return None

    def result_or_raise(self) -> bytes:
        exc = self.exception()
        if exc is not None:
            raise exc
        if self.state != CallState.DONE:
            raise RuntimeError(f"call {self.msg_id} still {self.state.name}")
        assert self.result is not None
        return self.result

    def _fire(self) -> None:
        waiters, self._waiters = self._waiters, []
        for callback in waiters:
            callback(self)


class ResultStatus(Enum):
    PENDING = "PENDING"
    READY = "READY"
    CONSUMED = "CONSUMED"


@dataclass
class ResultEntry:
    requester: SiteAddress
    kind: MessageKind
    job_id: str
    status: ResultStatus = ResultStatus.PENDING
    result: bytes | None = None
    ok: bool = True
    ready_t: int = 0


class ResultCache:
    """Responder-side dedup and retention of finished results."""

    def __init__(self, retention_ms: int = DEFAULT_RETENTION_MS):
        self.retention_ms = retention_ms
        self.entries: dict[str, ResultEntry] = {}

    def gc(self, now_ms: int) -> int:
        """Evict READY/CONSUMED entries aged >= retention_ms; PENDING never."""
        stale = [
            msg_id
            for msg_id, entry in self.entries.items()
            if entry.status in (ResultStatus.READY, ResultStatus.CONSUMED)
            and now_ms - entry.ready_t >= self.retention_ms
        ]
        for msg_id in stale:
            del self.entries[msg_id]
        return len(stale)


def _ready_payload(result: bytes, ok: bool) -> bytes:
    return json.dumps(
        {"status": "READY", "ok": ok, "result_b64": base64.b64encode(result).decode("ascii")},
        separators=(",", ":"),
    ).encode()


_PENDING_PAYLOAD = b'{"status":"PENDING"}'
_UNKNOWN_PAYLOAD = b'{"status":"UNKNOWN"}'


Handler = Callable[[bytes], bytes]
# executor(msg_id, payload, complete) drives one handler invocation and calls
# complete(result, ok) exactly once, immediately or later.
Executor = Callable[[str, bytes, Callable[..., None]], None]


class ReliableMessenger:
    """Both halves of the protocol for one endpoint address.

    transport_send(env) hands an envelope to the transport and returns
    False when no route exists right now (counts as a failed attempt; the
    retry schedule continues).
    """

    def __init__(
        self,
        address: SiteAddress,
        transport_send: Callable[[Envelope], bool],
        clock: Callable[[], int],
        ids: IdSource | None = None,
        config: ReliableConfig | None = None,
        retention_ms: int = DEFAULT_RETENTION_MS,
    ):
        self.address = address
        self._send = transport_send
        self._clock = clock
        self._ids = ids or IdSource()
        self.config = config or ReliableConfig()
        self.calls: dict[str, ReliableCall] = {}
        self.cache = ResultCache(retention_ms)
        self._handlers: dict[MessageKind, tuple[Handler, Executor]] = {}
        self._lock = threading.RLock()
        self._next_gc_t = 0

    # -- requester ----------------------------------------------------------

    def call(
        self,
        dst: SiteAddress,
        payload: bytes,
        *,
        kind: MessageKind = MessageKind.REQUEST,
        job_id: str,
        cfg: ReliableConfig | None = None,
    ) -> ReliableCall:
        if kind not in REQUEST_KINDS:
            raise ValueError(f"{kind.name} is not a request kind")
        if not job_id:
            raise ValueError("reliable calls must carry a nonempty job_id")
        with self._lock:
            now = self._clock()
            call = ReliableCall(
                self._ids.next(), dst, payload, kind, job_id, cfg or self.config, now
            )
            self.calls[call.msg_id] = call
            self._attempt_send(call, now)
            return call

    def _attempt_send(self, call: ReliableCall, now: int) -> None:
        call.attempt += 1
        call.next_attempt_t = now + call.cfg.retry_ms
        env = Envelope(
            msg_id=call.msg_id,
            correlation_id=ZERO_ID,
            job_id=call.job_id,
            src=self.address,
            dst=call.dst,
            kind=call.kind,
            attempt=call.attempt,
            payload=call.payload,
        )
        self._send(env)

    def _send_query(self, call: ReliableCall, now: int) -> None:
        call.next_query_t = now + call.cfg.query_ms
        env = Envelope(
            msg_id=self._ids.next(),
            correlation_id=call.msg_id,
            job_id=call.job_id,
            src=self.address,
            dst=call.dst,
            kind=MessageKind.QUERY,
            attempt=1,
            payload=b"",
        )
        self._send(env)

    def _complete_call(self, call: ReliableCall, result: bytes, ok: bool, via: str) -> None:
        call.state = CallState.DONE
        call.result = result
        call.ok = ok
        call._via = via
        self.calls.pop(call.msg_id, None)
        call._fire()

    def _fail_call(self, call: ReliableCall, reason: str, detail: str = "") -> None:
        call.state = CallState.FAILED
        call.failure = reason
        call.failure_detail = detail
        self.calls.pop(call.msg_id, None)
        call._fire()

    def fail_matching(self, predicate: Callable[[ReliableCall], bool], reason: str, detail: str = "") -> int:
        with self._lock:
            victims = [c for c in self.calls.values() if predicate(c)]
            for call in victims:
                self._fail_call(call, reason, detail)
            return len(victims)

    def fail_all(self, reason: str = "Aborted", detail: str = "") -> int:
        return self.fail_matching(lambda c: True, reason, detail)

    # -- responder ----------------------------------------------------------

    def serve(
        self,
        handler: Handler,
        *,
        kind: MessageKind = MessageKind.REQUEST,
        executor: Executor | None = None,
    ) -> None:
        if kind not in REQUEST_KINDS:
            raise ValueError(f"{kind.name} is not a request kind")
        self._handlers[kind] = (handler, executor or self._immediate_executor)

    def _immediate_executor(self, msg_id: str, payload: bytes, complete: Callable[..., None]) -> None:
        entry = self.cache.entries[msg_id]
        handler, _ = self._handlers[entry.kind]
        try:
            result = handler(payload)
        except Exception as exc:  # handler fault -> READY with failure marker
            complete(f"{type(exc).__name__}: {exc}".encode(), ok=False)
        else:
            complete(result, ok=True)

    def complete_request(self, msg_id: str, result: bytes, ok: bool = True) -> None:
        """Finish a pending request: cache the result and push it to the requester."""
        with self._lock:
            entry = self.cache.entries.get(msg_id)
            if entry is None or entry.status != ResultStatus.PENDING:
                return
            entry.status = ResultStatus.READY
            entry.result = result
            entry.ok = ok
            entry.ready_t = self._clock()
            self._push_response(msg_id, entry)

    def _push_response(self, msg_id: str, entry: ResultEntry) -> None:
        env = Envelope(
            msg_id=self._ids.next(),
            correlation_id=msg_id,
            job_id=entry.job_id,
            src=self.address,
            dst=entry.requester,
            kind=_RESPONSE_FOR[entry.kind],
            attempt=1,
            payload=_ready_payload(entry.result or b"", entry.ok),
        )
        self._send(env)

    def _ack(self, env: Envelope) -> None:
        ack = Envelope(
            msg_id=self._ids.next(),
            correlation_id=env.msg_id,
            job_id=env.job_id,
            src=self.address,
            dst=env.src,
            kind=MessageKind.ACK,
            attempt=1,
            payload=b"",
        )
        self._send(ack)

    def _on_request(self, env: Envelope) -> None:
        if env.kind not in self._handlers:
            return  # no handler installed for this kind; requester keeps retrying
        self._ack(env)
        entry = self.cache.entries.get(env.msg_id)
        if entry is None:
            entry = ResultEntry(requester=env.src, kind=env.kind, job_id=env.job_id)
            self.cache.entries[env.msg_id] = entry
            _, executor = self._handlers[env.kind]
            executor(
                env.msg_id,
                env.payload,
                lambda result, ok=True, _m=env.msg_id: self.complete_request(_m, result, ok),
            )
        elif entry.status in (ResultStatus.READY, ResultStatus.CONSUMED):
            self._push_response(env.msg_id, entry)
        # PENDING duplicate: already executing, the ACK is enough

    def _on_query(self, env: Envelope) -> None:
        entry = self.cache.entries.get(env.correlation_id)
        if entry is None:
            payload = _UNKNOWN_PAYLOAD
        elif entry.status == ResultStatus.PENDING:
            payload = _PENDING_PAYLOAD
        else:
            payload = _ready_payload(entry.result or b"", entry.ok)
        reply = Envelope(
            msg_id=self._ids.next(),
            correlation_id=env.correlation_id,
            job_id=env.job_id,
            src=self.address,
            dst=env.src,
            kind=MessageKind.QUERY_RESPONSE,
            attempt=1,
            payload=payload,
        )
        self._send(reply)

    # -- inbound dispatch ----------------------------------------------------

    def on_frame(self, env: Envelope) -> bool:
        """Handle one inbound envelope; returns False when it isn't ours."""
        with self._lock:
            if env.kind in REQUEST_KINDS:
                if env.kind not in self._handlers:
                    return False
                self._on_request(env)
                return True
            if env.kind == MessageKind.QUERY:
                self._on_query(env)
                return True
            if env.kind == MessageKind.ACK:
                call = self.calls.get(env.correlation_id)
                if call is None:
                    return False
                if call.state == CallState.SENDING:
                    self._enter_awaiting(call)
                return True
            if env.kind in (MessageKind.RESPONSE, MessageKind.GUEST_RET, MessageKind.QUERY_RESPONSE):
                call = self.calls.get(env.correlation_id)
                if call is None:
                    return False
                self._on_result_message(call, env)
                return True
            return False

    def _enter_awaiting(self, call: ReliableCall) -> None:
        now = self._clock()
        call.state = CallState.AWAITING
        call.awaiting_t = now
        call.result_deadline_t = now + call.cfg.result_deadline_ms
        call.next_query_t = now + call.cfg.query_ms

    def _on_result_message(self, call: ReliableCall, env: Envelope) -> None:
        try:
            obj = json.loads(env.payload.decode("utf-8"))
            status = obj["status"]
        except Exception:
            return  # not a well-formed protocol payload; ignore
        if status == "READY":
            result = base64.b64decode(obj.get("result_b64", ""))
            via = "query" if env.kind == MessageKind.QUERY_RESPONSE else "response"
            self._complete_call(call, result, bool(obj.get("ok", False)), via)
        elif status == "PENDING":
            # proof the request arrived even if the ACK was lost
            if call.state == CallState.SENDING:
                self._enter_awaiting(call)
        elif status == "UNKNOWN":
            # responder never saw the request (or evicted it): fall back to sending
            if call.state == CallState.AWAITING:
                call.state = CallState.SENDING
                call.next_attempt_t = self._clock()

    # -- timers ---------------------------------------------------------------

    def on_tick(self, now_ms: int) -> None:
        with self._lock:
            for call in list(self.calls.values()):
                if call.state == CallState.SENDING:
                    if now_ms >= call.send_deadline_t:
                        self._fail_call(
                            call,
                            SendTimeout.reason,
                            f"{call.kind.name} to {call.dst} unacknowledged after "
                            f"{call.attempt} attempts",
                        )
                    elif now_ms >= call.next_attempt_t:
                        self._attempt_send(call, now_ms)
                elif call.state == CallState.AWAITING:
                    if call.result_deadline_t is not None and now_ms >= call.result_deadline_t:
                        self._fail_call(
                            call,
                            ResultTimeout.reason,
                            f"{call.kind.name} to {call.dst} produced no result in "
                            f"{call.cfg.result_deadline_ms} ms",
                        )
                    elif call.next_query_t is not None and now_ms >= call.next_query_t:
                        self._send_query(call, now_ms)
            if now_ms >= self._next_gc_t:
                self.cache.gc(now_ms)
                self._next_gc_t = now_ms + max(1000, self.cache.retention_ms // 4)

    def next_deadline_ms(self) -> int | None:
        with self._lock:
            deadlines = []
            for call in self.calls.values():
                if call.state == CallState.SENDING:
                    deadlines.append(min(call.next_attempt_t, call.send_deadline_t))
                elif call.state == CallState.AWAITING:
                    if call.next_query_t is not None:
                        deadlines.append(call.next_query_t)
                    if call.result_deadline_t is not None:
                        deadlines.append(call.result_deadline_t)
            return min(deadlines, default=None)

    def gc_results(self, now_ms: int) -> int:
        with self._lock:
            return self.cache.gc(now_ms)


def wait_for_call(call: ReliableCall, timeout_s: float | None = None) -> ReliableCall:
    """Block a real thread until the call finishes (socket-mode helper)."""
    done = threading.Event()
    call.subscribe(lambda _c: done.set())
    if not done.wait(timeout_s):
        raise TimeoutError(f"call {call.msg_id} unfinished after {timeout_s}s")
    return call
