"""Envelope data model and the length-prefixed JSON framing used on every hop.

A frame is a 4-byte big-endian unsigned length L followed by L bytes of
UTF-8 JSON.  The JSON object has exactly the keys

    msg_id, correlation_id, job_id, src_site, src_worker,
    dst_site, dst_worker, kind, attempt, payload_b64

in that order, with no insignificant whitespace, so encoding is a pure
function of the envelope.  ``docs/wire.md`` documents the format
bit-exactly.
"""

from __future__ import annotations

import base64
import hashlib
import json
import re
import struct
import uuid
from dataclasses import dataclass
from enum import Enum

MAX_FRAME_BYTES = 64 * 1024 * 1024
ZERO_ID = "0" * 32
SERVER_SITE = "server"

_LEN = struct.Struct(">I")
_SITE_RE = re.compile(r"^[a-z0-9_-]{1,32}$")
_MSG_ID_RE = re.compile(r"^[0-9a-f]{32}$")

# Exact key order of the JSON object inside a frame.
FRAME_KEYS = (
    "msg_id",
    "correlation_id",
    "job_id",
    "src_site",
    "src_worker",
    "dst_site",
    "dst_worker",
    "kind",
    "attempt",
    "payload_b64",
)


class WireError(Exception):
    """Base class for framing errors."""


class FrameTooLarge(WireError):
    """Frame would exceed (or claims to exceed) the 64 MiB cap."""


class Truncated(WireError):
    """Fewer bytes available than the length prefix promises."""


class Malformed(WireError):
    """JSON or schema violation inside the frame body."""


class MessageKind(Enum):
    REQUEST = "REQUEST"
    RESPONSE = "RESPONSE"
    QUERY = "QUERY"
    QUERY_RESPONSE = "QUERY_RESPONSE"
    ACK = "ACK"
    SUBMIT = "SUBMIT"
    DEPLOY = "DEPLOY"
    STATUS = "STATUS"
    ABORT = "ABORT"
    HEARTBEAT = "HEARTBEAT"
    METRIC = "METRIC"
    GUEST_FWD = "GUEST_FWD"
    GUEST_RET = "GUEST_RET"


# Kinds allowed to travel without a job scope.
CONTROL_KINDS = frozenset(
    {MessageKind.SUBMIT, MessageKind.STATUS, MessageKind.ABORT, MessageKind.HEARTBEAT}
)
# Kinds that require a nonempty correlation_id.
CORRELATED_KINDS = frozenset({MessageKind.QUERY, MessageKind.QUERY_RESPONSE})
# Kinds that require a nonempty job_id on top of the control-kind rule.
JOB_ONLY_KINDS = frozenset({MessageKind.GUEST_FWD, MessageKind.GUEST_RET})


@dataclass(frozen=True)
class SiteAddress:
    """Addressable process: a site plus an optional job-worker label."""

    site: str
    worker: str = ""

    def __str__(self) -> str:
        return f"{self.site}/{self.worker}" if self.worker else self.site


@dataclass(frozen=True)
class Envelope:
    """One routed message.  ``correlation_id`` is ZERO_ID for requests."""

    msg_id: str
    correlation_id: str
    job_id: str
    src: SiteAddress
    dst: SiteAddress
    kind: MessageKind
    attempt: int
    payload: bytes

    def is_response_to(self, msg_id: str) -> bool:
        return self.correlation_id == msg_id


class IdSource:
    """128-bit message id generator, unique per instance lifetime.

    With a seed, the id stream is fully deterministic, which keeps run
    artifacts (trace logs) reproducible; unseeded instances use a random
    prefix.
    """

    def __init__(self, seed: int | None = None, namespace: str = ""):
        if seed is None:
            self._prefix = uuid.uuid4().hex[:16]
        else:
            material = f"{seed}:{namespace}".encode()
            self._prefix = hashlib.blake2b(material, digest_size=8).hexdigest()
        self._counter = 0

    def next(self) -> str:
        self._counter += 1
        return self._prefix + format(self._counter, "016x")


_default_ids = IdSource()


def new_msg_id() -> str:
    """Fresh process-unique message id (random prefix)."""
    return _default_ids.next()


def validate_envelope(env: Envelope) -> None:
    """Raise ValueError when any envelope invariant is violated."""
    if not _MSG_ID_RE.match(env.msg_id):
        raise ValueError(f"msg_id must be 32 lowercase hex chars, got {env.msg_id!r}")
    if not _MSG_ID_RE.match(env.correlation_id):
        raise ValueError(f"correlation_id must be 32 lowercase hex chars, got {env.correlation_id!r}")
    if len(env.job_id.encode("utf-8")) > 64:
        raise ValueError("job_id exceeds 64 bytes")
    for label, addr in (("src", env.src), ("dst", env.dst)):
        if not isinstance(addr, SiteAddress):
            raise ValueError(f"{label} is not a SiteAddress")
        if not _SITE_RE.match(addr.site):
            raise ValueError(f"{label}.site {addr.site!r} must match [a-z0-9_-]{{1,32}}")
        if len(addr.worker.encode("utf-8")) > 64:
            raise ValueError(f"{label}.worker exceeds 64 bytes")
    if not isinstance(env.kind, MessageKind):
        raise ValueError("kind is not a MessageKind")
    if not isinstance(env.attempt, int) or isinstance(env.attempt, bool) or env.attempt < 0:
        raise ValueError("attempt must be a non-negative integer")
    if not isinstance(env.payload, (bytes, bytearray)):
        raise ValueError("payload must be bytes")
    if env.job_id == "" and env.kind not in CONTROL_KINDS:
        raise ValueError(f"empty job_id only allowed for control kinds, not {env.kind.name}")
    if env.kind in CORRELATED_KINDS and env.correlation_id == ZERO_ID:
        raise ValueError(f"{env.kind.name} requires a nonempty correlation_id")
    if env.kind in JOB_ONLY_KINDS and env.job_id == "":
        raise ValueError(f"{env.kind.name} requires a nonempty job_id")


def encode_envelope(env: Envelope) -> bytes:
    """Serialize an envelope into one self-delimiting frame.

    Deterministic: equal envelopes encode to identical bytes.
    """
    validate_envelope(env)
    obj = {
        "msg_id": env.msg_id,
        "correlation_id": env.correlation_id,
        "job_id": env.job_id,
        "src_site": env.src.site,
        "src_worker": env.src.worker,
        "dst_site": env.dst.site,
        "dst_worker": env.dst.worker,
        "kind": env.kind.name,
        "attempt": env.attempt,
        "payload_b64": base64.b64encode(bytes(env.payload)).decode("ascii"),
    }
    body = json.dumps(obj, separators=(",", ":"), ensure_ascii=True).encode("utf-8")
    if len(body) > MAX_FRAME_BYTES:
        raise FrameTooLarge(f"frame body of {len(body)} bytes exceeds {MAX_FRAME_BYTES}")
    return _LEN.pack(len(body)) + body


def _decode_body(body: bytes) -> Envelope:
    try:
        obj = json.loads(body.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise Malformed(f"frame body is not valid JSON: {exc}") from exc
    if not isinstance(obj, dict):
        raise Malformed("frame body is not a JSON object")
    if set(obj.keys()) != set(FRAME_KEYS):
        raise Malformed(f"frame keys {sorted(obj.keys())} != {sorted(FRAME_KEYS)}")
    for key in FRAME_KEYS:
        if key == "attempt":
            if not isinstance(obj[key], int) or isinstance(obj[key], bool):
                raise Malformed("attempt is not an integer")
        elif not isinstance(obj[key], str):
            raise Malformed(f"{key} is not a string")
    try:
        kind = MessageKind[obj["kind"]]
    except KeyError as exc:
        raise Malformed(f"unknown kind {obj['kind']!r}") from exc
    try:
        payload = base64.b64decode(obj["payload_b64"].encode("ascii"), validate=True)
    except (ValueError, UnicodeEncodeError) as exc:
        raise Malformed(f"payload_b64 is not valid base64: {exc}") from exc
    env = Envelope(
        msg_id=obj["msg_id"],
        correlation_id=obj["correlation_id"],
        job_id=obj["job_id"],
        src=SiteAddress(obj["src_site"], obj["src_worker"]),
        dst=SiteAddress(obj["dst_site"], obj["dst_worker"]),
        kind=kind,
        attempt=obj["attempt"],
        payload=payload,
    )
    try:
        validate_envelope(env)
    except ValueError as exc:
        raise Malformed(str(exc)) from exc
    return env


def decode_envelope(frame: bytes) -> Envelope:
    """Strict inverse of encode_envelope on exactly one whole frame."""
    if len(frame) < _LEN.size:
        raise Truncated(f"{len(frame)} bytes is shorter than the 4-byte length prefix")
    (length,) = _LEN.unpack_from(frame)
    if length > MAX_FRAME_BYTES:
        raise FrameTooLarge(f"prefix claims {length} bytes, cap is {MAX_FRAME_BYTES}")
    if len(frame) < _LEN.size + length:
        raise Truncated(f"prefix promises {length} body bytes, only {len(frame) - _LEN.size} present")
    if len(frame) > _LEN.size + length:
        raise Malformed(f"{len(frame) - _LEN.size - length} trailing bytes after frame")
    return _decode_body(frame[_LEN.size :])


def read_frame(buf: bytes, offset: int = 0) -> tuple[bytes, int]:
    """Slice one whole frame out of ``buf`` at ``offset``.

    Returns (frame_bytes, next_offset).  Raises Truncated when the buffer
    does not yet hold a whole frame, which makes sequential decoding of
    concatenated frames possible.
    """
    if len(buf) - offset < _LEN.size:
        raise Truncated("incomplete length prefix")
    (length,) = _LEN.unpack_from(buf, offset)
    if length > MAX_FRAME_BYTES:
        raise FrameTooLarge(f"prefix claims {length} bytes, cap is {MAX_FRAME_BYTES}")
    end = offset + _LEN.size + length
    if len(buf) < end:
        raise Truncated("incomplete frame body")
    return buf[offset:end], end


def iter_frames(buf: bytes) -> list[bytes]:
    """Split a buffer of concatenated frames; the buffer must end on a frame boundary."""
    frames = []
    offset = 0
    while offset < len(buf):
        frame, offset = read_frame(buf, offset)
        frames.append(frame)
    return frames


class FrameReader:
    """Incremental framer for byte-stream transports; never splits or merges frames."""

    def __init__(self) -> None:
        self._buf = bytearray()

    def feed(self, data: bytes) -> list[bytes]:
        self._buf.extend(data)
        frames = []
        offset = 0
        while True:
            try:
                frame, offset = read_frame(bytes(self._buf), offset)
            except Truncated:
                break
            frames.append(frame)
        del self._buf[:offset]
        return frames


def frame_payload(body: bytes) -> bytes:
    """Length-prefix a raw body (the guest protocol's payload-only framing)."""
    if len(body) > MAX_FRAME_BYTES:
        raise FrameTooLarge(f"body of {len(body)} bytes exceeds {MAX_FRAME_BYTES}")
    return _LEN.pack(len(body)) + body


def unframe_payload(buf: bytes, offset: int = 0) -> tuple[bytes, int]:
    """Inverse of frame_payload; returns (body, next_offset)."""
    frame, end = read_frame(buf, offset)
    return frame[_LEN.size :], end
