"""Local-proxy bridge for guest traffic.

Each client worker hosts a Local Guest Server (LGS) that accepts its guest
node's connection; the server worker hosts a Local Guest Client (LGC) that
replays tunneled request bodies to the guest link and captures the
responses.  One guest exchange crosses six hops: node -> LGS -> client
worker -> (reliable GUEST_FWD) -> server worker -> LGC -> link, and the
response travels the reverse path.  Bodies are opaque bytes; the bridge
never parses them.

Streams multiplex independent guest connections: per stream, requests are
strictly sequential (one in-flight exchange) and seq numbers increase
without gaps in each direction.
"""

from __future__ import annotations

import base64
import json
from dataclasses import dataclass
from enum import Enum
from typing import Callable


class BridgeError(Exception):
    pass


class StreamClosed(BridgeError):
    pass


class Direction(Enum):
    TO_LINK = "TO_LINK"
    TO_NODE = "TO_NODE"


@dataclass(frozen=True)
class GuestMessage:
    stream_id: int
    seq: int
    direction: Direction
    body: bytes

    def validate(self) -> None:
        if self.stream_id < 0 or self.seq < 1:
            raise ValueError("stream_id must be >= 0 and seq >= 1")


def encode_guest_payload(msg: GuestMessage) -> bytes:
    """Envelope payload for GUEST_FWD / GUEST_RET; body stays opaque b64."""
    return json.dumps(
        {
            "stream_id": msg.stream_id,
            "seq": msg.seq,
            "body_b64": base64.b64encode(msg.body).decode("ascii"),
        },
        sort_keys=True,
        separators=(",", ":"),
    ).encode()


def decode_guest_payload(payload: bytes, direction: Direction) -> GuestMessage:
    try:
        obj = json.loads(payload.decode("utf-8"))
        msg = GuestMessage(
            stream_id=int(obj["stream_id"]),
            seq=int(obj["seq"]),
            direction=direction,
            body=base64.b64decode(obj["body_b64"]),
        )
    except (ValueError, KeyError, TypeError) as exc:
        raise BridgeError(f"malformed guest payload: {exc}") from exc
    msg.validate()
    return msg


# forward(msg, on_reply, on_error): tunnel one TO_LINK message; exactly one
# of the callbacks fires, on_reply with the TO_NODE GuestMessage.
Forward = Callable[[GuestMessage, Callable[["GuestMessage"], None], Callable[[str, str], None]], None]


class GuestStream:
    """One guest node connection through the LGS; sequential request/response."""

    def __init__(self, stream_id: int, forward: Forward, on_transcript=None):
        self.stream_id = stream_id
        self._forward = forward
        self._on_transcript = on_transcript or (lambda entry: None)
        self._next_seq = 1
        self._expected_reply_seq = 1
        self._in_flight = False
        self.open = True

    def request(
        self,
        body: bytes,
        on_reply: Callable[[bytes], None],
        on_error: Callable[[str, str], None],
    ) -> None:
        if not self.open:
            raise StreamClosed(f"stream {self.stream_id} is closed")
        if self._in_flight:
            raise BridgeError(
                f"stream {self.stream_id}: a request is already in flight"
            )
        msg = GuestMessage(self.stream_id, self._next_seq, Direction.TO_LINK, body)
        self._next_seq += 1
        self._in_flight = True
        self._on_transcript({"stream": self.stream_id, "seq": msg.seq, "dir": "TO_LINK"})

        def _deliver(reply: GuestMessage) -> None:
            self._in_flight = False
            if not self.open:
                # guest node went away; drop, the caller logs and continues
                return
            if reply.seq != self._expected_reply_seq:
                self.close()
                on_error("BridgeError", f"out-of-order reply seq {reply.seq}")
                return
            self._expected_reply_seq += 1
            self._on_transcript(
                {"stream": self.stream_id, "seq": reply.seq, "dir": "TO_NODE"}
            )
            on_reply(reply.body)

        def _fail(kind: str, detail: str) -> None:
            self._in_flight = False
            on_error(kind, detail)

        self._forward(msg, _deliver, _fail)

    def close(self) -> None:
        self.open = False


class LocalGuestServer:
    """Accepts guest node connections inside one client worker.

    In simulator mode nodes connect in-process; the socket adapter binds a
    loopback-only listener in front of the same object.  Connections are
    refused until the job is running.
    """

    def __init__(self, forward: Forward, on_transcript=None):
        self._forward = forward
        self._on_transcript = on_transcript
        self._next_stream_id = 1
        self.running = False
        self.streams: dict[int, GuestStream] = {}

    def set_running(self, flag: bool) -> None:
        self.running = flag

    def connect(self) -> GuestStream:
        if not self.running:
            raise StreamClosed("job is not running; connection refused")
        stream = GuestStream(self._next_stream_id, self._forward, self._on_transcript)
        self._next_stream_id += 1
        self.streams[stream.stream_id] = stream
        return stream

    def close_all(self) -> None:
        self.running = False
        for stream in self.streams.values():
            stream.close()
        self.streams.clear()


class LocalGuestClient:
    """Server-worker side: replays tunneled bodies to the guest link.

    ``link_request(stream_id, body) -> response body`` owns the per-stream
    guest-link connection; exceptions propagate to the reliable layer and
    come back to the requester as a peer fault.
    """

    def __init__(self, link_request: Callable[[int, bytes], bytes]):
        self._link_request = link_request

    def handle_forward(self, payload: bytes) -> bytes:
        msg = decode_guest_payload(payload, Direction.TO_LINK)
        response = self._link_request(msg.stream_id, msg.body)
        reply = GuestMessage(msg.stream_id, msg.seq, Direction.TO_NODE, response)
        return encode_guest_payload(reply)
