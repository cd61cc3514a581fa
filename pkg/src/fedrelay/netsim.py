"""Deterministic in-process transport fabric.

Links carry whole frames between endpoints with configurable drop,
duplication, latency and partitions.  All randomness derives from the link
policy seed, so (topology, policies, seeds, send script) fully determines
the delivery trace.

Per-direction draw order for each send (this sequence is a compatibility
contract; tests reimplement it independently):

    1. partitioned -> no draws, nothing delivered
    2. r = rng.random(); dropped when r < drop_prob (no further draws)
    3. latency = rng.randint(min_ms, max_ms)
    4. r = rng.random(); duplicated when r < dup_prob, in which case the
       copy's latency is one more rng.randint(min_ms, max_ms)
"""

from __future__ import annotations

import hashlib
import heapq
import json
import random
from collections import deque
from dataclasses import dataclass, field
from typing import Callable

from .wire import Envelope, SiteAddress, decode_envelope


class FabricError(Exception):
    pass


class DuplicateLink(FabricError):
    pass


class LinkClosed(FabricError):
    pass


class UnknownLink(FabricError):
    pass


@dataclass
class LinkPolicy:
    drop_prob: float = 0.0
    dup_prob: float = 0.0
    latency_ms: tuple[int, int] = (0, 0)
    partitioned: bool = False
    seed: int = 0

    def validate(self) -> None:
        if not 0.0 <= self.drop_prob <= 1.0:
            raise ValueError(f"drop_prob {self.drop_prob} not in [0,1]")
        if not 0.0 <= self.dup_prob <= 1.0:
            raise ValueError(f"dup_prob {self.dup_prob} not in [0,1]")
        lo, hi = self.latency_ms
        if lo < 0 or hi < lo:
            raise ValueError(f"latency_ms {self.latency_ms} must satisfy 0 <= min <= max")
        if not 0 <= self.seed < 2**64:
            raise ValueError("seed must fit in 64 bits")

    @classmethod
    def from_dict(cls, obj: dict) -> "LinkPolicy":
        lat = obj.get("latency_ms", (0, 0))
        policy = cls(
            drop_prob=float(obj.get("drop_prob", 0.0)),
            dup_prob=float(obj.get("dup_prob", 0.0)),
            latency_ms=(int(lat[0]), int(lat[1])),
            partitioned=bool(obj.get("partitioned", False)),
            seed=int(obj.get("seed", 0)),
        )
        policy.validate()
        return policy


def derive_direction_seed(base_seed: int, src: SiteAddress, dst: SiteAddress) -> int:
    """Stable per-direction RNG seed; hashlib keeps it process-independent."""
    material = f"{base_seed}:{src}->{dst}".encode()
    return int.from_bytes(hashlib.blake2b(material, digest_size=8).digest(), "big")


@dataclass
class Endpoint:
    address: SiteAddress
    inbox: deque = field(default_factory=deque)


@dataclass
class Delivery:
    t_ms: int
    src: SiteAddress
    dst: SiteAddress
    frame: bytes
    msg_id: str
    kind: str
    job_id: str

    def trace_line(self) -> str:
        return json.dumps(
            {
                "t_ms": self.t_ms,
                "src": str(self.src),
                "dst": str(self.dst),
                "msg_id": self.msg_id,
                "kind": self.kind,
            },
            separators=(",", ":"),
        )


class _Direction:
    def __init__(self, src: SiteAddress, dst: SiteAddress, policy: LinkPolicy):
        self.src = src
        self.dst = dst
        self.rng = random.Random(derive_direction_seed(policy.seed, src, dst))


class Link:
    def __init__(self, link_id: int, a: SiteAddress, b: SiteAddress, policy: LinkPolicy):
        self.link_id = link_id
        self.a = a
        self.b = b
        self.policy = policy
        self.partitioned = policy.partitioned
        self.closed = False
        self._dirs = {
            (a, b): _Direction(a, b, policy),
            (b, a): _Direction(b, a, policy),
        }

    def direction(self, src: SiteAddress) -> _Direction:
        for (s, _d), direction in self._dirs.items():
            if s == src:
                return direction
        raise UnknownLink(f"{src} is not an end of link {self.a}<->{self.b}")

    def set_partitioned(self, flag: bool) -> None:
        self.partitioned = flag

    def close(self) -> None:
        self.closed = True


class Fabric:
    """Single-threaded stepped simulator; one caller drives it."""

    def __init__(self) -> None:
        self.now_ms = 0
        self._endpoints: dict[SiteAddress, Endpoint] = {}
        self._links: dict[frozenset, Link] = {}
        self._pending: list[tuple[int, int, int, Delivery]] = []  # (due, link_id, seq)
        self._seq = 0
        self._next_link_id = 0
        self.trace: list[Delivery] = []
        self._filter: Callable[[SiteAddress, SiteAddress, Envelope | None], bool] | None = None

    # -- topology ----------------------------------------------------------

    def endpoint(self, address: SiteAddress) -> Endpoint:
        if address not in self._endpoints:
            self._endpoints[address] = Endpoint(address)
        return self._endpoints[address]

    def connect(self, a: SiteAddress, b: SiteAddress, policy: LinkPolicy) -> Link:
        if a == b:
            raise ValueError(f"self-link forbidden: {a}")
        policy.validate()
        key = frozenset((a, b))
        if key in self._links and not self._links[key].closed:
            raise DuplicateLink(f"link {a}<->{b} already exists")
        self.endpoint(a)
        self.endpoint(b)
        link = Link(self._next_link_id, a, b, policy)
        self._next_link_id += 1
        self._links[key] = link
        return link

    def link_between(self, a: SiteAddress, b: SiteAddress) -> Link | None:
        link = self._links.get(frozenset((a, b)))
        if link is None or link.closed:
            return None
        return link

    def links(self) -> list[Link]:
        return [l for l in self._links.values() if not l.closed]

    def set_filter(
        self, fn: Callable[[SiteAddress, SiteAddress, Envelope | None], bool] | None
    ) -> None:
        """Test/experiment seam: veto sends before any policy draw."""
        self._filter = fn

    def set_partition(self, a: SiteAddress, b: SiteAddress, flag: bool) -> None:
        link = self.link_between(a, b)
        if link is None:
            raise UnknownLink(f"no link {a}<->{b}")
        link.set_partitioned(flag)

    # -- traffic -----------------------------------------------------------

    def send(self, src: SiteAddress, dst: SiteAddress, frame: bytes) -> None:
        link = self._links.get(frozenset((src, dst)))
        if link is None:
            raise UnknownLink(f"no link {src}<->{dst}")
        self.send_on(link, src, frame)

    def send_on(self, link: Link, src: SiteAddress, frame: bytes) -> None:
        if link.closed:
            raise LinkClosed(f"link {link.a}<->{link.b} is closed")
        direction = link.direction(src)
        dst = direction.dst
        env: Envelope | None
        try:
            env = decode_envelope(frame)
        except Exception:
            env = None
        if self._filter is not None and not self._filter(src, dst, env):
            return
        if link.partitioned:
            return
        rng = direction.rng
        if rng.random() < link.policy.drop_prob:
            return
        lo, hi = link.policy.latency_ms
        latency = rng.randint(lo, hi)
        self._enqueue(link, src, dst, frame, env, latency)
        if rng.random() < link.policy.dup_prob:
            self._enqueue(link, src, dst, frame, env, rng.randint(lo, hi))

    def _enqueue(
        self,
        link: Link,
        src: SiteAddress,
        dst: SiteAddress,
        frame: bytes,
        env: Envelope | None,
        latency: int,
    ) -> None:
        delivery = Delivery(
            t_ms=self.now_ms + latency,
            src=src,
            dst=dst,
            frame=frame,
            msg_id=env.msg_id if env else "",
            kind=env.kind.name if env else "RAW",
            job_id=env.job_id if env else "",
        )
        heapq.heappush(self._pending, (delivery.t_ms, link.link_id, self._seq, delivery))
        self._seq += 1

    # -- clock -------------------------------------------------------------

    def step(self, advance_ms: int) -> list[Delivery]:
        """Advance simulated time and return deliveries now due, in
        (due-time, link-id, sequence) order."""
        if advance_ms < 0:
            raise ValueError("advance_ms must be >= 0")
        self.now_ms += advance_ms
        due = []
        while self._pending and self._pending[0][0] <= self.now_ms:
            _, _, _, delivery = heapq.heappop(self._pending)
            self.endpoint(delivery.dst).inbox.append(delivery.frame)
            self.trace.append(delivery)
            due.append(delivery)
        return due

    def next_due_ms(self) -> int | None:
        return self._pending[0][0] if self._pending else None

    def write_trace(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for delivery in self.trace:
                fh.write(delivery.trace_line() + "\n")
