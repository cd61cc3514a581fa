"""Event-driven driver for simulated time.

Advances the fabric clock straight to the next event (delivery, timer, or
component deadline), dispatching everything due at each instant until
quiescent.  Single-threaded; component callbacks run inline, so the whole
simulation is deterministic given the fabric seeds and the registration
order of endpoints and tickers.
"""

from __future__ import annotations

import heapq
from typing import Callable, Protocol

from .netsim import Fabric
from .wire import Envelope, SiteAddress, decode_envelope


class Ticker(Protocol):
    def on_tick(self, now_ms: int) -> None: ...

    def next_deadline_ms(self) -> int | None: ...


class SimLoop:
    MAX_SAME_TIME_ROUNDS = 10_000

    def __init__(self, fabric: Fabric):
        self.fabric = fabric
        self._handlers: dict[SiteAddress, Callable[[Envelope], None]] = {}
        self._tickers: list[Ticker] = []
        self._timers: list[tuple[int, int, Callable[[], None]]] = []
        self._timer_seq = 0

    @property
    def now(self) -> int:
        return self.fabric.now_ms

    def attach(self, address: SiteAddress, handler: Callable[[Envelope], None]) -> None:
        self.fabric.endpoint(address)
        self._handlers[address] = handler

    def detach(self, address: SiteAddress) -> None:
        self._handlers.pop(address, None)

    def add_ticker(self, ticker: Ticker) -> None:
        self._tickers.append(ticker)

    def remove_ticker(self, ticker: Ticker) -> None:
        if ticker in self._tickers:
            self._tickers.remove(ticker)

    def call_at(self, t_ms: int, fn: Callable[[], None]) -> None:
        heapq.heappush(self._timers, (max(t_ms, self.now), self._timer_seq, fn))
        self._timer_seq += 1

    def call_later(self, delay_ms: int, fn: Callable[[], None]) -> None:
        self.call_at(self.now + delay_ms, fn)

    # -- core ---------------------------------------------------------------

    def _dispatch(self, deliveries) -> bool:
        progressed = False
        for delivery in deliveries:
            endpoint = self.fabric.endpoint(delivery.dst)
            if endpoint.inbox:
                endpoint.inbox.popleft()
            handler = self._handlers.get(delivery.dst)
            if handler is None:
                continue
            handler(decode_envelope(delivery.frame))
            progressed = True
        return progressed

    def _fire_timers(self) -> bool:
        fired = False
        while self._timers and self._timers[0][0] <= self.now:
            _, _, fn = heapq.heappop(self._timers)
            fn()
            fired = True
        return fired

    def pump(self) -> None:
        """Run every delivery, timer and tick due at the current instant."""
        for _ in range(self.MAX_SAME_TIME_ROUNDS):
            self._dispatch(self.fabric.step(0))
            self._fire_timers()
            for ticker in list(self._tickers):
                ticker.on_tick(self.now)
            deliveries_due = self.fabric.next_due_ms() == self.now
            timers_due = bool(self._timers) and self._timers[0][0] <= self.now
            if not deliveries_due and not timers_due:
                return
        raise RuntimeError(f"simulation livelock at t={self.now}")

    def _next_event_ms(self) -> int | None:
        candidates = []
        due = self.fabric.next_due_ms()
        if due is not None:
            candidates.append(due)
        if self._timers:
            candidates.append(self._timers[0][0])
        for ticker in self._tickers:
            deadline = ticker.next_deadline_ms()
            if deadline is not None:
                candidates.append(deadline)
        return min(candidates, default=None)

    def run_until(self, cond: Callable[[], bool], max_ms: int) -> bool:
        """Advance simulated time until cond() holds; False on budget/quiescence."""
        deadline = self.now + max_ms
        while True:
            self.pump()
            if cond():
                return True
            nxt = self._next_event_ms()
            if nxt is None:
                return False
            if nxt <= self.now:
                nxt = self.now + 1  # deadline already due; force a minimal advance
            if nxt > deadline:
                self._dispatch(self.fabric.step(deadline - self.now))
                self.pump()
                return cond()
            self._dispatch(self.fabric.step(nxt - self.now))

    def run_for(self, ms: int) -> None:
        end = self.now + ms
        self.run_until(lambda: False, ms)
        if self.now < end:
            self._dispatch(self.fabric.step(end - self.now))
            self.pump()
