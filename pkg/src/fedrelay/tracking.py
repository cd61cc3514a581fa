"""Experiment tracking: scalar metric streaming to a server-side log.

Client workers buffer records and ship them in batches as METRIC envelopes;
delivery is fire-and-forget with resend until the sink acknowledges the
batch.  The sink deduplicates on (site, tag, step) per job, so retries and
fabric duplication never produce double entries, and appends one JSON
object per record to ``runs/<job_id>/metrics.jsonl``.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

from .wire import Envelope, IdSource, MessageKind, SiteAddress, ZERO_ID

FLUSH_EVERY = 100
RESEND_MS = 500


@dataclass(frozen=True)
class MetricRecord:
    job_id: str
    site: str
    tag: str
    value: float
    step: int
    t_ms: int

    def validate(self) -> None:
        if not math.isfinite(self.value):
            raise ValueError(f"metric value must be finite, got {self.value!r}")
        if self.step < 0:
            raise ValueError("step must be >= 0")

    def key(self) -> tuple[str, str, int]:
        return (self.site, self.tag, self.step)

    def to_dict(self) -> dict:
        return {
            "job_id": self.job_id,
            "site": self.site,
            "tag": self.tag,
            "value": self.value,
            "step": self.step,
            "t_ms": self.t_ms,
        }

    @classmethod
    def from_dict(cls, obj: dict) -> "MetricRecord":
        record = cls(
            job_id=str(obj["job_id"]),
            site=str(obj["site"]),
            tag=str(obj["tag"]),
            value=float(obj["value"]),
            step=int(obj["step"]),
            t_ms=int(obj["t_ms"]),
        )
        record.validate()
        return record


class MetricsWriter:
    """One writer per client worker; never blocks training."""

    def __init__(
        self,
        job_id: str,
        site: str,
        address: SiteAddress,
        send: Callable[[Envelope], bool],
        ids: IdSource,
        clock: Callable[[], int],
        flush_every: int = FLUSH_EVERY,
        resend_ms: int = RESEND_MS,
    ):
        self.job_id = job_id
        self.site = site
        self.address = address
        self._send = send
        self._ids = ids
        self._clock = clock
        self.flush_every = flush_every
        self.resend_ms = resend_ms
        self._buffer: list[MetricRecord] = []
        self._unacked: dict[str, dict] = {}  # msg_id -> {records, attempt, next_t}
        self._last_step: dict[str, int] = {}
        self.journal: list[MetricRecord] = []  # everything ever written, for audits
        self.stopped = False

    def add_scalar(self, tag: str, value: float, step: int) -> None:
        record = MetricRecord(
            job_id=self.job_id,
            site=self.site,
            tag=tag,
            value=float(value),
            step=int(step),
            t_ms=self._clock(),
        )
        record.validate()
        last = self._last_step.get(tag)
        if last is not None and record.step <= last:
            raise ValueError(f"step {record.step} for {tag!r} is not increasing (last {last})")
        self._last_step[tag] = record.step
        self.journal.append(record)
        self._buffer.append(record)
        if len(self._buffer) >= self.flush_every:
            self.flush()

    def flush(self) -> None:
        if not self._buffer or self.stopped:
            return
        records, self._buffer = self._buffer, []
        msg_id = self._ids.next()
        self._unacked[msg_id] = {"records": records, "attempt": 0, "next_t": self._clock()}
        self._transmit(msg_id)

    def _transmit(self, msg_id: str) -> None:
        pending = self._unacked[msg_id]
        pending["attempt"] += 1
        pending["next_t"] = self._clock() + self.resend_ms
        env = Envelope(
            msg_id=msg_id,
            correlation_id=ZERO_ID,
            job_id=self.job_id,
            src=self.address,
            dst=SiteAddress("server"),
            kind=MessageKind.METRIC,
            attempt=pending["attempt"],
            payload=json.dumps(
                {"records": [r.to_dict() for r in pending["records"]]},
                sort_keys=True,
                separators=(",", ":"),
            ).encode(),
        )
        self._send(env)

    def on_ack(self, env: Envelope) -> bool:
        return self._unacked.pop(env.correlation_id, None) is not None

    def on_tick(self, now_ms: int) -> None:
        if self.stopped:
            return
        for msg_id, pending in list(self._unacked.items()):
            if now_ms >= pending["next_t"]:
                self._transmit(msg_id)

    def next_deadline_ms(self) -> int | None:
        if self.stopped or not self._unacked:
            return None
        return min(p["next_t"] for p in self._unacked.values())

    @property
    def drained(self) -> bool:
        return not self._buffer and not self._unacked

    def stop(self) -> None:
        self.stopped = True
        self._buffer.clear()
        self._unacked.clear()


class MetricSink:
    """Server-side: idempotent append-only metric log per job."""

    def __init__(
        self,
        run_root: str | Path,
        clock: Callable[[], int],
        send: Callable[[Envelope], bool],
        ids: IdSource,
        retention_ms: int = 5 * 60 * 1000,
    ):
        self.run_root = Path(run_root)
        self._clock = clock
        self._send = send
        self._ids = ids
        self.retention_ms = retention_ms
        self._jobs: dict[str, int | None] = {}  # job_id -> terminal t (None = live)
        self._seen: dict[str, set[tuple[str, str, int]]] = {}
        self.warnings = 0
        self.accepted = 0

    def register_job(self, job_id: str) -> None:
        self._jobs[job_id] = None
        self._seen.setdefault(job_id, set())

    def mark_terminal(self, job_id: str) -> None:
        if job_id in self._jobs:
            self._jobs[job_id] = self._clock()

    def _job_accepts(self, job_id: str) -> bool:
        if job_id not in self._jobs:
            return False
        terminal_t = self._jobs[job_id]
        if terminal_t is None:
            return True
        return self._clock() - terminal_t <= self.retention_ms

    def handle(self, env: Envelope) -> None:
        if env.kind != MessageKind.METRIC:
            return
        accepted = self._job_accepts(env.job_id)
        if accepted:
            try:
                obj = json.loads(env.payload.decode("utf-8"))
                records = [MetricRecord.from_dict(r) for r in obj["records"]]
            except (ValueError, KeyError) as exc:
                self.warnings += 1
                records = []
            path = self.run_root / env.job_id / "metrics.jsonl"
            path.parent.mkdir(parents=True, exist_ok=True)
            seen = self._seen.setdefault(env.job_id, set())
            with open(path, "a", encoding="utf-8") as fh:
                for record in records:
                    if record.key() in seen:
                        continue
                    seen.add(record.key())
                    fh.write(json.dumps(record.to_dict(), sort_keys=True) + "\n")
                    self.accepted += 1
        else:
            self.warnings += 1
        # always acknowledge so the writer stops resending
        ack = Envelope(
            msg_id=self._ids.next(),
            correlation_id=env.msg_id,
            job_id=env.job_id,
            src=SiteAddress("server"),
            dst=env.src,
            kind=MessageKind.ACK,
            attempt=1,
            payload=b"",
        )
        self._send(ack)


def read_metrics(run_root: str | Path, job_id: str) -> list[MetricRecord]:
    path = Path(run_root) / job_id / "metrics.jsonl"
    if not path.exists():
        return []
    records = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                records.append(MetricRecord.from_dict(json.loads(line)))
    return records


def export_csv(run_root: str | Path, job_id: str, tag: str, out_path: str | Path) -> Path:
    """Project one tag into step,site,value CSV sorted by (step, site)."""
    records = [r for r in read_metrics(run_root, job_id) if r.tag == tag]
    records.sort(key=lambda r: (r.step, r.site))
    out = Path(out_path)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "site", "value"])
        for record in records:
            writer.writerow([record.step, record.site, record.value])
    return out
