"""Job lifecycle, scheduling, routing, liveness and teardown."""

from __future__ import annotations

import json

import pytest
from conftest import demo_app, make_scenario

from fedrelay.runtime import (
    DuplicateJobId,
    JobSpec,
    JobState,
    NeverSchedulable,
    NotAMember,
    UnknownApp,
    UnknownJob,
)
from fedrelay.system import SimSystem
from fedrelay.wire import Envelope, MessageKind, SiteAddress, ZERO_ID, decode_envelope


def boot(tmp_path, scenario=None) -> SimSystem:
    return SimSystem(scenario or make_scenario(), run_root=tmp_path / "runs").boot()


def spec(job_id="j1", **overrides) -> JobSpec:
    base = dict(job_id=job_id, app_ref="demo", min_sites=2)
    base.update(overrides)
    return JobSpec(**base)


# ---------------------------------------------------------------------------
# submit / happy path


def test_simple_job_runs_to_finished(tmp_path):
    system = boot(tmp_path)
    status = system.submit(spec())
    assert status.state == JobState.SUBMITTED
    final = system.run_until_terminal("j1", max_ms=60_000)
    assert final.state == JobState.FINISHED
    assert final.started_t is not None and final.started_t <= final.ended_t
    assert final.per_site == {"client1": "done", "client2": "done", "server": "done"}
    assert system.read_history("j1") is not None
    assert (tmp_path / "runs" / "j1" / "events.jsonl").exists()


def test_state_sequence_is_monotone(tmp_path):
    system = boot(tmp_path)
    system.submit(spec())
    system.run_until_terminal("j1", max_ms=60_000)
    states = [e["to"] for e in system.events if e["job_id"] == "j1"]
    assert states == ["SUBMITTED", "SCHEDULED", "DEPLOYED", "RUNNING", "FINISHED"]


def test_duplicate_job_id_rejected_while_live(tmp_path):
    system = boot(tmp_path)
    system.submit(spec())
    with pytest.raises(DuplicateJobId):
        system.submit(spec())
    system.run_until_terminal("j1", max_ms=60_000)
    # terminal ids may be reused
    system.submit(spec())
    assert system.run_until_terminal("j1", max_ms=60_000).state == JobState.FINISHED


def test_unknown_app_rejected(tmp_path):
    system = boot(tmp_path)
    with pytest.raises(UnknownApp):
        system.submit(spec(app_ref="nope"))


def test_never_schedulable(tmp_path):
    system = boot(tmp_path)
    with pytest.raises(NeverSchedulable):
        system.submit(spec(min_sites=3))
    with pytest.raises(NeverSchedulable):
        system.submit(spec(site_filter=["client1"], min_sites=2))


def test_monitor_unknown_job(tmp_path):
    system = boot(tmp_path)
    with pytest.raises(UnknownJob):
        system.status("ghost")


# ---------------------------------------------------------------------------
# scheduling: FIFO + slots


def test_three_concurrent_jobs_all_running(tmp_path):
    """Three jobs, three slots per site: they overlap like the multi-job
    architecture's three colored job networks."""
    system = boot(tmp_path, make_scenario(apps={"demo": demo_app(server={"num_rounds": 6})}))
    for i in (1, 2, 3):
        system.submit(spec(f"j{i}"))
    saw_all_running = []

    class Watcher:
        def on_tick(self, now):
            states = {s.job_id: s.state for s in system.list_jobs()}
            if all(states.get(f"j{i}") == JobState.RUNNING for i in (1, 2, 3)):
                saw_all_running.append(now)

        def next_deadline_ms(self):
            return None

    system.loop.add_ticker(Watcher())
    results = system.run_until_all_terminal(max_ms=120_000)
    assert all(s.state == JobState.FINISHED for s in results)
    assert saw_all_running, "the three jobs never overlapped in RUNNING"


def test_fifo_blocking_admission_matches_oracle(tmp_path):
    """Two jobs needing 2 slots/site on 3-slot sites: the second waits in
    SCHEDULED until the first finishes; admission order is FIFO."""
    scenario = make_scenario(apps={"demo": demo_app(server={"num_rounds": 2})})
    system = boot(tmp_path, scenario)
    system.submit(spec("j1", resources={"client1": 2, "client2": 2}))
    system.submit(spec("j2", resources={"client1": 2, "client2": 2}))

    observed = []

    def watch(event):
        observed.append((event["job_id"], event["to"], event["t_ms"]))

    system.watch_events(watch)
    results = system.run_until_all_terminal(max_ms=240_000)
    assert all(s.state == JobState.FINISHED for s in results)

    def t_of(job, state):
        return next(t for j, s, t in observed if j == job and s == state)

    # brute-force FIFO+slots oracle: j2 cannot deploy before j1 releases
    assert t_of("j2", "DEPLOYED") >= t_of("j1", "FINISHED")
    # while j1 ran, j2 sat in SCHEDULED
    assert t_of("j2", "SCHEDULED") <= t_of("j1", "RUNNING") or t_of("j2", "SCHEDULED") <= t_of(
        "j1", "FINISHED"
    )


def test_slot_conservation_throughout(tmp_path):
    scenario = make_scenario(apps={"demo": demo_app(server={"num_rounds": 4})})
    system = boot(tmp_path, scenario)
    total = {name: slots for name, slots in scenario.sites}
    violations = []

    class SlotWatcher:
        def on_tick(self, now):
            for site, free in system.server.scp.free_slots.items():
                if free < 0 or free > total[site]:
                    violations.append((now, site, free))

        def next_deadline_ms(self):
            return None

    system.loop.add_ticker(SlotWatcher())
    for i in (1, 2, 3):
        system.submit(spec(f"j{i}", resources={"client1": 2, "client2": 2}))
    system.run_until_all_terminal(max_ms=600_000)
    assert not violations
    assert system.server.scp.free_slots == total  # all released


def test_scheduler_timeline_matches_brute_force(tmp_path):
    """Replay the admission decisions with an independent FIFO+slots
    simulation fed by the observed deploy/finish times."""
    scenario = make_scenario(apps={"demo": demo_app(server={"num_rounds": 2})})
    system = boot(tmp_path, scenario)
    jobs = [
        ("a1", {"client1": 2, "client2": 2}),
        ("a2", {"client1": 2, "client2": 2}),
        ("a3", {"client1": 1, "client2": 1}),
    ]
    for job_id, resources in jobs:
        system.submit(spec(job_id, resources=resources))
    system.run_until_all_terminal(max_ms=600_000)

    deploy_t = {}
    finish_t = {}
    for e in system.events:
        if e["to"] == "DEPLOYED":
            deploy_t[e["job_id"]] = e["t_ms"]
        if e["to"] in ("FINISHED", "ABORTED", "FAILED"):
            finish_t[e["job_id"]] = e["t_ms"]
    assert set(deploy_t) == {"a1", "a2", "a3"}

    # oracle: strict FIFO; a2 needs a1's slots; a3 queued behind a2
    assert deploy_t["a1"] < deploy_t["a2"]
    assert deploy_t["a2"] >= finish_t["a1"]
    assert deploy_t["a3"] >= deploy_t["a2"]


# ---------------------------------------------------------------------------
# abort


def test_abort_running_job_idempotent(tmp_path):
    scenario = make_scenario(apps={"demo": demo_app(server={"num_rounds": 100})})
    system = boot(tmp_path, scenario)
    system.submit(spec())
    system.loop.run_until(lambda: system.status("j1").state == JobState.RUNNING, 60_000)
    status = system.abort("j1", "test abort")
    assert status.state == JobState.ABORTED
    assert status.failure_reason == "test abort"
    again = system.abort("j1", "second")
    assert again.state == JobState.ABORTED
    assert again.failure_reason == "test abort"  # unchanged; idempotent no-op
    total = {name: slots for name, slots in scenario.sites}
    assert system.server.scp.free_slots == total


def test_abort_unknown_job(tmp_path):
    system = boot(tmp_path)
    with pytest.raises(UnknownJob):
        system.abort("ghost")


def test_full_partition_aborts_within_send_deadline(tmp_path):
    scenario = make_scenario(
        apps={"demo": demo_app(server={"num_rounds": 500})},
        links={"client1": {"partition_at_ms": 120}},
    )
    system = boot(tmp_path, scenario)
    system.submit(spec())
    system.loop.run_until(lambda: system.status("j1").state == JobState.RUNNING, 60_000)
    final = system.run_until_terminal("j1", max_ms=120_000)
    assert final.state == JobState.ABORTED
    assert final.failure_reason
    assert "offline" in final.failure_reason
    # well within the 30 s send deadline, driven by missed heartbeats
    assert final.ended_t - 120 <= 30_000


def test_result_timeout_reported_by_worker_names_call(tmp_path):
    scenario = make_scenario(apps={"demo": demo_app(server={"num_rounds": 50})})
    system = boot(tmp_path, scenario)
    system.submit(spec(reliable={"result_deadline_ms": 400, "query_ms": 100}))
    system.loop.run_until(lambda: system.status("j1").state == JobState.RUNNING, 60_000)

    # make the guest link hang: forwarded requests never complete
    worker = system.server.workers["j1"]

    def hung_executor(msg_id, payload, complete):
        pass  # never completes; the requester's result deadline trips

    worker.messenger.serve(worker.lgc.handle_forward, kind=MessageKind.GUEST_FWD, executor=hung_executor)
    final = system.run_until_terminal("j1", max_ms=120_000)
    assert final.state == JobState.ABORTED
    assert "ResultTimeout" in final.failure_reason
    assert "GUEST_FWD" in final.failure_reason


def test_guest_fault_fails_job(tmp_path):
    scenario = make_scenario(apps={"demo": demo_app(server={"num_rounds": 50})})
    system = boot(tmp_path, scenario)
    system.submit(spec())
    system.loop.run_until(lambda: system.status("j1").state == JobState.RUNNING, 60_000)
    worker = system.server.workers["j1"]

    def broken_link(stream_id, body):
        raise ConnectionError("guest link unreachable")

    worker.lgc._link_request = broken_link
    final = system.run_until_terminal("j1", max_ms=120_000)
    assert final.state == JobState.FAILED
    assert "PeerFault" in final.failure_reason or "unreachable" in final.failure_reason


# ---------------------------------------------------------------------------
# routing


def _running_system_with_job(tmp_path, messaging="relay", allow_direct=True):
    scenario = make_scenario(
        apps={"demo": demo_app(server={"num_rounds": 100})}, allow_direct=allow_direct
    )
    system = boot(tmp_path, scenario)
    system.submit(spec(messaging=messaging))
    assert system.loop.run_until(
        lambda: system.status("j1").state == JobState.RUNNING, 60_000
    )
    return system


def _probe_env(system, src_site, dst_site, job_id="j1"):
    return Envelope(
        msg_id=system.ids.next(),
        correlation_id=ZERO_ID,
        job_id=job_id,
        src=SiteAddress(src_site, job_id),
        dst=SiteAddress(dst_site, job_id),
        kind=MessageKind.REQUEST,
        attempt=1,
        payload=b"probe",
    )


def test_relay_route_traverses_server(tmp_path):
    system = _running_system_with_job(tmp_path, messaging="relay")
    env = _probe_env(system, "client1", "client2")
    system.route(env)
    system.loop.run_for(200)
    hops = [(str(d.src), str(d.dst)) for d in system.fabric.trace if d.msg_id == env.msg_id]
    assert hops == [("client1", "server"), ("server", "client2")]


def test_direct_route_single_hop_and_fallback(tmp_path):
    system = _running_system_with_job(tmp_path, messaging="direct")
    env = _probe_env(system, "client1", "client2")
    system.route(env)
    system.loop.run_for(200)
    hops = [(str(d.src), str(d.dst)) for d in system.fabric.trace if d.msg_id == env.msg_id]
    assert hops == [("client1", "client2")]

    # sever the direct link: traffic falls back to the relay
    system.fabric.link_between(SiteAddress("client1"), SiteAddress("client2")).close()
    env2 = _probe_env(system, "client1", "client2")
    system.route(env2)
    system.loop.run_for(200)
    hops2 = [(str(d.src), str(d.dst)) for d in system.fabric.trace if d.msg_id == env2.msg_id]
    assert hops2 == [("client1", "server"), ("server", "client2")]


def test_route_validation_errors(tmp_path):
    system = _running_system_with_job(tmp_path)
    with pytest.raises(UnknownJob):
        system.route(_probe_env(system, "client1", "client2", job_id="ghost"))
    bad = Envelope(
        msg_id=system.ids.next(),
        correlation_id=ZERO_ID,
        job_id="j1",
        src=SiteAddress("client1", "other"),
        dst=SiteAddress("client2", "j1"),
        kind=MessageKind.REQUEST,
        attempt=1,
        payload=b"",
    )
    with pytest.raises(NotAMember):
        system.route(bad)


def test_relay_star_topology_in_relay_mode(tmp_path):
    system = boot(tmp_path)
    system.submit(spec(messaging="relay"))
    system.run_until_terminal("j1", max_ms=60_000)
    for link in system.fabric.links():
        assert "server" in (link.a.site, link.b.site)


def test_direct_links_exist_only_during_job(tmp_path):
    scenario = make_scenario(apps={"demo": demo_app()}, allow_direct=True)
    system = boot(tmp_path, scenario)
    c1, c2 = SiteAddress("client1"), SiteAddress("client2")
    assert system.fabric.link_between(c1, c2) is None
    system.submit(spec(messaging="direct"))
    system.loop.run_until(lambda: system.status("j1").state == JobState.RUNNING, 60_000)
    assert system.fabric.link_between(c1, c2) is not None
    system.run_until_terminal("j1", max_ms=60_000)
    assert system.fabric.link_between(c1, c2) is None


# ---------------------------------------------------------------------------
# isolation and network lifetime


def test_multi_job_isolation_audit(tmp_path):
    scenario = make_scenario(apps={"demo": demo_app(server={"num_rounds": 4})})
    system = boot(tmp_path, scenario)
    for i in (1, 2, 3):
        system.submit(spec(f"j{i}"))
    results = system.run_until_all_terminal(max_ms=240_000)
    assert all(s.state == JobState.FINISHED for s in results)
    assert system.dropped == 0
    for delivery in system.fabric.trace:
        env = decode_envelope(delivery.frame)
        if env.dst.worker:
            assert env.dst.worker == env.job_id, f"cross-job delivery: {env}"
        if env.src.worker:
            assert env.src.worker == env.job_id


def test_no_job_network_traffic_outside_lifetime(tmp_path):
    system = boot(tmp_path)
    system.submit(spec())
    system.run_until_terminal("j1", max_ms=60_000)
    t = {e["to"]: e["t_ms"] for e in system.events if e["job_id"] == "j1"}
    for delivery in system.fabric.trace:
        env = decode_envelope(delivery.frame)
        if env.src.worker and env.dst.worker and env.job_id == "j1":
            assert t["DEPLOYED"] <= delivery.t_ms <= t["FINISHED"]


def test_relay_vs_direct_identical_history(tmp_path):
    histories = {}
    for mode in ("relay", "direct"):
        system = boot(tmp_path / mode)
        system.submit(spec(messaging=mode))
        final = system.run_until_terminal("j1", max_ms=60_000)
        assert final.state == JobState.FINISHED
        histories[mode] = system.history_path("j1").read_bytes()
    assert histories["relay"] == histories["direct"]


def test_heartbeat_recovery_allows_scheduling(tmp_path):
    scenario = make_scenario(
        links={"client1": {"partition_at_ms": 0, "restore_at_ms": 6000}},
    )
    system = boot(tmp_path, scenario)
    system.submit(spec())  # needs both sites; client1 offline at boot
    system.loop.run_for(2000)
    assert system.status("j1").state == JobState.SCHEDULED
    final = system.run_until_terminal("j1", max_ms=120_000)
    assert final.state == JobState.FINISHED
