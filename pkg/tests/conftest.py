"""Shared helpers: sim peers for protocol-level tests, scenario builders."""

from __future__ import annotations

from fedrelay.netsim import Fabric, LinkPolicy, UnknownLink
from fedrelay.reliable import ReliableConfig, ReliableMessenger
from fedrelay.simloop import SimLoop
from fedrelay.system import ScenarioConfig
from fedrelay.wire import Envelope, IdSource, SiteAddress, encode_envelope


class SimPeer:
    """One fabric endpoint with a messenger and optional extra dispatch."""

    def __init__(self, loop: SimLoop, site: str, ids: IdSource, cfg: ReliableConfig | None = None):
        self.address = SiteAddress(site)
        self.loop = loop
        self.extra_dispatch = None  # fn(env) -> bool, tried before the messenger
        self.messenger = ReliableMessenger(
            self.address,
            self.transport_send,
            clock=lambda: loop.now,
            ids=ids,
            config=cfg,
        )
        loop.attach(self.address, self.on_env)
        loop.add_ticker(self.messenger)

    def transport_send(self, env: Envelope) -> bool:
        try:
            self.loop.fabric.send(self.address, SiteAddress(env.dst.site), encode_envelope(env))
        except UnknownLink:
            return False
        return True

    def on_env(self, env: Envelope) -> None:
        if self.extra_dispatch is not None and self.extra_dispatch(env):
            return
        self.messenger.on_frame(env)


def sim_pair(policy: LinkPolicy, cfg: ReliableConfig | None = None, seed: int = 0):
    fabric = Fabric()
    loop = SimLoop(fabric)
    ids = IdSource(seed=seed)
    client = SimPeer(loop, "client1", ids, cfg)
    server = SimPeer(loop, "server", ids, cfg)
    fabric.connect(client.address, server.address, policy)
    return loop, client, server


DEMO_APP = {
    "dimension": 4,
    "epochs": 1,
    "lr": 0.05,
    "examples_per_site": 8,
    "test_examples_per_site": 6,
    "noise_std": 0.1,
    "data_seed": 11,
    "server": {"num_rounds": 3, "strategy": "FEDAVG", "seed": 5},
}


def demo_app(**overrides) -> dict:
    app = {k: v for k, v in DEMO_APP.items()}
    server = dict(app["server"])
    if "server" in overrides:
        server.update(overrides.pop("server"))
    app.update(overrides)
    app["server"] = server
    return app


def make_scenario(
    n_sites: int = 2,
    slots: int = 3,
    links: dict | None = None,
    apps: dict | None = None,
    **overrides,
) -> ScenarioConfig:
    # nonzero latency by default so state transitions span simulated time
    obj = {
        "sites": [{"name": f"client{i + 1}", "slots": slots} for i in range(n_sites)],
        "links": {"default": {"latency_ms": [1, 5]}, **(links or {})},
        "apps": apps if apps is not None else {"demo": demo_app()},
        "seed": 42,
        **overrides,
    }
    return ScenarioConfig.from_dict(obj)
