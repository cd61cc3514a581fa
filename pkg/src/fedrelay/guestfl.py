"""Minimal guest FL framework on a synthetic least-squares task.

A server app runs R rounds of a strategy (weighted averaging or a
server-side adaptive update) over client apps exposing fit/evaluate.  The
client/server exchange is a pull/push protocol over opaque JSON bodies, so
the same app runs standalone (direct in-process transport) or tunneled
through the bridge.  Everything is deterministic given the config seeds:
repeated runs produce bit-identical histories.

Model math uses float64 throughout; aggregation reduces client results in
canonical site order with exact rational arithmetic, so the result is
independent of arrival order and conserves identical updates exactly.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from enum import Enum
from fractions import Fraction
from pathlib import Path
from typing import Callable

import numpy as np


class GuestAppError(Exception):
    pass


class DimensionMismatch(GuestAppError):
    pass


class Strategy(Enum):
    FEDAVG = "FEDAVG"
    FEDADAM = "FEDADAM"


@dataclass
class ServerConfig:
    num_rounds: int = 3
    strategy: Strategy = Strategy.FEDAVG
    strategy_params: dict = field(default_factory=dict)
    seed: int = 0

    def validate(self) -> None:
        if self.num_rounds < 1:
            raise ValueError("num_rounds must be >= 1")

    @classmethod
    def from_dict(cls, obj: dict) -> "ServerConfig":
        cfg = cls(
            num_rounds=int(obj.get("num_rounds", 3)),
            strategy=Strategy(str(obj.get("strategy", "FEDAVG")).upper()),
            strategy_params=dict(obj.get("strategy_params", {})),
            seed=int(obj.get("seed", 0)),
        )
        cfg.validate()
        return cfg


@dataclass
class AppConfig:
    """Contents of an app.json bundle."""

    dimension: int = 16
    epochs: int = 1
    lr: float = 0.05
    examples_per_site: int = 40
    test_examples_per_site: int = 20
    noise_std: float = 0.1
    data_seed: int = 1
    eval_threshold: float = 0.5
    tracking: bool = False
    server: ServerConfig = field(default_factory=ServerConfig)

    def validate(self) -> None:
        if self.dimension < 1:
            raise ValueError("dimension must be >= 1")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.examples_per_site < 1 or self.test_examples_per_site < 1:
            raise ValueError("shard sizes must be >= 1")
        self.server.validate()

    @classmethod
    def from_dict(cls, obj: dict) -> "AppConfig":
        cfg = cls(
            dimension=int(obj.get("dimension", 16)),
            epochs=int(obj.get("epochs", 1)),
            lr=float(obj.get("lr", 0.05)),
            examples_per_site=int(obj.get("examples_per_site", 40)),
            test_examples_per_site=int(obj.get("test_examples_per_site", 20)),
            noise_std=float(obj.get("noise_std", 0.1)),
            data_seed=int(obj.get("data_seed", 1)),
            eval_threshold=float(obj.get("eval_threshold", 0.5)),
            tracking=bool(obj.get("tracking", False)),
            server=ServerConfig.from_dict(obj.get("server", {})),
        )
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path: str | Path) -> "AppConfig":
        with open(path, "r", encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))


@dataclass(frozen=True)
class ModelVector:
    weights: tuple[float, ...]
    version: int = 0

    def __post_init__(self):
        if not all(math.isfinite(w) for w in self.weights):
            raise ValueError("weights must be finite")

    @classmethod
    def of(cls, values, version: int = 0) -> "ModelVector":
        return cls(tuple(float(v) for v in values), version)

    @property
    def dimension(self) -> int:
        return len(self.weights)

    def as_array(self) -> np.ndarray:
        return np.array(self.weights, dtype=np.float64)


@dataclass
class FitResult:
    weights: ModelVector
    num_examples: int
    metrics: dict[str, float] = field(default_factory=dict)

    def __post_init__(self):
        if self.num_examples < 1:
            raise ValueError("num_examples must be >= 1")


@dataclass
class EvalResult:
    loss: float
    num_examples: int
    metrics: dict[str, float] = field(default_factory=dict)

    def __post_init__(self):
        if not math.isfinite(self.loss):
            raise ValueError("loss must be finite")
        if self.num_examples < 1:
            raise ValueError("num_examples must be >= 1")
        if "accuracy" not in self.metrics:
            raise ValueError('metrics must contain "accuracy"')
        if not 0.0 <= self.metrics["accuracy"] <= 1.0:
            raise ValueError("accuracy must lie in [0,1]")


# ---------------------------------------------------------------------------
# Synthetic data


def _site_key(site: str) -> int:
    return int.from_bytes(hashlib.blake2b(site.encode(), digest_size=8).digest(), "big")


def true_weights(cfg: AppConfig) -> np.ndarray:
    rng = np.random.default_rng([cfg.data_seed, 0])
    return rng.standard_normal(cfg.dimension)


@dataclass
class SiteData:
    x_train: np.ndarray
    y_train: np.ndarray
    x_test: np.ndarray
    y_test: np.ndarray


def make_site_data(cfg: AppConfig, site: str) -> SiteData:
    """Per-site shard of the shared least-squares task, fixed by site seed."""
    w_star = true_weights(cfg)
    rng = np.random.default_rng([cfg.data_seed, _site_key(site)])
    n, m, d = cfg.examples_per_site, cfg.test_examples_per_site, cfg.dimension
    x_train = rng.standard_normal((n, d))
    y_train = x_train @ w_star + cfg.noise_std * rng.standard_normal(n)
    x_test = rng.standard_normal((m, d))
    y_test = x_test @ w_star + cfg.noise_std * rng.standard_normal(m)
    return SiteData(x_train, y_train, x_test, y_test)


def initial_model(cfg: AppConfig) -> ModelVector:
    rng = np.random.default_rng([cfg.server.seed, 1])
    return ModelVector.of(0.1 * rng.standard_normal(cfg.dimension), version=0)


# ---------------------------------------------------------------------------
# Client app


class GuestClientApp:
    """fit/evaluate over the site's local shard; deterministic given seeds."""

    def __init__(self, site: str, cfg: AppConfig):
        self.site = site
        self.cfg = cfg
        self.data = make_site_data(cfg, site)

    def _check_dims(self, model: ModelVector) -> np.ndarray:
        if model.dimension != self.cfg.dimension:
            raise DimensionMismatch(
                f"model has {model.dimension} weights, site data expects {self.cfg.dimension}"
            )
        return model.as_array()

    def fit(self, global_model: ModelVector, config: dict) -> FitResult:
        """E epochs of full-batch gradient descent on the half-MSE objective."""
        w = self._check_dims(global_model)
        epochs = int(config.get("epochs", self.cfg.epochs))
        lr = float(config.get("lr", self.cfg.lr))
        x, y = self.data.x_train, self.data.y_train
        n = len(y)
        for _ in range(epochs):
            grad = x.T @ (x @ w - y) / n
            w = w - lr * grad
        residual = x @ w - y
        train_loss = 0.5 * float(residual @ residual) / n
        return FitResult(
            weights=ModelVector.of(w, version=global_model.version),
            num_examples=n,
            metrics={"train_loss": train_loss},
        )

    def evaluate(self, global_model: ModelVector, config: dict) -> EvalResult:
        """Mean squared error and thresholded accuracy on the held-out shard."""
        w = self._check_dims(global_model)
        x, y = self.data.x_test, self.data.y_test
        residual = x @ w - y
        loss = float(residual @ residual) / len(y)
        threshold = float(config.get("eval_threshold", self.cfg.eval_threshold))
        accuracy = float(np.count_nonzero(np.abs(residual) < threshold)) / len(y)
        return EvalResult(loss=loss, num_examples=len(y), metrics={"accuracy": accuracy})


# ---------------------------------------------------------------------------
# Server-side aggregation


def aggregate_fedavg(results: list[tuple[str, FitResult]]) -> ModelVector:
    """Example-count-weighted mean of client weights.

    Reduction runs in canonical site order over exact rationals, so the
    correctly-rounded float result is independent of input order and equals
    the common vector exactly when all updates agree.
    """
    if not results:
        raise ValueError("no results to aggregate")
    ordered = sorted(results, key=lambda item: item[0])
    dim = ordered[0][1].weights.dimension
    version = ordered[0][1].weights.version
    for _, result in ordered:
        if result.weights.dimension != dim:
            raise DimensionMismatch("client results disagree on dimension")
    total = sum(result.num_examples for _, result in ordered)
    out = []
    for i in range(dim):
        acc = Fraction(0)
        for _, result in ordered:
            acc += result.num_examples * Fraction(result.weights.weights[i])
        out.append(float(acc / total))
    return ModelVector.of(out, version=version)


@dataclass
class FedAdamState:
    m: tuple[float, ...]
    v: tuple[float, ...]
    eta: float = 0.1
    beta1: float = 0.9
    beta2: float = 0.99
    tau: float = 1e-9

    @classmethod
    def fresh(cls, dimension: int, params: dict | None = None) -> "FedAdamState":
        params = params or {}
        return cls(
            m=(0.0,) * dimension,
            v=(0.0,) * dimension,
            eta=float(params.get("eta", 0.1)),
            beta1=float(params.get("beta1", 0.9)),
            beta2=float(params.get("beta2", 0.99)),
            tau=float(params.get("tau", 1e-9)),
        )


def aggregate_fedadam(
    results: list[tuple[str, FitResult]],
    state: FedAdamState,
    current: ModelVector,
) -> tuple[ModelVector, FedAdamState]:
    """Adaptive server update on the pseudo-gradient (weighted mean - current)."""
    w_avg = aggregate_fedavg(results).as_array()
    w_global = current.as_array()
    m = np.array(state.m)
    v = np.array(state.v)
    delta = w_avg - w_global
    m = state.beta1 * m + (1.0 - state.beta1) * delta
    v = state.beta2 * v + (1.0 - state.beta2) * delta * delta
    w_new = w_global + state.eta * m / (np.sqrt(v) + state.tau)
    new_state = FedAdamState(
        m=tuple(m.tolist()), v=tuple(v.tolist()),
        eta=state.eta, beta1=state.beta1, beta2=state.beta2, tau=state.tau,
    )
    return ModelVector.of(w_new, version=current.version), new_state


# ---------------------------------------------------------------------------
# Guest protocol bodies (the bytes the bridge carries, opaque to it)


def encode_body(obj: dict) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8")


def decode_body(body: bytes) -> dict:
    obj = json.loads(body.decode("utf-8"))
    if not isinstance(obj, dict) or "op" not in obj:
        raise GuestAppError("malformed guest protocol body")
    return obj


class LinkApp:
    """Server-side state machine: runs the rounds, answers pull/push bodies.

    One instance per run; ``handle`` is the single entry point for both the
    direct transport and the bridge's guest-link connection.
    """

    def __init__(self, cfg: AppConfig, sites: list[str]):
        if not sites:
            raise ValueError("at least one participating site required")
        self.cfg = cfg
        self.sites = sorted(sites)
        self.round = 1
        self.phase = "fit"  # fit | evaluate
        self.model = initial_model(cfg)
        self.adam = FedAdamState.fresh(cfg.dimension, cfg.server.strategy_params)
        self.assigned: set[str] = set()
        self.collected: dict[str, dict] = {}
        self.history: list[dict] = []
        self.finished = False
        self.failed: str | None = None

    # -- protocol entry -----------------------------------------------------

    def handle(self, body: bytes) -> bytes:
        try:
            obj = decode_body(body)
            if obj["op"] == "pull":
                return encode_body(self._pull(obj["site"]))
            if obj["op"] == "push":
                return encode_body(self._push(obj))
            if obj["op"] == "fault":
                self._fail(f"client {obj.get('site')}: {obj.get('error')}")
                return encode_body({"op": "ok"})
        except GuestAppError as exc:
            self._fail(str(exc))
            return encode_body({"op": "error", "error": str(exc)})
        return encode_body({"op": "error", "error": f"unknown op {obj['op']!r}"})

    def _fail(self, reason: str) -> None:
        if not self.finished:
            self.failed = self.failed or reason
            self.finished = True

    def _pull(self, site: str) -> dict:
        if site not in self.sites:
            raise GuestAppError(f"unknown site {site!r}")
        if self.failed:
            return {"op": "task", "task": "abort", "reason": self.failed}
        if self.finished:
            return {"op": "task", "task": "finish"}
        if site in self.assigned or site in self.collected:
            return {"op": "task", "task": "none"}
        self.assigned.add(site)
        task = {
            "op": "task",
            "task": self.phase,
            "round": self.round,
            "weights": list(self.model.weights),
            "config": {"epochs": self.cfg.epochs, "lr": self.cfg.lr},
        }
        return task

    def _push(self, obj: dict) -> dict:
        site = obj.get("site")
        if site not in self.sites:
            raise GuestAppError(f"unknown site {site!r}")
        if self.finished:
            return {"op": "ok"}
        if obj.get("round") != self.round or obj.get("task") != self.phase:
            raise GuestAppError(
                f"push for round {obj.get('round')}/{obj.get('task')} in "
                f"round {self.round}/{self.phase}"
            )
        self.collected[site] = obj
        self.assigned.discard(site)
        if len(self.collected) == len(self.sites):
            self._finish_phase()
        return {"op": "ok"}

    def _finish_phase(self) -> None:
        if self.phase == "fit":
            results = []
            for site in self.sites:
                obj = self.collected[site]
                results.append(
                    (
                        site,
                        FitResult(
                            weights=ModelVector.of(obj["weights"], version=self.round),
                            num_examples=int(obj["num_examples"]),
                            metrics=dict(obj.get("metrics", {})),
                        ),
                    )
                )
            if self.cfg.server.strategy == Strategy.FEDADAM:
                self.model, self.adam = aggregate_fedadam(results, self.adam, self.model)
            else:
                self.model = aggregate_fedavg(results)
            self.phase = "evaluate"
        else:
            total = sum(int(self.collected[s]["num_examples"]) for s in self.sites)
            loss = (
                sum(
                    float(self.collected[s]["loss"]) * int(self.collected[s]["num_examples"])
                    for s in self.sites
                )
                / total
            )
            accuracy = (
                sum(
                    float(self.collected[s]["metrics"]["accuracy"])
                    * int(self.collected[s]["num_examples"])
                    for s in self.sites
                )
                / total
            )
            self.history.append({"round": self.round, "loss": loss, "accuracy": accuracy})
            if self.round >= self.cfg.server.num_rounds:
                self.finished = True
            else:
                self.round += 1
                self.phase = "fit"
        self.collected.clear()
        self.assigned.clear()


class GuestNode:
    """Client-side loop: pull a task, compute, push the result.

    ``step_task`` is transport-agnostic: callers run the two-exchange cycle
    themselves (the bridged driver) or use ``run`` with a synchronous
    exchange function (the direct mode).
    """

    def __init__(self, site: str, cfg: AppConfig, writer=None):
        self.site = site
        self.cfg = cfg
        self.client = GuestClientApp(site, cfg)
        self.writer = writer
        self.finished = False
        self.fail_reason: str | None = None
        self._train_step = 0

    def pull_body(self) -> bytes:
        return encode_body({"op": "pull", "site": self.site})

    def handle_task(self, body: bytes) -> bytes | None:
        """React to a pulled task; returns the push body, or None when there
        is nothing to send (none/finish/abort)."""
        obj = decode_body(body)
        if obj.get("op") == "error":
            self.finished = True
            self.fail_reason = obj.get("error", "link error")
            return None
        task = obj.get("task")
        if task == "none":
            return None
        if task == "finish":
            self.finished = True
            return None
        if task == "abort":
            self.finished = True
            self.fail_reason = obj.get("reason", "aborted")
            return None
        model = ModelVector.of(obj["weights"], version=int(obj["round"]))
        try:
            if task == "fit":
                result = self.client.fit(model, obj.get("config", {}))
                if self.writer is not None:
                    self.writer.add_scalar(
                        "train_loss", result.metrics["train_loss"], self._train_step
                    )
                    self._train_step += 1
                return encode_body(
                    {
                        "op": "push",
                        "site": self.site,
                        "round": obj["round"],
                        "task": "fit",
                        "weights": list(result.weights.weights),
                        "num_examples": result.num_examples,
                        "metrics": result.metrics,
                    }
                )
            if task == "evaluate":
                result = self.client.evaluate(model, obj.get("config", {}))
                return encode_body(
                    {
                        "op": "push",
                        "site": self.site,
                        "round": obj["round"],
                        "task": "evaluate",
                        "loss": result.loss,
                        "num_examples": result.num_examples,
                        "metrics": result.metrics,
                    }
                )
        except GuestAppError as exc:
            self.finished = True
            self.fail_reason = str(exc)
            return encode_body(
                {"op": "fault", "site": self.site, "round": obj.get("round"), "error": str(exc)}
            )
        raise GuestAppError(f"unknown task {task!r}")

    def step(self, exchange: Callable[[bytes], bytes]) -> None:
        """One pull (and push, when a task was assigned) over a synchronous
        transport."""
        task_body = exchange(self.pull_body())
        push = self.handle_task(task_body)
        if push is not None:
            exchange(push)


def run_server_app(cfg: AppConfig, transport) -> list[dict]:
    """Drive the round loop against a transport that serves the link app.

    The transport owns client pacing; it is handed the LinkApp and must
    pump guest exchanges until the app finishes.  Returns the per-round
    history (partial when the run failed).
    """
    link = LinkApp(cfg, transport.sites())
    transport.serve(link)
    return link.history


class DirectTransport:
    """In-process transport: nodes call the link handler directly, stepping
    round-robin in sorted site order for a deterministic schedule."""

    def __init__(self, cfg: AppConfig, sites: list[str], writers: dict | None = None):
        self.cfg = cfg
        self._sites = sorted(sites)
        self._writers = writers or {}

    def sites(self) -> list[str]:
        return list(self._sites)

    def serve(self, link: LinkApp) -> None:
        nodes = [
            GuestNode(site, self.cfg, writer=self._writers.get(site)) for site in self._sites
        ]
        exchange = link.handle
        guard = 0
        while not all(node.finished for node in nodes):
            for node in nodes:
                if not node.finished:
                    node.step(exchange)
            guard += 1
            if guard > 10_000 * (self.cfg.server.num_rounds + 1):
                raise GuestAppError("direct run did not converge to a finish")


def run_direct(cfg: AppConfig, sites: list[str], writers: dict | None = None) -> list[dict]:
    """Standalone run: the guest app alone, no runtime, no bridge."""
    return run_server_app(cfg, DirectTransport(cfg, sites, writers))


def history_bytes(history: list[dict]) -> bytes:
    """Canonical history.json bytes; float repr round-trips exactly."""
    return (
        json.dumps(
            [
                {"round": h["round"], "loss": h["loss"], "accuracy": h["accuracy"]}
                for h in history
            ],
            separators=(",", ":"),
        )
        + "\n"
    ).encode("utf-8")


def write_history(path: str | Path, history: list[dict]) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(history_bytes(history))
