"""EP message passing between a server and its clients.

Four strategies share one round structure (broadcast, client inference,
summed aggregation):

``fedep``
    Stateful clients. Each keeps a site factor ``q_k``; the cavity is
    ``q_global / q_k`` and the site is updated with the damped delta.
``fedsep``
    Stateless. All clients share one factor ``qbar`` with
    ``q_global = prior * qbar**K``; ``qbar`` is recomputed from ``q_global``.
``fedpa``
    Cavity is the improper uniform, so each client approximates its own
    local posterior.
``fedavg``
    Point-estimate baseline: clients send ``theta_local - theta_global`` and
    the server moves the mode by the weighted mean of those.

Every server update is ``param += damping * optimizer(sum of deltas)``.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import gaussian as G
from .gaussian import GaussianDelta, MeanFieldGaussian, MomentsView
from .inference import PRECISION_FLOOR, InferenceConfig, TiltedProblem, infer, sgd_samples
from .models import DatasetShard, ModelSpec
from .optimizers import Optimizer, identity

STRATEGIES = ("fedep", "fedsep", "fedpa", "fedavg")
FEDAVG_REFERENCE_PRECISION = 1.0
CHECKPOINT_VERSION = 1
BYTES_PER_FLOAT = 8
TRACE_SCHEMA = 1


@dataclass
class ServerState:
    q_global: MeanFieldGaussian
    prior: MeanFieldGaussian
    strategy: str = "fedep"
    damping: float = 1.0
    num_clients: int = 1
    optim_eta: Optimizer = field(default_factory=identity)
    optim_lam: Optimizer = field(default_factory=identity)
    round: int = 0
    floored_total: int = 0
    last_floored: int = 0

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ValueError(f"unknown strategy {self.strategy!r}; expected one of {STRATEGIES}")
        if self.q_global.dim != self.prior.dim:
            raise G.DimensionError("q_global and prior dimensions differ")
        if not 0 <= self.damping <= 1:
            raise ValueError("damping must lie in [0, 1]")

    @property
    def dim(self) -> int:
        return self.q_global.dim

    def to_dict(self) -> dict:
        return {
            "q_global": self.q_global.to_dict(),
            "prior": self.prior.to_dict(),
            "strategy": self.strategy,
            "damping": self.damping,
            "num_clients": self.num_clients,
            "optim_eta": self.optim_eta.to_dict(),
            "optim_lam": self.optim_lam.to_dict(),
            "round": self.round,
            "floored_total": self.floored_total,
        }

    @classmethod
    def from_dict(cls, data: dict) -> ServerState:
        return cls(
            q_global=MeanFieldGaussian.from_dict(data["q_global"]),
            prior=MeanFieldGaussian.from_dict(data["prior"]),
            strategy=data["strategy"],
            damping=data["damping"],
            num_clients=data["num_clients"],
            optim_eta=Optimizer.from_dict(data["optim_eta"]),
            optim_lam=Optimizer.from_dict(data["optim_lam"]),
            round=data["round"],
            floored_total=data["floored_total"],
        )


@dataclass
class ClientRecord:
    client_id: str
    spec: ModelSpec
    shard: DatasetShard | None
    site: MeanFieldGaussian
    last_theta: np.ndarray
    optim_eta: Optimizer = field(default_factory=identity)
    optim_lam: Optimizer = field(default_factory=identity)

    @classmethod
    def new(cls, client_id, spec: ModelSpec, shard=None, client_optim: Optimizer | None = None, init_theta=None):
        d = spec.param_dim
        opt = client_optim or identity()
        theta = np.zeros(d) if init_theta is None else np.array(init_theta, dtype=float)
        return cls(str(client_id), spec, shard, G.improper_uniform(d), theta, opt.fresh(), opt.fresh())

    @property
    def n_data(self) -> int:
        if self.spec.kind == "gaussian-client" or self.shard is None:
            return 1
        return len(self.shard)

    def state_dict(self) -> dict:
        return {
            "client_id": self.client_id,
            "site": self.site.to_dict(),
            "last_theta": self.last_theta.tolist(),
            "optim_eta": self.optim_eta.to_dict(),
            "optim_lam": self.optim_lam.to_dict(),
        }

    def load_state(self, data: dict) -> None:
        if data["client_id"] != self.client_id:
            raise ValueError(f"state for client {data['client_id']!r} applied to {self.client_id!r}")
        self.site = MeanFieldGaussian.from_dict(data["site"])
        self.last_theta = np.array(data["last_theta"], dtype=float)
        self.optim_eta = Optimizer.from_dict(data["optim_eta"])
        self.optim_lam = Optimizer.from_dict(data["optim_lam"])


@dataclass
class ClientUpdate:
    delta: GaussianDelta
    client_id: str
    weight: int
    tilted_loss_final: float = float("nan")
    inference_backend: str = ""
    # Tilted precision when it is one scalar broadcast over coordinates.
    compact_lam: float | None = None
    floored: int = 0
    # FedAvg messages carry only the mean shift.
    mean_only: bool = False

    @property
    def bytes_up(self) -> int:
        d = self.delta.dim
        if self.mean_only:
            return d * BYTES_PER_FLOAT
        return (d + (1 if self.compact_lam is not None else d)) * BYTES_PER_FLOAT


@dataclass
class RoundMetrics:
    round: int
    phase: str
    sampled: list[str]
    eval_loss: float | None = None
    eval_accuracy: float | None = None
    floored: int = 0
    mean_abs_delta_eta: float = 0.0
    bytes_up: int = 0
    bytes_down: int = 0
    wall_ms: float = 0.0

    def record(self) -> dict:
        """Deterministic trace record (wall time deliberately excluded)."""
        return {
            "schema": TRACE_SCHEMA,
            "round": self.round,
            "phase": self.phase,
            "sampled": self.sampled,
            "eval_loss": self.eval_loss,
            "eval_accuracy": self.eval_accuracy,
            "floored": self.floored,
            "mean_abs_delta_eta": self.mean_abs_delta_eta,
            "bytes_up": self.bytes_up,
            "bytes_down": self.bytes_down,
        }


def encode_update(update: ClientUpdate) -> dict:
    """Wire form of an update; a scalar tilted precision replaces ``d_lam``."""
    msg = {"client_id": update.client_id, "weight": update.weight, "d_eta": update.delta.d_eta.tolist()}
    if update.compact_lam is not None:
        msg["lam"] = update.compact_lam
    else:
        msg["d_lam"] = update.delta.d_lam.tolist()
    return msg


def decode_update(msg: dict, q_global: MeanFieldGaussian) -> ClientUpdate:
    d_eta = np.array(msg["d_eta"], dtype=float)
    if "lam" in msg:
        d_lam = float(msg["lam"]) - q_global.lam
        compact = float(msg["lam"])
    else:
        d_lam = np.array(msg["d_lam"], dtype=float)
        compact = None
    return ClientUpdate(GaussianDelta(d_eta, d_lam), msg["client_id"], int(msg["weight"]), compact_lam=compact)


def shared_factor(q_global: MeanFieldGaussian, prior: MeanFieldGaussian, num_clients: int) -> MeanFieldGaussian:
    """The stochastic-EP factor ``qbar = (q_global / prior) ** (1/K)``.

    Negative precision in ``q_global / prior`` is clipped to zero.
    """
    if num_clients < 1:
        raise ValueError("fedsep needs at least one client")
    ratio = G.quotient(q_global, prior)
    lam = np.maximum(ratio.lam, 0.0)
    return G.power(MeanFieldGaussian(ratio.eta, lam), 1.0 / num_clients)


def cavity(server: ServerState, client: ClientRecord) -> MeanFieldGaussian:
    s = server.strategy
    if s == "fedep":
        return G.quotient(server.q_global, client.site)
    if s == "fedsep":
        return G.quotient(server.q_global, shared_factor(server.q_global, server.prior, server.num_clients))
    if s == "fedpa":
        return G.improper_uniform(server.dim)
    raise ValueError("fedavg does not use a cavity")


def _warm_start(server: ServerState, client: ClientRecord) -> np.ndarray:
    if server.q_global.is_proper:
        return G.mode(server.q_global)
    return client.last_theta.copy()


def client_round(
    server: ServerState, client: ClientRecord, inf_cfg: InferenceConfig, rng: np.random.Generator
) -> ClientUpdate:
    """One client's EP step: cavity, tilted inference, delta, local update.

    Only ``fedep`` mutates ``client`` (its site and optimizer slots); the
    returned delta is independent of the damping.
    """
    q_global = server.q_global
    cav = cavity(server, client)
    problem = TiltedProblem(client.spec, client.shard, cav, _warm_start(server, client))
    result = infer(problem, inf_cfg, rng)
    tilted = result.q
    delta = GaussianDelta(tilted.eta - q_global.eta, tilted.lam - q_global.lam)
    if server.strategy == "fedep":
        d = server.damping
        client.site = MeanFieldGaussian(
            client.site.eta + d * client.optim_eta.apply(delta.d_eta),
            client.site.lam + d * client.optim_lam.apply(delta.d_lam),
        )
    compact = None
    if inf_cfg.backend == "scaled-identity":
        compact = float(tilted.lam[0])
    return ClientUpdate(
        delta,
        client.client_id,
        client.n_data,
        result.final_loss,
        inf_cfg.backend,
        compact,
        result.floored,
    )


def server_aggregate(server: ServerState, updates: list[ClientUpdate]) -> ServerState:
    """Damped, optimizer-transformed sum of client deltas onto ``q_global``.

    Only the two summed vectors are used, so the step is compatible with
    secure aggregation. Precision is floored at 1e-12 afterwards.
    """
    if not updates:
        raise ValueError("server_aggregate needs at least one update")
    sum_eta = np.sum([u.delta.d_eta for u in updates], axis=0)
    sum_lam = np.sum([u.delta.d_lam for u in updates], axis=0)
    return _apply_sums(server, sum_eta, sum_lam)


def _apply_sums(server: ServerState, sum_eta: np.ndarray, sum_lam: np.ndarray) -> ServerState:
    q = server.q_global
    d = server.damping
    eta = q.eta + d * server.optim_eta.apply(sum_eta)
    lam = q.lam + d * server.optim_lam.apply(sum_lam)
    bad = int(np.sum(~(lam >= PRECISION_FLOOR)))
    server.last_floored = bad
    server.floored_total += bad
    server.q_global = MeanFieldGaussian(eta, np.maximum(lam, PRECISION_FLOOR))
    server.round += 1
    return server


def fedavg_client_round(
    server: ServerState, client: ClientRecord, inf_cfg: InferenceConfig, rng: np.random.Generator
) -> ClientUpdate:
    """Local SGD on the plain NLL from the global mode; sends the mean shift."""
    theta0 = G.mode(server.q_global)
    problem = TiltedProblem(client.spec, client.shard, G.improper_uniform(server.dim), theta0)
    samples, loss = sgd_samples(problem, inf_cfg, rng)
    shift = samples[-1] - theta0
    return ClientUpdate(
        GaussianDelta(shift, np.zeros_like(shift)),
        client.client_id,
        client.n_data,
        loss,
        "fedavg",
        mean_only=True,
    )


def fedavg_server_aggregate(server: ServerState, updates: list[ClientUpdate]) -> ServerState:
    """Move the mode by the |D_k|-weighted mean shift; precision stays at 1."""
    if not updates:
        raise ValueError("fedavg_server_aggregate needs at least one update")
    weights = np.array([u.weight for u in updates], dtype=float)
    shifts = np.array([u.delta.d_eta for u in updates])
    mean_shift = weights @ shifts / weights.sum()
    mu = G.mode(server.q_global) + server.damping * server.optim_eta.apply(mean_shift)
    var = np.full_like(mu, 1.0 / FEDAVG_REFERENCE_PRECISION)
    server.q_global = G.from_moments(MomentsView(mu, var))
    server.last_floored = 0
    server.round += 1
    return server


def fedavg_state(mu, damping: float = 1.0, optim: Optimizer | None = None, num_clients: int = 1) -> ServerState:
    """A FedAvg server whose global point is ``mu``."""
    mu = np.asarray(mu, dtype=float)
    q = G.from_moments(MomentsView(mu, np.full_like(mu, 1.0 / FEDAVG_REFERENCE_PRECISION)))
    opt = optim or identity()
    return ServerState(
        q, G.improper_uniform(mu.size), "fedavg", damping, num_clients, opt.fresh(), opt.fresh()
    )


def handoff(
    server: ServerState, clients: dict[str, ClientRecord], strategy: str, total_data: int, alpha_cov: float
) -> ServerState:
    """Switch a burned-in FedAvg server to an inference strategy.

    The global mean stays at the FedAvg point, the global precision becomes
    ``total_data / alpha_cov`` everywhere, client sites and all optimizer
    slots are cleared.
    """
    mu = G.mode(server.q_global)
    lam = np.full_like(mu, total_data / alpha_cov)
    server.q_global = MeanFieldGaussian(lam * mu, lam)
    server.strategy = strategy
    server.optim_eta.reset()
    server.optim_lam.reset()
    for c in clients.values():
        c.site = G.improper_uniform(server.dim)
        c.optim_eta.reset()
        c.optim_lam.reset()
    return server


def run_round(
    server: ServerState,
    clients: dict[str, ClientRecord],
    sampled_ids: list[str],
    inf_cfg: InferenceConfig,
    rng: np.random.Generator,
) -> tuple[ServerState, RoundMetrics]:
    """Broadcast, run every sampled client, aggregate.

    Each client gets its own generator seeded from ``rng`` in sampled order,
    so the round is reproducible from ``(rng state, sampled_ids)``.
    """
    if not sampled_ids:
        raise ValueError("no clients sampled")
    missing = [c for c in sampled_ids if c not in clients]
    if missing:
        raise KeyError(f"sampled clients not in population: {missing}")
    start = time.perf_counter()
    seeds = rng.integers(0, 2**63 - 1, size=len(sampled_ids))
    fedavg = server.strategy == "fedavg"
    step = fedavg_client_round if fedavg else client_round
    updates = []
    for cid, seed in zip(sampled_ids, seeds):
        try:
            updates.append(step(server, clients[cid], inf_cfg, np.random.default_rng(int(seed))))
        except Exception as exc:
            raise RuntimeError(f"client {cid!r} failed in round {server.round + 1}: {exc}") from exc
    if fedavg:
        fedavg_server_aggregate(server, updates)
    else:
        server_aggregate(server, updates)
    metrics = RoundMetrics(
        round=server.round,
        phase=server.strategy,
        sampled=list(sampled_ids),
        floored=server.last_floored,
        mean_abs_delta_eta=float(np.mean([np.mean(np.abs(u.delta.d_eta)) for u in updates])),
        bytes_up=sum(u.bytes_up for u in updates),
        bytes_down=len(updates) * 2 * server.dim * BYTES_PER_FLOAT,
        wall_ms=(time.perf_counter() - start) * 1e3,
    )
    return server, metrics


def save_checkpoint(path, server: ServerState, clients: dict[str, ClientRecord]) -> None:
    data = {
        "version": CHECKPOINT_VERSION,
        "server": server.to_dict(),
        "clients": [c.state_dict() for c in clients.values()],
    }
    Path(path).write_text(json.dumps(data))


def load_checkpoint(path, clients: dict[str, ClientRecord] | None = None) -> tuple[ServerState, list[dict]]:
    """Read a checkpoint; client states are applied to ``clients`` when given."""
    data = json.loads(Path(path).read_text())
    if data.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {data.get('version')!r}")
    server = ServerState.from_dict(data["server"])
    if clients is not None:
        for state in data["clients"]:
            clients[state["client_id"]].load_state(state)
    return server, data["clients"]
