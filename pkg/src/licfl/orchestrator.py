"""The federation loop: a bootstrap round that cohorts the clients, then per-cohort rounds.

Round 1 broadcasts the initial model to every client, aggregates all updates
into one model and runs the configured cohorting on those updates. Every
cohort starts from that aggregated model. From round 2 on each cohort trains
and aggregates only among its own members, so parameters never cross cohort
boundaries again.
"""

from __future__ import annotations

import copy
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import metrics
from .aggregation import (
    AdaptiveState,
    ClientUpdate,
    StrategyKind,
    StrategyState,
    adaptive_select,
    compute_delta,
    fedavg_weighted,
    qfedavg_step,
    strategy_step,
)
from .cohorting import CohortAssignment, CohortConfig, cohort, moment_cohort, primary_cohort, refine
from .data import FederatedClient
from .model import NetworkSpec, ParamVector, client_update, init_params, loss, predict, save_params

log = logging.getLogger(__name__)

COHORTING_MODES = ("none", "primary", "licfl", "primary+licfl", "moments", "primary+moments")
ADAPTIVE = "adaptive"

INIT_SEED_TAG = 0x1D1
CLIENT_SEED_TAG = 0xC11


def derive_seed(master: int, *keys: int) -> int:
    """Stable 32-bit sub-seed for ``(master, *keys)``."""
    return int(np.random.SeedSequence([int(master), *(int(k) for k in keys)]).generate_state(1)[0])


@dataclass
class FederationConfig:
    rounds: int = 30
    lr: float = 0.2
    epochs: int = 1
    batch_size: int = 32
    hidden: tuple[int, ...] = (32, 16)
    aggregation: str = "FedAvg"  # a StrategyKind name or "adaptive"
    cohorting: str = "none"
    cohort: CohortConfig = field(default_factory=CohortConfig)
    meta_keys: tuple[str, ...] = ("model",)
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.99
    tau: float = 1e-3
    server_lr: float = 0.1
    qfed_q: float = 1.0
    weighted_delta: bool = False
    checkpoint_every: int = 0
    checkpoint_dir: str | None = None

    def __post_init__(self):
        if self.rounds < 1:
            raise ValueError(f"rounds must be >= 1, got {self.rounds}")
        if self.lr < 0 or self.epochs < 1 or self.batch_size < 1:
            raise ValueError("lr must be >= 0, epochs and batch_size >= 1")
        if self.cohorting not in COHORTING_MODES:
            raise ValueError(f"cohorting must be one of {COHORTING_MODES}, got {self.cohorting!r}")
        if self.aggregation != ADAPTIVE:
            StrategyKind.parse(self.aggregation)
        self.hidden = tuple(self.hidden)
        self.meta_keys = tuple(self.meta_keys)

    @property
    def adaptive(self) -> bool:
        return self.aggregation == ADAPTIVE

    @property
    def strategy(self) -> StrategyKind | None:
        return None if self.adaptive else StrategyKind.parse(self.aggregation)

    @property
    def server_hyper(self) -> dict:
        return {"beta1": self.beta1, "beta2": self.beta2, "tau": self.tau, "server_lr": self.server_lr}

    def to_dict(self) -> dict:
        d = {k: getattr(self, k) for k in self.__dataclass_fields__}
        d["cohort"] = self.cohort.to_dict()
        d["hidden"] = list(self.hidden)
        d["meta_keys"] = list(self.meta_keys)
        return d


@dataclass
class CohortModel:
    theta: ParamVector
    state: StrategyState | AdaptiveState | None = None


@dataclass
class RoundLog:
    round: int
    cohorts: list[dict]
    global_mse: float
    global_f1: float
    clients: list[dict]

    def to_json(self) -> dict:
        return {
            "round": self.round,
            "cohorts": self.cohorts,
            "global_mse": self.global_mse,
            "global_f1": self.global_f1,
            "clients": self.clients,
        }

    @classmethod
    def from_json(cls, obj: dict) -> RoundLog:
        return cls(obj["round"], obj["cohorts"], obj["global_mse"], obj["global_f1"], obj["clients"])


@dataclass
class FederationResult:
    logs: list[RoundLog]
    assignment: CohortAssignment
    registry: dict[int, CohortModel]
    theta0: ParamVector


def _initial_state(cfg: FederationConfig, theta: ParamVector):
    if cfg.adaptive:
        return AdaptiveState.initial(theta, **cfg.server_hyper)
    if cfg.strategy in (StrategyKind.FEDAVG, StrategyKind.QFEDAVG):
        return None
    return StrategyState.initial(theta, **cfg.server_hyper)


def _train_clients(clients, theta: ParamVector, cfg: FederationConfig, r: int) -> list[ClientUpdate]:
    updates = []
    for c in sorted(clients, key=lambda c: c.client_id):
        try:
            start_loss = loss(theta, c.train.x, c.train.y)
            new = client_update(theta, c.train.x, c.train.y, cfg.lr, cfg.epochs, cfg.batch_size,
                                seed=derive_seed(cfg.seed, CLIENT_SEED_TAG, c.client_id, r))
        except Exception as exc:
            raise RuntimeError(f"round {r}: client {c.client_id} failed: {exc}") from exc
        updates.append(ClientUpdate(c.client_id, new, c.num_samples, start_loss))
    return updates


def aggregate(updates, model: CohortModel, cfg: FederationConfig) -> tuple[CohortModel, dict]:
    """Apply the configured aggregation to one cohort; returns the new model and a log entry."""
    total = sum(u.num_samples for u in updates)
    entry = {
        "size": len(updates),
        "loss": float(sum(u.num_samples * u.loss for u in updates) / total),
    }
    if cfg.adaptive:
        theta, record, states = adaptive_select(updates, model.state, model.theta, cfg.weighted_delta)
        entry.update(record.to_json())
        return CohortModel(theta, states), entry

    kind = cfg.strategy
    entry["chosen"] = kind.value
    if kind is StrategyKind.FEDAVG:
        return CohortModel(fedavg_weighted(updates), None), entry
    if kind is StrategyKind.QFEDAVG:
        theta = qfedavg_step(model.theta, updates, cfg.qfed_q, lipschitz=1.0 / cfg.lr if cfg.lr > 0 else 1.0)
        return CohortModel(theta, None), entry
    delta = compute_delta(updates, model.theta, weighted=cfg.weighted_delta)
    theta, state = strategy_step(model.state, kind, delta)
    return CohortModel(theta, state), entry


def _cohort_clients(clients, updates, cfg: FederationConfig) -> CohortAssignment:
    ids = [c.client_id for c in clients]
    mode = cfg.cohorting
    if mode == "none":
        return CohortAssignment.single(ids)

    by_id = {u.client_id: u.params for u in updates}
    readings = {c.client_id: c.raw_train_readings() for c in clients}

    def licfl(members):
        if len(members) < 2:
            return CohortAssignment.single(members)
        k = cfg.cohort.k_cohorts
        sub = cfg.cohort if k == "auto" else _with_k(cfg.cohort, min(k, len(members)))
        return cohort({m: by_id[m] for m in members}, sub)

    def moments(members):
        k = cfg.cohort.k_cohorts
        if k == "auto":
            raise ValueError("moment cohorting needs an explicit k_cohorts")
        return moment_cohort({m: readings[m] for m in members}, k, seed=cfg.cohort.seed)

    if mode == "licfl":
        return licfl(ids)
    if mode == "moments":
        return moments(ids)
    primary = primary_cohort({c.client_id: c.meta for c in clients}, cfg.meta_keys)
    if mode == "primary":
        return primary
    return refine(primary, licfl if mode == "primary+licfl" else moments)


def _with_k(cc: CohortConfig, k: int) -> CohortConfig:
    return CohortConfig(n=cc.n, q=cc.q, sigma=cc.sigma, k_cohorts=k, seed=cc.seed, squared_kernel=cc.squared_kernel)


def evaluate(clients, assignment: CohortAssignment, registry: dict[int, CohortModel]) -> tuple[float, float, list[dict]]:
    """Each client's test MSE/F1 under its cohort's model; returns means and per-client rows."""
    rows = []
    for c in sorted(clients, key=lambda c: c.client_id):
        j = assignment.labels[c.client_id]
        pred = predict(registry[j].theta, c.test.x)
        rep = metrics.evaluate(pred, c.test.y)
        rows.append({"client": c.client_id, "cohort": j, "mse": rep.mse, "f1": rep.f1})
    return (
        float(np.mean([r["mse"] for r in rows])),
        float(np.mean([r["f1"] for r in rows])),
        rows,
    )


def run_round_one(clients, theta0: ParamVector, cfg: FederationConfig):
    """Bootstrap round; returns ``(assignment, registry, updates, cohort_log_entry)``."""
    updates = _train_clients(clients, theta0, cfg, 1)
    model, entry = aggregate(updates, CohortModel(theta0.copy(), _initial_state(cfg, theta0)), cfg)
    entry["cohort"] = None
    try:
        assignment = _cohort_clients(clients, updates, cfg)
    except Exception as exc:
        raise RuntimeError(f"round 1: cohorting ({cfg.cohorting}) failed: {exc}") from exc
    registry = {
        j: CohortModel(model.theta.copy(), copy.deepcopy(model.state))
        for j in range(assignment.num_cohorts)
    }
    return assignment, registry, updates, entry


def run_cohort_round(registry: dict[int, CohortModel], assignment: CohortAssignment, clients,
                     cfg: FederationConfig, r: int) -> list[dict]:
    """One round r >= 2: each cohort trains from its own model; registry updated in place."""
    if r < 2:
        raise ValueError("cohort rounds start at r = 2")
    by_id = {c.client_id: c for c in clients}
    entries = []
    for j in range(assignment.num_cohorts):
        members = [by_id[cid] for cid in assignment.members(j)]
        if not members:
            raise ValueError(f"cohort {j} is empty")
        updates = _train_clients(members, registry[j].theta, cfg, r)
        registry[j], entry = aggregate(updates, registry[j], cfg)
        entry["cohort"] = j
        entries.append(entry)
    return entries


def _checkpoint(registry, cfg: FederationConfig, r: int) -> None:
    if cfg.checkpoint_every <= 0 or cfg.checkpoint_dir is None or r % cfg.checkpoint_every:
        return
    out = Path(cfg.checkpoint_dir)
    out.mkdir(parents=True, exist_ok=True)
    for j, m in registry.items():
        save_params(m.theta, out / f"cohort{j}_round{r}.bin")


def initial_params(clients, cfg: FederationConfig) -> ParamVector:
    """The seeded round-0 model sized for the clients' window shape."""
    input_dim = int(np.prod(clients[0].train.x.shape[1:]))
    return init_params(NetworkSpec(input_dim, cfg.hidden), derive_seed(cfg.seed, INIT_SEED_TAG))


def run_federation(cfg: FederationConfig, clients: list[FederatedClient], log_path=None,
                   theta0: ParamVector | None = None) -> FederationResult:
    """Run all rounds; optionally append each RoundLog as a JSON line to ``log_path``."""
    clients = sorted(clients, key=lambda c: c.client_id)
    if len(clients) < 2:
        raise ValueError(f"a federation needs at least 2 clients, got {len(clients)}")
    if theta0 is None:
        theta0 = initial_params(clients, cfg)

    fh = open(log_path, "w") if log_path is not None else None
    try:
        logs = []
        assignment, registry, _, entry = run_round_one(clients, theta0, cfg)
        entries = [entry]
        for r in range(1, cfg.rounds + 1):
            if r > 1:
                entries = run_cohort_round(registry, assignment, clients, cfg, r)
            g_mse, g_f1, rows = evaluate(clients, assignment, registry)
            rec = RoundLog(r, entries, g_mse, g_f1, rows)
            logs.append(rec)
            log.debug("round %d: global mse %.5f f1 %.4f", r, g_mse, g_f1)
            if fh is not None:
                fh.write(json.dumps(rec.to_json(), sort_keys=True) + "\n")
            _checkpoint(registry, cfg, r)
    finally:
        if fh is not None:
            fh.close()
    return FederationResult(logs, assignment, registry, theta0)
