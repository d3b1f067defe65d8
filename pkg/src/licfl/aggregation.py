"""Server-side aggregation strategies and per-round adaptive selection.

The momentum strategies share one update rule::

    m_r   = b1 * m_{r-1} + (1 - b1) * delta
    v_r   = <strategy-specific second moment>
    theta = theta_prev + eta * m_r / (sqrt(v_r) + tau)

where ``delta`` is the mean client drift away from the broadcast model. The
FedAvg branch simply moves to ``theta_prev + delta``. ``adaptive_select``
evaluates all four branches and keeps the candidate whose Frobenius norm
grew the least (or shrank the most).
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from enum import Enum

import numpy as np

from .linalg import frobenius_norm
from .model import ParamVector


class StrategyKind(str, Enum):
    FEDAVG = "FedAvg"
    FEDADAGRAD = "FedAdagrad"
    FEDYOGI = "FedYogi"
    FEDADAM = "FedAdam"
    QFEDAVG = "QFedAvg"

    @classmethod
    def parse(cls, name: str) -> StrategyKind:
        for kind in cls:
            if kind.value.lower() == name.lower() or kind.name.lower() == name.lower():
                return kind
        raise ValueError(f"unknown strategy {name!r}; choose from {[k.value for k in cls]}")


ADAPTIVE_SET = (StrategyKind.FEDAVG, StrategyKind.FEDADAGRAD, StrategyKind.FEDYOGI, StrategyKind.FEDADAM)


@dataclass(frozen=True)
class ClientUpdate:
    client_id: int
    params: ParamVector
    num_samples: int
    loss: float = float("nan")  # local loss at the broadcast model, used by QFedAvg


@dataclass(frozen=True)
class StrategyState:
    m: np.ndarray
    v: np.ndarray
    theta_prev: ParamVector
    beta1: float = 0.9
    beta2: float = 0.99
    tau: float = 1e-3
    server_lr: float = 0.1

    def __post_init__(self):
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ValueError(f"betas must lie in (0, 1), got {self.beta1}, {self.beta2}")
        n = len(self.theta_prev)
        if self.m.shape != (n,) or self.v.shape != (n,):
            raise ValueError(f"moment vectors must have length {n}")

    @classmethod
    def initial(cls, theta: ParamVector, **hyper) -> StrategyState:
        n = len(theta)
        return cls(np.zeros(n), np.zeros(n), theta.copy(), **hyper)


@dataclass
class SelectionRecord:
    candidates: dict[StrategyKind, ParamVector]
    scores: dict[StrategyKind, float]
    chosen: StrategyKind

    def to_json(self) -> dict:
        return {"scores": {k.value: s for k, s in self.scores.items()}, "chosen": self.chosen.value}


def _sorted_updates(updates) -> list[ClientUpdate]:
    ups = sorted(updates, key=lambda u: u.client_id)
    if not ups:
        raise ValueError("no client updates to aggregate")
    n = len(ups[0].params)
    for u in ups:
        if len(u.params) != n:
            raise ValueError(f"client {u.client_id} sent {len(u.params)} parameters, expected {n}")
    return ups


def fedavg_weighted(updates) -> ParamVector:
    """Sample-count-weighted average of client parameters, summed in client-id order."""
    ups = _sorted_updates(updates)
    total = sum(u.num_samples for u in ups)
    if total <= 0:
        raise ValueError("total sample count must be positive")
    acc = np.zeros_like(ups[0].params.values)
    for u in ups:
        acc += (u.num_samples / total) * u.params.values
    return ups[0].params.with_values(acc)


def compute_delta(updates, theta: ParamVector, weighted: bool = False) -> np.ndarray:
    """Mean drift ``Theta_k - theta`` over clients (sample-weighted if asked)."""
    ups = _sorted_updates(updates)
    if len(ups[0].params) != len(theta):
        raise ValueError(f"updates have {len(ups[0].params)} parameters, model has {len(theta)}")
    acc = np.zeros_like(theta.values)
    if weighted:
        total = sum(u.num_samples for u in ups)
        for u in ups:
            acc += (u.num_samples / total) * (u.params.values - theta.values)
        return acc
    for u in ups:
        acc += u.params.values - theta.values
    return acc / len(ups)


def strategy_step(state: StrategyState, kind: StrategyKind, delta) -> tuple[ParamVector, StrategyState]:
    """One server step of ``kind``; returns the new model and the advanced state."""
    delta = np.asarray(delta, dtype=np.float64)
    if delta.shape != state.m.shape:
        raise ValueError(f"delta has shape {delta.shape}, state expects {state.m.shape}")
    prev = state.theta_prev.values

    if kind is StrategyKind.FEDAVG:
        theta = state.theta_prev.with_values(prev + delta)
        zeros = np.zeros_like(delta)
        return theta, replace(state, m=zeros, v=zeros.copy(), theta_prev=theta)

    m = state.beta1 * state.m + (1.0 - state.beta1) * delta
    d2 = delta * delta
    if kind is StrategyKind.FEDADAGRAD:
        v = state.v + d2
    elif kind is StrategyKind.FEDYOGI:
        v = state.v - (1.0 - state.beta2) * d2 * np.sign(state.v - d2)
    elif kind is StrategyKind.FEDADAM:
        v = state.beta2 * state.v + (1.0 - state.beta2) * d2
    else:
        raise ValueError(f"{kind.value} is not a momentum strategy")
    # Yogi can drive v slightly negative in floating point; sqrt needs v >= 0
    v = np.maximum(v, 0.0)
    theta = state.theta_prev.with_values(prev + state.server_lr * m / (np.sqrt(v) + state.tau))
    return theta, replace(state, m=m, v=v, theta_prev=theta)


def qfedavg_step(theta: ParamVector, updates, q_param: float = 0.0, lipschitz: float = 1.0) -> ParamVector:
    """q-FFL update: clients with higher loss get more weight as ``q_param`` grows.

    Client ``k``'s pseudo-gradient is ``L * (theta - Theta_k)``; the server
    subtracts ``sum_k F_k^q g_k / sum_k (q F_k^(q-1) |g_k|^2 + L F_k^q)``.
    With ``q_param = 0`` this is the plain mean of the client models.
    """
    if q_param < 0 or lipschitz <= 0:
        raise ValueError(f"need q >= 0 and L > 0, got q={q_param}, L={lipschitz}")
    ups = _sorted_updates(updates)
    num = np.zeros_like(theta.values)
    den = 0.0
    for u in ups:
        f = float(u.loss)
        if not np.isfinite(f) or f < 0:
            raise ValueError(f"client {u.client_id} reported invalid loss {u.loss}")
        g = lipschitz * (theta.values - u.params.values)
        fq = f**q_param
        num += fq * g
        den += lipschitz * fq
        if q_param > 0:
            den += q_param * f ** (q_param - 1.0) * float(g @ g)
    if den <= 0:
        return theta.copy()
    return theta.with_values(theta.values - num / den)


@dataclass
class AdaptiveState:
    """Per-cohort optimizer states for the four strategies of the adaptive set."""

    states: dict[StrategyKind, StrategyState] = field(default_factory=dict)

    @classmethod
    def initial(cls, theta: ParamVector, **hyper) -> AdaptiveState:
        return cls({k: StrategyState.initial(theta, **hyper) for k in ADAPTIVE_SET})


def select_candidate(candidates, theta_prev) -> tuple[StrategyKind, dict[StrategyKind, float]]:
    """Score candidates by norm change and pick the minimum (enum order breaks ties)."""
    prev = getattr(theta_prev, "values", theta_prev)
    base = frobenius_norm(prev)
    scores = {k: frobenius_norm(getattr(c, "values", c)) - base for k, c in candidates.items()}
    order = list(StrategyKind)
    chosen = min(scores, key=lambda k: (scores[k], order.index(k)))
    return chosen, scores


def adaptive_select(updates, states: AdaptiveState, theta_prev: ParamVector, weighted_delta: bool = False):
    """Evaluate every strategy on the shared drift and keep the smallest norm change.

    The score of a candidate is ``||theta_r||_F - ||theta_prev||_F``; ties go
    to the earliest strategy in ``ADAPTIVE_SET``. Every strategy's moments
    advance on the shared drift, and all of them continue from the chosen
    model. Returns ``(theta, SelectionRecord, new_states)``.
    """
    delta = compute_delta(updates, theta_prev, weighted=weighted_delta)
    candidates: dict[StrategyKind, ParamVector] = {}
    advanced: dict[StrategyKind, StrategyState] = {}
    for kind in ADAPTIVE_SET:
        st = replace(states.states[kind], theta_prev=theta_prev)
        candidates[kind], advanced[kind] = strategy_step(st, kind, delta)
    chosen, scores = select_candidate(candidates, theta_prev)
    theta = candidates[chosen]
    new_states = AdaptiveState({k: replace(st, theta_prev=theta) for k, st in advanced.items()})
    return theta, SelectionRecord(candidates, scores, chosen), new_states
