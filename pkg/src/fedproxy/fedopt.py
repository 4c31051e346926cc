"""Server analysis, client regularizers, merge rules, and the round driver."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from .model import Batch, ResidualStack, TaskSpec, TrainingDiverged, accuracy, local_sgd, task_loss, CLASSIFICATION
from .params import FlatParams, TaskVector, check_same_layout, cosine_similarity, signs
from . import seeding

METHODS = ("fedproxy", "fedavg", "fedprox", "ties", "fedproxy_no_pcr", "fedproxy_no_hties")


class AggregationError(ValueError):
    pass


class RoundFailed(RuntimeError):
    """A client diverged; carries the round and client that failed."""

    def __init__(self, round_idx: int, client_id: int, cause: TrainingDiverged):
        self.round = round_idx
        self.client_id = client_id
        self.cause = cause
        super().__init__(f"round {round_idx}, client {client_id}: {cause}")


@dataclass(frozen=True)
class AggConfig:
    r0: float = 1.0
    delta_adapt: float = 0.2
    rho: float = 1.1
    eps: float = 1e-8
    method: str = "fedproxy"
    ties_density: float = 0.2
    ties_lam: float = 1.0

    def __post_init__(self):
        if not 0.0 <= self.r0 <= 1.0:
            raise ValueError("r0 must lie in [0, 1]")
        if self.delta_adapt < 0:
            raise ValueError("delta_adapt must be >= 0")
        if self.rho < 1.0:
            raise ValueError("rho must be >= 1")
        if self.eps <= 0:
            raise ValueError("eps must be > 0")
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}; expected one of {METHODS}")
        if not 0.0 < self.ties_density <= 1.0:
            raise ValueError("ties_density must lie in (0, 1]")


@dataclass(frozen=True)
class ClientConfig:
    lambda_reg: float = 1e-5
    mu_prox: float = 0.01
    lr: float = 0.05
    epochs: int = 5
    batch_size: Optional[int] = 16
    seed: int = 0
    n_train: int = 64
    n_eval: int = 256

    def __post_init__(self):
        if self.lambda_reg < 0 or self.mu_prox < 0:
            raise ValueError("regularization coefficients must be >= 0")
        if self.lr <= 0:
            raise ValueError("lr must be > 0")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.batch_size is not None and self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.n_train < 1 or self.n_eval < 1:
            raise ValueError("sample counts must be >= 1")

    @property
    def steps(self) -> int:
        per_epoch = 1 if self.batch_size is None else math.ceil(self.n_train / self.batch_size)
        return self.epochs * per_epoch


# ---------------------------------------------------------------------------
# server analysis


@dataclass(frozen=True, eq=False)
class ServerAnalysis:
    S: np.ndarray
    h: np.ndarray
    h_norm: np.ndarray
    w: np.ndarray
    C: np.ndarray
    round: int


def similarity_matrix(vectors: Sequence[TaskVector]) -> np.ndarray:
    K = len(vectors)
    S = np.eye(K)
    for k in range(K):
        for j in range(k + 1, K):
            S[k, j] = S[j, k] = cosine_similarity(vectors[k].delta, vectors[j].delta)
    return S


def heterogeneity(S: np.ndarray) -> np.ndarray:
    K = S.shape[0]
    pos = np.maximum(0.0, S)
    np.fill_diagonal(pos, 0.0)
    return 1.0 - pos.sum(axis=1) / (K - 1)


def consensus_weights(S: np.ndarray) -> np.ndarray:
    a = np.abs(S)
    np.fill_diagonal(a, 0.0)
    score = a.sum(axis=1)
    z = np.exp(score - score.max())
    return z / z.sum()


def normalize_heterogeneity(h: np.ndarray) -> np.ndarray:
    lo, hi = h.min(), h.max()
    if hi == lo:
        return np.zeros_like(h)
    return (h - lo) / (hi - lo)


def conflict_scores(vectors: Sequence[TaskVector] | np.ndarray) -> np.ndarray:
    """Per-dimension sign disagreement; dims no client touched score 0."""
    if isinstance(vectors, np.ndarray):
        sg = signs(vectors)
    else:
        sg = np.stack([signs(v.values) for v in vectors])
    K = sg.shape[0]
    C = 1.0 - np.abs(sg.sum(axis=0)) / K
    C[np.all(sg == 0, axis=0)] = 0.0
    return C


def analyze_round(task_vectors: Sequence[TaskVector], prev_global: Optional[FlatParams] = None, round: int = 0) -> ServerAnalysis:
    K = len(task_vectors)
    if K < 2:
        raise AggregationError("server analysis needs at least two clients")
    for tv in task_vectors[1:]:
        check_same_layout(tv, task_vectors[0])
    if prev_global is not None:
        check_same_layout(task_vectors[0], prev_global)
    S = similarity_matrix(task_vectors)
    h = heterogeneity(S)
    return ServerAnalysis(S, h, normalize_heterogeneity(h), consensus_weights(S), conflict_scores(task_vectors), round)


def retention_rates(h_norm: np.ndarray, r0: float, delta_adapt: float) -> np.ndarray:
    return np.clip(r0 - delta_adapt * np.asarray(h_norm), 0.0, 1.0)


# ---------------------------------------------------------------------------
# client-side regularizer gradients


def pcr_grad(current: FlatParams, global_prev: FlatParams, C: np.ndarray, lambda_reg: float) -> FlatParams:
    """Gradient of lambda * sum_d C_d (phi_d - phi_prev_d)^2."""
    check_same_layout(current, global_prev)
    C = np.asarray(C, dtype=np.float64)
    if C.shape != current.values.shape:
        raise AggregationError("conflict vector does not match parameter dimension")
    return FlatParams(2.0 * lambda_reg * C * (current.values - global_prev.values), current.layout)


def pcr_penalty(current: FlatParams, global_prev: FlatParams, C: np.ndarray, lambda_reg: float) -> float:
    d = current.values - global_prev.values
    return lambda_reg * float(np.add.reduce(np.asarray(C) * d * d))


def fedprox_grad(current: FlatParams, global_prev: FlatParams, mu: float) -> FlatParams:
    check_same_layout(current, global_prev)
    return FlatParams(mu * (current.values - global_prev.values), current.layout)


def fedprox_penalty(current: FlatParams, global_prev: FlatParams, mu: float) -> float:
    d = current.values - global_prev.values
    return 0.5 * mu * float(np.add.reduce(d * d))


# ---------------------------------------------------------------------------
# merge rules


def keep_count(rate: float, dim: int) -> int:
    return min(dim, math.ceil(rate * dim - 1e-12 * dim))


def top_magnitude(values: np.ndarray, n_keep: int) -> np.ndarray:
    """Zero all but the n_keep largest |values|; ties go to the lower index."""
    out = np.zeros_like(values)
    if n_keep <= 0:
        return out
    order = np.argsort(-np.abs(values), kind="stable")[:n_keep]
    out[order] = values[order]
    return out


def hties_sparsify(tau: TaskVector, r_k: float) -> TaskVector:
    if not 0.0 <= r_k <= 1.0:
        raise AggregationError(f"retention rate {r_k} outside [0, 1]")
    kept = top_magnitude(tau.values, keep_count(r_k, tau.values.shape[0]))
    return TaskVector(tau.delta.replace(kept), tau.client_id, tau.round)


def hties_merge(sparsified: Sequence[TaskVector], w, rho: float, eps: float) -> FlatParams:
    """Weighted mean of the updates that share the dominant sign, per dimension.

    A sign dominates when its summed scaled magnitude is at least ``rho``
    times the other side's (plus ``eps``); otherwise the dimension gets 0.
    """
    if not sparsified:
        raise AggregationError("no client updates to merge")
    w = np.asarray(w, dtype=np.float64)
    if w.shape[0] != len(sparsified):
        raise AggregationError("one weight per client required")
    if abs(w.sum() - 1.0) > 1e-6:
        raise AggregationError(f"weights sum to {w.sum()}, expected 1")
    if rho < 1.0 or eps <= 0:
        raise AggregationError("need rho >= 1 and eps > 0")
    layout = sparsified[0].layout
    for tv in sparsified[1:]:
        check_same_layout(tv, sparsified[0])
    tau = np.stack([tv.values for tv in sparsified])
    scaled = w[:, None] * tau
    pos = scaled > 0
    neg = scaled < 0
    P = np.where(pos, scaled, 0.0).sum(axis=0)
    N = -np.where(neg, scaled, 0.0).sum(axis=0)
    pos_wins = P / (N + eps) >= rho
    neg_wins = N / (P + eps) >= rho
    assert not np.any(pos_wins & neg_wins), "dominance branches co-fired"
    w_col = w[:, None]
    w_pos = np.where(pos, w_col, 0.0).sum(axis=0)
    w_neg = np.where(neg, w_col, 0.0).sum(axis=0)
    delta = np.zeros(tau.shape[1])
    delta[pos_wins] = P[pos_wins] / w_pos[pos_wins]
    delta[neg_wins] = -N[neg_wins] / w_neg[neg_wins]
    return FlatParams(delta, layout)


def ties_merge_baseline(task_vectors: Sequence[TaskVector], density: float, lam: float = 1.0) -> FlatParams:
    """Trim to top-density by magnitude, elect a sign per dim, average the agreeing entries."""
    if not task_vectors:
        raise AggregationError("no client updates to merge")
    if not 0.0 < density <= 1.0:
        raise AggregationError("density must lie in (0, 1]")
    layout = task_vectors[0].layout
    dim = layout.total_dim
    trimmed = np.stack([top_magnitude(tv.values, keep_count(density, dim)) for tv in task_vectors])
    elected = np.where(trimmed.sum(axis=0) >= 0, 1.0, -1.0)
    agree = np.sign(trimmed) == elected
    counts = agree.sum(axis=0)
    total = np.where(agree, trimmed, 0.0).sum(axis=0)
    merged = np.divide(total, counts, out=np.zeros(dim), where=counts > 0)
    return FlatParams(lam * merged, layout)


def fedavg_merge(client_params: Sequence[FlatParams], weights) -> FlatParams:
    if not client_params:
        raise AggregationError("no client models to average")
    weights = np.asarray(weights, dtype=np.float64)
    if abs(weights.sum() - 1.0) > 1e-6:
        raise AggregationError(f"weights sum to {weights.sum()}, expected 1")
    out = np.zeros(client_params[0].values.shape[0])
    for p, wk in zip(client_params, weights):
        check_same_layout(p, client_params[0])
        out = out + wk * p.values
    return FlatParams(out, client_params[0].layout)


def apply_update(global_prev: FlatParams, delta: FlatParams) -> FlatParams:
    return global_prev + delta


# ---------------------------------------------------------------------------
# rounds


@dataclass(frozen=True, eq=False)
class Client:
    client_id: int
    task: TaskSpec
    train: Batch
    eval: Batch

    @classmethod
    def from_task(cls, client_id: int, task: TaskSpec, n_train: int, n_eval: int) -> "Client":
        return cls(client_id, task, task.train_data(n_train), task.eval_data(n_eval))


@dataclass(frozen=True, eq=False)
class FedState:
    model: ResidualStack
    conflict: np.ndarray
    round: int = 0

    @classmethod
    def initial(cls, proxy: ResidualStack) -> "FedState":
        return cls(proxy, np.zeros(proxy.layout.total_dim), 0)

    @property
    def params(self) -> FlatParams:
        return self.model.params


@dataclass(frozen=True)
class MetricRow:
    round: int
    client_id: str
    task_loss: float
    eval_loss: float
    h_k: float
    w_k: float
    mean_C: float
    retention: float
    delta_norm: float

    FIELDS = ("round", "client_id", "task_loss", "eval_loss", "h_k", "w_k", "mean_C", "retention", "delta_norm")


@dataclass(frozen=True, eq=False)
class RoundMetrics:
    rows: list[MetricRow]
    analysis: Optional[ServerAnalysis]
    client_params: list[FlatParams] = field(repr=False, default_factory=list)

    @property
    def global_row(self) -> MetricRow:
        return self.rows[-1]


def eval_loss(model: ResidualStack, client: Client) -> float:
    return task_loss(model, client.eval, client.task.kind)


def mean_eval_loss(model: ResidualStack, clients: Sequence[Client]) -> float:
    return math.fsum(eval_loss(model, c) for c in clients) / len(clients)


def client_regularizer(method: str, state: FedState, ccfg: ClientConfig):
    start = state.params
    if method in ("fedproxy", "fedproxy_no_hties"):
        lam = ccfg.lambda_reg
        C = state.conflict
        if lam == 0.0:
            return None
        return lambda cur: pcr_grad(cur, start, C, lam)
    if method == "fedprox":
        mu = ccfg.mu_prox
        return lambda cur: fedprox_grad(cur, start, mu)
    return None


def train_client(state: FedState, client: Client, method: str, ccfg: ClientConfig, master_seed: int = 0):
    seed = seeding.derive_seed(master_seed, seeding.CLIENT, client.client_id, seeding.ROUND, state.round, ccfg.seed)
    return local_sgd(
        state.model,
        client.task,
        ccfg.steps,
        ccfg.lr,
        client_regularizer(method, state, ccfg),
        data=client.train,
        batch_size=ccfg.batch_size,
        seed=seed,
    )


def merge_updates(method: str, start: FlatParams, trained: list[FlatParams], task_vectors, analysis, agg: AggConfig, sizes):
    """Return (new global params, per-client retention, aggregated delta)."""
    K = len(trained)
    ones = np.ones(K)
    fed_w = np.asarray(sizes, dtype=np.float64) / float(sum(sizes))
    if method in ("fedavg", "fedprox", "fedproxy_no_hties"):
        new = fedavg_merge(trained, fed_w)
        return new, ones, new - start
    if method == "ties":
        delta = ties_merge_baseline(task_vectors, agg.ties_density, agg.ties_lam)
        return apply_update(start, delta), np.full(K, agg.ties_density), delta
    # fedproxy and fedproxy_no_pcr share the H-TIES path
    if analysis is None:
        r = ones
        w = ones / K
    else:
        r = retention_rates(analysis.h_norm, agg.r0, agg.delta_adapt)
        w = analysis.w
    sparse = [hties_sparsify(tv, rk) for tv, rk in zip(task_vectors, r)]
    delta = hties_merge(sparse, w, agg.rho, agg.eps)
    return apply_update(start, delta), r, delta


def run_round(
    state: FedState,
    clients: Sequence[Client],
    agg: AggConfig,
    ccfg: ClientConfig,
    master_seed: int = 0,
) -> tuple[FedState, RoundMetrics]:
    """One synchronous round: local training, server analysis, merge, update."""
    method = agg.method
    if method == "fedproxy_no_pcr":
        ccfg = replace(ccfg, lambda_reg=0.0)
    start = state.params
    results = {}
    for client in clients:
        try:
            results[client.client_id] = train_client(state, client, method, ccfg, master_seed)
        except TrainingDiverged as exc:
            raise RoundFailed(state.round, client.client_id, exc) from exc
    trained = [results[c.client_id].params for c in clients]
    task_vectors = [TaskVector(p - start, c.client_id, state.round) for p, c in zip(trained, clients)]

    analysis = analyze_round(task_vectors, start, state.round) if len(clients) >= 2 else None
    sizes = [c.train.n for c in clients]
    new_params, retention, delta = merge_updates(method, start, trained, task_vectors, analysis, agg, sizes)
    next_conflict = analysis.C if analysis is not None else np.zeros_like(state.conflict)
    new_model = state.model.with_params(new_params)

    mean_C = float(np.mean(next_conflict)) if next_conflict.size else 0.0
    rows = []
    for k, (client, tv) in enumerate(zip(clients, task_vectors)):
        local_model = state.model.with_params(trained[k])
        rows.append(
            MetricRow(
                state.round,
                str(client.client_id),
                task_loss(local_model, client.train, client.task.kind),
                eval_loss(local_model, client),
                float(analysis.h[k]) if analysis is not None else 0.0,
                float(analysis.w[k]) if analysis is not None else 1.0,
                mean_C,
                float(retention[k]),
                tv.delta.norm(),
            )
        )
    rows.append(
        MetricRow(
            state.round,
            "global",
            math.fsum(task_loss(new_model, c.train, c.task.kind) for c in clients) / len(clients),
            mean_eval_loss(new_model, clients),
            float("nan"),
            float("nan"),
            mean_C,
            float("nan"),
            delta.norm(),
        )
    )
    new_state = FedState(new_model, next_conflict, state.round + 1)
    return new_state, RoundMetrics(rows, analysis, trained)


def client_accuracy(model: ResidualStack, client: Client) -> Optional[float]:
    if client.task.kind != CLASSIFICATION:
        return None
    return accuracy(model, client.eval)
