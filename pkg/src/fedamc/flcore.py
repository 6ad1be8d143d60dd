"""Federated rounds: FedVaccine, its chained variant, and the baseline algorithms.

All randomness is drawn from streams keyed by ``(seed, purpose, client, round)``
(see :func:`stream`), so the order in which clients train never changes results.
Fresh client data comes from a caller-supplied ``data_fn(client, round)``; two
algorithms given the same ``data_fn`` see byte-identical data.
"""

from __future__ import annotations

import enum
import time
from concurrent.futures import Executor
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import neuralnet as nn
from .datastore import Dataset, ReplayQueue, filter_by_snr
from .errors import AggregationError, ConfigurationError
from .neuralnet import ModelParams, OptimizerState
from .signal import SNR_GRID

DataFn = Callable[[int, int], Dataset]

# stream purposes
DATA, TRAIN, PLAN, INIT = 1, 2, 3, 4
SERVER = -1


def stream(seed: int, purpose: int, client: int, round_index: int) -> np.random.Generator:
    return np.random.default_rng(
        np.random.SeedSequence([int(seed), int(purpose), int(client) + 1, int(round_index)])
    )


class AlgorithmKind(enum.Enum):
    FEDVACCINE = "fedvaccine"
    FEDVACCINE_CHAIN = "chain"
    FEDAVG = "fedavg"
    FEDSGD = "fedsgd"
    FEDPROX = "fedprox"
    GL = "gl"
    CL = "cl"
    DISTL = "distl"

    @classmethod
    def parse(cls, value: "AlgorithmKind | str") -> "AlgorithmKind":
        if isinstance(value, cls):
            return value
        text = str(value).strip().lower()
        for kind in cls:
            if text in (kind.value, kind.name.lower()):
                return kind
        raise ConfigurationError(f"unknown algorithm {value!r}")


@dataclass(frozen=True)
class TrainConfig:
    local_epochs: int = 10
    batch_size: int = 400
    lr: float = 1e-3
    optimizer: str = "adam"
    prox_mu: float = 0.01

    def __post_init__(self):
        if self.local_epochs < 0 or self.batch_size <= 0 or self.lr <= 0:
            raise ConfigurationError("local_epochs >= 0, batch_size > 0 and lr > 0 are required")
        if self.prox_mu < 0:
            raise ConfigurationError("FedProx mu must be nonnegative")
        if self.optimizer not in ("adam", "sgd"):
            raise ConfigurationError(f"unknown optimizer {self.optimizer!r}")

    def new_optimizer(self) -> OptimizerState:
        return OptimizerState(kind=self.optimizer, lr=self.lr)


@dataclass
class ClientState:
    id: int
    queue: ReplayQueue
    current_data: Dataset | None = None
    model: ModelParams | None = None  # only DistL keeps a private model
    optimizer: OptimizerState | None = None  # persistent state for DistL
    delta: int = 0


@dataclass
class GlobalState:
    model: ModelParams
    seed: int = 0
    round: int = 0
    server_optimizer: OptimizerState | None = None
    pooled: Dataset | None = None  # GL accumulation


@dataclass(frozen=True)
class ClusterPlan:
    clusters: tuple[tuple[int, ...], ...]

    @property
    def cluster_count(self) -> int:
        return len(self.clusters)


@dataclass
class RoundMetrics:
    round: int
    algorithm: str
    accuracy: float
    loss: float
    per_snr_accuracy: dict[int, float]
    deltas: tuple[int, ...]
    seconds: float = 0.0
    skipped: tuple[int, ...] = ()
    client_accuracy: tuple[float, ...] = ()

    def __post_init__(self):
        if not 0.0 <= self.accuracy <= 1.0:
            raise ValueError(f"accuracy {self.accuracy} outside [0, 1]")
        if not set(self.per_snr_accuracy) <= set(SNR_GRID):
            raise ValueError("per-SNR keys must lie on the SNR grid")


def make_clients(count: int, capacity: int, class_count: int, frame_length: int = 128) -> list[ClientState]:
    return [ClientState(i, ReplayQueue(capacity, class_count, frame_length)) for i in range(count)]


def partition_clusters(client_ids: Sequence[int], cluster_count: int, rng: np.random.Generator) -> ClusterPlan:
    """Random near-equal split; members listed in ascending id order."""
    ids = list(client_ids)
    if not 1 <= cluster_count <= len(ids):
        raise ConfigurationError(f"cluster count {cluster_count} outside [1, {len(ids)}]")
    perm = rng.permutation(len(ids))
    groups = np.array_split(perm, cluster_count)
    return ClusterPlan(tuple(tuple(sorted(ids[i] for i in g)) for g in groups))


# -- local work ------------------------------------------------------------------


def local_train(
    client: ClientState,
    init: ModelParams,
    config: TrainConfig,
    rng: np.random.Generator,
    prox_mu: float = 0.0,
    optimizer: OptimizerState | None = None,
) -> tuple[ModelParams, int]:
    """Train a copy of ``init`` on the client's current data for ``local_epochs``.

    Returns ``(params, delta)``.  A client with no data returns ``(init copy, 0)``,
    which aggregators treat as a skip.
    """
    data = client.current_data
    model = init.copy()
    if data is None or len(data) == 0:
        return model, 0
    state = optimizer if optimizer is not None else config.new_optimizer()
    center = init if prox_mu > 0 else None
    nn.fit(model, data.iq, data.labels, config.local_epochs, config.batch_size, state, rng,
           prox_center=center, prox_mu=prox_mu)
    return model, len(data)


def local_gradient(client: ClientState, model: ModelParams, config: TrainConfig, rng) -> tuple[nn.Gradients, int]:
    """Mean loss gradient over the client's whole current dataset (FedSGD)."""
    data = client.current_data
    if data is None or len(data) == 0:
        return [], 0
    total = None
    n = len(data)
    for start in range(0, n, config.batch_size):
        xb, yb = data.iq[start : start + config.batch_size], data.labels[start : start + config.batch_size]
        _, g = nn.loss_and_grad(model, xb, yb, rng)
        w = len(yb) / n
        if total is None:
            total = [{k: v.astype(np.float64) * w for k, v in layer.items()} for layer in g]
        else:
            for acc, layer in zip(total, g):
                for k in acc:
                    acc[k] += layer[k] * w
    dtype = model.dtype
    return [{k: v.astype(dtype) for k, v in layer.items()} for layer in total], n


def _train_members(
    member_ids: Sequence[int],
    clients: Sequence[ClientState],
    init: ModelParams,
    config: TrainConfig,
    seed: int,
    round_index: int,
    prox_mu: float = 0.0,
    executor: Executor | None = None,
) -> list[tuple[int, ModelParams, int]]:
    ids = sorted(member_ids)

    def task(cid: int):
        return local_train(clients[cid], init, config, stream(seed, TRAIN, cid, round_index), prox_mu)

    if executor is None:
        outputs = [task(cid) for cid in ids]
    else:
        futures = [executor.submit(task, cid) for cid in ids]
        outputs = [f.result() for f in futures]
    results = []
    for cid, (params, delta) in zip(ids, outputs):
        clients[cid].delta = delta
        results.append((cid, params, delta))
    return results


# -- aggregation ------------------------------------------------------------------


def _check_homogeneous(models: Sequence[ModelParams]) -> None:
    ref = models[0]
    for m in models[1:]:
        if len(m.layers) != len(ref.layers):
            raise AggregationError("models have different layer counts", min(len(m.layers), len(ref.layers)))
        for idx, (a, b) in enumerate(zip(ref.layers, m.layers)):
            if a.keys() != b.keys() or any(a[k].shape != b[k].shape for k in a):
                raise AggregationError(f"layer {idx} shapes differ", idx)


def _combine(base: ModelParams, others: Sequence[ModelParams], coefs: Sequence[float]) -> ModelParams:
    """``base + sum_i coef_i * (other_i - base)`` computed in float64.

    Writing convex combinations relative to ``base`` makes fixed points and
    single-model inputs exact.
    """
    out = []
    for t_idx, b in enumerate(base.tensors()):
        acc = b.astype(np.float64)
        for m, c in zip(others, coefs):
            acc = acc + c * (m.tensors()[t_idx].astype(np.float64) - b.astype(np.float64))
        out.append(acc.astype(b.dtype))
    return base.with_tensors(out)


def aggregate_fedavg(params_list: Sequence[ModelParams], weights: Sequence[float] | None = None) -> ModelParams:
    """Convex combination ``sum_i q_i w_i`` with ``q = weights / sum(weights)``."""
    if not params_list:
        raise AggregationError("nothing to aggregate")
    _check_homogeneous(params_list)
    w = np.ones(len(params_list)) if weights is None else np.asarray(weights, dtype=np.float64)
    if w.shape != (len(params_list),) or (w < 0).any() or w.sum() <= 0:
        raise AggregationError("weights must be nonnegative with a positive sum")
    q = w / w.sum()
    return _combine(params_list[0], params_list[1:], q[1:])


def aggregate_fedvaccine(prev_global: ModelParams, members: Sequence[tuple[ModelParams, int]]) -> ModelParams:
    """Per-layer mean over members of ``(1 - rho_i) W_prev + rho_i w_i``, ``rho_i = delta_i / sum(delta)``.

    Members with ``delta == 0`` were skipped and count neither in the sum nor
    in the mean.  If every member was skipped, ``W_prev`` is returned.
    """
    active = [(p, int(d)) for p, d in members if d > 0]
    if not active:
        return prev_global.copy()
    _check_homogeneous([prev_global] + [p for p, _ in active])
    total = sum(d for _, d in active)
    n = len(active)
    return _combine(prev_global, [p for p, _ in active], [d / total / n for _, d in active])


# -- round drivers ------------------------------------------------------------------


def _evaluate(state: GlobalState, kind: AlgorithmKind, test: Dataset, clients, t0, skipped=()) -> RoundMetrics:
    ev = nn.evaluate(state.model, test)
    return RoundMetrics(
        round=state.round,
        algorithm=kind.value,
        accuracy=ev.accuracy,
        loss=ev.loss,
        per_snr_accuracy=ev.per_snr_accuracy,
        deltas=tuple(c.delta for c in clients),
        seconds=time.perf_counter() - t0,
        skipped=tuple(skipped),
    )


def prepare_queued_data(clients: Sequence[ClientState], round_index: int, data_fn: DataFn, theta: int) -> None:
    """Per-client data curation for FedVaccine, in the algorithm's order.

    Fresh data enters the queue unfiltered; the current set is the SNR-filtered
    fresh data, extended by the (evicted) queue contents from round 2 on.
    """
    for c in clients:
        fresh = data_fn(c.id, round_index)
        c.queue.insert(fresh, round_index)
        current = filter_by_snr(fresh, theta)
        c.queue.evict()
        if round_index > 1:
            current = current.concat(c.queue.contents())
        c.current_data = current
        c.delta = 0


def run_round_fedvaccine(
    state: GlobalState,
    clients: Sequence[ClientState],
    plan: ClusterPlan,
    theta: int,
    config: TrainConfig,
    data_fn: DataFn,
    test: Dataset,
    executor: Executor | None = None,
) -> RoundMetrics:
    """One global epoch: curate data, then train and blend cluster by cluster.

    Each cluster starts from the global model produced by the previous
    cluster in the same epoch.
    """
    t0 = time.perf_counter()
    T = state.round + 1
    prepare_queued_data(clients, T, data_fn, theta)
    skipped = []
    for ci, cluster in enumerate(plan.clusters):
        results = _train_members(cluster, clients, state.model, config, state.seed, T, executor=executor)
        if all(d == 0 for _, _, d in results):
            skipped.append(ci)
            continue
        state.model = aggregate_fedvaccine(state.model, [(p, d) for _, p, d in results])
    state.round = T
    return _evaluate(state, AlgorithmKind.FEDVACCINE, test, clients, t0, skipped)


def run_round_chain(
    state: GlobalState,
    clients: Sequence[ClientState],
    theta: int,
    config: TrainConfig,
    data_fn: DataFn,
    test: Dataset,
) -> RoundMetrics:
    """FedVaccine data curation with no clusters: the model hops client to client."""
    t0 = time.perf_counter()
    T = state.round + 1
    prepare_queued_data(clients, T, data_fn, theta)
    skipped = []
    model = state.model
    for c in sorted(clients, key=lambda c: c.id):
        model, c.delta = local_train(c, model, config, stream(state.seed, TRAIN, c.id, T))
        if c.delta == 0:
            skipped.append(c.id)
    state.model = model
    state.round = T
    return _evaluate(state, AlgorithmKind.FEDVACCINE_CHAIN, test, clients, t0, skipped)


def run_round_baseline(
    state: GlobalState,
    clients: Sequence[ClientState],
    kind: AlgorithmKind,
    theta: int,
    config: TrainConfig,
    data_fn: DataFn,
    test: Dataset,
    executor: Executor | None = None,
) -> RoundMetrics:
    """One round of FedAvg, FedSGD, FedProx, GL (accumulate only), CL or DistL.

    Every client's fresh data is SNR-filtered with ``theta``; no queues are used.
    """
    kind = AlgorithmKind.parse(kind)
    if kind in (AlgorithmKind.FEDVACCINE, AlgorithmKind.FEDVACCINE_CHAIN):
        raise ConfigurationError(f"{kind.value} is not a baseline")
    t0 = time.perf_counter()
    T = state.round + 1
    for c in clients:
        c.current_data = filter_by_snr(data_fn(c.id, T), theta)
        c.delta = 0
    ids = [c.id for c in clients]
    skipped: list[int] = []

    if kind in (AlgorithmKind.FEDAVG, AlgorithmKind.FEDPROX):
        mu = config.prox_mu if kind is AlgorithmKind.FEDPROX else 0.0
        results = _train_members(ids, clients, state.model, config, state.seed, T, mu, executor)
        active = [(p, d) for _, p, d in results if d > 0]
        skipped = [cid for cid, _, d in results if d == 0]
        if active:
            state.model = aggregate_fedavg([p for p, _ in active], [d for _, d in active])

    elif kind is AlgorithmKind.FEDSGD:
        grads, weights = [], []
        for c in sorted(clients, key=lambda c: c.id):
            g, c.delta = local_gradient(c, state.model, config, stream(state.seed, TRAIN, c.id, T))
            if c.delta:
                grads.append(g)
                weights.append(c.delta)
            else:
                skipped.append(c.id)
        if grads:
            # gradients share the parameter layout, so the parameter aggregator applies
            as_params = [state.model.with_tensors([l[k] for l in g for k in ("W", "b") if k in l]) for g in grads]
            mean = aggregate_fedavg(as_params, weights)
            it = iter(mean.tensors())
            mean_grads = [{k: next(it) for k in ("W", "b") if k in layer} for layer in state.model.layers]
            if state.server_optimizer is None:
                state.server_optimizer = config.new_optimizer()
            state.model = state.model.copy()
            nn.optimizer_step(state.model, mean_grads, state.server_optimizer)

    elif kind is AlgorithmKind.GL:
        for c in clients:
            c.delta = len(c.current_data)
            state.pooled = c.current_data if state.pooled is None else state.pooled.concat(c.current_data)

    elif kind is AlgorithmKind.CL:
        pooled = None
        for c in sorted(clients, key=lambda c: c.id):
            c.delta = len(c.current_data)
            pooled = c.current_data if pooled is None else pooled.concat(c.current_data)
        if pooled is not None and len(pooled):
            if state.server_optimizer is None:
                state.server_optimizer = config.new_optimizer()
            server = ClientState(SERVER, ReplayQueue(0, pooled.class_count, pooled.frame_length), current_data=pooled)
            state.model, _ = local_train(
                server, state.model, config, stream(state.seed, TRAIN, SERVER, T), optimizer=state.server_optimizer
            )

    elif kind is AlgorithmKind.DISTL:
        state.round = T
        return _round_distl(state, clients, config, test, t0)

    state.round = T
    return _evaluate(state, kind, test, clients, t0, skipped)


def _round_distl(state: GlobalState, clients, config: TrainConfig, test: Dataset, t0: float) -> RoundMetrics:
    accs, losses, per_snr = [], [], []
    skipped = []
    for c in sorted(clients, key=lambda c: c.id):
        if c.model is None:
            c.model = state.model.copy()
            c.optimizer = config.new_optimizer()
        c.model, c.delta = local_train(
            c, c.model, config, stream(state.seed, TRAIN, c.id, state.round), optimizer=c.optimizer
        )
        if c.delta == 0:
            skipped.append(c.id)
        ev = nn.evaluate(c.model, test)
        accs.append(ev.accuracy)
        losses.append(ev.loss)
        per_snr.append(ev.per_snr_accuracy)
    keys = sorted(per_snr[0]) if per_snr else []
    return RoundMetrics(
        round=state.round,
        algorithm=AlgorithmKind.DISTL.value,
        accuracy=float(np.mean(accs)),
        loss=float(np.mean(losses)),
        per_snr_accuracy={k: float(np.mean([d[k] for d in per_snr])) for k in keys},
        deltas=tuple(c.delta for c in clients),
        seconds=time.perf_counter() - t0,
        skipped=tuple(skipped),
        client_accuracy=tuple(accs),
    )


def finalize_gl(state: GlobalState, config: TrainConfig, test: Dataset, epochs: int) -> list[RoundMetrics]:
    """Train on everything GL accumulated, one metrics row per pass over the pool."""
    rows = []
    pooled = state.pooled
    if state.server_optimizer is None:
        state.server_optimizer = config.new_optimizer()
    one_pass = TrainConfig(1, config.batch_size, config.lr, config.optimizer, 0.0)
    server = ClientState(SERVER, ReplayQueue(0, test.class_count, test.frame_length), current_data=pooled)
    for epoch in range(1, epochs + 1):
        t0 = time.perf_counter()
        state.model, delta = local_train(
            server, state.model, one_pass, stream(state.seed, TRAIN, SERVER, epoch), optimizer=state.server_optimizer
        )
        ev = nn.evaluate(state.model, test)
        rows.append(RoundMetrics(epoch, AlgorithmKind.GL.value, ev.accuracy, ev.loss, ev.per_snr_accuracy,
                                 (delta,), time.perf_counter() - t0))
    return rows


@dataclass
class Federation:
    """Convenience driver holding everything one algorithm run needs."""

    kind: AlgorithmKind
    state: GlobalState
    clients: list[ClientState]
    config: TrainConfig
    data_fn: DataFn
    test: Dataset
    theta: int = -12
    cluster_count: int = 2
    executor: Executor | None = None
    history: list[RoundMetrics] = field(default_factory=list)

    def step(self) -> RoundMetrics:
        T = self.state.round + 1
        if self.kind is AlgorithmKind.FEDVACCINE:
            plan = partition_clusters([c.id for c in self.clients], self.cluster_count, stream(self.state.seed, PLAN, 0, T))
            m = run_round_fedvaccine(self.state, self.clients, plan, self.theta, self.config, self.data_fn, self.test, self.executor)
        elif self.kind is AlgorithmKind.FEDVACCINE_CHAIN:
            m = run_round_chain(self.state, self.clients, self.theta, self.config, self.data_fn, self.test)
        else:
            m = run_round_baseline(self.state, self.clients, self.kind, self.theta, self.config, self.data_fn, self.test, self.executor)
        self.history.append(m)
        return m

    def run(self, rounds: int, on_round: Callable[[RoundMetrics], None] | None = None) -> list[RoundMetrics]:
        """Run ``rounds`` global epochs; for GL the returned curve is the final training passes."""
        for _ in range(rounds):
            m = self.step()
            if on_round is not None and self.kind is not AlgorithmKind.GL:
                on_round(m)
        if self.kind is AlgorithmKind.GL:
            self.history = finalize_gl(self.state, self.config, self.test, rounds)
            if on_round is not None:
                for m in self.history:
                    on_round(m)
        return self.history
