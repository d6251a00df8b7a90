"""Federation engine: FedAvg, local training, local-global blending and the
round loops for federated fine-tuning (E1) and few-shot personalization (E2).

Rounds are a strict barrier. Clients may train concurrently, but aggregation
always sums in ascending ``client_id`` order so results do not depend on
scheduling.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, NamedTuple, Sequence

import numpy as np

from . import metrics
from .errors import AlphaOutOfRange, EmptyUpdateSet, LayoutMismatch, NoClients, NoTasks
from .model import (
    ParamVector,
    TokenBatch,
    check_layouts,
    joint_loss_and_grad,
    loss_and_grad,
    predict,
    sgd_step,
    unflatten_encoder,
    unflatten_head,
)
from .signal import N_CLASSES

DEFAULT_ALPHA = 0.8
DEFAULT_PATIENCE = 5
DEFAULT_MAX_ROUNDS = 100


class HeadTask:
    """Local data for training the classifier head on fixed embeddings."""

    def __init__(self, X, y):
        self.X = np.asarray(X, dtype=np.float64)
        self.y = np.asarray(y, dtype=np.int64)
        if self.X.shape[0] != self.y.size:
            raise ValueError("one label per embedding required")

    def __len__(self):
        return self.y.size

    def loss_and_grad(self, params: ParamVector, idx=None):
        X, y = (self.X, self.y) if idx is None else (self.X[idx], self.y[idx])
        return loss_and_grad(unflatten_head(params), X, y)


class JointTask:
    """Local data for training encoder and head together from token features."""

    def __init__(self, batch: TokenBatch):
        self.batch = batch

    def __len__(self):
        return len(self.batch)

    def loss_and_grad(self, params: ParamVector, idx=None):
        batch = self.batch if idx is None else self.batch.subset(idx)
        return joint_loss_and_grad(unflatten_encoder(params), unflatten_head(params), batch)


@dataclass
class ClientState:
    client_id: int
    params: ParamVector
    data: HeadTask | JointTask
    sample_count: int = 0

    def __post_init__(self):
        if not self.sample_count:
            self.sample_count = len(self.data)
        if self.sample_count <= 0:
            raise ValueError(f"client {self.client_id} has no training samples")


class ClientUpdate(NamedTuple):
    client_id: int
    params: ParamVector
    sample_count: int
    loss: float = float("nan")


@dataclass
class FedConfig:
    lr: float = 0.01
    local_epochs: int = 1
    batch_size: int | None = None  # None -> full batch
    max_rounds: int = DEFAULT_MAX_ROUNDS
    patience: int = DEFAULT_PATIENCE
    uniform_avg: bool = False
    alpha: float = DEFAULT_ALPHA
    seed: int = 0
    threads: int | None = None
    n_classes: int = N_CLASSES


@dataclass
class RoundReport:
    round_index: int
    client_losses: dict[int, float]
    client_metrics: dict[int, float]
    global_metric: float | None
    best_metric: float
    stagnation: int
    participants: tuple[int, ...]
    improved: bool = False


def _as_update(item, position: int) -> ClientUpdate:
    if isinstance(item, ClientUpdate):
        return item
    if len(item) == 2:
        return ClientUpdate(position, item[0], item[1])
    return ClientUpdate(*item)


def fedavg(updates: Sequence, uniform: bool = False) -> ParamVector:
    """Average client parameter vectors, weighted by sample count.

    Items may be :class:`ClientUpdate`, ``(client_id, params, count)`` or
    ``(params, count)``; for the last form list position stands in for the id.
    """
    if not updates:
        raise EmptyUpdateSet("no client updates to aggregate")
    ups = sorted((_as_update(u, i) for i, u in enumerate(updates)), key=lambda u: u.client_id)
    ids = [u.client_id for u in ups]
    if len(set(ids)) != len(ids):
        raise ValueError(f"duplicate client ids in update set: {ids}")
    check_layouts(*(u.params for u in ups))
    weights = [1 if uniform else int(u.sample_count) for u in ups]
    if min(weights) <= 0:
        raise ValueError("sample counts must be positive")
    total = sum(weights)
    acc = np.zeros_like(ups[0].params.values)
    for w, u in zip(weights, ups):
        acc += w * u.params.values
    out = acc / total
    # rounding can leave the hull of the inputs by an ulp
    stacked = np.stack([u.params.values for u in ups])
    out = np.clip(out, stacked.min(axis=0), stacked.max(axis=0))
    return ups[0].params.with_values(out)


def blend(local: ParamVector, global_: ParamVector, alpha: float = DEFAULT_ALPHA) -> ParamVector:
    """``alpha * local + (1 - alpha) * global``, elementwise."""
    if not 0.0 <= alpha <= 1.0:
        raise AlphaOutOfRange(f"alpha must lie in [0, 1], got {alpha}")
    check_layouts(local, global_)
    if alpha == 1.0:
        return local.copy()
    # global + alpha * (local - global) keeps blend(x, x, a) == x exactly
    return global_.with_values(global_.values + alpha * (local.values - global_.values))


def local_train(client: ClientState, start: ParamVector, epochs: int, lr: float,
                batch_size: int | None = None, seed: int = 0,
                round_index: int = 0) -> ClientUpdate:
    """Run ``epochs`` of SGD from ``start`` on the client's data.

    Minibatches are drawn from a permutation seeded by
    ``(seed, client_id, round_index)``; full-batch training does not shuffle.
    """
    if epochs < 1:
        raise ValueError("epochs must be >= 1")
    n = len(client.data)
    params = start.copy()
    full = batch_size is None or batch_size >= n
    rng = np.random.default_rng([seed, client.client_id, round_index])
    losses = []
    for _ in range(epochs):
        losses = []
        if full:
            loss, grad = client.data.loss_and_grad(params)
            params = sgd_step(params, grad, lr)
            losses.append(loss)
            continue
        order = rng.permutation(n)
        for lo in range(0, n, batch_size):
            loss, grad = client.data.loss_and_grad(params, order[lo : lo + batch_size])
            params = sgd_step(params, grad, lr)
            losses.append(loss)
    return ClientUpdate(client.client_id, params, client.sample_count, float(np.mean(losses)))


class EarlyStopping:
    """Patience counter on a maximized metric.

    The counter resets only on strict improvement over the best value seen.
    ``update`` returns True when the round should become the kept checkpoint:
    on strict improvement, or also on a tie when ``prefer_latest`` is set.
    """

    def __init__(self, patience: int = DEFAULT_PATIENCE, prefer_latest: bool = False):
        if patience < 1:
            raise ValueError("patience must be >= 1")
        self.patience = patience
        self.prefer_latest = prefer_latest
        self.best = -np.inf
        self.best_round = 0
        self.stagnation = 0

    def update(self, metric: float, round_index: int) -> bool:
        if metric > self.best:
            self.best = metric
            self.best_round = round_index
            self.stagnation = 0
            return True
        self.stagnation += 1
        if self.prefer_latest and metric == self.best:
            self.best_round = round_index
            return True
        return False

    @property
    def should_stop(self) -> bool:
        return self.stagnation >= self.patience


def thread_count(config: FedConfig) -> int:
    if config.threads:
        return max(1, int(config.threads))
    env = os.environ.get("FEDSHOT_THREADS")
    return max(1, int(env)) if env else 1


def _train_round(clients, starts, config: FedConfig, round_index: int) -> list[ClientUpdate]:
    def work(pair):
        client, start = pair
        return local_train(client, start, config.local_epochs, config.lr,
                           batch_size=config.batch_size, seed=config.seed,
                           round_index=round_index)

    pairs = list(zip(clients, starts))
    workers = min(thread_count(config), len(pairs))
    if workers <= 1:
        return [work(p) for p in pairs]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(work, pairs))


def _check_clients(clients: Sequence[ClientState]) -> list[ClientState]:
    if not clients:
        raise NoClients("federation needs at least one client")
    clients = sorted(clients, key=lambda c: c.client_id)
    ids = [c.client_id for c in clients]
    if len(set(ids)) != len(ids):
        raise ValueError(f"duplicate client ids: {ids}")
    check_layouts(*(c.params for c in clients))
    first = clients[0].params.values
    for c in clients[1:]:
        if not np.array_equal(c.params.values, first):
            raise LayoutMismatch("clients must start from identical parameters")
    return clients


def run_e1(config: FedConfig, clients: Sequence[ClientState],
           evaluate: Callable[[ParamVector], float],
           on_round: Callable[[RoundReport], None] | None = None,
           ) -> tuple[ParamVector, list[RoundReport]]:
    """Federated training with full synchronization and early stopping.

    ``evaluate`` scores a global parameter vector on held-out data (higher is
    better). Returns the best-scoring global parameters and the round history.
    """
    clients = _check_clients(clients)
    ids = tuple(c.client_id for c in clients)
    global_params = clients[0].params.copy()
    best_params = global_params
    stopper = EarlyStopping(config.patience)
    history: list[RoundReport] = []
    for r in range(1, config.max_rounds + 1):
        updates = _train_round(clients, [global_params] * len(clients), config, r)
        global_params = fedavg(updates, uniform=config.uniform_avg)
        metric = float(evaluate(global_params))
        improved = stopper.update(metric, r)
        if improved:
            best_params = global_params
        report = RoundReport(
            round_index=r,
            client_losses={u.client_id: u.loss for u in updates},
            client_metrics={},
            global_metric=metric,
            best_metric=stopper.best,
            stagnation=stopper.stagnation,
            participants=ids,
            improved=improved,
        )
        history.append(report)
        if on_round is not None:
            on_round(report)
        if stopper.should_stop:
            break
    return best_params, history


@dataclass
class E2Client:
    """A client in few-shot personalization: support data plus held-out sets."""

    client_id: int
    params: ParamVector
    train: HeadTask
    val_X: np.ndarray
    val_y: np.ndarray
    query_X: np.ndarray
    query_y: np.ndarray
    n_tasks: int = 1

    def state(self) -> ClientState:
        return ClientState(self.client_id, self.params, self.train)


@dataclass
class E2ClientResult:
    client_id: int
    params: ParamVector
    best_round: int
    best_val_metric: float
    query_metrics: dict[str, float]
    val_history: list[float] = field(default_factory=list)


def evaluate_head(params: ParamVector, X, y, n_classes: int = N_CLASSES) -> dict[str, float]:
    """Balanced accuracy, Cohen's kappa and weighted F1 of a head on ``(X, y)``."""
    pred = predict(unflatten_head(params), X)
    return metrics.summarize(metrics.confusion_matrix(y, pred, n_classes))


def head_balanced_accuracy(params: ParamVector, X, y, n_classes: int = N_CLASSES) -> float:
    pred = predict(unflatten_head(params), X)
    return metrics.balanced_accuracy(metrics.confusion_matrix(y, pred, n_classes))


def run_e2(config: FedConfig, clients: Sequence[E2Client],
           on_round: Callable[[RoundReport], None] | None = None,
           ) -> tuple[dict[int, E2ClientResult], list[RoundReport]]:
    """Federated few-shot personalization with local-global blending.

    Each round every client trains its own head on its support data, the
    server averages the trained heads, and every client continues from
    ``blend(local, global, alpha)``. Each client keeps the head with the best
    validation balanced accuracy (latest round among ties); training ends when
    every client has stagnated for ``patience`` rounds or after ``max_rounds``.
    """
    if not clients:
        raise NoClients("federation needs at least one client")
    for c in clients:
        if c.n_tasks < 1 or len(c.train) == 0:
            raise NoTasks(f"client {c.client_id} has no few-shot tasks")
    clients = sorted(clients, key=lambda c: c.client_id)
    states = _check_clients([c.state() for c in clients])
    if not 0.0 <= config.alpha <= 1.0:
        raise AlphaOutOfRange(f"alpha must lie in [0, 1], got {config.alpha}")

    current = {c.client_id: c.params.copy() for c in clients}
    best = {c.client_id: c.params.copy() for c in clients}
    # validation sets are tiny and saturate; among ties keep the most trained head
    stoppers = {c.client_id: EarlyStopping(config.patience, prefer_latest=True)
                for c in clients}
    val_history: dict[int, list[float]] = {c.client_id: [] for c in clients}
    history: list[RoundReport] = []
    ids = tuple(c.client_id for c in clients)

    for r in range(1, config.max_rounds + 1):
        updates = _train_round(states, [current[cid] for cid in ids], config, r)
        global_params = fedavg(updates, uniform=config.uniform_avg)
        val = {}
        improved = False
        for c, u in zip(clients, updates):
            current[c.client_id] = blend(u.params, global_params, config.alpha)
            score = head_balanced_accuracy(current[c.client_id], c.val_X, c.val_y,
                                           config.n_classes)
            val[c.client_id] = score
            val_history[c.client_id].append(score)
            stopper = stoppers[c.client_id]
            if stopper.update(score, r):
                best[c.client_id] = current[c.client_id]
            improved |= stopper.stagnation == 0
        report = RoundReport(
            round_index=r,
            client_losses={u.client_id: u.loss for u in updates},
            client_metrics=val,
            global_metric=None,
            best_metric=float(np.mean([s.best for s in stoppers.values()])),
            stagnation=min(s.stagnation for s in stoppers.values()),
            participants=ids,
            improved=improved,
        )
        history.append(report)
        if on_round is not None:
            on_round(report)
        if all(s.should_stop for s in stoppers.values()):
            break

    results = {}
    for c in clients:
        cid = c.client_id
        results[cid] = E2ClientResult(
            client_id=cid,
            params=best[cid],
            best_round=stoppers[cid].best_round,
            best_val_metric=stoppers[cid].best,
            query_metrics=evaluate_head(best[cid], c.query_X, c.query_y, config.n_classes),
            val_history=val_history[cid],
        )
    return results, history
