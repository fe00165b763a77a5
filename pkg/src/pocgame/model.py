"""Teacher allocation model: graph encoder + recurrent encoder fused by one sigmoid decoder.

Tasks are decoded in arrival order. Besides the two encoders, the decoder
sees a decision-state encoding of the queues left by the choices already
made for earlier tasks, so the output for task i is conditioned on tasks
0..i-1. During training those earlier choices are the labels (teacher
forcing); at inference they are the model's own argmax choices.
"""

from __future__ import annotations

import math
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import nn_core as nn
from .ga import TrainingSample
from .sched import service_matrix, simulate_schedule
from .workload import Instance


class TrainingError(RuntimeError):
    def __init__(self, epoch: int, message: str):
        super().__init__(f"epoch {epoch}: {message}")
        self.epoch = epoch


@dataclass(frozen=True)
class TeacherHyper:
    epochs: int = 300
    lr: float = 3e-2
    hidden_gnn: int = 16
    hidden_rnn: int = 16
    hidden_state: int = 64
    k: int = 3
    patience: int | None = None

    def __post_init__(self):
        for name in ("epochs", "hidden_gnn", "hidden_rnn", "hidden_state", "k"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if not self.lr > 0:
            raise ValueError("lr must be > 0")
        if self.hidden_gnn < 1 or self.hidden_rnn < 1:
            raise ValueError("hidden_gnn and hidden_rnn must be >= 1")
        if self.patience is not None and self.patience < 1:
            raise ValueError("patience must be >= 1")


@dataclass
class TeacherOutput:
    z: np.ndarray
    probs: np.ndarray
    h_graph: np.ndarray
    h_seq: np.ndarray


@dataclass
class EpochMetrics:
    epoch: int
    mse_loss: float
    total_delay: float
    accuracy: float
    diversity: float


@dataclass
class TrainingMetrics:
    epochs: list[EpochMetrics] = field(default_factory=list)


# -- graph construction ----------------------------------------------------------

def build_task_graph(instance: Instance, k: int = 3) -> nn.Graph:
    """Edges from every task to its k nearest tasks in demand space (ties to lower id)."""
    if k < 0:
        raise ValueError("k must be >= 0")
    n = instance.n_tasks
    k = min(k, max(n - 1, 0))
    edges = set()
    if k:
        d = instance.demands()
        dist = np.sqrt(((d[:, None, :] - d[None, :, :]) ** 2).sum(-1))
        np.fill_diagonal(dist, np.inf)
        for i in range(n):
            for j in np.argsort(dist[i], kind="stable")[:k]:
                edges.add((i, int(j)))
    return nn.Graph(n, frozenset(edges))


def knn_adjacency(k: int) -> Callable[[TrainingSample], np.ndarray]:
    return lambda s: build_task_graph(s.instance, k).mean_matrix()


def empty_adjacency(sample: TrainingSample) -> np.ndarray:
    return np.eye(sample.instance.n_tasks)


# -- decision state ------------------------------------------------------------------

def state_width(n_features: int, n_resources: int, n_providers: int) -> int:
    return 2 * n_providers + 1 + n_features + n_providers * n_resources


def _state_rows(free, arrival, service, remaining, features, speeds_flat):
    wait = np.maximum(0.0, free - arrival[..., None])
    return np.concatenate([wait, wait + service, remaining[..., None], features, speeds_flat], axis=-1)


def decision_state(sample: TrainingSample, allocation) -> np.ndarray:
    """Per-task decoder context given the allocation of the preceding tasks.

    Row i holds, for every provider, the wait max(0, free_p - a_i) and the
    finish offset (wait + service time) after tasks 0..i-1 were served as
    ``allocation`` says; then the fraction of tasks still to come, the
    task's own features, and the flattened provider speeds. Entry i of
    ``allocation`` is not used for row i.
    """
    inst = sample.instance
    n, m = inst.n_tasks, inst.n_providers
    st = service_matrix(inst)
    speeds = np.broadcast_to(sample.provider_sequence.reshape(-1), (n, sample.provider_sequence.size))
    arrivals = inst.arrivals()
    free = np.zeros((n, m))
    cur = np.zeros(m)
    for i in range(n):
        free[i] = cur
        p = allocation[i]
        cur[p] = max(arrivals[i], cur[p]) + st[i, p]
    remaining = (n - 1 - np.arange(n)) / max(n, 1)
    return _state_rows(free, arrivals, st, remaining, sample.node_features, speeds)


# -- parameters ----------------------------------------------------------------

def init_model(rng_seed, n_features: int, n_resources: int, n_providers: int,
               hidden_gnn: int = 16, hidden_rnn: int = 16, hidden_state: int = 64) -> nn.Params:
    """Uniform [-0.1, 0.1] initialisation of every weight and bias."""
    rng = np.random.default_rng(rng_seed)
    p: nn.Params = {}
    nn.init_layer(rng, p, "gnn.conv", n_features, hidden_gnn)
    nn.init_layer(rng, p, "gnn.fc", hidden_gnn, hidden_gnn)
    nn.init_layer(rng, p, "rnn.cell_in", n_resources, hidden_rnn)
    nn.init_layer(rng, p, "rnn.cell_hidden", hidden_rnn, hidden_rnn)
    nn.init_layer(rng, p, "rnn.fc", hidden_rnn, hidden_rnn)
    if hidden_state:
        nn.init_layer(rng, p, "state.fc", state_width(n_features, n_resources, n_providers), hidden_state)
    nn.init_layer(rng, p, "decoder", hidden_gnn + hidden_rnn + hidden_state, n_providers)
    return p


def has_state(params: nn.Params) -> bool:
    return "state.fc.weight" in params


# -- batching ------------------------------------------------------------------

@dataclass
class Batch:
    """Samples of equal task count stacked along a leading axis."""

    samples: list[TrainingSample]
    index: list[int]
    features: np.ndarray
    adjacency: np.ndarray
    providers: np.ndarray

    @property
    def n_tasks(self) -> int:
        return self.features.shape[1]


def make_batches(samples: list[TrainingSample], adjacency_of) -> list[Batch]:
    groups: dict[tuple[int, int], list[int]] = defaultdict(list)
    for i, s in enumerate(samples):
        groups[(s.instance.n_tasks, s.instance.n_providers)].append(i)
    batches = []
    for n, _ in sorted(groups):
        idx = groups[(n, _)]
        picked = [samples[i] for i in idx]
        batches.append(Batch(
            picked, idx,
            np.stack([s.node_features for s in picked]).reshape(len(idx), n, -1),
            np.stack([adjacency_of(s) for s in picked]).reshape(len(idx), n, n),
            np.stack([s.provider_sequence for s in picked]),
        ))
    return batches


def one_hot(labels: np.ndarray, m: int) -> np.ndarray:
    return np.eye(m)[labels]


def labelled_states(batch: Batch, allocations: list[np.ndarray]) -> np.ndarray:
    return np.stack([decision_state(s, a) for s, a in zip(batch.samples, allocations)])


# -- forward -------------------------------------------------------------------

def encode(t: dict[str, nn.Tensor], features, adjacency, providers) -> tuple[nn.Tensor, nn.Tensor]:
    """Graph-side (.., n, Hg) and row-expanded recurrent-side (.., n, Hr) features."""
    h_graph = nn.affine(nn.layer(t, "gnn.fc"), nn.graph_conv(nn.layer(t, "gnn.conv"), adjacency, features))
    cell = (nn.layer(t, "rnn.cell_in"), nn.layer(t, "rnn.cell_hidden"))
    h_seq = nn.affine(nn.layer(t, "rnn.fc"), nn.rnn_forward(cell, providers))
    return h_graph, nn.expand_rows(h_seq, h_graph.shape[-2])


def decode(t: dict[str, nn.Tensor], h_graph: nn.Tensor, h_seq: nn.Tensor,
           state: np.ndarray | None = None) -> nn.Tensor:
    parts = [h_graph, h_seq]
    if "state.fc.weight" in t:
        parts.append(nn.relu(nn.affine(nn.layer(t, "state.fc"), state)))
    return nn.sigmoid(nn.affine(nn.layer(t, "decoder"), nn.concat(parts)))


def forced_forward(t: dict[str, nn.Tensor], inputs: tuple[Batch, np.ndarray | None]) -> nn.Tensor:
    """Differentiable pass with a given decision state (training / gradient checks)."""
    batch, state = inputs
    h_graph, h_seq = encode(t, batch.features, batch.adjacency, batch.providers)
    return decode(t, h_graph, h_seq, state)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def distribution(logits: np.ndarray) -> np.ndarray:
    """Row-normalised sigmoid, z / sum(z), evaluated in log space.

    Equal to ``z / z.sum(-1)`` with ``z = sigmoid(logits)`` but stays finite and positive
    when every sigmoid in a row underflows to zero.
    """
    log_z = -np.logaddexp(0.0, -logits)
    e = np.exp(log_z - log_z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def rollout(params: nn.Params, batch: Batch) -> TeacherOutput:
    """Inference pass over a batch; every field carries a leading sample axis.

    Tasks are decoded one at a time; each argmax choice (lowest id on ties)
    updates the queue state seen by the next task.
    """
    t = nn.leaves(params)
    h_graph, h_seq = encode(t, batch.features, batch.adjacency, batch.providers)
    w, b = params["decoder.weight"], params["decoder.bias"]
    enc_width = h_graph.shape[-1] + h_seq.shape[-1]
    logits = np.concatenate([h_graph.data, h_seq.data], axis=-1) @ w[:, :enc_width].T + b
    if has_state(params):
        size, n = batch.features.shape[:2]
        w_state = w[:, enc_width:]
        ws, bs = params["state.fc.weight"], params["state.fc.bias"]
        st = np.stack([service_matrix(s.instance) for s in batch.samples])
        speeds = batch.providers.reshape(size, -1)
        arrivals = np.stack([s.instance.arrivals() for s in batch.samples])
        free = np.zeros((size, w.shape[0]))
        rows = np.arange(size)
        for i in range(n):
            state = _state_rows(free, arrivals[:, i], st[:, i], np.full(size, (n - 1 - i) / n),
                                batch.features[:, i], speeds)
            logits[:, i] += np.maximum(state @ ws.T + bs, 0.0) @ w_state.T
            p = select_actions(distribution(logits[:, i]))
            free[rows, p] = np.maximum(arrivals[:, i], free[rows, p]) + st[rows, i, p]
    return TeacherOutput(_sigmoid(logits), distribution(logits), h_graph.data, h_seq.data)


def teacher_forward(params: nn.Params, sample: TrainingSample, k: int = 3) -> TeacherOutput:
    out = rollout(params, make_batches([sample], knn_adjacency(k))[0])
    return TeacherOutput(out.z[0], out.probs[0], out.h_graph[0], out.h_seq[0])


def select_actions(output) -> np.ndarray:
    """Per-task argmax; np.argmax takes the lowest provider id on ties."""
    probs = output.probs if hasattr(output, "probs") else np.asarray(output)
    return np.argmax(probs, axis=-1).astype(np.int64)


# -- scores ------------------------------------------------------------------------

def accuracy(predicted, label) -> float:
    predicted, label = np.asarray(predicted), np.asarray(label)
    if predicted.shape != label.shape:
        raise ValueError("length mismatch")
    return 1.0 if predicted.size == 0 else float(np.mean(predicted == label))


def diversity_distance(p, q) -> float:
    p, q = np.asarray(p, dtype=float), np.asarray(q, dtype=float)
    if p.shape != q.shape:
        raise ValueError("dimension mismatch")
    return float(np.sqrt(np.sum((p - q) ** 2)))


def diversity_score(dists) -> float:
    """Mean Euclidean distance over all unordered pairs of distributions."""
    d = np.asarray(dists, dtype=float)
    n = d.shape[0]
    if n < 2:
        raise ValueError("diversity needs at least two distributions")
    total = 0.0
    for i in range(n - 1):
        total += float(np.sqrt(((d[i + 1:] - d[i]) ** 2).sum(axis=1)).sum())
    return total / (n * (n - 1) / 2)


# -- evaluation --------------------------------------------------------------------

@dataclass
class Evaluation:
    total_delay: float
    accuracy: float
    diversity: float
    allocations: list[np.ndarray]
    z: list[np.ndarray]


def evaluate_batches(params: nn.Params, samples: list[TrainingSample], batches: list[Batch]) -> Evaluation:
    allocs: list = [None] * len(samples)
    zs: list = [None] * len(samples)
    divs: list = [None] * len(samples)
    for batch in batches:
        out = rollout(params, batch)
        probs = out.probs
        for j, i in enumerate(batch.index):
            zs[i] = out.z[j]
            allocs[i] = select_actions(probs[j])
            divs[i] = diversity_score(probs[j]) if probs.shape[1] >= 2 else 0.0
    delays = [simulate_schedule(s.instance, a).total_delay for s, a in zip(samples, allocs)]
    labelled = [accuracy(a, s.label) for s, a in zip(samples, allocs) if s.label is not None]
    return Evaluation(float(np.mean(delays)), float(np.mean(labelled)) if labelled else math.nan,
                      float(np.mean(divs)), allocs, zs)


def evaluate(params: nn.Params, samples: list[TrainingSample], k: int = 3) -> Evaluation:
    """Mean total delay, label accuracy and diversity of the teacher over a sample set."""
    return evaluate_batches(params, samples, make_batches(samples, knn_adjacency(k)))


# -- training ----------------------------------------------------------------------

@dataclass
class LossTerm:
    weight: float
    batch: Batch
    state: np.ndarray | None
    target: np.ndarray


def size_weighted(batches: list[Batch], states, targets, scale: float = 1.0) -> list[LossTerm]:
    """Terms whose weighted sum is the MSE over all pooled (task, provider) entries, times ``scale``."""
    total = sum(tg.size for tg in targets)
    return [LossTerm(scale * tg.size / total, b, st, tg) for b, st, tg in zip(batches, states, targets)]


def pooled_loss(t: dict[str, nn.Tensor], terms: list[LossTerm]) -> nn.Tensor:
    parts = [(term.weight, nn.mse_loss(forced_forward(t, (term.batch, term.state)), term.target))
             for term in terms]
    return nn.weighted_sum(parts)


def fit(params: nn.Params, samples: list[TrainingSample], eval_batches: list[Batch], terms: list[LossTerm],
        epochs: int, lr: float, patience: int | None = None) -> tuple[nn.Params, TrainingMetrics]:
    """Full-batch Adam on ``pooled_loss``; each epoch's metrics use its pre-update parameters."""
    metrics = TrainingMetrics()
    state = nn.AdamState()
    best, best_params, waited = math.inf, params, 0
    for epoch in range(1, epochs + 1):
        loss = pooled_loss(nn.leaves(params), terms)
        grads = nn.backward(loss)
        loss_value = float(loss.data)
        if not math.isfinite(loss_value) or not all(np.all(np.isfinite(g)) for g in grads.values()):
            raise TrainingError(epoch, "non-finite loss or gradient")
        ev = evaluate_batches(params, samples, eval_batches)
        metrics.epochs.append(EpochMetrics(epoch, loss_value, ev.total_delay, ev.accuracy, ev.diversity))
        if patience is not None:
            if loss_value < best:
                best, best_params, waited = loss_value, params, 0
            else:
                waited += 1
                if waited >= patience:
                    return best_params, metrics
        params, state = nn.adam_update(params, grads, state, lr)
    return params, metrics


def train_teacher(dataset: list[TrainingSample], hyper: TeacherHyper = TeacherHyper(),
                  rng_seed: int = 0) -> tuple[nn.Params, TrainingMetrics]:
    """Fit the teacher to one-hot GA labels (MSE on sigmoid outputs)."""
    if not dataset:
        raise ValueError("empty dataset")
    if any(s.label is None for s in dataset):
        raise ValueError("every training sample needs a label")
    first = dataset[0]
    m = first.provider_sequence.shape[0]
    params = init_model(rng_seed, first.node_features.shape[1], first.provider_sequence.shape[1], m,
                        hyper.hidden_gnn, hyper.hidden_rnn, hyper.hidden_state)
    if hyper.epochs == 0:
        return params, TrainingMetrics()
    batches = make_batches(dataset, knn_adjacency(hyper.k))
    targets = [one_hot(np.stack([s.label for s in b.samples]), m) for b in batches]
    states = [labelled_states(b, [s.label for s in b.samples]) if hyper.hidden_state else None for b in batches]
    return fit(params, dataset, batches, size_weighted(batches, states, targets), hyper.epochs, hyper.lr,
               hyper.patience)
